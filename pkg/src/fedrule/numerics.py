"""Dense float64 kernels: matrix product, activations and optimizer steps.

Matrices are plain ``numpy.ndarray`` objects of dtype float64.  The
optimizer steps are elementwise, so they also accept stacked parameter
arrays with a leading client axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Largest float64 strictly below one and smallest positive normal.
_ONE_MINUS = np.nextafter(1.0, 0.0)
_TINY = np.finfo(np.float64).tiny


class ShapeError(ValueError):
    """Raised when array shapes are incompatible."""


def as_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix entries must be finite")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, kept strictly inside (0, 1)."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return np.clip(out, _TINY, _ONE_MINUS)


@dataclass
class AdamState:
    """Moment estimates for one parameter array.

    ``step`` is a scalar for a single parameter set, or an integer array
    of shape ``(K,)`` when the parameter carries a leading client axis and
    clients advance independently.
    """

    m: np.ndarray
    v: np.ndarray
    step: np.ndarray = field(default_factory=lambda: np.zeros((), dtype=np.int64))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: np.ndarray, n_clients: int | None = None, **kw) -> "AdamState":
        step = np.zeros((), dtype=np.int64) if n_clients is None else np.zeros(n_clients, dtype=np.int64)
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), step, **kw)

    def take(self, idx: np.ndarray) -> "AdamState":
        """Rows ``idx`` of a stacked state, as an independent copy."""
        return AdamState(self.m[idx].copy(), self.v[idx].copy(), self.step[idx].copy(),
                         self.beta1, self.beta2, self.eps)

    def put(self, idx: np.ndarray, sub: "AdamState") -> None:
        self.m[idx] = sub.m
        self.v[idx] = sub.v
        self.step[idx] = sub.step


def _check_same(params: np.ndarray, grad: np.ndarray) -> None:
    if params.shape != grad.shape:
        raise ShapeError(f"gradient shape {grad.shape} does not match parameters {params.shape}")


def adam_step(params: np.ndarray, grad: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """Bias-corrected Adam update.  Advances ``state`` in place."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_same(params, grad)
    if state.m.shape != params.shape or state.v.shape != params.shape:
        raise ShapeError("Adam moments do not match parameter shape")
    state.step = state.step + 1
    t = state.step.reshape(state.step.shape + (1,) * (params.ndim - state.step.ndim))
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * (grad * grad)
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def sgd_step(params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    _check_same(params, grad)
    return params - lr * grad
