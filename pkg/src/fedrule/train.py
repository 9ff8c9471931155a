"""Centralized training and the federated simulator (FedAvg / FedRule).

Federated clients are simulated together: each round every participating
client starts from the broadcast global model, runs its local steps on its
own graph, and reports the parameter difference ``global - local``.  The
server averages those differences.  With ``mode="fedrule"`` each client
also keeps control parameters that are subtracted (scaled by lambda) from
its local gradients and updated from the gap between its own difference
and the average one.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .evaluation import Evaluator
from .graph import Dataset, User, atomic_write_text, sample_negatives, train_graph
from .model import (PARAM_NAMES, THETA_NAMES, EdgeBatch, GraphBatch, ModelParams, Stack,
                    broadcast_params, loss_and_grads, stack_params, unstack_params)
from .numerics import AdamState, ShapeError, adam_step, sgd_step
from .seeding import derive_rng, derive_seed

log = logging.getLogger(__name__)

MODES = ("central", "fedavg", "fedrule")
CSV_COLUMNS = ("round", "train_loss", "test_loss", "test_auc", "test_mean_rank", "test_mean_rank_rt",
               "elapsed_ms")


class DivergenceError(RuntimeError):
    """Training produced a non-finite model or a runaway loss."""

    def __init__(self, message: str, round: int, loss: float, logs: list["RoundLog"]):
        super().__init__(message)
        self.round = round
        self.loss = loss
        self.logs = logs


@dataclass
class TrainConfig:
    mode: str = "fedrule"
    rounds: int = 100
    local_steps: int | tuple[int, ...] = 3
    lr_theta: float = 0.1
    lr_phi: float = 0.1
    lambda_theta: float = 1.0
    lambda_phi: float = 1.0
    optimizer: str | None = None  # None: adam for central, sgd for federated
    neg_ratio: float = 1.0
    seed: int = 0
    participation: float = 1.0
    hidden: int = 16
    pred_hidden: int | None = None
    workers: int = 1
    eval_every: int = 1
    record_timing: bool = True
    divergence_loss: float = 1e3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.rounds < 0:
            raise ValueError("rounds must be >= 0")
        steps = self.local_steps if isinstance(self.local_steps, (tuple, list)) else (self.local_steps,)
        if isinstance(self.local_steps, list):
            self.local_steps = tuple(self.local_steps)
        if any(int(s) < 1 for s in steps):
            raise ValueError("local_steps must be >= 1")
        if self.lr_theta < 0 or self.lr_phi < 0:
            raise ValueError("learning rates must be >= 0")
        if self.lambda_theta < 0 or self.lambda_phi < 0:
            raise ValueError("lambda must be >= 0")
        if self.opt not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if self.neg_ratio < 0:
            raise ValueError("neg_ratio must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def opt(self) -> str:
        if self.optimizer is not None:
            return self.optimizer
        return "adam" if self.mode == "central" else "sgd"

    def lr(self, name: str) -> float:
        return self.lr_theta if name in THETA_NAMES else self.lr_phi

    def lam(self, name: str) -> float:
        return self.lambda_theta if name in THETA_NAMES else self.lambda_phi

    def taus(self, n_clients: int) -> np.ndarray:
        if isinstance(self.local_steps, tuple):
            if len(self.local_steps) != n_clients:
                raise ValueError("per-client local_steps must list one value per client")
            return np.asarray(self.local_steps, dtype=np.int64)
        return np.full(n_clients, int(self.local_steps), dtype=np.int64)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(d["local_steps"], tuple):
            d["local_steps"] = list(d["local_steps"])
        return d


@dataclass
class RoundLog:
    round: int
    train_loss: float
    test_loss: float = float("nan")
    test_auc: float = float("nan")
    test_mean_rank: float = float("nan")
    test_mean_rank_rt: float = float("nan")
    elapsed_ms: float = 0.0


def logs_to_csv(logs: Sequence[RoundLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in logs:
        w.writerow([r.round] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:-1]]
                   + [f"{r.elapsed_ms:.3f}"])
    return buf.getvalue()


def write_logs_csv(logs: Sequence[RoundLog], path) -> None:
    atomic_write_text(path, logs_to_csv(logs))


def init_params(dataset: Dataset, config: TrainConfig) -> ModelParams:
    return ModelParams.init(dataset.vocab.n_entity_types, dataset.vocab.n_rule_types, config.hidden,
                            config.pred_hidden, seed=derive_seed(config.seed, "model"))


def round_negatives(users: Sequence[User], indices: Sequence[int], seed: int, round: int, n_rules: int,
                    ratio: float = 1.0) -> list[np.ndarray]:
    """Fresh negatives for one round, ``ratio`` per training positive, keyed by (seed, round, user)."""
    out = []
    for k in indices:
        u = users[k]
        count = int(round_half_up(ratio * len(u.split.train_pos)))
        rng = derive_rng(seed, "neg", round, k)
        out.append(sample_negatives(u.graph, count, rng, n_rules, u.graph.edges).edges)
    return out


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


# -------------------------------------------------------------- optimizer

class Optimizer:
    """SGD or Adam over a parameter stack, separate rates for theta and phi."""

    def __init__(self, config: TrainConfig, template: Stack):
        self.kind = config.opt
        self.config = config
        k = template["theta1"].shape[0]
        self.state = ({n: AdamState.zeros_like(template[n], n_clients=k) for n in PARAM_NAMES}
                      if self.kind == "adam" else None)

    def step(self, stack: Stack, grads: Stack, state: dict | None = None) -> Stack:
        state = self.state if state is None else state
        out = {}
        for n in PARAM_NAMES:
            if self.kind == "adam":
                out[n] = adam_step(stack[n], grads[n], state[n], self.config.lr(n))
            else:
                out[n] = sgd_step(stack[n], grads[n], self.config.lr(n))
        return out


# ---------------------------------------------------------------- central

def _check_dataset(dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise ValueError("dataset has no users")


def _diverged(loss: float, config: TrainConfig) -> bool:
    return not np.isfinite(loss) or loss > config.divergence_loss


def _stack_finite(stack: Stack) -> bool:
    return all(np.all(np.isfinite(a)) for a in stack.values())


class _RoundRecorder:
    def __init__(self, dataset: Dataset, config: TrainConfig, on_round: Callable | None):
        self.config = config
        self.evaluator = Evaluator(dataset, derive_seed(config.seed, "eval")) if config.eval_every else None
        self.logs: list[RoundLog] = []
        self.t0 = time.perf_counter()
        self.on_round = on_round

    def record(self, c: int, params: ModelParams, round_loss: float) -> None:
        elapsed = (time.perf_counter() - self.t0) * 1e3 if self.config.record_timing else 0.0
        entry = RoundLog(c + 1, round_loss, elapsed_ms=elapsed)
        if self.evaluator is not None and ((c + 1) % self.config.eval_every == 0 or c + 1 == self.config.rounds):
            rep = self.evaluator.evaluate(params)
            entry = RoundLog(c + 1, rep.train_loss, rep.loss, rep.auc, rep.mean_rank, rep.mean_rank_rt, elapsed)
        self.logs.append(entry)
        log.debug("round %d: %s", c + 1, entry)
        if self.on_round is not None:
            self.on_round(entry, params)


def central_train(dataset: Dataset, config: TrainConfig, init: ModelParams | None = None,
                  on_round: Callable | None = None) -> tuple[ModelParams, list[RoundLog]]:
    """One global model, one optimizer step per round on the summed per-user losses.

    ``train_loss`` in the logs is measured after the round's update on the
    fixed evaluation negatives (or, with evaluation off, is the summed
    objective's per-user mean at the start of the round).
    """
    _check_dataset(dataset)
    if config.mode != "central":
        config = replace(config, mode="central")
    users = dataset.users
    K, R = len(users), dataset.vocab.n_rule_types
    params = init.copy() if init is not None else init_params(dataset, config)
    stack = {n: a[None].copy() for n, a in params.as_dict().items()}
    gb = GraphBatch.build([train_graph(u) for u in users], dataset.vocab.n_entity_types)
    pidx = np.zeros(K, np.int64)
    opt = Optimizer(config, stack)
    rec = _RoundRecorder(dataset, config, on_round)
    for c in range(config.rounds):
        negs = round_negatives(users, range(K), config.seed, c, R, config.neg_ratio)
        eb = EdgeBatch.build(gb, [u.split.train_pos for u in users], negs)
        grads, losses = loss_and_grads(stack, pidx, gb, eb)
        round_loss = float(losses.mean())
        stack = opt.step(stack, grads)
        if _diverged(round_loss, config) or not _stack_finite(stack):
            raise DivergenceError(f"central training diverged at round {c + 1} (loss {round_loss})",
                                  c + 1, round_loss, rec.logs)
        rec.record(c, unstack_params(stack), round_loss)
    return unstack_params(stack), rec.logs


# -------------------------------------------------------------- federated

@dataclass
class ClientState:
    """One client's control parameters (zero at start) and optional Adam state."""

    control: ModelParams
    adam: dict | None = None

    @classmethod
    def zeros(cls, like: ModelParams, adam: bool = False) -> "ClientState":
        ctrl = ModelParams(**{n: np.zeros_like(a) for n, a in like.as_dict().items()})
        return cls(ctrl, {n: AdamState.zeros_like(a[None], n_clients=1) for n, a in like.as_dict().items()}
                   if adam else None)


@dataclass
class ClientStates:
    """All clients' states stacked along a leading client axis."""

    control: Stack
    adam: dict | None = None

    @classmethod
    def zeros(cls, like: ModelParams, n_clients: int, adam: bool = False) -> "ClientStates":
        ctrl = {n: np.zeros((n_clients,) + a.shape) for n, a in like.as_dict().items()}
        ad = {n: AdamState.zeros_like(ctrl[n], n_clients=n_clients) for n in PARAM_NAMES} if adam else None
        return cls(ctrl, ad)

    def control_sum(self) -> Stack:
        return {n: a.sum(axis=0) for n, a in self.control.items()}


@dataclass
class _Shard:
    clients: np.ndarray  # global client indices, ascending
    gb: GraphBatch
    pos: list = field(default_factory=list)


def _local_steps(global_params: ModelParams, shard: _Shard, negs: Sequence[np.ndarray], control: Stack,
                 adam: dict | None, taus: np.ndarray, config: TrainConfig, correct: bool
                 ) -> tuple[Stack, np.ndarray]:
    """Run every shard client's local loop; returns (final local stacks, start-of-round losses)."""
    P = len(shard.clients)
    local = broadcast_params(global_params, P)
    pidx = np.arange(P, dtype=np.int64)
    eb = EdgeBatch.build(shard.gb, shard.pos, negs)
    opt = Optimizer(config, local)
    if adam is not None:
        opt.state = adam
    first_loss = None
    for t in range(int(taus.max())):
        grads, losses = loss_and_grads(local, pidx, shard.gb, eb)
        if first_loss is None:
            first_loss = losses
        if correct:
            grads = {n: grads[n] - config.lam(n) * control[n] for n in PARAM_NAMES}
        active = taus > t
        if active.all():
            local = opt.step(local, grads)
        else:
            # finished clients keep both their parameters and their moments
            idle = np.flatnonzero(~active)
            frozen = {n: opt.state[n].take(idle) for n in PARAM_NAMES} if opt.state else None
            stepped = opt.step(local, grads)
            if frozen:
                for n in PARAM_NAMES:
                    opt.state[n].put(idle, frozen[n])
            local = {n: np.where(active.reshape((P,) + (1,) * (stepped[n].ndim - 1)), stepped[n], local[n])
                     for n in PARAM_NAMES}
    return local, first_loss


def local_update(global_params: ModelParams, user: User, state: ClientState, config: TrainConfig,
                 negatives: np.ndarray, n_types: int | None = None) -> tuple[ModelParams, ClientState]:
    """Local loop of a single client.

    Returns ``(delta, state)`` where ``delta = global - local`` (positive in
    the descent direction) covers theta and phi, and ``state`` carries the
    advanced optimizer moments; control parameters are not changed here.
    """
    n_types = global_params.n_types if n_types is None else n_types
    if state.control.dims != global_params.dims:
        raise ShapeError("client state does not match the global model")
    shard = _Shard(np.zeros(1, np.int64), GraphBatch.build([train_graph(user)], n_types), [user.split.train_pos])
    control = {n: a[None] for n, a in state.control.as_dict().items()}
    adam = None
    if config.opt == "adam":
        adam = state.adam or ClientState.zeros(global_params, adam=True).adam
    taus = np.asarray([config.local_steps[0] if isinstance(config.local_steps, tuple) else config.local_steps])
    local, _ = _local_steps(global_params, shard, [negatives], control, adam, taus, config,
                            correct=config.mode == "fedrule")
    delta = ModelParams(**{n: getattr(global_params, n) - local[n][0] for n in PARAM_NAMES})
    return delta, ClientState(state.control, adam)


def aggregate(deltas: Sequence[ModelParams]) -> ModelParams:
    """Elementwise mean of client differences."""
    if not deltas:
        raise ValueError("aggregate needs at least one delta")
    return unstack_params(_mean_stack(stack_params(deltas)))


def _mean_stack(stack: Stack) -> Stack:
    k = stack["theta1"].shape[0]
    return {n: (a.sum(axis=0) / k)[None] for n, a in stack.items()}


def update_controls(state: ClientState, own_delta: ModelParams, avg_delta: ModelParams, config: TrainConfig,
                    tau: int | None = None) -> ClientState:
    """``delta_ctrl += (own - avg) / (lr * tau)`` per half, with the half's own learning rate."""
    if tau is None:
        tau = config.local_steps[0] if isinstance(config.local_steps, tuple) else config.local_steps
    tau = int(tau)
    new = {}
    for n in PARAM_NAMES:
        scale = config.lr(n) * tau
        if scale <= 0:
            raise ValueError("lr * tau must be positive to update control parameters")
        new[n] = getattr(state.control, n) + (getattr(own_delta, n) - getattr(avg_delta, n)) / scale
    return ClientState(ModelParams(**new), state.adam)


def _participants(K: int, config: TrainConfig, c: int) -> np.ndarray:
    if config.participation >= 1:
        return np.arange(K)
    m = max(1, round_half_up(config.participation * K))
    rng = derive_rng(config.seed, "participation", c)
    return np.sort(rng.choice(K, size=m, replace=False))


def _shards(idx: np.ndarray, workers: int) -> list[np.ndarray]:
    return [s for s in np.array_split(idx, min(workers, len(idx))) if len(s)]


def fed_train(dataset: Dataset, config: TrainConfig, init: ModelParams | None = None,
              on_round: Callable | None = None, states: ClientStates | None = None,
              ) -> tuple[ModelParams, list[RoundLog]]:
    """Federated training; ``mode="fedavg"`` is the same loop without control parameters.

    The new global model is the mean of the participants' local models,
    which equals ``global - mean(delta)`` and avoids one extra rounding.
    Pass ``states`` to inspect client control parameters afterwards.
    """
    _check_dataset(dataset)
    if config.mode not in ("fedavg", "fedrule"):
        raise ValueError("fed_train needs mode 'fedavg' or 'fedrule'")
    users = dataset.users
    K, R, T = len(users), dataset.vocab.n_rule_types, dataset.vocab.n_entity_types
    params = init.copy() if init is not None else init_params(dataset, config)
    taus = config.taus(K)
    fedrule = config.mode == "fedrule"
    if fedrule and min(config.lr_theta, config.lr_phi) <= 0:
        raise ValueError("fedrule needs positive learning rates to scale its control update")
    if states is None:
        states = ClientStates.zeros(params, K, adam=config.opt == "adam")
    elif states.adam is None and config.opt == "adam":
        states.adam = ClientStates.zeros(params, K, adam=True).adam
    rec = _RoundRecorder(dataset, config, on_round)
    shard_cache: dict[bytes, list[_Shard]] = {}
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        for c in range(config.rounds):
            part = _participants(K, config, c)
            key = part.tobytes()
            if key not in shard_cache:
                shard_cache.clear()
                shard_cache[key] = [_Shard(s, GraphBatch.build([train_graph(users[k]) for k in s], T),
                                           [users[k].split.train_pos for k in s])
                                    for s in _shards(part, config.workers)]
            shards = shard_cache[key]

            def run(shard: _Shard):
                negs = round_negatives(users, shard.clients, config.seed, c, R, config.neg_ratio)
                ctrl = {n: states.control[n][shard.clients] for n in PARAM_NAMES}
                adam = {n: states.adam[n].take(shard.clients) for n in PARAM_NAMES} if states.adam else None
                local, losses = _local_steps(params, shard, negs, ctrl, adam, taus[shard.clients], config, fedrule)
                return local, losses, adam

            results = list(pool.map(run, shards)) if pool else [run(s) for s in shards]
            local = {n: np.concatenate([r[0][n] for r in results]) for n in PARAM_NAMES}
            losses = np.concatenate([r[1] for r in results])
            if states.adam is not None:
                for shard, r in zip(shards, results):
                    for n in PARAM_NAMES:
                        states.adam[n].put(shard.clients, r[2][n])
            P = len(part)
            deltas = {n: getattr(params, n)[None] - local[n] for n in PARAM_NAMES}
            avg = {n: deltas[n].sum(axis=0) / P for n in PARAM_NAMES}
            new_params = ModelParams(**{n: local[n].sum(axis=0) / P for n in PARAM_NAMES})
            if fedrule:
                tk = taus[part]
                for n in PARAM_NAMES:
                    scale = (config.lr(n) * tk).reshape((P,) + (1,) * (deltas[n].ndim - 1))
                    states.control[n][part] += (deltas[n] - avg[n][None]) / scale
            round_loss = float(losses.mean())
            params = new_params
            if _diverged(round_loss, config) or not params.is_finite():
                raise DivergenceError(f"{config.mode} training diverged at round {c + 1} (loss {round_loss})",
                                      c + 1, round_loss, rec.logs)
            rec.record(c, params, round_loss)
    finally:
        if pool is not None:
            pool.shutdown()
    return params, rec.logs


def train(dataset: Dataset, config: TrainConfig, init: ModelParams | None = None,
          on_round: Callable | None = None) -> tuple[ModelParams, list[RoundLog]]:
    if config.mode == "central":
        return central_train(dataset, config, init, on_round)
    return fed_train(dataset, config, init, on_round)


__all__ = [
    "MODES", "CSV_COLUMNS", "DivergenceError", "TrainConfig", "RoundLog", "logs_to_csv", "write_logs_csv",
    "init_params", "round_negatives", "Optimizer", "central_train", "ClientState", "ClientStates",
    "local_update", "aggregate", "update_controls", "fed_train", "train",
]
