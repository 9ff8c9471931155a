"""Two-layer GraphSage encoder, two-layer edge predictor and BCE loss.

Gradients are derived by hand.  All computation goes through a batched
engine that works on the disjoint union of several user graphs, with one
parameter set per graph group:

* a *stack* is a dict mapping each parameter name to an array with a
  leading group axis (``K`` clients, or ``1`` for a shared model);
* ``pidx[g]`` says which group graph ``g`` uses, nondecreasing in ``g``.

Every row (node or edge) is multiplied by its own group's weights, and
weight gradients are summed segment by segment, so a client's numbers do
not depend on which other clients share the batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .graph import EntityGraph, atomic_write_text
from .numerics import ShapeError, relu, sigmoid
from .seeding import derive_rng

PARAM_NAMES = ("theta1", "b1", "theta2", "b2", "phi1", "c1", "phi2", "c2")
THETA_NAMES = PARAM_NAMES[:4]
PHI_NAMES = PARAM_NAMES[4:]
PROB_EPS = 1e-12
MODEL_FORMAT = "fedrule-model"
MODEL_VERSION = 1

Stack = dict  # name -> array with a leading group axis


@dataclass(eq=False)
class ModelParams:
    """Encoder weights (theta) and predictor weights (phi), row-vector convention.

    ``h = x @ W + b``; shapes are ``theta1 (2T, H)``, ``theta2 (2H, H)``,
    ``phi1 (2H, P)``, ``phi2 (P, R)`` where ``P`` defaults to ``R``.
    """

    theta1: np.ndarray
    b1: np.ndarray
    theta2: np.ndarray
    b2: np.ndarray
    phi1: np.ndarray
    c1: np.ndarray
    phi2: np.ndarray
    c2: np.ndarray

    def __post_init__(self):
        for f in fields(self):
            setattr(self, f.name, np.asarray(getattr(self, f.name), dtype=np.float64))
        T2, H = self.theta1.shape
        P, R = self.phi2.shape
        expected = {"theta1": (T2, H), "b1": (H,), "theta2": (2 * H, H), "b2": (H,),
                    "phi1": (2 * H, P), "c1": (P,), "phi2": (P, R), "c2": (R,)}
        if T2 % 2:
            raise ShapeError("theta1 must have an even number of rows")
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @property
    def n_types(self) -> int:
        return self.theta1.shape[0] // 2

    @property
    def hidden(self) -> int:
        return self.theta1.shape[1]

    @property
    def pred_hidden(self) -> int:
        return self.phi2.shape[0]

    @property
    def n_rules(self) -> int:
        return self.phi2.shape[1]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.n_types, self.hidden, self.n_rules, self.pred_hidden

    @staticmethod
    def shapes(n_types: int, n_rules: int, hidden: int = 16, pred_hidden: int | None = None) -> dict:
        P = n_rules if pred_hidden is None else pred_hidden
        H = hidden
        return {"theta1": (2 * n_types, H), "b1": (H,), "theta2": (2 * H, H), "b2": (H,),
                "phi1": (2 * H, P), "c1": (P,), "phi2": (P, n_rules), "c2": (n_rules,)}

    @classmethod
    def zeros(cls, n_types: int, n_rules: int, hidden: int = 16, pred_hidden: int | None = None):
        return cls(**{k: np.zeros(s) for k, s in cls.shapes(n_types, n_rules, hidden, pred_hidden).items()})

    @classmethod
    def init(cls, n_types: int, n_rules: int, hidden: int = 16, pred_hidden: int | None = None,
             seed: int = 0) -> "ModelParams":
        """Glorot-uniform weights, zero biases."""
        rng = derive_rng(seed, "init")
        arrays = {}
        for name, shape in cls.shapes(n_types, n_rules, hidden, pred_hidden).items():
            if len(shape) == 2:
                limit = np.sqrt(6.0 / (shape[0] + shape[1]))
                arrays[name] = rng.uniform(-limit, limit, size=shape)
            else:
                arrays[name] = np.zeros(shape)
        return cls(**arrays)

    def as_dict(self) -> dict:
        return {n: getattr(self, n) for n in PARAM_NAMES}

    def copy(self) -> "ModelParams":
        return ModelParams(**{n: a.copy() for n, a in self.as_dict().items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.as_dict().values())

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.as_dict().values()])

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return all(np.array_equal(getattr(self, n), getattr(other, n)) for n in PARAM_NAMES)

    __hash__ = None


# Gradients share the parameter layout.
Gradients = ModelParams


def stack_params(params: Sequence[ModelParams]) -> Stack:
    return {n: np.stack([getattr(p, n) for p in params]) for n in PARAM_NAMES}


def broadcast_params(params: ModelParams, k: int) -> Stack:
    return {n: np.repeat(getattr(params, n)[None], k, axis=0) for n in PARAM_NAMES}


def unstack_params(stack: Stack, k: int = 0) -> ModelParams:
    return ModelParams(**{n: stack[n][k].copy() for n in PARAM_NAMES})


# ---------------------------------------------------------------- batches

def _segment_sum(values: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of ``values`` per segment id (ids nondecreasing); empty segments are zero."""
    out = np.zeros((n,) + values.shape[1:])
    if len(values) == 0:
        return out
    starts = np.flatnonzero(np.r_[True, seg[1:] != seg[:-1]])
    out[seg[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def _rowwise(x: np.ndarray, W: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``x[n] @ W[rows[n]]`` for every row; a single group is broadcast without copying."""
    Wsel = W if W.shape[0] == 1 else W[rows]
    return np.matmul(x[:, None, :], Wsel)[:, 0, :]


def _rowwise_t(d: np.ndarray, W: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``d[n] @ W[rows[n]].T`` for every row."""
    Wt = np.ascontiguousarray(np.swapaxes(W, 1, 2))
    Wsel = Wt if W.shape[0] == 1 else Wt[rows]
    return np.matmul(d[:, None, :], Wsel)[:, 0, :]


def _outer_sum(x: np.ndarray, d: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    return _segment_sum(x[:, :, None] * d[:, None, :], seg, n)


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """Disjoint union of message-passing graphs.

    ``agg`` is the in-neighbor mean operator: row ``v`` averages over the
    distinct nodes with an edge into ``v``; rows of 0-in-degree nodes are
    empty, so their neighbor summary is the zero vector.
    """

    n_graphs: int
    n_types: int
    node_offsets: np.ndarray
    node_graph: np.ndarray
    x0: np.ndarray
    agg: sp.csr_matrix
    agg_t: sp.csr_matrix

    @property
    def n_nodes(self) -> int:
        return len(self.node_graph)

    @classmethod
    def build(cls, graphs: Sequence[EntityGraph], n_types: int) -> "GraphBatch":
        sizes = np.array([g.n_nodes for g in graphs], dtype=np.int64)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        N = int(offsets[-1])
        node_graph = np.repeat(np.arange(len(graphs)), sizes)
        types = np.concatenate([g.node_types for g in graphs]) if graphs else np.zeros(0, np.int64)
        if len(types) and types.max() >= n_types:
            raise ShapeError(f"entity type index {types.max()} exceeds model type count {n_types}")
        x0 = np.zeros((N, n_types))
        x0[np.arange(N), types] = 1.0
        rows, cols = [], []
        for g, off in zip(graphs, offsets[:-1]):
            if len(g.edges):
                pairs = np.unique(g.edges[:, :2], axis=0)
                rows.append(pairs[:, 1] + off)
                cols.append(pairs[:, 0] + off)
        if rows:
            r, c = np.concatenate(rows), np.concatenate(cols)
            deg = np.bincount(r, minlength=N)
            vals = 1.0 / deg[r]
        else:
            r = c = np.zeros(0, np.int64)
            vals = np.zeros(0)
        agg = sp.csr_matrix((vals, (r, c)), shape=(N, N))
        agg.sort_indices()
        agg_t = agg.T.tocsr()
        agg_t.sort_indices()
        return cls(len(graphs), n_types, offsets, node_graph, x0, agg, agg_t)


@dataclass(frozen=True, eq=False)
class EdgeBatch:
    """Scored triples over a :class:`GraphBatch`, with BCE labels and weights.

    Weights default to ``1 / (#edges of that graph)`` so that each graph's
    loss is a mean over its own edges.
    """

    src: np.ndarray
    dst: np.ndarray
    rule: np.ndarray
    label: np.ndarray
    weight: np.ndarray
    edge_graph: np.ndarray
    inc_src: sp.csr_matrix
    inc_dst: sp.csr_matrix

    def __len__(self) -> int:
        return len(self.src)

    @classmethod
    def build(cls, gb: GraphBatch, pos: Sequence[np.ndarray], neg: Sequence[np.ndarray] | None = None
              ) -> "EdgeBatch":
        """``pos[g]`` / ``neg[g]`` are local ``(m, 3)`` triples of graph ``g``."""
        if len(pos) != gb.n_graphs or (neg is not None and len(neg) != gb.n_graphs):
            raise ShapeError("one edge array per graph is required")
        parts = []
        for g in range(gb.n_graphs):
            p = np.asarray(pos[g], dtype=np.int64).reshape(-1, 3)
            q = np.zeros((0, 3), np.int64) if neg is None else np.asarray(neg[g], dtype=np.int64).reshape(-1, 3)
            e = np.concatenate([p, q])
            lab = np.concatenate([np.ones(len(p)), np.zeros(len(q))])
            w = np.full(len(e), 1.0 / len(e)) if len(e) else np.zeros(0)
            off = gb.node_offsets[g]
            parts.append((e[:, 0] + off, e[:, 1] + off, e[:, 2], lab, w, np.full(len(e), g)))
        if parts:
            src, dst, rule, lab, w, eg = (np.concatenate(c) for c in zip(*parts))
        else:
            src = dst = rule = eg = np.zeros(0, np.int64)
            lab = w = np.zeros(0)
        src, dst, rule, eg = (a.astype(np.int64) for a in (src, dst, rule, eg))
        E, N = len(src), gb.n_nodes
        ones = np.ones(E)
        inc_src = sp.csr_matrix((ones, (src, np.arange(E))), shape=(N, E))
        inc_dst = sp.csr_matrix((ones, (dst, np.arange(E))), shape=(N, E))
        return cls(src, dst, rule, lab, w, eg, inc_src, inc_dst)


# ------------------------------------------------------ encoder/predictor

class Encoder(Protocol):
    """Node encoder contract: embeddings from a batch, plus its backward pass."""

    names: tuple[str, ...]

    def forward(self, stack: Stack, rows: np.ndarray, gb: GraphBatch) -> tuple[np.ndarray, dict]: ...

    def backward(self, stack: Stack, rows: np.ndarray, gb: GraphBatch, cache: dict,
                 dz: np.ndarray, n_groups: int) -> dict: ...


class GraphSageEncoder:
    """Two GraphSage layers with mean aggregation; ReLU after the first only."""

    names = THETA_NAMES

    def forward(self, stack, rows, gb):
        x0 = gb.x0
        u1 = np.concatenate([x0, gb.agg @ x0], axis=1)
        s1 = _rowwise(u1, stack["theta1"], rows) + _pick(stack["b1"], rows)
        h1 = relu(s1)
        u2 = np.concatenate([h1, gb.agg @ h1], axis=1)
        z = _rowwise(u2, stack["theta2"], rows) + _pick(stack["b2"], rows)
        return z, {"u1": u1, "s1": s1, "u2": u2}

    def backward(self, stack, rows, gb, cache, dz, n_groups):
        H = cache["s1"].shape[1]
        grads = {"theta2": _outer_sum(cache["u2"], dz, rows, n_groups),
                 "b2": _segment_sum(dz, rows, n_groups)}
        du2 = _rowwise_t(dz, stack["theta2"], rows)
        dh1 = du2[:, :H] + gb.agg_t @ du2[:, H:]
        ds1 = dh1 * (cache["s1"] > 0)
        grads["theta1"] = _outer_sum(cache["u1"], ds1, rows, n_groups)
        grads["b1"] = _segment_sum(ds1, rows, n_groups)
        return grads


def _pick(b: np.ndarray, rows: np.ndarray) -> np.ndarray:
    return b[0] if b.shape[0] == 1 else b[rows]


class EdgePredictor:
    """Two dense layers on ``concat(z_src, z_dst)``; logits for every rule type."""

    names = PHI_NAMES

    def forward(self, stack, rows, z_src, z_dst):
        q = np.concatenate([z_src, z_dst], axis=1)
        s3 = _rowwise(q, stack["phi1"], rows) + _pick(stack["c1"], rows)
        h3 = relu(s3)
        logits = _rowwise(h3, stack["phi2"], rows) + _pick(stack["c2"], rows)
        return logits, {"q": q, "s3": s3, "h3": h3}

    def backward(self, stack, rows, cache, dlogits, n_groups):
        grads = {"phi2": _outer_sum(cache["h3"], dlogits, rows, n_groups),
                 "c2": _segment_sum(dlogits, rows, n_groups)}
        dh3 = _rowwise_t(dlogits, stack["phi2"], rows)
        ds3 = dh3 * (cache["s3"] > 0)
        grads["phi1"] = _outer_sum(cache["q"], ds3, rows, n_groups)
        grads["c1"] = _segment_sum(ds3, rows, n_groups)
        dq = _rowwise_t(ds3, stack["phi1"], rows)
        return grads, dq


ENCODERS: dict[str, Encoder] = {"graphsage": GraphSageEncoder()}
PREDICTOR = EdgePredictor()


def get_encoder(name: str = "graphsage") -> Encoder:
    try:
        return ENCODERS[name]
    except KeyError:
        raise ValueError(f"unknown encoder {name!r}; available: {sorted(ENCODERS)}") from None


# ---------------------------------------------------------------- engine

def _check_pidx(pidx: np.ndarray, stack: Stack, n_graphs: int) -> np.ndarray:
    pidx = np.asarray(pidx, dtype=np.int64)
    if pidx.shape != (n_graphs,):
        raise ShapeError("pidx needs one group index per graph")
    if len(pidx) and (np.any(np.diff(pidx) < 0) or pidx.min() < 0 or pidx.max() >= stack["theta1"].shape[0]):
        raise ShapeError("pidx must be nondecreasing group indices")
    return pidx


def embed_batch(stack: Stack, pidx, gb: GraphBatch, encoder: Encoder | None = None) -> np.ndarray:
    encoder = encoder or ENCODERS["graphsage"]
    pidx = _check_pidx(pidx, stack, gb.n_graphs)
    _check_stack_types(stack, gb)
    z, _ = encoder.forward(stack, pidx[gb.node_graph], gb)
    return z


def _check_stack_types(stack: Stack, gb: GraphBatch) -> None:
    if stack["theta1"].shape[1] != 2 * gb.n_types:
        raise ShapeError(f"model expects {stack['theta1'].shape[1] // 2} entity types, batch has {gb.n_types}")


def logits_batch(stack: Stack, pidx, gb: GraphBatch, z: np.ndarray, src: np.ndarray, dst: np.ndarray,
                 pair_graph: np.ndarray, chunk: int = 8192) -> np.ndarray:
    """Rule logits ``(len(src), R)`` for global node pairs; ``pair_graph`` gives each pair's graph."""
    pidx = np.asarray(pidx, dtype=np.int64)
    rows = pidx[pair_graph]
    out = np.empty((len(src), stack["phi2"].shape[2]))
    for lo in range(0, len(src), chunk):
        s = slice(lo, lo + chunk)
        out[s], _ = PREDICTOR.forward(stack, rows[s], z[src[s]], z[dst[s]])
    return out


def loss_and_grads(stack: Stack, pidx, gb: GraphBatch, eb: EdgeBatch, encoder: Encoder | None = None,
                   need_grads: bool = True) -> tuple[Stack | None, np.ndarray]:
    """Weighted BCE for every graph and its gradient summed per parameter group.

    Returns ``(grads, graph_losses)``; ``grads[name]`` has the stack's
    leading group axis.  Probabilities are clamped to
    ``[PROB_EPS, 1 - PROB_EPS]`` before the logarithm (zero gradient where
    the clamp is active).
    """
    encoder = encoder or ENCODERS["graphsage"]
    pidx = _check_pidx(pidx, stack, gb.n_graphs)
    _check_stack_types(stack, gb)
    n_groups = stack["theta1"].shape[0]
    node_rows = pidx[gb.node_graph]
    edge_rows = pidx[eb.edge_graph]
    z, enc_cache = encoder.forward(stack, node_rows, gb)
    logits, pred_cache = PREDICTOR.forward(stack, edge_rows, z[eb.src], z[eb.dst])
    E = len(eb)
    logit = logits[np.arange(E), eb.rule]
    p = sigmoid(logit)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    per_edge = -(eb.label * np.log(pc) + (1.0 - eb.label) * np.log(1.0 - pc))
    graph_losses = _segment_sum(eb.weight * per_edge, eb.edge_graph, gb.n_graphs)
    if not need_grads:
        return None, graph_losses
    active = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    g = eb.weight * (p - eb.label) * active
    dlogits = np.zeros_like(logits)
    dlogits[np.arange(E), eb.rule] = g
    grads, dq = PREDICTOR.backward(stack, edge_rows, pred_cache, dlogits, n_groups)
    H = z.shape[1]
    dz = eb.inc_src @ dq[:, :H] + eb.inc_dst @ dq[:, H:]
    grads.update(encoder.backward(stack, node_rows, gb, enc_cache, dz, n_groups))
    return {n: grads[n] for n in PARAM_NAMES}, graph_losses


# ----------------------------------------------------- single-graph API

def _single(params: ModelParams, graph: EntityGraph) -> tuple[Stack, np.ndarray, GraphBatch]:
    stack = {n: a[None] for n, a in params.as_dict().items()}
    return stack, np.zeros(1, np.int64), GraphBatch.build([graph], params.n_types)


def encode(params: ModelParams, graph: EntityGraph) -> np.ndarray:
    """Node embeddings ``(n_nodes, H)`` in the graph's node order."""
    stack, pidx, gb = _single(params, graph)
    return embed_batch(stack, pidx, gb)


def predict_edge(params: ModelParams, z_src, z_dst) -> np.ndarray:
    """Per-rule-type connection probabilities for one or many ``(src, dst)`` embedding pairs."""
    z_src = np.asarray(z_src, dtype=np.float64)
    z_dst = np.asarray(z_dst, dtype=np.float64)
    single = z_src.ndim == 1
    z_src, z_dst = np.atleast_2d(z_src), np.atleast_2d(z_dst)
    if z_src.shape[1] != params.hidden or z_dst.shape != z_src.shape:
        raise ShapeError(f"embeddings must have width {params.hidden}")
    stack = {n: a[None] for n, a in params.as_dict().items()}
    logits, _ = PREDICTOR.forward(stack, np.zeros(len(z_src), np.int64), z_src, z_dst)
    p = sigmoid(logits)
    return p[0] if single else p


def _edge_batch_single(gb: GraphBatch, pos_edges, neg_edges) -> EdgeBatch:
    pos = np.asarray(pos_edges, dtype=np.int64).reshape(-1, 3)
    neg = np.asarray(neg_edges, dtype=np.int64).reshape(-1, 3)
    if len(pos) + len(neg) == 0:
        raise ValueError("loss needs at least one positive or negative edge")
    return EdgeBatch.build(gb, [pos], [neg])


def loss(params: ModelParams, graph: EntityGraph, pos_edges, neg_edges) -> float:
    """Mean binary cross-entropy over positive and negative triples of one graph.

    ``graph`` supplies nodes and message-passing edges; pass the training
    graph when ``pos_edges`` are training positives.
    """
    stack, pidx, gb = _single(params, graph)
    _, losses = loss_and_grads(stack, pidx, gb, _edge_batch_single(gb, pos_edges, neg_edges), need_grads=False)
    return float(losses[0])


def gradients(params: ModelParams, graph: EntityGraph, pos_edges, neg_edges) -> tuple[ModelParams, float]:
    stack, pidx, gb = _single(params, graph)
    grads, losses = loss_and_grads(stack, pidx, gb, _edge_batch_single(gb, pos_edges, neg_edges))
    return unstack_params(grads), float(losses[0])


def score_all(params: ModelParams, graph: EntityGraph) -> np.ndarray:
    """Dense ``(n, n, R)`` probability tensor from a single encoder pass."""
    z = encode(params, graph)
    n = graph.n_nodes
    src, dst = np.divmod(np.arange(n * n), n)
    p = predict_edge(params, z[src], z[dst]) if n else np.zeros((0, params.n_rules))
    return p.reshape(n, n, params.n_rules)


# ---------------------------------------------------------------- files

def dumps_model(params: ModelParams) -> str:
    T, H, R, P = params.dims
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION,
           "dims": {"n_types": T, "hidden": H, "n_rules": R, "pred_hidden": P},
           "params": {n: getattr(params, n).tolist() for n in PARAM_NAMES}}
    return json.dumps(doc, separators=(",", ":")) + "\n"


def loads_model(text: str) -> ModelParams:
    doc = json.loads(text)
    if doc.get("format") != MODEL_FORMAT:
        raise ValueError("not a model file")
    if doc.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {doc.get('version')}")
    d = doc["dims"]
    shapes = ModelParams.shapes(d["n_types"], d["n_rules"], d["hidden"], d["pred_hidden"])
    arrays = {n: np.asarray(doc["params"][n], dtype=np.float64).reshape(shapes[n]) for n in PARAM_NAMES}
    return ModelParams(**arrays)


def save_model(params: ModelParams, path) -> None:
    atomic_write_text(path, dumps_model(params))


def load_model(path) -> ModelParams:
    return loads_model(Path(path).read_text(encoding="utf-8"))


__all__ = [
    "PARAM_NAMES", "THETA_NAMES", "PHI_NAMES", "PROB_EPS", "ModelParams", "Gradients", "GraphBatch",
    "EdgeBatch", "Encoder", "GraphSageEncoder", "EdgePredictor", "get_encoder", "stack_params",
    "broadcast_params", "unstack_params", "embed_batch", "logits_batch", "loss_and_grads", "encode",
    "predict_edge", "loss", "gradients", "score_all", "dumps_model", "loads_model", "save_model",
    "load_model",
]
