"""Recommendation metrics and the valid-rule filter.

Ranking conventions: higher probability first, ties broken by the lower
index (rule index for mean rank, flattened ``(src, dst, rule)`` index for
hit rate).  Dataset-level values are uniform averages over users, except
AUC, which pools every user's test scores.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .graph import Dataset, User, sample_negatives, train_graph
from .model import (EdgeBatch, GraphBatch, ModelParams, PROB_EPS, embed_batch, logits_batch,
                    score_all)
from .numerics import sigmoid
from .seeding import derive_rng

HIT_RATE_NS = tuple(range(1, 41))


# ------------------------------------------------------------ primitives

def auc(pos_scores, neg_scores) -> float:
    """Mann-Whitney AUC: share of (pos, neg) pairs ordered correctly, ties count one half."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("auc needs at least one positive and one negative score")
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    sorted_v = allv[order]
    # average ranks (1-based) over tie groups
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(allv)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(allv))
    ranks[order] = np.repeat(avg, ends - starts)
    n_p, n_n = len(pos), len(neg)
    u = ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0
    return float(u / (n_p * n_n))


def rank_of(probs: np.ndarray, target: int, excluded: Iterable[int] = ()) -> int:
    """1-based rank of ``target`` among rule scores for one entity pair."""
    probs = np.asarray(probs)
    keep = np.ones(len(probs), dtype=bool)
    keep[list(excluded)] = False
    if not keep[target]:
        raise AssertionError("target rule was excluded from its own ranking")
    idx = np.arange(len(probs))
    better = (probs > probs[target]) | ((probs == probs[target]) & (idx < target))
    return int(1 + np.count_nonzero(better & keep))


def _pair_rules(edges: np.ndarray) -> dict[tuple[int, int], list[int]]:
    out: dict[tuple[int, int], list[int]] = {}
    for s, d, r in edges.tolist():
        out.setdefault((s, d), []).append(r)
    return out


def user_mean_rank(probs: np.ndarray, user: User, remove_train: bool) -> float:
    """Mean rank of a user's test edges given its ``(n, n, R)`` probability tensor."""
    test = user.split.test_pos
    if len(test) == 0:
        raise ValueError(f"user {user.graph.user_id!r} has no test edges")
    known = _pair_rules(user.split.train_pos) if remove_train else {}
    ranks = [rank_of(probs[s, d], r, known.get((s, d), ())) for s, d, r in test.tolist()]
    return float(np.mean(ranks))


def mean_rank(params: ModelParams, user: User, remove_train: bool = False) -> float:
    """Mean rank over one user's test edges; the encoder sees training edges only."""
    return user_mean_rank(score_all(params, train_graph(user)), user, remove_train)


# ------------------------------------------------------- valid-rule filter

@dataclass(frozen=True, eq=False)
class ValidRuleFilter:
    """``allowed[src_type, rule, dst_type]`` is true iff some training edge has that signature."""

    allowed: np.ndarray

    @property
    def n_true(self) -> int:
        return int(self.allowed.sum())

    def mask(self, candidates: np.ndarray, node_types: np.ndarray) -> np.ndarray:
        c = np.asarray(candidates, dtype=np.int64).reshape(-1, 3)
        return self.allowed[node_types[c[:, 0]], c[:, 2], node_types[c[:, 1]]]


def build_filter(dataset: Dataset) -> ValidRuleFilter:
    T, R = dataset.vocab.n_entity_types, dataset.vocab.n_rule_types
    allowed = np.zeros((T, R, T), dtype=bool)
    for u in dataset.users:
        e, t = u.split.train_pos, u.graph.node_types
        if len(e):
            allowed[t[e[:, 0]], e[:, 2], t[e[:, 1]]] = True
    return ValidRuleFilter(allowed)


def apply_filter(filt: ValidRuleFilter, candidates: np.ndarray, node_types: np.ndarray) -> np.ndarray:
    c = np.asarray(candidates, dtype=np.int64).reshape(-1, 3)
    return c[filt.mask(c, node_types)]


# -------------------------------------------------------------- hit rate

def _target_ranks(probs: np.ndarray, targets: np.ndarray, exclude: np.ndarray,
                  filt: ValidRuleFilter | None, node_types: np.ndarray) -> np.ndarray:
    """Position (1-based) of each target triple in the user's recommendation list.

    Candidates are all triples minus ``exclude`` minus filtered ones;
    targets that are not candidates get rank ``inf``.
    """
    n, _, R = probs.shape
    flat = probs.ravel()
    cand = np.ones(flat.shape, dtype=bool)
    if len(exclude):
        cand[(exclude[:, 0] * n + exclude[:, 1]) * R + exclude[:, 2]] = False
    if filt is not None:
        src, rest = np.divmod(np.arange(flat.size), n * R)
        dst, rule = np.divmod(rest, R)
        cand &= filt.allowed[node_types[src], rule, node_types[dst]]
    codes = (targets[:, 0] * n + targets[:, 1]) * R + targets[:, 2]
    ranks = np.full(len(codes), np.inf)
    cidx = np.flatnonzero(cand)
    cp = flat[cidx]
    for i, code in enumerate(codes.tolist()):
        if cand[code]:
            p = flat[code]
            ranks[i] = 1 + np.count_nonzero((cp > p) | ((cp == p) & (cidx < code)))
    return ranks


def hit_rate_at_n(params: ModelParams, user: User, n: int, filt: ValidRuleFilter | None = None,
                  target: str = "test") -> float:
    """Share of a user's held-out rules inside its top-``n`` recommendations.

    With ``target="test"`` candidates exclude training edges; with
    ``target="train"`` the roles swap (a capacity check on training edges).
    """
    if n < 1:
        raise ValueError("N must be at least 1")
    targets, exclude = _roles(user, target)
    if len(targets) == 0:
        raise ValueError(f"user {user.graph.user_id!r} has no {target} edges")
    probs = score_all(params, train_graph(user))
    ranks = _target_ranks(probs, targets, exclude, filt, user.graph.node_types)
    return float(np.mean(ranks <= n))


def _roles(user: User, target: str) -> tuple[np.ndarray, np.ndarray]:
    if target == "test":
        return user.split.test_pos, user.split.train_pos
    if target == "train":
        return user.split.train_pos, user.split.test_pos
    raise ValueError("target must be 'test' or 'train'")


def hit_rate_curve(params: ModelParams, dataset: Dataset, ns: Sequence[int] = HIT_RATE_NS,
                   filt: ValidRuleFilter | None = None, target: str = "test") -> dict[int, float]:
    """Dataset hit rate for each ``N``, averaged over users that have target edges."""
    ns = [int(n) for n in ns]
    if any(n < 1 for n in ns):
        raise ValueError("N must be at least 1")
    T = dataset.vocab.n_entity_types
    users = [u for u in dataset.users if len(_roles(u, target)[0])]
    if not users:
        raise ValueError(f"no user has {target} edges")
    probs = _all_pair_probs(params, users, T)
    per_user = []
    for u, pr in zip(users, probs):
        targets, exclude = _roles(u, target)
        ranks = _target_ranks(pr, targets, exclude, filt, u.graph.node_types)
        per_user.append([np.mean(ranks <= n) for n in ns])
    means = np.mean(np.asarray(per_user), axis=0)
    return {n: float(v) for n, v in zip(ns, means)}


def _all_pair_probs(params: ModelParams, users: Sequence[User], n_types: int) -> list[np.ndarray]:
    stack = {k: a[None] for k, a in params.as_dict().items()}
    gb = GraphBatch.build([train_graph(u) for u in users], n_types)
    pidx = np.zeros(gb.n_graphs, np.int64)
    z = embed_batch(stack, pidx, gb)
    src, dst, pg = [], [], []
    for g, u in enumerate(users):
        n, off = u.graph.n_nodes, gb.node_offsets[g]
        s, d = np.divmod(np.arange(n * n), n)
        src.append(s + off)
        dst.append(d + off)
        pg.append(np.full(n * n, g))
    src, dst, pg = np.concatenate(src), np.concatenate(dst), np.concatenate(pg)
    p = sigmoid(logits_batch(stack, pidx, gb, z, src, dst, pg))
    out, lo = [], 0
    for u in users:
        n = u.graph.n_nodes
        out.append(p[lo:lo + n * n].reshape(n, n, params.n_rules))
        lo += n * n
    return out


# ------------------------------------------------------------ evaluator

@dataclass
class MetricsReport:
    loss: float
    auc: float
    mean_rank: float
    mean_rank_rt: float
    hit_rate: dict[int, float] = field(default_factory=dict)
    train_loss: float = float("nan")

    def to_json(self) -> str:
        d = {"train_loss": self.train_loss, "loss": self.loss, "auc": self.auc, "mean_rank": self.mean_rank,
             "mean_rank_rt": self.mean_rank_rt, "hit_rate": {str(k): v for k, v in self.hit_rate.items()}}
        return json.dumps(d, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "n", "value"])
        for name in ("train_loss", "loss", "auc", "mean_rank", "mean_rank_rt"):
            w.writerow([name, "", repr(float(getattr(self, name)))])
        for n, v in self.hit_rate.items():
            w.writerow(["hit_rate", n, repr(float(v))])
        return buf.getvalue()


def _bce(p: np.ndarray, label: np.ndarray) -> np.ndarray:
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(label * np.log(pc) + (1.0 - label) * np.log(1.0 - pc))


class Evaluator:
    """Per-round metrics of a shared model on a fixed dataset.

    Negatives for the train loss and for test loss/AUC are drawn once, 1:1
    against positives, from triples absent from *all* of the user's rules,
    using ``seed``.  The encoder always sees training edges only.
    """

    def __init__(self, dataset: Dataset, seed: int = 0):
        self.dataset = dataset
        self.n_types = dataset.vocab.n_entity_types
        self.n_rules = dataset.vocab.n_rule_types
        users = dataset.users
        graphs = [train_graph(u) for u in users]
        self.gb = GraphBatch.build(graphs, self.n_types)
        R = self.n_rules
        train_neg, test_neg = [], []
        for k, u in enumerate(users):
            allpos = u.graph.edges
            train_neg.append(sample_negatives(u.graph, len(u.split.train_pos), derive_rng(seed, "eval-train-neg", k),
                                              R, allpos).edges)
            test_neg.append(sample_negatives(u.graph, len(u.split.test_pos), derive_rng(seed, "eval-test-neg", k),
                                             R, allpos).edges)
        self.train_eb = EdgeBatch.build(self.gb, [u.split.train_pos for u in users], train_neg)
        self.test_eb = EdgeBatch.build(self.gb, [u.split.test_pos for u in users], test_neg)
        self.has_train = np.array([len(u.split.train_pos) > 0 for u in users])
        self.has_test = np.array([len(u.split.test_pos) > 0 for u in users])
        # mean-rank queries: one row per test edge
        src, dst, rule, qg, rt_mask = [], [], [], [], []
        for g, u in enumerate(users):
            off = self.gb.node_offsets[g]
            known = _pair_rules(u.split.train_pos)
            for s, d, r in u.split.test_pos.tolist():
                src.append(s + off)
                dst.append(d + off)
                rule.append(r)
                qg.append(g)
                m = np.zeros(R, dtype=bool)
                m[known.get((s, d), [])] = True
                rt_mask.append(m)
        self.q_src = np.asarray(src, np.int64)
        self.q_dst = np.asarray(dst, np.int64)
        self.q_rule = np.asarray(rule, np.int64)
        self.q_graph = np.asarray(qg, np.int64)
        self.q_excl = np.asarray(rt_mask, dtype=bool).reshape(-1, R)

    def _edge_probs(self, stack, pidx, z, eb: EdgeBatch) -> np.ndarray:
        logits = logits_batch(stack, pidx, self.gb, z, eb.src, eb.dst, eb.edge_graph)
        return sigmoid(logits[np.arange(len(eb)), eb.rule])

    def _loss(self, p: np.ndarray, eb: EdgeBatch, mask: np.ndarray) -> float:
        per_graph = np.zeros(self.gb.n_graphs)
        np.add.at(per_graph, eb.edge_graph, eb.weight * _bce(p, eb.label))
        return float(per_graph[mask].mean()) if mask.any() else float("nan")

    def evaluate(self, params: ModelParams, remove_train: bool = True) -> MetricsReport:
        stack = {k: a[None] for k, a in params.as_dict().items()}
        pidx = np.zeros(self.gb.n_graphs, np.int64)
        z = embed_batch(stack, pidx, self.gb)
        train_loss = self._loss(self._edge_probs(stack, pidx, z, self.train_eb), self.train_eb, self.has_train)
        if not self.has_test.any():
            nan = float("nan")
            return MetricsReport(nan, nan, nan, nan, train_loss=train_loss)
        p = self._edge_probs(stack, pidx, z, self.test_eb)
        test_loss = self._loss(p, self.test_eb, self.has_test)
        lab = self.test_eb.label
        test_auc = auc(p[lab == 1], p[lab == 0]) if (lab == 0).any() else float("nan")
        probs = sigmoid(logits_batch(stack, pidx, self.gb, z, self.q_src, self.q_dst, self.q_graph))
        mr = self._mean_rank(probs, np.zeros_like(self.q_excl))
        mr_rt = self._mean_rank(probs, self.q_excl) if remove_train else float("nan")
        return MetricsReport(test_loss, test_auc, mr, mr_rt, train_loss=train_loss)

    def _mean_rank(self, probs: np.ndarray, excl: np.ndarray) -> float:
        Q, R = probs.shape
        target = probs[np.arange(Q), self.q_rule][:, None]
        idx = np.arange(R)[None, :]
        better = (probs > target) | ((probs == target) & (idx < self.q_rule[:, None]))
        ranks = 1 + np.count_nonzero(better & ~excl, axis=1)
        per_user = np.zeros(self.gb.n_graphs)
        counts = np.bincount(self.q_graph, minlength=self.gb.n_graphs)
        np.add.at(per_user, self.q_graph, ranks)
        have = counts > 0
        return float(np.mean(per_user[have] / counts[have]))


def evaluate(params: ModelParams, dataset: Dataset, seed: int = 0, ns: Sequence[int] = (1, 5, 10, 20, 40),
             filt: ValidRuleFilter | None = None, remove_train: bool = True) -> MetricsReport:
    """Full test-set report: loss, AUC, mean rank (plain and RT) and hit rates."""
    report = Evaluator(dataset, seed).evaluate(params, remove_train=remove_train)
    if ns:
        report.hit_rate = hit_rate_curve(params, dataset, ns, filt)
    return report


def hit_rate_rows(curve: dict[int, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "hit_rate"])
    for n, v in curve.items():
        w.writerow([n, repr(float(v))])
    return buf.getvalue()


__all__ = [
    "HIT_RATE_NS", "auc", "rank_of", "user_mean_rank", "mean_rank", "ValidRuleFilter", "build_filter",
    "apply_filter", "hit_rate_at_n", "hit_rate_curve", "MetricsReport", "Evaluator", "evaluate",
    "hit_rate_rows",
]
