"""Ranked rule recommendations for a single user."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluation import ValidRuleFilter
from .graph import EntityGraph, User, Vocab
from .model import ModelParams, score_all


@dataclass(frozen=True)
class Recommendation:
    src: str
    dst: str
    rule: str
    probability: float


@dataclass(frozen=True)
class Recommendations:
    items: tuple[Recommendation, ...]
    n_candidates: int
    requested: int

    @property
    def truncated(self) -> bool:
        """True when fewer candidates exist than were asked for."""
        return self.n_candidates < self.requested

    def to_rows(self) -> list[dict]:
        return [{"rank": i + 1, "src": r.src, "rule": r.rule, "dst": r.dst, "probability": r.probability}
                for i, r in enumerate(self.items)]


def _graph_of(user: User | EntityGraph) -> EntityGraph:
    return user.graph if isinstance(user, User) else user


def ranked_candidates(params: ModelParams, graph: EntityGraph, filt: ValidRuleFilter | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Unknown triples of ``graph`` best first, with their probabilities.

    The encoder sees every known rule; ties keep ``(src, dst, rule)`` order.
    """
    probs = score_all(params, graph)
    n, _, R = probs.shape
    flat = probs.ravel()
    keep = np.ones(flat.size, dtype=bool)
    e = graph.edges
    if len(e):
        keep[(e[:, 0] * n + e[:, 1]) * R + e[:, 2]] = False
    if filt is not None:
        src, rest = np.divmod(np.arange(flat.size), n * R)
        dst, rule = np.divmod(rest, R)
        t = graph.node_types
        keep &= filt.allowed[t[src], rule, t[dst]]
    codes = np.flatnonzero(keep)
    order = np.lexsort((codes, -flat[codes]))
    codes = codes[order]
    pair, rule = np.divmod(codes, R)
    src, dst = np.divmod(pair, n)
    return np.stack([src, dst, rule], axis=1), flat[codes]


def recommend(params: ModelParams, user: User | EntityGraph, vocab: Vocab, top_n: int = 10,
              filt: ValidRuleFilter | None = None) -> Recommendations:
    """Top ``top_n`` rules the user does not have yet, highest probability first."""
    if top_n < 1:
        raise ValueError("top_n must be at least 1")
    graph = _graph_of(user)
    triples, probs = ranked_candidates(params, graph, filt)
    items = tuple(Recommendation(graph.node_ids[s], graph.node_ids[d], vocab.rule_types[r], float(p))
                  for (s, d, r), p in zip(triples[:top_n].tolist(), probs[:top_n].tolist()))
    return Recommendations(items, len(triples), top_n)


def leave_one_out_rank(params: ModelParams, user: User | EntityGraph, edge, filt: ValidRuleFilter | None = None
                       ) -> int:
    """Delete one known rule, then report its position among the recommendations.

    Returns 0 when the filter rejects the deleted rule's type signature.
    """
    graph = _graph_of(user)
    edge = tuple(int(x) for x in edge)
    known = [tuple(e) for e in graph.edges.tolist()]
    if edge not in known:
        raise ValueError(f"{edge} is not one of the user's rules")
    reduced = graph.with_edges([e for e in known if e != edge])
    triples, _ = ranked_candidates(params, reduced, filt)
    hits = np.flatnonzero((triples == np.asarray(edge)).all(axis=1))
    return int(hits[0]) + 1 if len(hits) else 0


__all__ = ["Recommendation", "Recommendations", "ranked_candidates", "recommend", "leave_one_out_rank"]
