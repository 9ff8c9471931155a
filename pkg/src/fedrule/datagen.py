"""Seeded synthetic rule datasets with cluster-driven heterogeneity.

Each rule type can connect a small number of (source type, target type)
combinations; a *template* is one ``(src_type, rule, dst_type)`` triple.
Every user cluster owns a subset of templates and a Dirichlet(alpha)
preference over them: small ``alpha`` concentrates each cluster on a few
templates (strongly non-IID), large ``alpha`` spreads it evenly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .graph import Dataset, EntityGraph, Vocab, make_dataset
from .seeding import derive_rng, derive_seed


class InfeasibleConfigError(ValueError):
    """The generator cannot satisfy the requested configuration."""


@dataclass
class GenConfig:
    n_users: int = 500
    n_entity_types: int = 8
    n_rule_types: int = 20
    n_clusters: int = 4
    entities_min: int = 2
    entities_max: int = 8
    rules_mean: float = 2.65
    alpha: float = 0.1
    templates_per_rule: int = 2
    cluster_template_fraction: float = 0.5
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self) -> None:
        if self.n_users < 1:
            raise InfeasibleConfigError("n_users must be >= 1")
        if self.n_entity_types < 1 or self.n_rule_types < 1:
            raise InfeasibleConfigError("need at least one entity type and one rule type")
        if self.n_clusters < 1:
            raise InfeasibleConfigError("n_clusters must be >= 1")
        if not self.alpha > 0:
            raise InfeasibleConfigError("alpha must be > 0")
        if self.entities_max < 2 or self.entities_min < 2 or self.entities_min > self.entities_max:
            raise InfeasibleConfigError("need 2 <= entities_min <= entities_max (a rule joins two entities)")
        if not self.rules_mean >= 1:
            raise InfeasibleConfigError("rules_mean must be >= 1 since every user owns a rule")
        n = self.entities_max
        if self.rules_mean > n * (n - 1) * self.n_rule_types:
            raise InfeasibleConfigError("rules_mean exceeds the number of instantiable rules")
        if not 1 <= self.templates_per_rule <= self.n_entity_types ** 2:
            raise InfeasibleConfigError("templates_per_rule must lie in [1, T^2]")
        if not 0 < self.cluster_template_fraction <= 1:
            raise InfeasibleConfigError("cluster_template_fraction must lie in (0, 1]")
        if not 0 <= self.test_fraction < 1:
            raise InfeasibleConfigError("test_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


def default_vocab(n_entity_types: int, n_rule_types: int) -> Vocab:
    return Vocab(tuple(f"entity_{i:02d}" for i in range(n_entity_types)),
                 tuple(f"rule_{r:03d}" for r in range(n_rule_types)))


@dataclass(frozen=True)
class Clusters:
    templates: np.ndarray           # (M, 3) universe of (src_type, rule, dst_type)
    members: tuple                  # per cluster: template row indices
    weights: tuple                  # per cluster: preference over its members
    entity_dist: np.ndarray         # (G, T) entity-type distribution

    def template_set(self) -> set[tuple[int, int, int]]:
        return {tuple(self.templates[i]) for m in self.members for i in m.tolist()}


def make_clusters(config: GenConfig) -> Clusters:
    T, R, G = config.n_entity_types, config.n_rule_types, config.n_clusters
    rng = derive_rng(config.seed, "templates")
    rows = []
    for r in range(R):
        pairs = rng.choice(T * T, size=config.templates_per_rule, replace=False)
        rows += [(p // T, r, p % T) for p in sorted(pairs.tolist())]
    templates = np.asarray(rows, dtype=np.int64)
    M = len(templates)
    size = max(1, round(config.cluster_template_fraction * M))
    members, weights = [], []
    dist = np.zeros((G, T))
    for g in range(G):
        crng = derive_rng(config.seed, "cluster", g)
        m = np.sort(crng.choice(M, size=size, replace=False))
        if math.isinf(config.alpha):
            w = np.full(size, 1.0 / size)
        else:
            w = crng.dirichlet(np.full(size, config.alpha))
            if not np.all(np.isfinite(w)) or w.sum() <= 0:
                w = np.zeros(size)
                w[crng.integers(size)] = 1.0
            w = w / w.sum()
        members.append(m)
        weights.append(w)
        np.add.at(dist[g], templates[m, 0], w / 2)
        np.add.at(dist[g], templates[m, 2], w / 2)
        dist[g] = 0.9 * dist[g] / dist[g].sum() + 0.1 / T
    return Clusters(templates, tuple(members), tuple(weights), dist)


def _instances(types: np.ndarray, tmpl: np.ndarray, w: np.ndarray):
    """All (u, v, rule) with u != v whose type signature is a weighted template."""
    out, probs = [], []
    for (s, r, d), wt in zip(tmpl.tolist(), w.tolist()):
        if wt <= 0:
            continue
        us = np.flatnonzero(types == s)
        vs = np.flatnonzero(types == d)
        for u in us.tolist():
            for v in vs.tolist():
                if u != v:
                    out.append((u, v, r))
                    probs.append(wt)
    return out, np.asarray(probs)


def _make_user(k: int, config: GenConfig, clusters: Clusters) -> tuple[EntityGraph, int]:
    rng = derive_rng(config.seed, "user", k)
    g = int(rng.integers(config.n_clusters))
    tmpl = clusters.templates[clusters.members[g]]
    w = clusters.weights[g]
    n_rules = 1 + int(rng.poisson(config.rules_mean - 1.0))
    best = None
    for _ in range(100):
        n = int(rng.integers(config.entities_min, config.entities_max + 1))
        types = rng.choice(config.n_entity_types, size=n, p=clusters.entity_dist[g])
        inst, p = _instances(types, tmpl, w)
        if best is None or len(inst) > len(best[1]):
            best = (types, inst, p)
        if len(inst) >= n_rules:
            break
    types, inst, p = best
    if not inst:
        raise InfeasibleConfigError(f"could not instantiate any rule for user {k}; widen the entity range")
    m = min(n_rules, len(inst))
    pick = rng.choice(len(inst), size=m, replace=False, p=p / p.sum())
    ids = tuple(f"e{i:03d}" for i in range(len(types)))
    edges = [inst[i] for i in sorted(pick.tolist())]
    return EntityGraph(f"user{k:06d}", ids, types, edges), g


def generate(config: GenConfig) -> Dataset:
    """Deterministic dataset for ``config``; every user has at least one rule."""
    config.validate()
    clusters = make_clusters(config)
    vocab = default_vocab(config.n_entity_types, config.n_rule_types)
    graphs, labels = [], []
    for k in range(config.n_users):
        graph, g = _make_user(k, config, clusters)
        graphs.append(graph)
        labels.append(g)
    return make_dataset(vocab, graphs, config.test_fraction, derive_seed(config.seed, "split"), labels)


# ----------------------------------------------------------- heterogeneity

def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return float(0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum())


def _normalize(counts: np.ndarray) -> np.ndarray:
    s = counts.sum()
    return counts / s if s > 0 else counts.astype(float)


@dataclass
class HeterogeneityReport:
    global_hist: np.ndarray
    group_hists: dict
    pairwise_tv: np.ndarray          # between groups, in sorted group order
    mean_inter_tv: float
    mean_intra_tv: float             # between alternating halves of each group


def rule_histograms(dataset: Dataset) -> np.ndarray:
    """Per-user counts of each rule type, ``(n_users, R)``."""
    R = dataset.vocab.n_rule_types
    return np.stack([np.bincount(u.graph.edges[:, 2], minlength=R) if len(u.graph.edges) else np.zeros(R, int)
                     for u in dataset.users]).astype(float)


def heterogeneity_report(dataset: Dataset, labels=None) -> HeterogeneityReport:
    """Rule-type histograms per group and their total-variation distances.

    ``labels`` defaults to the cluster stored with each user.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    labels = np.asarray(dataset.clusters if labels is None else labels)
    if any(l is None for l in labels.tolist()):
        labels = np.zeros(len(dataset), dtype=int)
    counts = rule_histograms(dataset)
    groups = sorted(set(labels.tolist()))
    hists = {g: _normalize(counts[labels == g].sum(axis=0)) for g in groups}
    G = len(groups)
    tv = np.zeros((G, G))
    for i in range(G):
        for j in range(G):
            tv[i, j] = total_variation(hists[groups[i]], hists[groups[j]])
    inter = float(tv[~np.eye(G, dtype=bool)].mean()) if G > 1 else 0.0
    intra = []
    for g in groups:
        idx = np.flatnonzero(labels == g)
        if len(idx) >= 2:
            a, b = counts[idx[0::2]].sum(axis=0), counts[idx[1::2]].sum(axis=0)
            intra.append(total_variation(_normalize(a), _normalize(b)))
    return HeterogeneityReport(_normalize(counts.sum(axis=0)), hists, tv, inter,
                               float(np.mean(intra)) if intra else 0.0)
