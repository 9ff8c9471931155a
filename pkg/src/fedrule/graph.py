"""Per-user entity graphs, train/test edge splits and negative sampling.

A graph stores its nodes sorted by entity id; edges are ``(src, dst, rule)``
rows of node positions and rule indices, kept sorted and unique.  The
dataset file is JSON lines (one user per line) and the vocabulary file is a
plain-text list with two sections.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .seeding import derive_rng

EDGE_DTYPE = np.int64


class GraphError(ValueError):
    """Invalid graph construction input."""


def _edge_array(edges) -> np.ndarray:
    a = np.asarray(edges, dtype=EDGE_DTYPE)
    if a.size == 0:
        return np.zeros((0, 3), dtype=EDGE_DTYPE)
    return a.reshape(-1, 3)


def canonical_edges(edges) -> np.ndarray:
    """Sorted, de-duplicated ``(m, 3)`` edge array."""
    a = _edge_array(edges)
    if len(a) == 0:
        return a
    return np.unique(a, axis=0)


@dataclass(frozen=True)
class Vocab:
    entity_types: tuple[str, ...]
    rule_types: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "entity_types", tuple(self.entity_types))
        object.__setattr__(self, "rule_types", tuple(self.rule_types))
        if not self.entity_types or not self.rule_types:
            raise GraphError("vocabulary needs at least one entity type and one rule type")
        for names in (self.entity_types, self.rule_types):
            if len(set(names)) != len(names):
                raise GraphError("vocabulary names must be unique")
            if any(("\n" in n) or n.strip() != n or not n for n in names):
                raise GraphError("vocabulary names must be non-empty single lines without surrounding space")
        object.__setattr__(self, "_entity_index", {n: i for i, n in enumerate(self.entity_types)})
        object.__setattr__(self, "_rule_index", {n: i for i, n in enumerate(self.rule_types)})

    @property
    def n_entity_types(self) -> int:
        return len(self.entity_types)

    @property
    def n_rule_types(self) -> int:
        return len(self.rule_types)

    def entity_index(self, name: str) -> int:
        try:
            return self._entity_index[name]
        except KeyError:
            raise GraphError(f"unknown entity type {name!r}") from None

    def rule_index(self, name: str) -> int:
        try:
            return self._rule_index[name]
        except KeyError:
            raise GraphError(f"unknown rule type {name!r}") from None


@dataclass(frozen=True, eq=False)
class EntityGraph:
    """One user's directed multigraph of typed entities.

    ``node_ids[i]`` has entity type ``node_types[i]``; ``edges`` rows are
    ``(src_position, dst_position, rule_index)``.
    """

    user_id: str
    node_ids: tuple[str, ...]
    node_types: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        types = np.asarray(self.node_types, dtype=EDGE_DTYPE).reshape(-1)
        types.setflags(write=False)
        edges = canonical_edges(self.edges)
        edges.setflags(write=False)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))
        object.__setattr__(self, "node_types", types)
        object.__setattr__(self, "edges", edges)
        if len(set(self.node_ids)) != len(self.node_ids):
            raise GraphError(f"duplicate node ids in graph {self.user_id!r}")
        if len(self.node_ids) != len(types):
            raise GraphError("node_ids and node_types differ in length")
        n = len(types)
        if len(edges) and (edges[:, :2].min() < 0 or edges[:, :2].max() >= n or edges[:, 2].min() < 0):
            raise GraphError(f"edge endpoint out of range in graph {self.user_id!r}")

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    def node_position(self, node_id: str) -> int:
        try:
            return self.node_ids.index(node_id)
        except ValueError:
            raise GraphError(f"unknown node {node_id!r} in graph {self.user_id!r}") from None

    def with_edges(self, edges) -> "EntityGraph":
        """Same nodes, different edge set (e.g. only training edges)."""
        return EntityGraph(self.user_id, self.node_ids, self.node_types, edges)

    def one_hot(self, n_types: int) -> np.ndarray:
        x = np.zeros((self.n_nodes, n_types))
        x[np.arange(self.n_nodes), self.node_types] = 1.0
        return x

    def __eq__(self, other):
        if not isinstance(other, EntityGraph):
            return NotImplemented
        return (self.user_id == other.user_id and self.node_ids == other.node_ids
                and np.array_equal(self.node_types, other.node_types)
                and np.array_equal(self.edges, other.edges))

    __hash__ = None


def build_graph(user_id: str, entities: Iterable[tuple[str, str]],
                rules: Iterable[tuple[str, str, str]], vocab: Vocab) -> EntityGraph:
    """Build a graph from ``(id, type_name)`` entities and ``(src, rule, dst)`` rules.

    Nodes are ordered by id, so the result does not depend on input order.
    Same-type entities stay separate nodes; repeated rules collapse.
    """
    ents = sorted((str(i), t) for i, t in entities)
    ids = [i for i, _ in ents]
    if len(set(ids)) != len(ids):
        raise GraphError(f"duplicate entity id in user {user_id!r}")
    pos = {i: k for k, i in enumerate(ids)}
    types = [vocab.entity_index(t) for _, t in ents]
    edges = []
    for src, rule, dst in rules:
        if str(src) not in pos or str(dst) not in pos:
            raise GraphError(f"rule ({src!r}, {rule!r}, {dst!r}) references a missing entity")
        edges.append((pos[str(src)], pos[str(dst)], vocab.rule_index(rule)))
    return EntityGraph(str(user_id), tuple(ids), np.asarray(types, dtype=EDGE_DTYPE), edges)


def in_neighbors(graph: EntityGraph, node: int) -> list[int]:
    """Positions of nodes with at least one edge into ``node``, ascending.

    Message passing follows rule direction: an action node aggregates
    from the triggers that point at it.
    """
    if not 0 <= node < graph.n_nodes:
        raise GraphError(f"node position {node} out of range")
    e = graph.edges
    return sorted(set(e[e[:, 1] == node, 0].tolist()))


def _codes(edges: np.ndarray, n: int, n_rules: int) -> np.ndarray:
    return (edges[:, 0] * n + edges[:, 1]) * n_rules + edges[:, 2]


def _decode(codes: np.ndarray, n: int, n_rules: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=EDGE_DTYPE)
    rule = codes % n_rules
    pair = codes // n_rules
    return np.stack([pair // n, pair % n, rule], axis=1).astype(EDGE_DTYPE)


def out_candidates(graph: EntityGraph, n_rules: int, exclude=None) -> np.ndarray:
    """All triples ``(src, dst, rule)`` not in ``exclude`` (default: the graph's edges)."""
    n = graph.n_nodes
    exclude = graph.edges if exclude is None else _edge_array(exclude)
    mask = np.ones(n * n * n_rules, dtype=bool)
    if len(exclude):
        mask[_codes(exclude, n, n_rules)] = False
    return _decode(np.flatnonzero(mask), n, n_rules)


class NegativeSample(NamedTuple):
    edges: np.ndarray
    shortfall: int


def sample_negatives(graph: EntityGraph, count: int, rng, n_rules: int,
                     positives=None) -> NegativeSample:
    """Uniform draw of ``count`` distinct triples absent from ``positives``.

    ``rng`` is a seed or a ``numpy.random.Generator``.  Self-loops are
    valid candidates.  If fewer than ``count`` candidates exist, the whole
    complement is returned and ``shortfall`` says how many are missing.
    """
    rng = np.random.default_rng(rng)
    n = graph.n_nodes
    positives = graph.edges if positives is None else canonical_edges(positives)
    space = n * n * n_rules
    pos_codes = np.unique(_codes(positives, n, n_rules)) if len(positives) else np.zeros(0, EDGE_DTYPE)
    available = space - len(pos_codes)
    count = int(count)
    if count <= 0:
        return NegativeSample(np.zeros((0, 3), dtype=EDGE_DTYPE), 0)
    if count >= available:
        return NegativeSample(out_candidates(graph, n_rules, positives), count - available)
    if available <= 4 * count:
        mask = np.ones(space, dtype=bool)
        mask[pos_codes] = False
        pool = np.flatnonzero(mask)
        chosen = rng.choice(pool, size=count, replace=False)
    else:
        taken = set(pos_codes.tolist())
        chosen = []
        while len(chosen) < count:
            for c in rng.integers(0, space, size=2 * (count - len(chosen))).tolist():
                if c not in taken:
                    taken.add(c)
                    chosen.append(c)
                    if len(chosen) == count:
                        break
    return NegativeSample(_decode(np.sort(np.asarray(chosen)), n, n_rules), 0)


@dataclass(frozen=True, eq=False)
class EdgeSplit:
    train_pos: np.ndarray
    test_pos: np.ndarray

    def __post_init__(self):
        for name in ("train_pos", "test_pos"):
            a = canonical_edges(getattr(self, name))
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    def __eq__(self, other):
        if not isinstance(other, EdgeSplit):
            return NotImplemented
        return np.array_equal(self.train_pos, other.train_pos) and np.array_equal(self.test_pos, other.test_pos)

    __hash__ = None

    @property
    def all_pos(self) -> np.ndarray:
        return canonical_edges(np.concatenate([self.train_pos, self.test_pos]))


def n_test_edges(n_edges: int, test_fraction: float) -> int:
    """Half-up rounding of ``fraction * n_edges``, leaving at least one training edge."""
    if n_edges == 0:
        return 0
    return min(int(math.floor(test_fraction * n_edges + 0.5)), n_edges - 1)


def split_edges(graph: EntityGraph, test_fraction: float, rng) -> EdgeSplit:
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(rng)
    m = len(graph.edges)
    k = n_test_edges(m, test_fraction)
    perm = rng.permutation(m)
    test_idx = np.sort(perm[:k])
    mask = np.zeros(m, dtype=bool)
    mask[test_idx] = True
    return EdgeSplit(graph.edges[~mask], graph.edges[mask])


class User(NamedTuple):
    graph: EntityGraph
    split: EdgeSplit
    cluster: int | None = None


@dataclass(frozen=True, eq=False)
class Dataset:
    vocab: Vocab
    users: tuple[User, ...]

    def __post_init__(self):
        object.__setattr__(self, "users", tuple(User(*u) for u in self.users))
        T, R = self.vocab.n_entity_types, self.vocab.n_rule_types
        for u in self.users:
            g = u.graph
            if len(g.node_types) and g.node_types.max() >= T:
                raise GraphError(f"entity type index out of range in user {g.user_id!r}")
            if len(g.edges) and g.edges[:, 2].max() >= R:
                raise GraphError(f"rule index out of range in user {g.user_id!r}")
            if not np.array_equal(u.split.all_pos, g.edges):
                raise GraphError(f"split of user {g.user_id!r} does not partition its edges")
            if len(u.split.train_pos) and len(u.split.test_pos):
                both = np.concatenate([u.split.train_pos, u.split.test_pos])
                if len(np.unique(both, axis=0)) != len(both):
                    raise GraphError(f"train and test edges overlap for user {g.user_id!r}")

    def __len__(self) -> int:
        return len(self.users)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.vocab == other.vocab and len(self.users) == len(other.users) and all(
            a.graph == b.graph and a.split == b.split and a.cluster == b.cluster
            for a, b in zip(self.users, other.users))

    __hash__ = None

    def user_index(self, user_id: str) -> int:
        for k, u in enumerate(self.users):
            if u.graph.user_id == user_id:
                return k
        raise KeyError(user_id)

    @property
    def clusters(self) -> list[int | None]:
        return [u.cluster for u in self.users]


def make_dataset(vocab: Vocab, graphs: Sequence[EntityGraph], test_fraction: float = 0.2,
                 seed: int = 0, clusters: Sequence[int | None] | None = None) -> Dataset:
    """Split each user's edges independently (``80/20`` by default)."""
    clusters = list(clusters) if clusters is not None else [None] * len(graphs)
    users = [User(g, split_edges(g, test_fraction, derive_rng(seed, "split", k)), c)
             for k, (g, c) in enumerate(zip(graphs, clusters))]
    return Dataset(vocab, tuple(users))


def train_graph(user: User) -> EntityGraph:
    """The graph a model may look at during training: nodes plus training edges."""
    return user.graph.with_edges(user.split.train_pos)


# ---------------------------------------------------------------- file IO

def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps_vocab(vocab: Vocab) -> str:
    lines = ["[entity_types]", *vocab.entity_types, "[rule_types]", *vocab.rule_types]
    return "\n".join(lines) + "\n"


def loads_vocab(text: str) -> Vocab:
    sections: dict[str, list[str]] = {}
    current = None
    for line in text.splitlines():
        if not line.strip():
            continue
        if line in ("[entity_types]", "[rule_types]"):
            current = sections.setdefault(line[1:-1], [])
        elif current is None:
            raise GraphError("vocabulary file must start with a section header")
        else:
            current.append(line)
    if set(sections) != {"entity_types", "rule_types"}:
        raise GraphError("vocabulary file needs [entity_types] and [rule_types] sections")
    return Vocab(tuple(sections["entity_types"]), tuple(sections["rule_types"]))


def user_record(user: User, vocab: Vocab) -> dict:
    g = user.graph
    test = {tuple(e) for e in user.split.test_pos.tolist()}
    rec = {
        "user_id": g.user_id,
        "entities": [{"id": i, "type": vocab.entity_types[t]} for i, t in zip(g.node_ids, g.node_types.tolist())],
        "rules": [{"src": g.node_ids[s], "rule": vocab.rule_types[r], "dst": g.node_ids[d],
                   "split": "test" if (s, d, r) in test else "train"}
                  for s, d, r in g.edges.tolist()],
    }
    if user.cluster is not None:
        rec["cluster"] = int(user.cluster)
    return rec


def dumps_dataset(dataset: Dataset) -> str:
    return "".join(json.dumps(user_record(u, dataset.vocab), ensure_ascii=False, separators=(",", ":")) + "\n"
                   for u in dataset.users)


def loads_dataset(text: str, vocab: Vocab, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    """Parse JSON lines.  Rules without a ``split`` tag are split with ``seed``."""
    users = []
    for k, line in enumerate(l for l in text.splitlines() if l.strip()):
        rec = json.loads(line)
        ents = [(e["id"], e["type"]) for e in rec["entities"]]
        rules = rec.get("rules", [])
        g = build_graph(rec["user_id"], ents, [(r["src"], r["rule"], r["dst"]) for r in rules], vocab)
        if all("split" in r for r in rules):
            test = build_graph(rec["user_id"], ents, [(r["src"], r["rule"], r["dst"]) for r in rules
                                                      if r["split"] == "test"], vocab).edges
            train = build_graph(rec["user_id"], ents, [(r["src"], r["rule"], r["dst"]) for r in rules
                                                       if r["split"] != "test"], vocab).edges
            split = EdgeSplit(train, test)
        else:
            split = split_edges(g, test_fraction, derive_rng(seed, "split", k))
        users.append(User(g, split, rec.get("cluster")))
    return Dataset(vocab, tuple(users))


def save_dataset(dataset: Dataset, path, vocab_path) -> None:
    atomic_write_text(vocab_path, dumps_vocab(dataset.vocab))
    atomic_write_text(path, dumps_dataset(dataset))


def load_dataset(path, vocab_path, test_fraction: float = 0.2, seed: int = 0) -> Dataset:
    vocab = loads_vocab(Path(vocab_path).read_text(encoding="utf-8"))
    return loads_dataset(Path(path).read_text(encoding="utf-8"), vocab, test_fraction, seed)
