import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from fedrule.datagen import GenConfig, generate
from fedrule.evaluation import (
    HIT_RATE_NS, Evaluator, MetricsReport, ValidRuleFilter, apply_filter, auc, build_filter, evaluate,
    hit_rate_at_n, hit_rate_curve, hit_rate_rows, mean_rank, rank_of, user_mean_rank,
)
from fedrule.graph import EdgeSplit, EntityGraph, User, Vocab, make_dataset, sample_negatives, train_graph
from fedrule.model import ModelParams, loss, score_all
from fedrule.seeding import derive_rng


def small_dataset(n_users=6, seed=0, **kw):
    cfg = dict(n_users=n_users, n_entity_types=3, n_rule_types=5, n_clusters=2, entities_min=3,
               entities_max=5, rules_mean=5.0, seed=seed)
    cfg.update(kw)
    return generate(GenConfig(**cfg))


def random_params(seed, T=3, R=5, H=4):
    rng = np.random.default_rng(seed)
    p = ModelParams.init(T, R, hidden=H, seed=seed)
    p.c2 = rng.normal(size=R)
    p.b1 = rng.normal(scale=0.3, size=H)
    return p


class TestAuc:
    def test_trivial(self):
        assert auc([0.9], [0.1]) == 1.0
        assert auc([0.1], [0.9]) == 0.0
        assert auc([0.3, 0.5, 0.7], [0.3, 0.5, 0.7]) == 0.5

    def test_empty_side(self):
        with pytest.raises(ValueError):
            auc([], [0.1])
        with pytest.raises(ValueError):
            auc([0.1], [])

    def test_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for i in range(100):
            n_p, n_n = int(rng.integers(1, 30)), int(rng.integers(1, 30))
            # coarse rounding on half the sets forces ties
            pos, neg = rng.random(n_p), rng.random(n_n)
            if i % 2:
                pos, neg = np.round(pos, 1), np.round(neg, 1)
            assert auc(pos, neg) == oracles.auc_pairs(pos.tolist(), neg.tolist())

    def test_twenty_by_twenty(self):
        rng = np.random.default_rng(1)
        pos, neg = rng.random(20), rng.random(20)
        assert auc(pos, neg) == oracles.auc_pairs(pos.tolist(), neg.tolist())

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=15), st.lists(st.floats(-5, 5), min_size=1, max_size=15))
    def test_monotone_transform_invariance(self, pos, neg):
        pos, neg = np.array(pos), np.array(neg)
        # transforms that preserve order exactly in floating point
        levels = np.unique(np.concatenate([pos, neg]))
        dense = lambda x: np.searchsorted(levels, x) ** 3 - 7.0
        assert auc(pos, neg) == auc(4 * pos, 4 * neg) == auc(dense(pos), dense(neg))


class TestMeanRank:
    def test_rank_of(self):
        assert rank_of(np.array([0.1, 0.9, 0.5]), 1) == 1
        assert rank_of(np.array([0.1, 0.9, 0.5]), 0) == 3
        assert rank_of(np.array([0.1, 0.9, 0.5]), 0, excluded=[1]) == 2
        # ties go to the lower index
        assert rank_of(np.array([0.5, 0.5]), 1) == 2
        with pytest.raises(AssertionError):
            rank_of(np.array([0.1, 0.9]), 1, excluded=[1])

    def crafted_user(self):
        g = EntityGraph("u", ("a", "b", "c"), [0, 1, 0], [(0, 1, 0), (0, 1, 1), (2, 1, 0)])
        return User(g, EdgeSplit([(0, 1, 0)], [(0, 1, 1), (2, 1, 0)]))

    def test_perfect_and_worst(self):
        u = self.crafted_user()
        p = ModelParams.zeros(2, 2, hidden=2)
        p.c2 = np.array([-1.0, 1.0])
        # rule 1 always wins: rank 1 for (0,1,1), rank 2 for (2,1,0)
        assert mean_rank(p, u) == 1.5
        p.c2 = np.array([-1.0, -2.0])
        g = EntityGraph("u", ("a", "b"), [0, 1], [(0, 1, 0), (0, 1, 1)])
        worst = User(g, EdgeSplit([(0, 1, 0)], [(0, 1, 1)]))
        assert mean_rank(p, worst) == 2.0
        assert mean_rank(p, worst, remove_train=True) == 1.0

    def test_sort_oracle(self):
        ds = small_dataset(n_users=20, seed=1)
        for i, u in enumerate(ds.users):
            if not len(u.split.test_pos):
                continue
            p = random_params(100 + i)
            probs = score_all(p, train_graph(u))
            for rt in (False, True):
                ref = []
                for s, d, r in u.split.test_pos.tolist():
                    excl = [rr for ss, dd, rr in u.split.train_pos.tolist() if (ss, dd) == (s, d)] if rt else []
                    ref.append(oracles.rank_by_sort(probs[s, d].tolist(), r, excl))
                assert mean_rank(p, u, remove_train=rt) == np.mean(ref)

    @pytest.mark.parametrize("seed", range(4))
    def test_remove_train_never_hurts(self, seed):
        ds = small_dataset(n_users=30, seed=seed, rules_mean=8.0, entities_max=3)
        p = random_params(seed)
        for u in ds.users:
            if len(u.split.test_pos):
                probs = score_all(p, train_graph(u))
                assert user_mean_rank(probs, u, True) <= user_mean_rank(probs, u, False)

    def test_needs_test_edges(self):
        u = small_dataset(n_users=1, rules_mean=1.0).users[0]
        u = User(u.graph, EdgeSplit(u.graph.edges, np.zeros((0, 3))))
        with pytest.raises(ValueError):
            mean_rank(ModelParams.zeros(3, 5, hidden=2), u)


def enumerate_hit_rate(params, user, n, filt=None):
    """Score every triple, drop known and filtered ones, sort, count hits."""
    probs = score_all(params, train_graph(user))
    nn, _, R = probs.shape
    known = {tuple(e) for e in user.split.train_pos.tolist()}
    t = user.graph.node_types
    cands = []
    for s in range(nn):
        for d in range(nn):
            for r in range(R):
                if (s, d, r) in known:
                    continue
                if filt is not None and not filt.allowed[t[s], r, t[d]]:
                    continue
                cands.append((-probs[s, d, r], (s * nn + d) * R + r, (s, d, r)))
    top = {c[2] for c in sorted(cands)[:n]}
    test = [tuple(e) for e in user.split.test_pos.tolist()]
    return sum(e in top for e in test) / len(test)


class TestHitRate:
    def test_enumeration_oracle(self):
        ds = small_dataset(n_users=2, seed=2)
        filt = build_filter(ds)
        for k, u in enumerate(ds.users):
            p = random_params(k)
            for n in (1, 2, 3, 5, 10, 40):
                assert hit_rate_at_n(p, u, n) == enumerate_hit_rate(p, u, n)
                assert hit_rate_at_n(p, u, n, filt) == enumerate_hit_rate(p, u, n, filt)

    def test_ties_use_flat_index(self):
        g = EntityGraph("u", ("a", "b"), [0, 0], [(0, 0, 0), (1, 0, 0)])
        zero = ModelParams.zeros(1, 1, hidden=1)
        early = User(g, EdgeSplit([(1, 0, 0)], [(0, 0, 0)]))
        late = User(g, EdgeSplit([(0, 0, 0)], [(1, 0, 0)]))
        assert hit_rate_at_n(zero, early, 1) == 1.0
        assert hit_rate_at_n(zero, late, 1) == 0.0
        assert hit_rate_at_n(zero, late, 2) == 1.0

    def test_nondecreasing_and_saturates(self):
        ds = small_dataset(n_users=8, seed=3)
        p = random_params(3)
        for u in ds.users:
            if not len(u.split.test_pos):
                continue
            n_cands = u.graph.n_nodes ** 2 * 5 - len(u.split.train_pos)
            rates = [hit_rate_at_n(p, u, n) for n in range(1, n_cands + 1)]
            assert all(a <= b for a, b in zip(rates, rates[1:]))
            assert rates[-1] == 1.0
            assert hit_rate_at_n(p, u, n_cands + 7) == 1.0

    def test_curve_matches_per_user(self):
        ds = small_dataset(n_users=10, seed=4)
        p = random_params(4)
        curve = hit_rate_curve(p, ds)
        assert list(curve) == list(HIT_RATE_NS)
        users = [u for u in ds.users if len(u.split.test_pos)]
        for n in (1, 7, 40):
            expected = np.mean([hit_rate_at_n(p, u, n) for u in users])
            assert curve[n] == pytest.approx(expected, abs=1e-15)
        values = list(curve.values())
        assert all(a <= b for a, b in zip(values, values[1:]))

    def test_train_target(self):
        ds = small_dataset(n_users=5, seed=5)
        p = random_params(5)
        curve = hit_rate_curve(p, ds, ns=(3,), target="train")
        assert curve[3] == pytest.approx(np.mean([hit_rate_at_n(p, u, 3, target="train") for u in ds.users]))

    def test_bad_n(self):
        u = small_dataset(n_users=1).users[0]
        with pytest.raises(ValueError):
            hit_rate_at_n(ModelParams.zeros(3, 5, hidden=2), u, 0)

    def test_rows(self):
        text = hit_rate_rows({1: 0.25, 2: 0.5})
        assert text == "n,hit_rate\n1,0.25\n2,0.5\n"


class TestFilter:
    def test_single_signature(self):
        vocab = Vocab(("A", "B"), ("r0", "r1"))
        g = EntityGraph("u", ("x", "y", "z"), [0, 1, 1], [(0, 1, 1), (0, 2, 1)])
        ds = make_dataset(vocab, [g], test_fraction=0.0)
        f = build_filter(ds)
        assert f.n_true == 1
        assert f.allowed[0, 1, 1]

    def test_training_edges_pass(self):
        ds = small_dataset(n_users=20, seed=6)
        f = build_filter(ds)
        for u in ds.users:
            e = u.split.train_pos
            assert f.mask(e, u.graph.node_types).all()
            np.testing.assert_array_equal(apply_filter(f, e, u.graph.node_types), e)

    def test_ignores_test_edges(self):
        vocab = Vocab(("A", "B"), ("r0", "r1"))
        g = EntityGraph("u", ("x", "y"), [0, 1], [(0, 1, 0), (1, 0, 1)])
        ds = make_dataset(vocab, [g], test_fraction=0.5, seed=0)
        f = build_filter(ds)
        assert f.n_true == 1

    def test_pass_rate(self):
        rng = np.random.default_rng(7)
        T, R = 4, 6
        allowed = rng.random((T, R, T)) < 0.3
        f = ValidRuleFilter(allowed)
        types = rng.integers(T, size=50)
        cands = np.stack([rng.integers(50, size=20000), rng.integers(50, size=20000),
                          rng.integers(R, size=20000)], axis=1)
        rate = f.mask(cands, types).mean()
        # node types are drawn uniformly, so each signature is equally likely
        assert rate == pytest.approx(f.n_true / (T * R * T), abs=0.02)


class TestEvaluator:
    def test_matches_per_user_routes(self):
        ds = small_dataset(n_users=12, seed=8)
        p = random_params(8)
        rep = Evaluator(ds, seed=5).evaluate(p)
        R = ds.vocab.n_rule_types
        users = [(k, u) for k, u in enumerate(ds.users) if len(u.split.test_pos)]
        losses, pos_scores, neg_scores = [], [], []
        for k, u in users:
            neg = sample_negatives(u.graph, len(u.split.test_pos), derive_rng(5, "eval-test-neg", k), R,
                                   u.graph.edges).edges
            losses.append(loss(p, train_graph(u), u.split.test_pos, neg))
            probs = score_all(p, train_graph(u))
            pos_scores += [probs[s, d, r] for s, d, r in u.split.test_pos.tolist()]
            neg_scores += [probs[s, d, r] for s, d, r in neg.tolist()]
        assert rep.loss == pytest.approx(np.mean(losses), rel=1e-12)
        assert rep.auc == pytest.approx(oracles.auc_pairs(pos_scores, neg_scores), abs=1e-12)
        assert rep.mean_rank == pytest.approx(np.mean([mean_rank(p, u) for _, u in users]), rel=1e-12)
        assert rep.mean_rank_rt == pytest.approx(np.mean([mean_rank(p, u, True) for _, u in users]), rel=1e-12)
        assert rep.mean_rank_rt <= rep.mean_rank

    def test_zero_model(self):
        ds = small_dataset(n_users=12, seed=9)
        rep = evaluate(ModelParams.zeros(3, 5, hidden=4), ds)
        assert rep.auc == 0.5
        assert rep.loss == pytest.approx(np.log(2))
        assert rep.mean_rank >= 1

    def test_deterministic(self):
        ds = small_dataset(n_users=10, seed=10)
        p = random_params(10)
        assert evaluate(p, ds, seed=3).to_json() == evaluate(p, ds, seed=3).to_json()

    def test_report_serialization(self):
        rep = MetricsReport(0.5, 0.75, 2.0, 1.5, {1: 0.1, 5: 0.3}, train_loss=0.25)
        d = json.loads(rep.to_json())
        assert d["auc"] == 0.75 and d["hit_rate"] == {"1": 0.1, "5": 0.3}
        lines = rep.to_csv().splitlines()
        assert lines[0] == "metric,n,value"
        assert "hit_rate,5,0.3" in lines
        assert "mean_rank_rt,,1.5" in lines
