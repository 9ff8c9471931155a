import numpy as np
import pytest

from fedrule.datagen import GenConfig, generate
from fedrule.evaluation import ValidRuleFilter, build_filter
from fedrule.graph import EntityGraph, Vocab, make_dataset
from fedrule.infer import leave_one_out_rank, ranked_candidates, recommend
from fedrule.model import ModelParams, score_all
from fedrule.train import TrainConfig, central_train

VOCAB = Vocab(("Camera", "Light"), ("on", "off", "notify"))


def random_params(seed, T=2, R=3, H=4):
    p = ModelParams.init(T, R, hidden=H, seed=seed)
    p.c2 = np.random.default_rng(seed).normal(size=R)
    return p


class TestRecommend:
    def setup_method(self):
        self.g = EntityGraph("u", ("cam", "hall", "porch"), [0, 1, 1], [(0, 1, 0), (0, 2, 2)])
        self.p = random_params(1)

    def test_sorted_and_unknown(self):
        recs = recommend(self.p, self.g, VOCAB, top_n=50)
        probs = [r.probability for r in recs.items]
        assert all(a >= b for a, b in zip(probs, probs[1:]))
        assert all(0 < q < 1 for q in probs)
        known = {(self.g.node_ids[s], VOCAB.rule_types[r], self.g.node_ids[d]) for s, d, r in self.g.edges.tolist()}
        assert not {(r.src, r.rule, r.dst) for r in recs.items} & known

    def test_matches_score_tensor(self):
        recs = recommend(self.p, self.g, VOCAB, top_n=3)
        probs = score_all(self.p, self.g)
        for r in recs.items:
            s, d = self.g.node_position(r.src), self.g.node_position(r.dst)
            assert r.probability == probs[s, d, VOCAB.rule_index(r.rule)]
        flat = probs.ravel().copy()
        for s, d, rr in self.g.edges.tolist():
            flat[(s * 3 + d) * 3 + rr] = -1
        assert recs.items[0].probability == flat.max()

    def test_truncation(self):
        recs = recommend(self.p, self.g, VOCAB, top_n=1000)
        assert recs.n_candidates == 3 * 3 * 3 - 2
        assert len(recs.items) == recs.n_candidates
        assert recs.truncated
        assert not recommend(self.p, self.g, VOCAB, top_n=5).truncated

    def test_filter_respected(self):
        filt = ValidRuleFilter(np.zeros((2, 3, 2), dtype=bool))
        filt.allowed[0, 1, 1] = True
        recs = recommend(self.p, self.g, VOCAB, top_n=10, filt=filt)
        assert {(r.src, r.rule) for r in recs.items} == {("cam", "off")}
        assert len(recs.items) == 2

    def test_complete_graph_gives_nothing(self):
        g = EntityGraph("u", ("a", "b"), [0, 1], [(0, 1, 0), (0, 1, 2)])
        ds = make_dataset(VOCAB, [g], test_fraction=0.0)
        recs = recommend(self.p, g, VOCAB, top_n=5, filt=build_filter(ds))
        assert recs.items == ()
        assert recs.n_candidates == 0

    def test_rejects_bad_n(self):
        with pytest.raises(ValueError):
            recommend(self.p, self.g, VOCAB, top_n=0)

    def test_ties_keep_index_order(self):
        zero = ModelParams.zeros(2, 3, hidden=2)
        triples, probs = ranked_candidates(zero, self.g)
        codes = (triples[:, 0] * 3 + triples[:, 1]) * 3 + triples[:, 2]
        assert np.all(np.diff(codes) > 0)
        assert np.all(probs == 0.5)


class TestLeaveOneOut:
    def test_rank_in_range(self):
        g = EntityGraph("u", ("cam", "hall", "porch"), [0, 1, 1], [(0, 1, 0), (0, 2, 2)])
        r = leave_one_out_rank(random_params(2), g, (0, 2, 2))
        assert 1 <= r <= 3 * 3 * 3 - 1

    def test_unknown_edge(self):
        g = EntityGraph("u", ("a", "b"), [0, 1], [(0, 1, 0)])
        with pytest.raises(ValueError):
            leave_one_out_rank(random_params(3), g, (1, 0, 0))

    def test_filtered_out(self):
        g = EntityGraph("u", ("a", "b"), [0, 1], [(0, 1, 0)])
        filt = ValidRuleFilter(np.zeros((2, 3, 2), dtype=bool))
        assert leave_one_out_rank(random_params(3), g, (0, 1, 0), filt) == 0

    def test_overfit_toy_ranks_first(self):
        ds = generate(GenConfig(n_users=6, n_entity_types=3, n_rule_types=4, n_clusters=1, entities_min=3,
                                entities_max=4, rules_mean=3.0, test_fraction=0.0, seed=1))
        params, _ = central_train(ds, TrainConfig(mode="central", rounds=300, hidden=16, eval_every=0,
                                                  lr_theta=0.02, lr_phi=0.02))
        u = ds.users[0]
        for edge in u.graph.edges.tolist():
            assert leave_one_out_rank(params, u, edge) == 1
