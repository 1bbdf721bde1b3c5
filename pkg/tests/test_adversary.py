import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chisquare

from graphveil.adversary import (
    ADV_FEATURE_NAMES,
    adv_features,
    candidates,
    compare_adv_features,
    compare_distributions,
    evaluate_held_out,
    random_opcode_baseline,
    report_from_confidences,
    train_on_features,
)
from graphveil.graph import validate
from graphveil.shapes import shapes_ok
from graphveil.topo import Topology


class TestClassifier:
    def test_separable_toy(self):
        rng = np.random.default_rng(0)
        x = np.vstack([rng.normal(-2, 0.5, (50, 3)), rng.normal(2, 0.5, (50, 3))])
        y = np.r_[np.zeros(50), np.ones(50)]
        m = train_on_features(x, y)
        assert np.mean((m.confidence_from_features(x) > 0.5) == y) == 1.0

    def test_flipped_labels_negate_weights(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(80, 4))
        y = (x[:, 0] + 0.3 * rng.normal(size=80) > 0).astype(float)
        a, b = train_on_features(x, y), train_on_features(x, 1 - y)
        assert np.allclose(a.weights, -b.weights, atol=1e-12)
        assert a.bias == pytest.approx(-b.bias, abs=1e-12)

    def test_deterministic(self):
        x = np.random.default_rng(2).normal(size=(30, 5))
        y = (x[:, 1] > 0).astype(float)
        assert np.array_equal(train_on_features(x, y).weights, train_on_features(x, y).weights)

    def test_features_have_fixed_width(self, subgraph_pool):
        assert adv_features(subgraph_pool[0].graph).shape == (len(ADV_FEATURE_NAMES),)


class TestCandidates:
    @pytest.mark.parametrize(
        "beta,n,want", [(0.451, 10, 61_194_460_969), (0.346, 11, 4_301_155_180_508)]
    )
    def test_reported_values(self, beta, n, want):
        assert candidates(beta, 20, n) == pytest.approx(want, rel=0.005)

    def test_endpoints(self):
        assert candidates(0.0, 20, 10) == 21**10
        assert candidates(1.0, 20, 10) == 1
        assert candidates(Fraction(1, 2), 2, 3) == 8

    @given(st.fractions(0, 1), st.fractions(0, 1), st.integers(1, 30), st.integers(1, 12))
    def test_monotone_in_specificity(self, a, b, k, n):
        lo, hi = min(a, b), max(a, b)
        assert candidates(hi, k, n) <= candidates(lo, k, n)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            candidates(1.5, 2, 2)


class TestReport:
    def test_threshold_clears_every_real(self):
        r = report_from_confidences([0.1, 0.3, 0.2], [0.9, 0.25, 0.5, 0.31], k=4, n=2)
        assert r.sensitivity == 1.0
        assert r.min_gamma == pytest.approx(0.3)
        assert r.specificity == 0.75  # 0.9, 0.5 and 0.31 caught
        assert r.candidates == candidates(Fraction(3, 4), 4, 2) == 4

    def test_json(self):
        r = report_from_confidences([0.2], [0.7], k=3, n=5, name="m")
        doc = json.loads(json.dumps(r.to_json()))
        assert doc["candidates"] == str(r.candidates) and doc["protected_model"] == "m"

    def test_held_out_model_is_not_trained_on(self, subgraph_pool):
        graphs = [e.graph for e in subgraph_pool]
        samples = {"a": (graphs[:10], graphs[10:20]), "b": (graphs[20:30], graphs[30:40])}
        r = evaluate_held_out(samples, "b", k=3, n=2)
        assert r.protected_model == "b" and 0 <= r.specificity <= 1


class TestDistributions:
    def test_real_vs_real_rarely_flagged(self, subgraph_pool):
        graphs = [e.graph for e in subgraph_pool]
        rng = np.random.default_rng(0)
        clean = 0
        for _ in range(100):
            idx = rng.permutation(len(graphs))
            half = len(graphs) // 2
            rep = compare_distributions([graphs[i] for i in idx[:half]], [graphs[i] for i in idx[half:]])
            clean += not rep.flagged
        assert clean >= 95

    def test_node_count_shift_flagged(self):
        rng = np.random.default_rng(1)
        a = np.column_stack([rng.uniform(1, 3, 60), rng.uniform(0, 1, 60), rng.integers(2, 6, 60), rng.integers(8, 16, 60)])
        b = a.copy()
        b[:, 3] += 10
        assert compare_distributions(a, b).flagged == ["node_count"]

    def test_too_few_samples(self, subgraph_pool):
        with pytest.raises(ValueError):
            compare_distributions([subgraph_pool[0].graph], [subgraph_pool[1].graph])


class TestBaseline:
    def test_two_input_nodes_uniform_over_binary_ops(self):
        t = Topology(3, ((0, 2), (1, 2)))
        gs = random_opcode_baseline([t] * 10_000, seed=0)
        names = ["add", "mul", "concat", "matmul"]
        counts = [sum(g.opcode(2).name == n for g in gs) for n in names]
        assert sum(counts) == 10_000
        assert chisquare(counts).pvalue > 0.001

    def test_arity_respected_but_shapes_often_fail(self, topo_model):
        from graphveil.topo import induce_orientation, sample_topologies

        topos = [induce_orientation(u) for u in sample_topologies(topo_model, 300, 0).graphs]
        gs = random_opcode_baseline(topos, seed=1)
        assert not any(v.kind == "arity" for g in gs for v in validate(g))
        assert np.mean([not shapes_ok(g) for g in gs]) > 0.5

    def test_over_wide_node_skipped(self):
        star = Topology(6, tuple((i, 5) for i in range(5)))
        assert random_opcode_baseline([star, Topology(2, ((0, 1),))]).__len__() == 1

    def test_opcode_features_expose_baseline(self, subgraph_pool, topo_model):
        from graphveil.topo import induce_orientation, sample_topologies

        topos = [induce_orientation(u) for u in sample_topologies(topo_model, 200, 0).graphs]
        flagged = [c.feature for c in compare_adv_features([e.graph for e in subgraph_pool], random_opcode_baseline(topos)) if c.flagged]
        assert any(f.startswith(("hist_", "bigram_")) for f in flagged)
