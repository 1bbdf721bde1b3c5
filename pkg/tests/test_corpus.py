import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphveil.corpus import (
    Corpus,
    CorpusSpec,
    GraphBuilder,
    extract_subgraph_pool,
    generate_corpus,
    load_corpus,
    parts_for_size,
    save_corpus,
)
from graphveil.density import DegenerateFeature, DensityModel, fit_density, fit_density_features
from graphveil.errors import EmptyCorpus
from graphveil.partition import PartitionConfig, extract_subgraphs, partition_balanced
from graphveil.graph import serialize, validate
from graphveil.shapes import propagate_shapes


class TestGenerate:
    def test_chain_template_unrolled(self):
        c = generate_corpus(CorpusSpec(("chain_cnn",), 1, (3, 3), seed=0))
        (_, g), = c.graphs
        names = [g.opcode(v).name for v in g.topological_order()]
        body = [n for n in names if n != "input"]
        assert body == ["conv2d", "relu"] * 3 + ["globalavgpool", "matmul", "output"]
        assert names.count("input") == 2  # data plus the classifier weight

    def test_same_seed_same_bytes(self, tmp_path):
        spec = CorpusSpec(models_per_family=1, seed=3)
        a, b = tmp_path / "a", tmp_path / "b"
        save_corpus(generate_corpus(spec), a)
        save_corpus(generate_corpus(spec), b)
        files = sorted(p.name for p in a.iterdir())
        assert files == sorted(p.name for p in b.iterdir())
        assert all((a / f).read_bytes() == (b / f).read_bytes() for f in files)

    def test_different_seeds_differ(self):
        x = generate_corpus(CorpusSpec(("resnet_like",), 1, (4, 4), seed=0)).graphs[0][1]
        y = generate_corpus(CorpusSpec(("resnet_like",), 1, (4, 4), seed=1)).graphs[0][1]
        assert serialize(x) != serialize(y)

    def test_resnet_models_validate(self):
        c = generate_corpus(CorpusSpec(("resnet_like",), 5, (4, 8), seed=2))
        assert len(c.graphs) == 5
        for _, g in c.graphs:
            assert validate(g) == []
            propagate_shapes(g)

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from(("chain_cnn", "inception_like", "se_like", "transformer_like")))
    def test_every_family_validates(self, seed, family):
        (_, g), = generate_corpus(CorpusSpec((family,), 1, (2, 4), seed)).graphs
        assert validate(g) == []
        propagate_shapes(g)

    def test_bad_specs(self):
        with pytest.raises(ValueError):
            CorpusSpec(depth_range=(5, 3))
        with pytest.raises(ValueError):
            CorpusSpec(models_per_family=0)
        with pytest.raises(ValueError):
            CorpusSpec(families=("vgg",))

    def test_save_load_round_trip(self, tmp_path, corpus):
        save_corpus(corpus, tmp_path)
        back = load_corpus(tmp_path)
        assert back.names() == corpus.names()
        assert all(back.get(n) == corpus.get(n) for n in corpus.names())

    def test_load_external_directory(self, tmp_path, corpus):
        name = corpus.names()[0]
        (tmp_path / "mine.json").write_text(serialize(corpus.get(name)))
        back = load_corpus(tmp_path)
        assert back.names() == ["mine"] and back.provenance == "external"


def _graph_of_size(n_blocks: int):
    b = GraphBuilder()
    x = b.input(1, 4)
    for _ in range(n_blocks):
        x = b.add("relu", b.add("batchnorm", x))
    b.output(x)
    return b.build()


class TestPool:
    def test_covers_every_node_once(self):
        g = _graph_of_size(15)
        assert len(g.nodes) == 32
        pool = extract_subgraph_pool(Corpus([("g", g)]), (8, 16))
        assert 2 <= len(pool) <= 4
        # rebuild the partition the pool used and audit it
        part = partition_balanced(g, PartitionConfig(len(pool), 64, 0))
        members = sorted(v for ids in part.parts() for v in ids)
        assert members == sorted(n.id for n in g.nodes)
        subs, binding = extract_subgraphs(g, part)
        assert [e.graph for e in pool] == subs
        boundary = len(binding.records) + sum(binding.part_output_counts) - len(g.graph_outputs)
        assert sum(len(s.nodes) for s in subs) == 32 + boundary
        assert {e.source for e in pool} == {"g"}

    def test_chain_parts_within_bounds(self):
        c = generate_corpus(CorpusSpec(("chain_cnn",), 1, (3, 3), seed=0))
        pool = extract_subgraph_pool(c, (8, 16))
        assert all(2 <= len(e.graph.nodes) <= 16 for e in pool)

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpus):
            extract_subgraph_pool(Corpus([]))

    def test_size_range_limits(self, corpus):
        with pytest.raises(ValueError):
            extract_subgraph_pool(corpus, (1, 16))
        with pytest.raises(ValueError):
            extract_subgraph_pool(corpus, (8, 65))

    def test_parts_are_valid_graphs(self, subgraph_pool):
        for e in subgraph_pool:
            assert validate(e.graph) == []
            propagate_shapes(e.graph)

    @given(st.integers(1, 400), st.integers(2, 32), st.integers(0, 32))
    def test_parts_for_size_hits_the_range_when_possible(self, n, lo, extra):
        hi = lo + extra
        parts = parts_for_size(n, (lo, hi))
        assert 1 <= parts <= n
        if max(1, math.ceil(n / hi)) <= n // lo:
            assert lo <= n / parts <= hi


class TestDensity:
    def test_identical_pool_is_sharply_peaked(self, corpus):
        g = corpus.graphs[0][1]
        with pytest.warns(DegenerateFeature):
            d = fit_density([g] * 25)
        peak = d(d.data[0])
        sigma = d.bandwidth
        assert d(d.data[0] + 3 * sigma) <= 1e-3 * peak
        # closed form for one kernel: exp(-|z|^2 / 2)
        assert d(d.data[0] + 3 * sigma) / peak == pytest.approx(math.exp(-0.5 * 4 * 9))

    def test_integrates_to_one(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(40, 4)) * [0.3, 0.05, 2.0, 5.0] + [2, 0.1, 6, 14]
        d = fit_density_features(data)
        lo = data.min(axis=0) - 6 * d.bandwidth
        hi = data.max(axis=0) + 6 * d.bandwidth
        pts = rng.uniform(lo, hi, size=(100_000, 4))
        estimate = np.mean(d(pts)) * np.prod(hi - lo)
        assert estimate == pytest.approx(1.0, rel=0.05)

    def test_mean_beats_far_tail(self, subgraph_pool):
        d = fit_density([e.graph for e in subgraph_pool])
        mean, std = d.data.mean(axis=0), d.data.std(axis=0)
        assert d(mean) >= d(mean + 10 * std)
        assert d(mean + 10 * std) > 0

    def test_scott_bandwidth(self):
        data = np.arange(80, dtype=float).reshape(20, 4)
        d = fit_density_features(data)
        assert np.allclose(d.bandwidth, 20 ** (-1 / 8) * data.std(axis=0))

    def test_small_pool_rejected(self, subgraph_pool):
        with pytest.raises(ValueError):
            fit_density([e.graph for e in subgraph_pool[:5]])

    def test_json_round_trip(self, tmp_path, subgraph_pool):
        d = fit_density([e.graph for e in subgraph_pool])
        d.save(tmp_path / "d.json")
        back = DensityModel.load(tmp_path / "d.json")
        assert np.array_equal(back.data, d.data) and np.array_equal(back.bandwidth, d.bandwidth)

    @settings(max_examples=20, deadline=None)
    @given(st.randoms(use_true_random=False))
    def test_fit_ignores_order(self, rnd):
        rows = [list(r) for r in np.random.default_rng(1).normal(size=(30, 4))]
        shuffled = rows[:]
        rnd.shuffle(shuffled)
        a, b = fit_density_features(rows), fit_density_features(shuffled)
        assert np.array_equal(a.data, b.data) and np.array_equal(a.bandwidth, b.bandwidth)

    def test_batch_matches_pointwise(self):
        data = np.random.default_rng(2).normal(size=(50, 4))
        d = fit_density_features(data)
        pts = data[:7] + 0.1
        assert np.allclose(d.log_density(pts), [d.log_density(p) for p in pts])

    def test_chunked_evaluation_agrees(self, monkeypatch):
        import graphveil.density as density

        data = np.random.default_rng(3).normal(size=(30, 4))
        d = fit_density_features(data)
        whole = d.log_density(data)
        monkeypatch.setattr(density, "CHUNK_CELLS", 70)  # two points per chunk
        assert np.array_equal(d.log_density(data), whole)
