"""Obfuscation of a protected graph into buckets of look-alike subgraphs,
and reassembly of the optimized real subgraphs afterwards.

The bundle is what the untrusted optimizer sees. The manifest stays with the
owner: it names the real item of every bucket and records how the parts
connect.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from graphveil.density import DensityModel, fit_density
from graphveil.errors import (
    GraphVeilError,
    InsufficientSolutions,
    InterfaceChanged,
    InvalidGraph,
    MissingItem,
    NoSolution,
    SubgraphError,
    Unsatisfiable,
)
from graphveil.features import compute_features
from graphveil.graph import Edge, Node, OpGraph, canonical_form, canonicalize, load_graph, save_graph, validate
from graphveil.partition import BoundaryBinding, PartitionConfig, extract_subgraphs, partition_balanced
from graphveil.populate import EnumConfig, NGramModel, perturb_popular, populate_topology
from graphveil.shapes import propagate_shapes
from graphveil.topo import (
    SamplingConfig,
    TopoModel,
    Topology,
    TopologyPool,
    default_beta,
    draw_box_samples,
    induce_orientation,
    sample_topologies,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


def search_space_size(n: int, k: int) -> int:
    """Number of ways to pick one item from each of n buckets of k+1."""
    if n < 0 or k < 0:
        raise ValueError("n and k must be non-negative")
    return (k + 1) ** n


def subgraph_seed(seed: int, index: int) -> int:
    """Seed for partition ``index``; independent of how many partitions
    come before it, so per-part work can run in any order."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


# --------------------------------------------------------------------------
# bundle and manifest


@dataclass
class Bucket:
    index: int
    items: list[tuple[str, OpGraph]]

    def ids(self) -> list[str]:
        return [i for i, _ in self.items]


@dataclass
class ObfuscatedBundle:
    buckets: list[Bucket]
    format_version: int = FORMAT_VERSION

    def item(self, bucket: int, item_id: str) -> OpGraph:
        if 0 <= bucket < len(self.buckets):
            for iid, g in self.buckets[bucket].items:
                if iid == item_id:
                    return g
        raise MissingItem(item_id)

    def all_items(self) -> list[tuple[int, str, OpGraph]]:
        return [(b.index, iid, g) for b in self.buckets for iid, g in b.items]

    def map(self, fn) -> "ObfuscatedBundle":
        """Apply ``fn`` to every item, keeping ids and order."""
        return ObfuscatedBundle([Bucket(b.index, [(i, fn(g)) for i, g in b.items]) for b in self.buckets], self.format_version)

    def save(self, path) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for b in self.buckets:
            d = path / f"bucket_{b.index}"
            d.mkdir(exist_ok=True)
            for iid, g in b.items:
                save_graph(g, d / f"{iid}.json")
        index = {"format_version": self.format_version, "buckets": [b.ids() for b in self.buckets]}
        (path / "bundle.json").write_text(json.dumps(index, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "ObfuscatedBundle":
        path = Path(path)
        index_file = path / "bundle.json"
        if not index_file.exists():
            raise MissingItem(str(index_file), f"bundle index not found: {index_file}")
        index = json.loads(index_file.read_text())
        buckets = []
        for i, ids in enumerate(index["buckets"]):
            items = []
            for iid in ids:
                f = path / f"bucket_{i}" / f"{iid}.json"
                if f.exists():  # absent items surface as MissingItem on use
                    items.append((iid, load_graph(f)))
            buckets.append(Bucket(i, items))
        return cls(buckets, index["format_version"])


@dataclass
class Manifest:
    seed: int
    n: int
    k: int
    real_map: dict[int, str]
    binding: BoundaryBinding
    original_interface: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "n": self.n,
            "k": self.k,
            "real_map": {str(i): v for i, v in sorted(self.real_map.items())},
            "binding": self.binding.to_json(),
            "original_interface": self.original_interface,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Manifest":
        return cls(
            doc["seed"], doc["n"], doc["k"],
            {int(i): v for i, v in doc["real_map"].items()},
            BoundaryBinding.from_json(doc["binding"]),
            doc["original_interface"],
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise MissingItem(str(path), f"manifest not found: {path}")
        return cls.from_json(json.loads(path.read_text()))


# --------------------------------------------------------------------------
# sentinel generation


@dataclass
class ObfuscationModels:
    """Everything sentinel generation needs. ``pool`` is sampled from ``topo``
    when absent; ``density`` is fitted on the pool when absent."""

    ngram: NGramModel
    topo: TopoModel | None = None
    density: DensityModel | None = None
    pool: TopologyPool | None = None
    beta: tuple[float, ...] | None = None
    pool_size: int = 2000

    def ready(self, seed: int) -> "ObfuscationModels":
        pool = self.pool
        if pool is None:
            if self.topo is None:
                raise ValueError("need a topology model or a topology pool")
            pool = sample_topologies(self.topo, self.pool_size, seed)
        density = self.density or fit_density(pool.graphs, min_size=1)
        beta = self.beta or default_beta(density.data)
        return ObfuscationModels(self.ngram, self.topo, density, pool, tuple(beta), self.pool_size)


POPULATE_ERRORS = (Unsatisfiable, NoSolution, InsufficientSolutions)


class _SentinelSet:
    def __init__(self, real: OpGraph, k: int):
        self.k = k
        self.graphs: list[OpGraph] = []
        self.sources: list[str] = []
        self.seen = {canonical_form(real)}

    def full(self) -> bool:
        return len(self.graphs) >= self.k

    def add(self, g: OpGraph, source: str) -> None:
        g = canonicalize(g)
        form = canonical_form(g)
        if form not in self.seen and not self.full():
            self.seen.add(form)
            self.graphs.append(g)
            self.sources.append(source)


def _nearest(pool: TopologyPool, real: OpGraph) -> list[int]:
    """Pool indices by standardized L1 feature distance to ``real``."""
    feats = pool.features()
    scale = np.where(feats.std(axis=0) > 0, feats.std(axis=0), 1.0)
    dist = np.abs((feats - compute_features(real).as_array()) / scale).sum(axis=1)
    return [int(i) for i in np.argsort(dist, kind="stable")]


def similar_topologies(real: OpGraph, count: int, models: ObfuscationModels, seed: int) -> list[Topology]:
    """The oriented topologies sentinel generation would start from: sampler
    acceptances first, then nearest pool members. Lets a baseline share the
    pipeline's topologies and differ only in how opcodes are assigned."""
    pool = models.pool
    box = draw_box_samples(real, pool, models.density, SamplingConfig(models.beta, len(pool), count, seed))
    picked = list(box.accepted[:count])
    chosen = set(picked)
    for idx in _nearest(pool, real):
        if len(picked) >= count:
            break
        if idx not in chosen:
            picked.append(idx)
            chosen.add(idx)
    return [induce_orientation(pool.graphs[i]) for i in picked]


def make_sentinels(real: OpGraph, k: int, models: ObfuscationModels, seed: int) -> tuple[list[OpGraph], list[str]]:
    """``k`` sentinels for one real subgraph, with the mechanism that made each.

    Pool topologies accepted by the importance sampler come first. Small
    perturbations of the real subgraph top the set up, then the pool
    topologies nearest in feature space. Tiny subgraphs admit few distinct
    look-alikes, so as a last resort sentinels repeat.
    """
    rng = np.random.default_rng(seed)
    out = _SentinelSet(real, k)
    pool = models.pool
    box = draw_box_samples(real, pool, models.density, SamplingConfig(models.beta, len(pool), k, seed))
    tried: set[int] = set()

    def from_pool(idx: int, source: str) -> None:
        tried.add(idx)
        try:
            g = populate_topology(induce_orientation(pool.graphs[idx]), models.ngram, EnumConfig(seed=seed + idx), 1)[0]
        except POPULATE_ERRORS:
            return
        out.add(g, source)

    for idx in box.accepted:
        if out.full():
            break
        from_pool(idx, "pool")

    max_delta = min(3, len(real.nodes) // 4)
    attempts = 0
    while not out.full() and max_delta >= 1 and attempts < 3 * k:
        attempts += 1
        delta = int(rng.integers(1, max_delta + 1))
        try:
            out.add(perturb_popular(real, delta, models.ngram, seed=int(rng.integers(2**31))), "perturb")
        except NoSolution:
            continue

    if not out.full():
        for idx in _nearest(pool, real)[: 20 * k]:
            if out.full():
                break
            if int(idx) not in tried:
                from_pool(int(idx), "nearest")

    if not out.graphs:
        raise NoSolution("no sentinel could be generated")
    base = len(out.graphs)
    while len(out.graphs) < k:
        out.graphs.append(out.graphs[len(out.graphs) % base])
        out.sources.append("repeat")
    return out.graphs, out.sources


# --------------------------------------------------------------------------
# obfuscate / deobfuscate


@dataclass
class ObfuscationResult:
    bundle: ObfuscatedBundle
    manifest: Manifest
    sources: list[list[str]]  # per bucket, per sentinel: which mechanism made it


def obfuscate_detailed(
    g: OpGraph, n: int, k: int, models: ObfuscationModels, seed: int = 0, trials: int = 64
) -> ObfuscationResult:
    problems = validate(g)
    if problems:
        raise InvalidGraph(problems)
    propagate_shapes(g)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 1 <= n <= len(g.nodes):
        raise ValueError(f"n must be in 1..{len(g.nodes)}")
    models = models.ready(seed)
    part = partition_balanced(g, PartitionConfig(n, trials, seed))
    subs, binding = extract_subgraphs(g, part)
    buckets, real_map, sources = [], {}, []
    for i, sub in enumerate(subs):
        s = subgraph_seed(seed, i)
        try:
            sentinels, why = make_sentinels(sub, k, models, s)
        except GraphVeilError as exc:
            raise SubgraphError(i, exc) from exc
        rng = np.random.default_rng([s, 2])
        ids = [rng.bytes(16).hex() for _ in range(k + 1)]
        graphs = [sub] + sentinels
        order = rng.permutation(k + 1)
        buckets.append(Bucket(i, [(ids[j], graphs[j]) for j in order]))
        real_map[i] = ids[0]
        sources.append(why)
        log.debug("bucket %d: %s", i, why)
    interface = {
        "inputs": [[nid, list(shape)] for nid, shape in g.graph_inputs],
        "outputs": [[nid, port] for nid, port in g.graph_outputs],
    }
    manifest = Manifest(seed, n, k, real_map, binding, interface)
    return ObfuscationResult(ObfuscatedBundle(buckets), manifest, sources)


def obfuscate(g: OpGraph, n: int, k: int, models: ObfuscationModels, seed: int = 0) -> tuple[ObfuscatedBundle, Manifest]:
    r = obfuscate_detailed(g, n, k, models, seed)
    return r.bundle, r.manifest


def reassemble(parts: list[OpGraph], binding: BoundaryBinding) -> OpGraph:
    """Stitch subgraphs back together along ``binding``.

    Each boundary input is replaced by whatever feeds the matching boundary
    output on the producer side; both boundary nodes disappear.
    """
    for i, p in enumerate(parts):
        if p.input_shapes() != list(binding.part_inputs[i]) or len(p.graph_outputs) != binding.part_output_counts[i]:
            raise InterfaceChanged(
                i,
                f"(inputs {p.input_shapes()} vs {list(binding.part_inputs[i])}, "
                f"outputs {len(p.graph_outputs)} vs {binding.part_output_counts[i]})",
            )
    new_id: dict[tuple[int, int], int] = {}
    for i, p in enumerate(parts):
        for node in p.nodes:
            new_id[(i, node.id)] = len(new_id)

    def in_node(part: int, slot: int) -> int:
        return parts[part].graph_inputs[slot][0]

    def out_node(part: int, slot: int) -> int:
        return parts[part].graph_outputs[slot][0]

    # boundary input (part, node) -> producer-side (part, edge) feeding it
    feeds: dict[tuple[int, int], tuple[int, Edge]] = {}
    dropped: set[tuple[int, int]] = set()
    for r in binding.records:
        o = out_node(r.producer, r.producer_slot)
        (e,) = parts[r.producer].in_edges[o]
        feeds[(r.consumer, in_node(r.consumer, r.consumer_slot))] = (r.producer, e)
        dropped.add((r.producer, o))
    dropped |= set(feeds)
    kept_outputs = {(p, out_node(p, s)) for p, s in binding.outputs}
    if dropped & kept_outputs:
        raise InterfaceChanged(-1, "a graph output is also a boundary output")

    def source(part: int, nid: int, port: int) -> tuple[int, int]:
        seen = set()
        while (part, nid) in feeds:
            if (part, nid) in seen:
                raise InterfaceChanged(part, "boundary wiring forms a loop")
            seen.add((part, nid))
            part, e = feeds[(part, nid)]
            nid, port = e.src, e.src_port
        return new_id[(part, nid)], port

    nodes, edges = [], []
    for i, p in enumerate(parts):
        for node in p.nodes:
            if (i, node.id) not in dropped:
                nodes.append(Node(new_id[(i, node.id)], node.op))
        for e in p.edges:
            if (i, e.dst) in dropped:
                continue
            src, sp = source(i, e.src, e.src_port)
            edges.append(Edge(src, sp, new_id[(i, e.dst)], e.dst_port))
    gin = tuple((new_id[(p, in_node(p, s))], parts[p].graph_inputs[s][1]) for p, s in binding.inputs)
    gout = tuple((new_id[(p, out_node(p, s))], 0) for p, s in binding.outputs)
    return canonicalize(OpGraph(tuple(nodes), tuple(edges), gin, gout))


def deobfuscate(optimized: ObfuscatedBundle, m: Manifest) -> OpGraph:
    parts = [optimized.item(i, m.real_map[i]) for i in range(m.n)]
    g = reassemble(parts, m.binding)
    problems = validate(g)
    if problems:
        raise InvalidGraph(problems)
    return g
