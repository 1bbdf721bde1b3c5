"""Synthetic model corpus and the subgraph pool derived from it.

The five families stand in for model-zoo architectures: plain CNN chains,
residual networks, inception-style branch/concat networks, residual
networks with sigmoid gating, and transformer encoders. Weight matrices of
``matmul`` layers appear as extra graph inputs, the way ONNX exposes
initializers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from graphveil.errors import EmptyCorpus, InvalidGraph
from graphveil.graph import Edge, Node, OpGraph, Opcode, load_graph, op, save_graph, validate
from graphveil.partition import PartitionConfig, extract_subgraphs, partition_balanced
from graphveil.shapes import infer, propagate_shapes

log = logging.getLogger(__name__)

FAMILIES = ("chain_cnn", "resnet_like", "inception_like", "se_like", "transformer_like")
CHANNELS = (8, 16, 32)
NUM_CLASSES = 10


@dataclass(frozen=True)
class CorpusSpec:
    families: tuple[str, ...] = FAMILIES
    models_per_family: int = 2
    depth_range: tuple[int, int] = (3, 6)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.depth_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad depth range {self.depth_range}")
        if self.models_per_family < 1:
            raise ValueError("models_per_family must be >= 1")
        unknown = set(self.families) - set(FAMILIES)
        if unknown:
            raise ValueError(f"unknown families {sorted(unknown)}")


@dataclass
class Corpus:
    graphs: list[tuple[str, OpGraph]]
    provenance: CorpusSpec | str = "external"

    def names(self) -> list[str]:
        return [name for name, _ in self.graphs]

    def get(self, name: str) -> OpGraph:
        for n, g in self.graphs:
            if n == name:
                return g
        raise KeyError(name)


class GraphBuilder:
    """Incremental OpGraph construction with eager shape checking."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.edges: list[Edge] = []
        self.inputs: list[tuple[int, tuple]] = []
        self.outputs: list[tuple[int, int]] = []
        self.shape: dict[int, tuple] = {}

    def _new(self, o: Opcode) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, o))
        return nid

    def input(self, *shape: int) -> int:
        nid = self._new(Opcode("input"))
        self.inputs.append((nid, tuple(shape)))
        self.shape[nid] = tuple(shape)
        return nid

    def add(self, o: Opcode | str, *srcs: int, **attrs: int) -> int:
        if isinstance(o, str):
            o = op(o, **attrs)
        out_shape = infer(o, [self.shape[s] for s in srcs])
        nid = self._new(o)
        for port, s in enumerate(srcs):
            self.edges.append(Edge(s, 0, nid, port))
        self.shape[nid] = out_shape
        return nid

    def output(self, src: int) -> int:
        nid = self.add("output", src)
        self.outputs.append((nid, 0))
        return nid

    def conv(self, x: int, cout: int, kernel: int = 3, stride: int = 1) -> int:
        return self.add("conv2d", x, cin=self.shape[x][1], cout=cout, kernel=kernel, stride=stride)

    def classifier(self, x: int) -> int:
        """Feature vector (1, F) -> matmul with a weight input -> output."""
        w = self.input(self.shape[x][-1], NUM_CLASSES)
        return self.output(self.add("matmul", x, w))

    def build(self) -> OpGraph:
        return OpGraph(tuple(self.nodes), tuple(self.edges), tuple(self.inputs), tuple(self.outputs))


def _chain_cnn(rng: np.random.Generator, depth: int) -> OpGraph:
    kernels = [int(rng.choice((1, 3, 3, 5))) for _ in range(depth)]
    size = 6 + sum(k - 1 for k in kernels)
    b = GraphBuilder()
    x = b.input(1, 3, size, size)
    for k in kernels:
        x = b.add("relu", b.conv(x, int(rng.choice(CHANNELS)), kernel=k))
    b.classifier(b.add("globalavgpool", x))
    return b.build()


def _residual_block(b: GraphBuilder, x: int, rng: np.random.Generator, gated: bool) -> int:
    c = b.shape[x][1]
    spatial = b.shape[x][2]
    if not gated and spatial >= 10 and rng.random() < 0.35:
        # projection shortcut: two 3x3 convs against one 5x5
        c2 = int(rng.choice(CHANNELS))
        y = b.add("relu", b.add("batchnorm", b.conv(x, c2, 3)))
        y = b.add("batchnorm", b.conv(y, c2, 3))
        skip = b.add("batchnorm", b.conv(x, c2, 5))
    else:
        y = b.add("relu", b.add("batchnorm", b.conv(x, c, 1)))
        y = b.add("batchnorm", b.conv(y, c, 1))
        skip = b.add("identity", x) if rng.random() < 0.3 else x
        if gated:
            # conv gate, or a swish-style self gate
            gate = b.add("sigmoid", b.conv(y, c, 1) if rng.random() < 0.5 else y)
            y = b.add("mul", y, gate)
    return b.add("relu", b.add("add", y, skip))


def _resnet(rng: np.random.Generator, depth: int, gated: bool) -> OpGraph:
    b = GraphBuilder()
    size = 8 + 2 + 4 * depth
    x = b.input(1, 3, size, size)
    x = b.add("relu", b.add("batchnorm", b.conv(x, int(rng.choice(CHANNELS)), 3)))
    if rng.random() < 0.5:
        x = b.add("maxpool2d", x, kernel=3, stride=1)
    for _ in range(depth):
        x = _residual_block(b, x, rng, gated)
    b.classifier(b.add("globalavgpool", x))
    return b.build()


def _inception(rng: np.random.Generator, depth: int) -> OpGraph:
    b = GraphBuilder()
    size = 8 + 2 + 2 * depth
    x = b.input(1, 3, size, size)
    x = b.add("relu", b.conv(x, int(rng.choice(CHANNELS)), 3))
    for _ in range(depth):
        kinds = rng.choice(4, size=int(rng.integers(2, 5)), replace=False)
        branches = []
        for kind in sorted(int(k) for k in kinds):
            cb = int(rng.choice((8, 16)))
            if kind == 0:
                y = b.add("relu", b.conv(x, cb, 3))
            elif kind == 1:
                y = b.add("relu", b.conv(b.add("relu", b.conv(x, cb, 1)), cb, 3))
            elif kind == 2:
                y = b.add("relu", b.conv(b.add("maxpool2d", x, kernel=3, stride=1), cb, 1))
            else:
                y = b.add("relu", b.conv(b.conv(x, cb, 1), cb, 3))
            branches.append(y)
        x = b.add("concat", *branches, axis=1)
        if b.shape[x][1] > 32:
            x = b.add("relu", b.add("batchnorm", b.conv(x, 32, 1)))
    if rng.random() < 0.5:
        feat = b.add("globalavgpool", x)
    else:
        feat = b.add("flatten", b.add("avgpool2d", x, kernel=int(rng.choice((3, 5))), stride=2))
    b.classifier(feat)
    return b.build()


def _transformer(rng: np.random.Generator, depth: int) -> OpGraph:
    b = GraphBuilder()
    tokens, dim = 8, int(rng.choice((16, 32)))
    hidden = 2 * dim
    x = b.input(1, tokens, dim)

    def dense(v: int, width: int) -> int:
        return b.add("matmul", v, b.input(b.shape[v][-1], width))

    for _ in range(depth):
        q, k, v = dense(x, dim), dense(x, dim), dense(x, dim)
        scores = b.add("matmul", q, b.add("transpose", k))
        attn = b.add("matmul", b.add("softmax", scores, axis=-1), v)
        x = b.add("batchnorm", b.add("add", dense(attn, dim), x))
        ff = dense(b.add("relu", dense(x, hidden)), dim)
        x = b.add("batchnorm", b.add("add", ff, x))
    if rng.random() < 0.5:
        b.classifier(b.add("flatten", x))
    else:
        b.classifier(b.add("reshape", x))
    return b.build()


def build_model(family: str, rng: np.random.Generator, depth: int) -> OpGraph:
    if family == "chain_cnn":
        return _chain_cnn(rng, depth)
    if family == "resnet_like":
        return _resnet(rng, depth, gated=False)
    if family == "se_like":
        return _resnet(rng, depth, gated=True)
    if family == "inception_like":
        return _inception(rng, depth)
    if family == "transformer_like":
        return _transformer(rng, depth)
    raise ValueError(f"unknown family {family!r}")


def generate_corpus(spec: CorpusSpec) -> Corpus:
    graphs = []
    lo, hi = spec.depth_range
    for fam in spec.families:
        fam_index = FAMILIES.index(fam)
        for i in range(spec.models_per_family):
            rng = np.random.default_rng([spec.seed, fam_index, i])
            depth = int(rng.integers(lo, hi + 1))
            graphs.append((f"{fam}_{i}", build_model(fam, rng, depth)))
    return Corpus(graphs, spec)


def _check(name: str, g: OpGraph) -> OpGraph:
    problems = validate(g)
    if problems:
        raise InvalidGraph(problems)
    propagate_shapes(g)
    return g


def save_corpus(c: Corpus, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, g in c.graphs:
        save_graph(g, path / f"{name}.json")
    prov = asdict(c.provenance) if isinstance(c.provenance, CorpusSpec) else c.provenance
    index = {"provenance": prov, "models": [{"name": n, "file": f"{n}.json"} for n in c.names()]}
    (path / "corpus.json").write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")


def load_corpus(path) -> Corpus:
    """Read a corpus directory; without a ``corpus.json`` index every
    ``*.json`` file is taken as an externally produced graph."""
    path = Path(path)
    index = path / "corpus.json"
    if index.exists():
        doc = json.loads(index.read_text())
        prov = doc["provenance"]
        if isinstance(prov, dict):
            prov = CorpusSpec(
                tuple(prov["families"]), prov["models_per_family"], tuple(prov["depth_range"]), prov["seed"]
            )
        graphs = [(m["name"], _check(m["name"], load_graph(path / m["file"]))) for m in doc["models"]]
        return Corpus(graphs, prov)
    files = sorted(p for p in path.glob("*.json"))
    return Corpus([(p.stem, _check(p.stem, load_graph(p))) for p in files], "external")


# --------------------------------------------------------------------------
# subgraph pool


@dataclass(frozen=True)
class PoolEntry:
    source: str
    part: int
    graph: OpGraph = field(compare=False)


def parts_for_size(num_nodes: int, size_range: tuple[int, int]) -> int:
    """Partition count whose mean part size falls in ``size_range`` (closest
    to its midpoint); 1 when the graph is smaller than the range."""
    lo, hi = size_range
    mid = (lo + hi) / 2
    first = max(1, -(-num_nodes // hi))
    last = max(first, num_nodes // lo)
    return min(range(first, last + 1), key=lambda n: (abs(num_nodes / n - mid), n))


def extract_subgraph_pool(
    c: Corpus, size_range: tuple[int, int] = (8, 16), seed: int = 0, trials: int = 64
) -> list[PoolEntry]:
    lo, hi = size_range
    if not 2 <= lo <= hi <= 64:
        raise ValueError(f"size range {size_range} must lie within [2, 64]")
    if not c.graphs:
        raise EmptyCorpus("corpus has no graphs")
    pool = []
    for gi, (name, g) in enumerate(c.graphs):
        n = parts_for_size(len(g.nodes), size_range)
        p = partition_balanced(g, PartitionConfig(n, trials, seed + 1000 * gi))
        subs, _ = extract_subgraphs(g, p)
        pool.extend(PoolEntry(name, i, s) for i, s in enumerate(subs))
    return pool
