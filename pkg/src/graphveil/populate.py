"""Operator population for sentinel topologies.

A backtracking search assigns a fully specified opcode to every node of a
DAG topology. Candidates obey arity, source/sink and shape rules, and are
tried in order of bigram likelihood so the first solutions found are the
plausible ones.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from graphveil.errors import InsufficientSolutions, NoSolution, Unsatisfiable
from graphveil.graph import ARITY, ATTR_KEYS, KERNELS, VOCABULARY, Edge, Node, Opcode, OpGraph, Shape, validate
from graphveil.shapes import try_infer
from graphveil.topo import Topology

PALETTE = (3, 8, 16, 32, 64, 128, 256)
STRIDES = (1, 2)
CANONICAL_4D: Shape = (1, 3, 32, 32)
CANONICAL_2D: Shape = (1, 128)
MAX_ARITY = max(hi for _, hi in ARITY.values())
# produced by optimizers, never by model authors
FUSED = frozenset({"fused_conv_relu", "fused_add_relu"})


def opcode_variants(name: str) -> list[Opcode]:
    """Every attribute setting of ``name`` within the fixed domains."""
    keys = ATTR_KEYS.get(name, ())
    if not keys:
        return [Opcode(name)]
    if name in ("conv2d", "fused_conv_relu"):
        return [
            Opcode.of(name, cin=ci, cout=co, kernel=k, stride=s)
            for ci, co, k, s in itertools.product(PALETTE, PALETTE, KERNELS, STRIDES)
        ]
    if name in ("maxpool2d", "avgpool2d"):
        return [Opcode.of(name, kernel=k, stride=s) for k, s in itertools.product(KERNELS, STRIDES)]
    if name == "concat":
        return [Opcode.of(name, axis=1)]
    if name == "softmax":
        return [Opcode.of(name, axis=-1)]
    raise AssertionError(name)


DEFAULT_VOCABULARY: tuple[Opcode, ...] = tuple(
    v for name in VOCABULARY if name not in FUSED for v in opcode_variants(name)
)


# --------------------------------------------------------------------------
# bigram model


@dataclass
class NGramModel:
    counts: np.ndarray  # (V, V), row = source opcode
    smoothing: float = 1.0
    vocabulary: tuple[str, ...] = VOCABULARY
    _table: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        v = len(self.vocabulary)
        logp = np.log(counts + self.smoothing) - np.log(counts.sum(axis=1, keepdims=True) + self.smoothing * v)
        self._table = {
            a: {b: float(logp[i, j]) for j, b in enumerate(self.vocabulary)} for i, a in enumerate(self.vocabulary)
        }

    def logp(self, src: str, dst: str) -> float:
        """log P(dst | src)."""
        return self._table[src][dst]

    def prob(self, src: str, dst: str) -> float:
        return math.exp(self._table[src][dst])

    def logprob(self, g: OpGraph) -> float:
        return sum(self.logp(g.opcode(e.src).name, g.opcode(e.dst).name) for e in g.edges)

    def to_json(self) -> dict:
        return {
            "vocabulary": list(self.vocabulary),
            "smoothing": self.smoothing,
            "counts": np.asarray(self.counts, dtype=int).tolist(),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "NGramModel":
        return cls(np.array(doc["counts"], dtype=float), doc["smoothing"], tuple(doc["vocabulary"]))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "NGramModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def fit_ngram(corpus, smoothing: float = 1.0) -> NGramModel:
    """Directed opcode bigram counts over every edge of every corpus graph."""
    graphs = [g for _, g in corpus.graphs] if hasattr(corpus, "graphs") else list(corpus)
    index = {name: i for i, name in enumerate(VOCABULARY)}
    counts = np.zeros((len(VOCABULARY), len(VOCABULARY)))
    for g in graphs:
        for e in g.edges:
            counts[index[g.opcode(e.src).name], index[g.opcode(e.dst).name]] += 1
    return NGramModel(counts, smoothing)


# --------------------------------------------------------------------------
# constraint problem


@dataclass(frozen=True)
class RuleSet:
    """A topology bound to per-node opcode domains and input shapes."""

    topology: Topology
    domains: tuple[tuple[Opcode, ...], ...]
    input_shapes: tuple[tuple[int, Shape], ...]
    ports: tuple[tuple[int, ...], ...]  # per node, its predecessors in input-port order

    def input_shape(self, v: int) -> Shape:
        return dict(self.input_shapes)[v]


def node_domain(indeg: int, outdeg: int, vocabulary: Iterable[Opcode]) -> list[Opcode]:
    """Opcodes whose arity admits ``indeg`` inputs; sinks must be outputs and
    outputs must be sinks."""
    out = []
    for v in vocabulary:
        lo, hi = ARITY[v.name]
        if lo <= indeg <= hi and (v.name == "output") == (outdeg == 0):
            out.append(v)
    return out


def generate_ruleset(
    topology: Topology,
    vocabulary: Sequence[Opcode] | None = None,
    input_shape: Shape = CANONICAL_4D,
    fixed: dict[int, Opcode] | None = None,
    input_shapes: dict[int, Shape] | None = None,
    ports: dict[int, Sequence[int]] | None = None,
) -> RuleSet:
    """Bind ``topology`` to candidate domains. ``fixed`` pins nodes to one
    opcode; ``input_shapes`` overrides the shared input shape per node;
    ``ports`` overrides the default input-port order (ascending source)."""
    if not topology.is_dag():
        raise ValueError("topology must be acyclic")
    vocab = DEFAULT_VOCABULARY if vocabulary is None else tuple(vocabulary)
    fixed = fixed or {}
    domains = []
    for v in range(topology.n):
        indeg, outdeg = topology.in_degree(v), topology.out_degree(v)
        if indeg > MAX_ARITY:
            raise Unsatisfiable(v, f"in-degree {indeg} exceeds every arity")
        if v in fixed:
            dom = node_domain(indeg, outdeg, [fixed[v]])
        else:
            dom = node_domain(indeg, outdeg, vocab)
        if not dom:
            raise Unsatisfiable(v, f"no opcode fits in-degree {indeg}, out-degree {outdeg}")
        domains.append(tuple(dom))
    shapes = dict(input_shapes or {})
    sources = [v for v in range(topology.n) if topology.in_degree(v) == 0]
    ins = tuple((v, tuple(shapes.get(v, input_shape))) for v in sources)
    ports = ports or {}
    order = []
    for v in range(topology.n):
        p = tuple(ports.get(v, topology.preds[v]))
        if sorted(p) != topology.preds[v]:
            raise ValueError(f"port order for node {v} does not match its predecessors")
        order.append(p)
    return RuleSet(topology, tuple(domains), ins, tuple(order))


@dataclass(frozen=True)
class EnumConfig:
    pct: float = 25.0
    max_solns: int = 256
    seed: int = 0
    max_steps: int = 200_000  # partial assignments tried before the search gives up

    def __post_init__(self):
        if not 0 < self.pct <= 100:
            raise ValueError("pct must be in (0, 100]")
        if self.max_solns < 1:
            raise ValueError("max_solns must be >= 1")


@dataclass(frozen=True)
class OpAssignment:
    ops: tuple[Opcode, ...]  # indexed by topology node
    logprob: float


def top_percentile(solns: list[OpAssignment], pct: float) -> list[OpAssignment]:
    """Best ``pct`` percent by logprob (at least one), sorted descending;
    solutions tied with the last one kept are kept too."""
    ranked = sorted(solns, key=lambda s: -s.logprob)  # stable: ties keep discovery order
    keep = max(1, math.ceil(len(ranked) * pct / 100))
    while keep < len(ranked) and ranked[keep].logprob == ranked[keep - 1].logprob:
        keep += 1
    return ranked[:keep]


def _search(rules: RuleSet, ngram: NGramModel, cfg: EnumConfig) -> list[OpAssignment]:
    topo = rules.topology
    order = topo.topological_order()
    preds = rules.ports
    in_shape = dict(rules.input_shapes)
    rng = np.random.default_rng(cfg.seed)
    # seeded tie order among same-named variants
    rank = [{dom[i]: r for r, i in enumerate(rng.permutation(len(dom)))} for dom in rules.domains]

    ops: list[Opcode | None] = [None] * topo.n
    shapes: list[Shape | None] = [None] * topo.n
    found: list[OpAssignment] = []
    blocked: set[tuple[Opcode, ...]] = set()
    steps = 0
    memo: dict[tuple, list] = {}
    # Feasibility of the unassigned suffix depends only on the shapes of the
    # assigned nodes it consumes, so a suffix that failed once fails again.
    position = {v: d for d, v in enumerate(order)}
    frontier = [
        [u for u in order[:d] if any(position[w] >= d for w in topo.succs[u])] for d in range(len(order) + 1)
    ]
    dead: set[tuple] = set()

    def candidates(v: int) -> list[tuple[Opcode, float, Shape]]:
        names = tuple(ops[p].name for p in preds[v])
        ins = tuple(shapes[p] for p in preds[v])
        key = (v, names, ins)
        if key in memo:
            return memo[key]
        scored = []
        for o in rules.domains[v]:
            if o.name == "input":
                shape = in_shape[v]
            elif o.name == "conv2d" and (len(ins[0]) != 4 or o.attrs[0][1] != ins[0][1]):
                continue  # cheap reject on input channels; attrs sort cin first
            else:
                shape = try_infer(o, list(ins))
                if shape is None:
                    continue
            score = sum(ngram.logp(n, o.name) for n in names)
            scored.append((-score, o.name, rank[v][o], o, score, shape))
        scored.sort(key=lambda t: t[:3])
        memo[key] = out = [(o, score, shape) for *_, o, score, shape in scored]
        return out

    def dfs(depth: int, lp: float) -> bool:
        """Returns False once the search must stop."""
        nonlocal steps
        if depth == len(order):
            key = tuple(ops)
            if key not in blocked:  # blocking constraint: never return S twice
                blocked.add(key)
                found.append(OpAssignment(key, lp))
            return len(found) < cfg.max_solns
        state = (depth, tuple(shapes[u] for u in frontier[depth]))
        if state in dead:
            return True
        before = len(found)
        v = order[depth]
        for o, score, shape in candidates(v):
            steps += 1
            if steps > cfg.max_steps:
                return False
            ops[v], shapes[v] = o, shape
            if not dfs(depth + 1, lp + score):
                return False
        ops[v] = shapes[v] = None
        if len(found) == before:
            dead.add(state)
        return True

    dfs(0, 0.0)
    return found


def enumerate_assignments(rules: RuleSet, ngram: NGramModel, cfg: EnumConfig = EnumConfig()) -> list[OpAssignment]:
    """Up to ``max_solns`` valid assignments, reduced to the top ``pct``
    percentile by logprob and sorted best first."""
    found = _search(rules, ngram, cfg)
    if not found:
        raise NoSolution("no operator assignment satisfies the rules")
    return top_percentile(found, cfg.pct)


def materialize(rules: RuleSet, a: OpAssignment | Sequence[Opcode], ids: Sequence[int] | None = None) -> OpGraph:
    """Build the OpGraph for an assignment, wiring inputs in ``rules.ports`` order."""
    topo = rules.topology
    ops = a.ops if isinstance(a, OpAssignment) else tuple(a)
    ids = list(range(topo.n)) if ids is None else list(ids)
    nodes = tuple(Node(ids[v], ops[v]) for v in range(topo.n))
    edges = tuple(Edge(ids[p], 0, ids[v], port) for v in range(topo.n) for port, p in enumerate(rules.ports[v]))
    gin = tuple((ids[v], s) for v, s in rules.input_shapes)
    gout = tuple((ids[v], 0) for v in range(topo.n) if ops[v].name == "output")
    return OpGraph(nodes, edges, gin, gout)


def populate(rules: RuleSet, ngram: NGramModel, cfg: EnumConfig, k: int) -> list[OpGraph]:
    """``k`` sentinels from distinct top-percentile assignments, drawn uniformly."""
    top = enumerate_assignments(rules, ngram, cfg)
    if k > len(top):
        raise InsufficientSolutions(len(top), k)
    rng = np.random.default_rng([cfg.seed, 1])
    picks = rng.choice(len(top), size=k, replace=False)
    return [materialize(rules, top[int(i)]) for i in picks]


def populate_topology(
    topology: Topology, ngram: NGramModel, cfg: EnumConfig, k: int = 1, vocabulary=None
) -> list[OpGraph]:
    """Populate with the 4-D canonical input, falling back to the 2-D one."""
    last: Exception | None = None
    for shape in (CANONICAL_4D, CANONICAL_2D):
        rules = generate_ruleset(topology, vocabulary, shape)
        try:
            return populate(rules, ngram, cfg, k)
        except (NoSolution, InsufficientSolutions) as exc:
            last = exc
    raise last


# --------------------------------------------------------------------------
# minor modifications of an existing model

MAX_RETRIES = 20


def _perturb_structure(base: OpGraph, delta: int, rng: np.random.Generator):
    ops = {n.id: n.op for n in base.nodes}
    edges = list(base.edges)
    free: set[int] = set()
    next_id = max(ops) + 1
    for _ in range(delta):
        indeg: dict[int, list[Edge]] = {v: [] for v in ops}
        outdeg: dict[int, list[Edge]] = {v: [] for v in ops}
        for e in edges:
            indeg[e.dst].append(e)
            outdeg[e.src].append(e)
        linked = {(e.src, e.dst) for e in edges}
        removable = sorted(
            v for v in ops
            if (ops[v] is None or ops[v].name not in ("input", "output"))
            and len(indeg[v]) == 1 and len(outdeg[v]) == 1
            and (indeg[v][0].src, outdeg[v][0].dst) not in linked  # no parallel edges
        )
        if removable and rng.random() < 0.5:
            v = removable[int(rng.integers(len(removable)))]
            (ein,), (eout,) = indeg[v], outdeg[v]
            edges = [e for e in edges if e not in (ein, eout)]
            edges.append(Edge(ein.src, ein.src_port, eout.dst, eout.dst_port))
            del ops[v]
            free.discard(v)
            free |= {ein.src, eout.dst}
        else:
            edges.sort()
            e = edges.pop(int(rng.integers(len(edges))))
            w = next_id
            next_id += 1
            ops[w] = None
            edges += [Edge(e.src, e.src_port, w, 0), Edge(w, 0, e.dst, e.dst_port)]
            free |= {w, e.src, e.dst}
    # boundary nodes keep their role
    free = {v for v in free if v in ops and (ops[v] is None or ops[v].name not in ("input", "output"))}
    return ops, edges, free


def perturb_popular(
    base: OpGraph,
    delta: int,
    ngram: NGramModel,
    seed: int = 0,
    vocabulary: Sequence[Opcode] | None = None,
    cfg: EnumConfig | None = None,
) -> OpGraph:
    """Insert or remove ``delta`` nodes, then re-populate only the touched
    nodes and their neighbours; every other opcode is kept."""
    if delta < 1 or 4 * delta > len(base.nodes):
        raise ValueError(f"delta must be in 1..{len(base.nodes) // 4}, got {delta}")
    problems = validate(base)
    if problems:
        raise ValueError(f"base graph is invalid: {problems[0]}")
    cfg = cfg or EnumConfig(max_solns=16, seed=seed, max_steps=20_000)
    rng = np.random.default_rng(seed)
    declared = dict(base.graph_inputs)
    for attempt in range(MAX_RETRIES):
        ops, edges, free = _perturb_structure(base, delta, rng)
        ids = sorted(ops)
        index = {v: i for i, v in enumerate(ids)}
        topo = Topology(len(ids), tuple((index[e.src], index[e.dst]) for e in edges))
        fixed = {index[v]: ops[v] for v in ids if v not in free}
        ports: dict[int, list[Edge]] = {}
        for e in edges:
            ports.setdefault(index[e.dst], []).append(e)
        port_order = {v: [index[e.src] for e in sorted(es, key=lambda e: e.dst_port)] for v, es in ports.items()}
        try:
            rules = generate_ruleset(
                topo, vocabulary, fixed=fixed, input_shapes={index[v]: s for v, s in declared.items()},
                ports=port_order,
            )
            top = enumerate_assignments(rules, ngram, EnumConfig(cfg.pct, cfg.max_solns, cfg.seed + attempt, cfg.max_steps))
        except (Unsatisfiable, NoSolution):
            continue
        pick = top[int(rng.integers(len(top)))]
        return materialize(rules, pick, ids)
    raise NoSolution(f"no valid perturbation after {MAX_RETRIES} attempts")
