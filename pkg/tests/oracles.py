"""Independent reference implementations used as test oracles."""

import itertools
import math

import numpy as np

from graphveil.graph import ARITY, VOCABULARY, Edge, Node, OpGraph, op, validate
from graphveil.shapes import shapes_ok
from graphveil.topo import Topology

SMALL_VOCAB = (
    op("input"),
    op("output"),
    op("relu"),
    op("add"),
    op("conv2d", cin=3, cout=8, kernel=3, stride=1),
    op("maxpool2d", kernel=3, stride=1),
)
SMALL_INPUT = (1, 3, 8, 8)


def bigram_logprob(counts: np.ndarray, names: list[tuple[str, str]]) -> float:
    """Sum of log((C + 1) / (row + V)) over (src, dst) opcode pairs."""
    index = {n: i for i, n in enumerate(VOCABULARY)}
    v = len(VOCABULARY)
    total = 0.0
    for a, b in names:
        row = counts[index[a]]
        total += math.log((row[index[b]] + 1.0) / (row.sum() + v))
    return total


def graph_for(topology: Topology, ops, input_shape) -> OpGraph:
    """Wire ``ops`` onto ``topology`` with inputs in ascending-source order."""
    nodes = [Node(v, o) for v, o in enumerate(ops)]
    edges = []
    for v in range(topology.n):
        srcs = sorted(a for a, b in topology.edges if b == v)
        edges += [Edge(s, 0, v, port) for port, s in enumerate(srcs)]
    gin = [(v, input_shape) for v, o in enumerate(ops) if o.name == "input"]
    gout = [(v, 0) for v, o in enumerate(ops) if o.name == "output"]
    return OpGraph(tuple(nodes), tuple(edges), tuple(gin), tuple(gout))


def brute_force_assignments(topology: Topology, vocab, counts, input_shape=SMALL_INPUT):
    """Every assignment from vocab^n that validates and shape-checks, with its logprob."""
    # validate rejects these anyway; filtering first only saves time
    indeg = [sum(1 for e in topology.edges if e[1] == v) for v in range(topology.n)]
    outdeg = [sum(1 for e in topology.edges if e[0] == v) for v in range(topology.n)]
    choices = [
        [o for o in vocab if ARITY[o.name][0] <= indeg[v] <= ARITY[o.name][1] and (o.name == "output") == (outdeg[v] == 0)]
        for v in range(topology.n)
    ]
    out = {}
    for ops in itertools.product(*choices):
        g = graph_for(topology, ops, input_shape)
        if validate(g) or not shapes_ok(g):
            continue
        pairs = [(ops[a].name, ops[b].name) for a, b in topology.edges]
        out[tuple(ops)] = bigram_logprob(counts, pairs)
    return out


def random_dag(rng: np.random.Generator, max_nodes: int = 6, p: float = 0.45) -> Topology:
    n = int(rng.integers(2, max_nodes + 1))
    edges = set()
    for b in range(1, n):
        for a in range(b):
            if rng.random() < p:
                edges.add((a, b))
        if not any(e[1] == b for e in edges) and rng.random() < 0.8:
            edges.add((int(rng.integers(b)), b))
    return Topology(n, tuple(sorted(edges)))
