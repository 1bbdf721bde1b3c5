"""Balanced randomized partitioning by repeated edge contraction."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from graphveil.errors import Disconnected
from graphveil.features import adjacency, components
from graphveil.graph import Edge, Node, Opcode, OpGraph, Shape, canonical_labels, relabel
from graphveil.shapes import propagate_shapes


@dataclass(frozen=True)
class PartitionConfig:
    n: int
    trials: int = 64
    seed: int = 0


@dataclass(frozen=True)
class Partition:
    n: int
    assignment: dict[int, int]
    cross_edges: tuple[tuple[Edge, int, int], ...]
    part_sizes: tuple[int, ...]

    @property
    def size_std(self) -> float:
        return float(np.std(self.part_sizes))

    def parts(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.n)]
        for nid, p in sorted(self.assignment.items()):
            out[p].append(nid)
        return out


def _check_connected(g: OpGraph) -> None:
    adj = adjacency((n.id for n in g.nodes), g.undirected_edges())
    if len(components(adj)) > 1:
        raise Disconnected("graph is not connected in its undirected view")


def _make_partition(g: OpGraph, root_of: dict[int, int]) -> Partition:
    # number parts by their smallest node id
    smallest: dict[int, int] = {}
    for nid, r in root_of.items():
        smallest[r] = min(smallest.get(r, nid), nid)
    index = {r: i for i, r in enumerate(sorted(smallest, key=smallest.get))}
    assignment = {nid: index[r] for nid, r in root_of.items()}
    sizes = [0] * len(index)
    for p in assignment.values():
        sizes[p] += 1
    cross = tuple(
        (e, assignment[e.src], assignment[e.dst]) for e in g.edges if assignment[e.src] != assignment[e.dst]
    )
    return Partition(len(index), assignment, cross, tuple(sizes))


def contract_once(g: OpGraph, n: int, seed: int) -> Partition:
    """One randomized contraction run down to ``n`` supernodes.

    Contracting the edges of a uniformly random permutation in order, and
    skipping edges already inside a supernode, picks each contraction
    uniformly among the remaining edges.
    """
    if not 1 <= n <= len(g.nodes):
        raise ValueError(f"n must be in 1..{len(g.nodes)}, got {n}")
    _check_connected(g)
    parent = {node.id: node.id for node in g.nodes}

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    edges = [(e.src, e.dst) for e in g.edges]
    rng = np.random.default_rng(seed)
    remaining = len(parent)
    for idx in rng.permutation(len(edges)):
        if remaining == n:
            break
        a, b = find(edges[idx][0]), find(edges[idx][1])
        if a != b:
            parent[max(a, b)] = min(a, b)
            remaining -= 1
    if remaining != n:
        raise Disconnected(f"contraction stopped at {remaining} supernodes, wanted {n}")
    return _make_partition(g, {nid: find(nid) for nid in parent})


def partition_balanced(g: OpGraph, cfg: PartitionConfig) -> Partition:
    """Best of ``cfg.trials`` contraction runs by population std-dev of part sizes."""
    best = None
    for t in range(cfg.trials):
        p = contract_once(g, cfg.n, cfg.seed + t)
        key = (p.size_std, t)
        if best is None or key < best[0]:
            best = (key, p)
    return best[1]


# --------------------------------------------------------------------------
# subgraph extraction


@dataclass(frozen=True)
class BoundaryRecord:
    producer: int
    producer_slot: int
    consumer: int
    consumer_slot: int
    shape: Shape


@dataclass(frozen=True)
class BoundaryBinding:
    """How the parts of a partitioned graph connect.

    ``inputs[i]`` / ``outputs[i]`` give the (part, slot) carrying the i-th
    graph input / output of the original graph.
    """

    n: int
    records: tuple[BoundaryRecord, ...]
    inputs: tuple[tuple[int, int], ...]
    outputs: tuple[tuple[int, int], ...]
    part_inputs: tuple[tuple[Shape, ...], ...]
    part_output_counts: tuple[int, ...]

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "records": [
                [r.producer, r.producer_slot, r.consumer, r.consumer_slot, list(r.shape)] for r in self.records
            ],
            "inputs": [list(x) for x in self.inputs],
            "outputs": [list(x) for x in self.outputs],
            "part_inputs": [[list(s) for s in shapes] for shapes in self.part_inputs],
            "part_output_counts": list(self.part_output_counts),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BoundaryBinding":
        return cls(
            doc["n"],
            tuple(BoundaryRecord(a, b, c, d, tuple(s)) for a, b, c, d, s in doc["records"]),
            tuple(tuple(x) for x in doc["inputs"]),
            tuple(tuple(x) for x in doc["outputs"]),
            tuple(tuple(tuple(s) for s in shapes) for shapes in doc["part_inputs"]),
            tuple(doc["part_output_counts"]),
        )


def extract_subgraphs(g: OpGraph, p: Partition) -> tuple[list[OpGraph], BoundaryBinding]:
    """Cut ``g`` along ``p``; each part gets fresh input/output nodes at its boundary.

    Subgraph node ids are canonical (0..m-1) so they reveal nothing about the
    part's position in the original graph.
    """
    shapes = propagate_shapes(g)
    declared = dict(g.graph_inputs)
    orig_in_index = {nid: i for i, (nid, _) in enumerate(g.graph_inputs)}
    orig_out_index = {nid: i for i, (nid, _) in enumerate(g.graph_outputs)}
    next_id = max(n.id for n in g.nodes) + 1

    subgraphs: list[OpGraph] = []
    in_slot: dict[Edge, tuple[int, int]] = {}
    out_slot: dict[tuple[int, int], tuple[int, int]] = {}
    inputs_map: dict[int, tuple[int, int]] = {}
    outputs_map: dict[int, tuple[int, int]] = {}
    part_inputs = []
    part_outputs = []
    incoming: dict[int, list[Edge]] = defaultdict(list)
    outgoing: dict[int, list[Edge]] = defaultdict(list)
    for e, sp, dp in p.cross_edges:
        incoming[dp].append(e)
        outgoing[sp].append(e)

    for part, members in enumerate(p.parts()):
        member_set = set(members)
        nodes = [g.node_map[nid] for nid in members]
        edges = [e for e in g.edges if e.src in member_set and e.dst in member_set]
        ins: list[tuple[tuple, int, Shape, object]] = []  # (sort key, node id, shape, origin)
        outs: list[tuple[tuple, int, object]] = []
        for nid in members:
            if nid in orig_in_index:
                ins.append(((nid, -1), nid, declared[nid], ("graph", orig_in_index[nid])))
            if nid in orig_out_index:
                outs.append(((nid, -1), nid, ("graph", orig_out_index[nid])))
        for e in sorted(incoming[part]):
            fresh = next_id
            next_id += 1
            nodes.append(Node(fresh, Opcode("input")))
            edges.append(Edge(fresh, 0, e.dst, e.dst_port))
            ins.append(((e.dst, e.dst_port), fresh, shapes[(e.src, e.src_port)], ("cross", e)))
        for src, sp in sorted({(e.src, e.src_port) for e in outgoing[part]}):
            fresh = next_id
            next_id += 1
            nodes.append(Node(fresh, Opcode("output")))
            edges.append(Edge(src, sp, fresh, 0))
            outs.append(((src, sp), fresh, ("cross", (src, sp))))
        ins.sort(key=lambda t: t[0])
        outs.sort(key=lambda t: t[0])
        for slot, (_, _, _, origin) in enumerate(ins):
            kind, ref = origin
            if kind == "graph":
                inputs_map[ref] = (part, slot)
            else:
                in_slot[ref] = (part, slot)
        for slot, (_, _, origin) in enumerate(outs):
            kind, ref = origin
            if kind == "graph":
                outputs_map[ref] = (part, slot)
            else:
                out_slot[ref] = (part, slot)
        sub = OpGraph(
            tuple(nodes),
            tuple(edges),
            tuple((nid, shape) for _, nid, shape, _ in ins),
            tuple((nid, 0) for _, nid, _ in outs),
        )
        sub = relabel(sub, canonical_labels(sub))
        subgraphs.append(sub)
        part_inputs.append(tuple(shape for _, _, shape, _ in ins))
        part_outputs.append(len(outs))

    records = []
    for e, sp, dp in p.cross_edges:
        pp, ps = out_slot[(e.src, e.src_port)]
        cp, cs = in_slot[e]
        records.append(BoundaryRecord(pp, ps, cp, cs, shapes[(e.src, e.src_port)]))
    records.sort(key=lambda r: (r.consumer, r.consumer_slot))
    binding = BoundaryBinding(
        p.n,
        tuple(records),
        tuple(inputs_map[i] for i in range(len(g.graph_inputs))),
        tuple(outputs_map[i] for i in range(len(g.graph_outputs))),
        tuple(part_inputs),
        tuple(part_outputs),
    )
    return subgraphs, binding
