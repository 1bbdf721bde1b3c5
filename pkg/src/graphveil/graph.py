"""Computational-graph data model, validation and the JSON interchange format."""

from __future__ import annotations

import hashlib
import heapq
import json
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from graphveil.errors import ParseError

DYNAMIC = "dynamic"
MAX_RANK = 5

VOCABULARY = (
    "input", "output", "conv2d", "matmul", "add", "mul", "concat", "relu",
    "sigmoid", "softmax", "maxpool2d", "avgpool2d", "globalavgpool", "batchnorm",
    "flatten", "reshape", "transpose", "identity", "fused_conv_relu", "fused_add_relu",
)

# (min, max) number of input ports per opcode
ARITY: dict[str, tuple[int, int]] = {
    "input": (0, 0),
    "output": (1, 1),
    "conv2d": (1, 1),
    "matmul": (2, 2),
    "add": (2, 2),
    "mul": (2, 2),
    "concat": (2, 4),
    "relu": (1, 1),
    "sigmoid": (1, 1),
    "softmax": (1, 1),
    "maxpool2d": (1, 1),
    "avgpool2d": (1, 1),
    "globalavgpool": (1, 1),
    "batchnorm": (1, 1),
    "flatten": (1, 1),
    "reshape": (1, 1),
    "transpose": (1, 1),
    "identity": (1, 1),
    "fused_conv_relu": (1, 1),
    "fused_add_relu": (2, 2),
}

ATTR_KEYS: dict[str, tuple[str, ...]] = {
    "conv2d": ("cin", "cout", "kernel", "stride"),
    "fused_conv_relu": ("cin", "cout", "kernel", "stride"),
    "maxpool2d": ("kernel", "stride"),
    "avgpool2d": ("kernel", "stride"),
    "concat": ("axis",),
    "softmax": ("axis",),
}

KERNELS = (1, 3, 5, 7)


@dataclass(frozen=True, order=True)
class Opcode:
    name: str
    attrs: tuple[tuple[str, int], ...] = ()

    @classmethod
    def of(cls, name: str, **attrs: int) -> "Opcode":
        return cls(name, tuple(sorted(attrs.items())))

    def __getitem__(self, key: str) -> int:
        for k, v in self.attrs:
            if k == key:
                return v
        raise KeyError(key)

    def get(self, key: str, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        return default

    @property
    def attr_dict(self) -> dict[str, int]:
        return dict(self.attrs)

    def __str__(self) -> str:
        if not self.attrs:
            return self.name
        return f"{self.name}({', '.join(f'{k}={v}' for k, v in self.attrs)})"


def op(name: str, **attrs: int) -> Opcode:
    return Opcode.of(name, **attrs)


@dataclass(frozen=True, order=True)
class Node:
    id: int
    op: Opcode


@dataclass(frozen=True, order=True)
class Edge:
    src: int
    src_port: int
    dst: int
    dst_port: int


Shape = tuple  # tuple of int, first entry may be DYNAMIC


@dataclass(frozen=True)
class OpGraph:
    nodes: tuple[Node, ...]
    edges: tuple[Edge, ...]
    graph_inputs: tuple[tuple[int, Shape], ...]
    graph_outputs: tuple[tuple[int, int], ...]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        # node/edge order carries no meaning; keep it sorted so equality is structural
        object.__setattr__(self, "nodes", tuple(sorted(self.nodes, key=lambda n: n.id)))
        object.__setattr__(self, "edges", tuple(sorted(self.edges)))
        object.__setattr__(self, "graph_inputs", tuple((i, tuple(s)) for i, s in self.graph_inputs))
        object.__setattr__(self, "graph_outputs", tuple(tuple(o) for o in self.graph_outputs))

    @classmethod
    def build(cls, nodes: Iterable, edges: Iterable, graph_inputs: Iterable, graph_outputs: Iterable) -> "OpGraph":
        ns = []
        for n in nodes:
            if isinstance(n, Node):
                ns.append(n)
            else:
                nid, o = n
                ns.append(Node(int(nid), o if isinstance(o, Opcode) else Opcode.of(o)))
        es = [e if isinstance(e, Edge) else Edge(*e) for e in edges]
        gi = tuple((int(i), tuple(s)) for i, s in graph_inputs)
        go = tuple((int(i), int(p)) for i, p in graph_outputs)
        return cls(tuple(ns), tuple(es), gi, go)

    # cached structural views; the graph is immutable so these never go stale

    @property
    def node_map(self) -> dict[int, Node]:
        if "node_map" not in self._cache:
            self._cache["node_map"] = {n.id: n for n in self.nodes}
        return self._cache["node_map"]

    def opcode(self, nid: int) -> Opcode:
        return self.node_map[nid].op

    @property
    def in_edges(self) -> dict[int, list[Edge]]:
        """Incoming edges per node, sorted by destination port."""
        if "in_edges" not in self._cache:
            ins: dict[int, list[Edge]] = {n.id: [] for n in self.nodes}
            for e in self.edges:
                ins.setdefault(e.dst, []).append(e)
            for lst in ins.values():
                lst.sort(key=lambda e: (e.dst_port, e.src, e.src_port))
            self._cache["in_edges"] = ins
        return self._cache["in_edges"]

    @property
    def out_edges(self) -> dict[int, list[Edge]]:
        if "out_edges" not in self._cache:
            outs: dict[int, list[Edge]] = {n.id: [] for n in self.nodes}
            for e in self.edges:
                outs.setdefault(e.src, []).append(e)
            for lst in outs.values():
                lst.sort()
            self._cache["out_edges"] = outs
        return self._cache["out_edges"]

    def __len__(self) -> int:
        return len(self.nodes)

    def topological_order(self) -> list[int]:
        """Kahn order with smallest-id tie-breaking; raises ValueError on a cycle."""
        if "topo" in self._cache:
            return self._cache["topo"]
        indeg = {n.id: 0 for n in self.nodes}
        for e in self.edges:
            if e.dst in indeg:
                indeg[e.dst] += 1
        heap = [nid for nid, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        order = []
        outs = self.out_edges
        while heap:
            nid = heapq.heappop(heap)
            order.append(nid)
            for e in outs.get(nid, ()):
                if e.dst not in indeg:
                    continue
                indeg[e.dst] -= 1
                if indeg[e.dst] == 0:
                    heapq.heappush(heap, e.dst)
        if len(order) != len(indeg):
            raise ValueError("graph contains a cycle")
        self._cache["topo"] = order
        return order

    def undirected_edges(self) -> set[tuple[int, int]]:
        return {(min(e.src, e.dst), max(e.src, e.dst)) for e in self.edges if e.src != e.dst}

    def input_shapes(self) -> list[Shape]:
        return [s for _, s in self.graph_inputs]


@dataclass(frozen=True)
class Violation:
    kind: str
    node: int | None = None
    edge: Edge | None = None
    detail: str = ""

    def __str__(self) -> str:
        where = ""
        if self.node is not None:
            where = f" at node {self.node}"
        elif self.edge is not None:
            e = self.edge
            where = f" at edge {e.src}:{e.src_port}->{e.dst}:{e.dst_port}"
        return f"{self.kind}{where}" + (f" ({self.detail})" if self.detail else "")


def _shape_ok(shape) -> str | None:
    if not isinstance(shape, tuple) or not 1 <= len(shape) <= MAX_RANK:
        return f"rank must be in 1..{MAX_RANK}"
    for i, d in enumerate(shape):
        if d == DYNAMIC:
            if i != 0:
                return "only the batch dimension may be dynamic"
        elif not isinstance(d, int) or isinstance(d, bool) or d < 1:
            return f"bad dimension {d!r}"
    return None


def validate(g: OpGraph) -> list[Violation]:
    """Return every invariant violation of ``g``; an empty list means valid."""
    out: list[Violation] = []
    ids: dict[int, Node] = {}
    for n in g.nodes:
        if n.id in ids:
            out.append(Violation("duplicate_node", n.id))
        ids[n.id] = n
        if n.op.name not in ARITY:
            out.append(Violation("unknown_opcode", n.id, detail=n.op.name))
            continue
        want = set(ATTR_KEYS.get(n.op.name, ()))
        have = {k for k, _ in n.op.attrs}
        if want != have:
            out.append(Violation("attrs", n.id, detail=f"expected {sorted(want)}, got {sorted(have)}"))
        elif want:
            a = n.op.attr_dict
            if "kernel" in a and a["kernel"] not in KERNELS:
                out.append(Violation("attrs", n.id, detail=f"kernel {a['kernel']} not in {KERNELS}"))
            for key in ("cin", "cout", "stride"):
                if key in a and a[key] < 1:
                    out.append(Violation("attrs", n.id, detail=f"{key} must be positive"))

    ports: dict[tuple[int, int], Edge] = {}
    indeg: dict[int, list[int]] = defaultdict(list)
    outdeg: dict[int, int] = defaultdict(int)
    good_edges = []
    for e in g.edges:
        if e.src not in ids or e.dst not in ids:
            out.append(Violation("dangling_edge", edge=e))
            continue
        if e.src == e.dst:
            out.append(Violation("self_loop", e.src, edge=e))
            continue
        if e.src_port != 0:
            out.append(Violation("bad_src_port", e.src, edge=e, detail="every operator has one output port"))
        key = (e.dst, e.dst_port)
        if key in ports:
            out.append(Violation("duplicate_input_port", e.dst, edge=e, detail=f"port {e.dst_port}"))
            continue
        ports[key] = e
        indeg[e.dst].append(e.dst_port)
        outdeg[e.src] += 1
        good_edges.append(e)

    for nid, n in ids.items():
        if n.op.name not in ARITY:
            continue
        lo, hi = ARITY[n.op.name]
        got = sorted(indeg.get(nid, []))
        if not lo <= len(got) <= hi:
            out.append(Violation("arity", nid, detail=f"{n.op.name} takes {lo}..{hi} inputs, has {len(got)}"))
        elif got != list(range(len(got))):
            out.append(Violation("port_gap", nid, detail=f"ports {got}"))
        if n.op.name == "output" and outdeg.get(nid, 0):
            out.append(Violation("output_has_consumers", nid))
        elif n.op.name != "output" and not outdeg.get(nid, 0):
            out.append(Violation("dead_end", nid, detail="out-degree-0 nodes must be output"))

    # acyclicity
    deg = {nid: 0 for nid in ids}
    succ: dict[int, list[int]] = defaultdict(list)
    for e in good_edges:
        deg[e.dst] += 1
        succ[e.src].append(e.dst)
    stack = [nid for nid, d in deg.items() if d == 0]
    seen = 0
    reach = set()
    while stack:
        nid = stack.pop()
        seen += 1
        for d in succ[nid]:
            deg[d] -= 1
            if deg[d] == 0:
                stack.append(d)
    if seen != len(ids):
        # Kahn leaves cycles plus everything downstream; peel off the
        # downstream part so only nodes on (or between) cycles are reported
        rest = {k for k, d in deg.items() if d > 0}
        peeled = True
        while peeled:
            peeled = False
            for nid in sorted(rest):
                if not any(d in rest for d in succ[nid]):
                    rest.discard(nid)
                    peeled = True
        for nid in sorted(rest):
            out.append(Violation("cycle", nid))

    # interface
    listed = set()
    for nid, shape in g.graph_inputs:
        if nid not in ids or ids[nid].op.name != "input":
            out.append(Violation("graph_input", nid, detail="not an input node"))
        if nid in listed:
            out.append(Violation("graph_input", nid, detail="listed twice"))
        listed.add(nid)
        bad = _shape_ok(shape)
        if bad:
            out.append(Violation("bad_shape", nid, detail=bad))
    for nid, n in ids.items():
        if n.op.name == "input" and nid not in listed:
            out.append(Violation("graph_input", nid, detail="input node missing from graph_inputs"))
    outs_listed = set()
    for nid, port in g.graph_outputs:
        if nid not in ids or ids[nid].op.name != "output" or port != 0:
            out.append(Violation("graph_output", nid, detail="graph outputs must name output nodes, port 0"))
        if nid in outs_listed:
            out.append(Violation("graph_output", nid, detail="listed twice"))
        outs_listed.add(nid)
    for nid, n in ids.items():
        if n.op.name == "output" and nid not in outs_listed:
            out.append(Violation("graph_output", nid, detail="output node missing from graph_outputs"))

    # reachability from graph inputs
    frontier = [nid for nid in listed if nid in ids]
    reach.update(frontier)
    while frontier:
        nid = frontier.pop()
        for d in succ[nid]:
            if d not in reach:
                reach.add(d)
                frontier.append(d)
    for nid, n in ids.items():
        if nid not in reach and n.op.name != "input":
            out.append(Violation("unreachable", nid))
    return out


def is_valid(g: OpGraph) -> bool:
    return not validate(g)


def require_valid(g: OpGraph) -> OpGraph:
    from graphveil.errors import InvalidGraph

    problems = validate(g)
    if problems:
        raise InvalidGraph(problems)
    return g


# --------------------------------------------------------------------------
# interchange format

_TOP_FIELDS = ("nodes", "edges", "inputs", "outputs")


def to_document(g: OpGraph) -> dict:
    nodes = []
    for n in sorted(g.nodes, key=lambda n: n.id):
        d = {"id": n.id, "op": n.op.name}
        if n.op.attrs:
            d["attrs"] = {k: v for k, v in sorted(n.op.attrs)}
        nodes.append(d)
    edges = [
        {"src": e.src, "sp": e.src_port, "dst": e.dst, "dp": e.dst_port}
        for e in sorted(g.edges, key=lambda e: (e.src, e.src_port, e.dst, e.dst_port))
    ]
    return {
        "nodes": nodes,
        "edges": edges,
        "inputs": [[nid, list(shape)] for nid, shape in g.graph_inputs],
        "outputs": [[nid, port] for nid, port in g.graph_outputs],
    }


def serialize(g: OpGraph) -> str:
    """Canonical JSON text; equal graphs give byte-identical output."""
    return json.dumps(to_document(g), separators=(",", ":")) + "\n"


def _int(value, where: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ParseError(f"expected integer, got {value!r}", field=where)
    return value


def _check_fields(obj, allowed: tuple[str, ...], required: tuple[str, ...], where: str) -> None:
    if not isinstance(obj, dict):
        raise ParseError("expected an object", field=where)
    for k in obj:
        if k not in allowed:
            raise ParseError(f"unknown field {k!r}", field=f"{where}.{k}" if where else k)
    for k in required:
        if k not in obj:
            raise ParseError(f"missing field {k!r}", field=f"{where}.{k}" if where else k)


def from_document(doc: Mapping) -> OpGraph:
    _check_fields(doc, _TOP_FIELDS, _TOP_FIELDS, "")
    nodes = []
    for i, nd in enumerate(doc["nodes"]):
        where = f"nodes[{i}]"
        _check_fields(nd, ("id", "op", "attrs"), ("id", "op"), where)
        name = nd["op"]
        if not isinstance(name, str):
            raise ParseError("opcode must be a string", field=f"{where}.op")
        attrs = nd.get("attrs", {})
        if not isinstance(attrs, dict):
            raise ParseError("attrs must be an object", field=f"{where}.attrs")
        clean = {k: _int(v, f"{where}.attrs.{k}") for k, v in attrs.items()}
        nodes.append(Node(_int(nd["id"], f"{where}.id"), Opcode.of(name, **clean)))
    edges = []
    for i, ed in enumerate(doc["edges"]):
        where = f"edges[{i}]"
        _check_fields(ed, ("src", "sp", "dst", "dp"), ("src", "sp", "dst", "dp"), where)
        edges.append(Edge(*(_int(ed[k], f"{where}.{k}") for k in ("src", "sp", "dst", "dp"))))
    inputs = []
    for i, item in enumerate(doc["inputs"]):
        where = f"inputs[{i}]"
        if not isinstance(item, list) or len(item) != 2 or not isinstance(item[1], list):
            raise ParseError("expected [node_id, [dims...]]", field=where)
        dims = []
        for j, d in enumerate(item[1]):
            dims.append(d if d == DYNAMIC else _int(d, f"{where}[1][{j}]"))
        inputs.append((_int(item[0], f"{where}[0]"), tuple(dims)))
    outputs = []
    for i, item in enumerate(doc["outputs"]):
        where = f"outputs[{i}]"
        if not isinstance(item, list) or len(item) != 2:
            raise ParseError("expected [node_id, port]", field=where)
        outputs.append((_int(item[0], f"{where}[0]"), _int(item[1], f"{where}[1]")))
    return OpGraph(tuple(nodes), tuple(edges), tuple(inputs), tuple(outputs))


def parse(text: str) -> OpGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, line=exc.lineno) from exc
    return from_document(doc)


def load_graph(path) -> OpGraph:
    with open(path) as fh:
        return parse(fh.read())


def save_graph(g: OpGraph, path) -> None:
    with open(path, "w") as fh:
        fh.write(serialize(g))


# --------------------------------------------------------------------------
# relabeling and canonical form


def relabel(g: OpGraph, mapping: Mapping[int, int]) -> OpGraph:
    return OpGraph(
        tuple(sorted((Node(mapping[n.id], n.op) for n in g.nodes), key=lambda n: n.id)),
        tuple(sorted(Edge(mapping[e.src], e.src_port, mapping[e.dst], e.dst_port) for e in g.edges)),
        tuple((mapping[i], s) for i, s in g.graph_inputs),
        tuple((mapping[i], p) for i, p in g.graph_outputs),
    )


def _digest(*parts) -> str:
    return hashlib.blake2b(repr(parts).encode(), digest_size=12).hexdigest()


def canonical_labels(g: OpGraph) -> dict[int, int]:
    """Map node ids to 0..n-1 so that isomorphic graphs (with the same
    interface ordering) receive the same labels.

    Nodes are keyed by a forward hash (the expression they compute from the
    ordered graph inputs) and a backward hash (how their value is consumed
    up to the ordered graph outputs); a Kahn traversal breaks ties by key.
    """
    order = g.topological_order()
    in_idx = {nid: i for i, (nid, _) in enumerate(g.graph_inputs)}
    out_idx = {nid: i for i, (nid, _) in enumerate(g.graph_outputs)}
    fwd: dict[int, str] = {}
    for nid in order:
        o = g.opcode(nid)
        if nid in in_idx:
            fwd[nid] = _digest("in", in_idx[nid], g.graph_inputs[in_idx[nid]][1])
        else:
            ins = tuple((fwd[e.src], e.src_port, e.dst_port) for e in g.in_edges[nid])
            fwd[nid] = _digest(o.name, o.attrs, ins)
    bwd: dict[int, str] = {}
    for nid in reversed(order):
        o = g.opcode(nid)
        if nid in out_idx:
            bwd[nid] = _digest("out", out_idx[nid])
        else:
            outs = tuple(sorted((bwd[e.dst], e.src_port, e.dst_port) for e in g.out_edges[nid]))
            bwd[nid] = _digest(o.name, o.attrs, outs)
    indeg = {n.id: len(g.in_edges[n.id]) for n in g.nodes}
    heap = [(fwd[nid], bwd[nid], nid) for nid, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    labels: dict[int, int] = {}
    while heap:
        _, _, nid = heapq.heappop(heap)
        labels[nid] = len(labels)
        for e in g.out_edges[nid]:
            indeg[e.dst] -= 1
            if indeg[e.dst] == 0:
                heapq.heappush(heap, (fwd[e.dst], bwd[e.dst], e.dst))
    return labels


def canonicalize(g: OpGraph) -> OpGraph:
    return relabel(g, canonical_labels(g))


def canonical_form(g: OpGraph) -> str:
    return serialize(canonicalize(g))
