"""A small rewrite-based graph optimizer.

Every rule is local, exact and interface-preserving: graph input and output
nodes are never touched, so ``graph_inputs``/``graph_outputs`` survive.
"""

from __future__ import annotations

from typing import Callable, Iterable

from graphveil.graph import Edge, Node, Opcode, OpGraph

Rewrite = Callable[[OpGraph], "OpGraph | None"]


def _bypass(g: OpGraph, drop: set[int], src: tuple[int, int], last: int, replace: dict[int, Opcode] | None = None) -> OpGraph:
    """Remove ``drop`` and feed ``last``'s consumers from ``src``."""
    edges = []
    for e in g.edges:
        if e.src == last:
            edges.append(Edge(src[0], src[1], e.dst, e.dst_port))
        elif e.src in drop or e.dst in drop:
            continue
        else:
            edges.append(e)
    replace = replace or {}
    nodes = tuple(Node(n.id, replace.get(n.id, n.op)) for n in g.nodes if n.id not in drop)
    return OpGraph(nodes, tuple(edges), g.graph_inputs, g.graph_outputs)


def _sole_consumer(g: OpGraph, nid: int, name: str) -> int | None:
    outs = g.out_edges[nid]
    if len(outs) == 1 and g.opcode(outs[0].dst).name == name:
        return outs[0].dst
    return None


def identity_elim(g: OpGraph) -> OpGraph | None:
    for n in g.nodes:
        if n.op.name == "identity":
            (e,) = g.in_edges[n.id]
            return _bypass(g, {n.id}, (e.src, e.src_port), n.id)
    return None


def _fuse(g: OpGraph, head: str, fused: str) -> OpGraph | None:
    for n in g.nodes:
        if n.op.name != head:
            continue
        r = _sole_consumer(g, n.id, "relu")
        if r is not None:
            return _bypass(g, {r}, (n.id, 0), r, {n.id: Opcode(fused, n.op.attrs)})
    return None


def fuse_conv_relu(g: OpGraph) -> OpGraph | None:
    return _fuse(g, "conv2d", "fused_conv_relu")


def fuse_add_relu(g: OpGraph) -> OpGraph | None:
    return _fuse(g, "add", "fused_add_relu")


def constant_fold_identity_chain(g: OpGraph) -> OpGraph | None:
    """Drop a transpose feeding only another transpose: together they are
    the identity on the last two axes."""
    for n in g.nodes:
        if n.op.name != "transpose":
            continue
        t2 = _sole_consumer(g, n.id, "transpose")
        if t2 is not None:
            (e,) = g.in_edges[n.id]
            return _bypass(g, {n.id, t2}, (e.src, e.src_port), t2)
    return None


RULES: dict[str, Rewrite] = {
    "identity_elim": identity_elim,
    "fuse_conv_relu": fuse_conv_relu,
    "fuse_add_relu": fuse_add_relu,
    "constant_fold_identity_chain": constant_fold_identity_chain,
}
ALL_RULES = tuple(RULES)


def resolve_rules(rules: Iterable[str | Rewrite] | None) -> list[Rewrite]:
    if rules is None:
        return [RULES[r] for r in ALL_RULES]
    out = []
    for r in rules:
        if callable(r):
            out.append(r)
        elif r in RULES:
            out.append(RULES[r])
        else:
            raise ValueError(f"unknown rewrite rule {r!r}; known: {', '.join(ALL_RULES)}")
    return out


def optimize(g: OpGraph, rules: Iterable[str | Rewrite] | None = None) -> OpGraph:
    """Apply ``rules`` in order, each until it stops matching, and repeat the
    sweep until nothing changes."""
    active = resolve_rules(rules)
    changed = True
    while changed:
        changed = False
        for rule in active:
            while (h := rule(g)) is not None:
                g = h
                changed = True
    return g
