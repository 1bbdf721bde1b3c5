"""Shape rules for the fixed opcode vocabulary.

Convolutions and pools use no padding: ``out = (in - kernel) // stride + 1``.
A leading ``DYNAMIC`` batch dimension passes through every rule.
"""

from __future__ import annotations

from math import prod

from graphveil.errors import ShapeMismatch
from graphveil.graph import DYNAMIC, MAX_RANK, Opcode, OpGraph, Shape


class _Bad(Exception):
    def __init__(self, expected, got):
        self.expected = expected
        self.got = got


def _rank(shape: Shape, lo: int, hi: int = MAX_RANK) -> None:
    if not lo <= len(shape) <= hi:
        raise _Bad(f"rank {lo}..{hi}", shape)


def _window(shape: Shape, kernel: int, stride: int) -> tuple[int, int]:
    h, w = shape[2], shape[3]
    if h == DYNAMIC or w == DYNAMIC or h < kernel or w < kernel:
        raise _Bad(f"spatial dims >= {kernel}", shape)
    return (h - kernel) // stride + 1, (w - kernel) // stride + 1


def output_shape(o: Opcode, ins: list[Shape]) -> Shape:
    """Output shape of one operator; raises ``_Bad`` on a rule violation."""
    name = o.name
    if name in ("relu", "sigmoid", "identity", "output"):
        return ins[0]
    if name in ("conv2d", "fused_conv_relu"):
        x = ins[0]
        _rank(x, 4, 4)
        if x[1] != o["cin"]:
            raise _Bad(f"{o['cin']} input channels", x)
        h, w = _window(x, o["kernel"], o["stride"])
        return (x[0], o["cout"], h, w)
    if name in ("maxpool2d", "avgpool2d"):
        x = ins[0]
        _rank(x, 4, 4)
        h, w = _window(x, o["kernel"], o["stride"])
        return (x[0], x[1], h, w)
    if name == "globalavgpool":
        _rank(ins[0], 4, 4)
        return ins[0][:2]
    if name == "batchnorm":
        _rank(ins[0], 2)
        return ins[0]
    if name == "flatten":
        x = ins[0]
        _rank(x, 2)
        return (x[0], prod(x[1:]))
    if name == "reshape":
        x = ins[0]
        _rank(x, 3)
        if x[-2] == DYNAMIC:
            raise _Bad("static trailing dims", x)
        return x[:-2] + (x[-2] * x[-1],)
    if name == "transpose":
        x = ins[0]
        _rank(x, 2)
        if x[-2] == DYNAMIC:
            raise _Bad("static trailing dims", x)
        return x[:-2] + (x[-1], x[-2])
    if name == "softmax":
        x = ins[0]
        axis = o["axis"]
        if not -len(x) <= axis < len(x):
            raise _Bad(f"axis {axis} within rank", x)
        return x
    if name in ("add", "mul", "fused_add_relu"):
        a, b = ins
        if a != b:
            raise _Bad(a, b)
        return a
    if name == "matmul":
        a, b = ins
        if len(a) < 2 or len(b) < 2:
            raise _Bad("rank >= 2 operands", (a, b))
        if a[-1] == DYNAMIC or a[-1] != b[-2]:
            raise _Bad(f"inner dim {a[-1]}", b)
        if len(b) == 2:
            return a[:-1] + (b[-1],)
        if a[:-2] != b[:-2]:
            raise _Bad(a[:-2], b[:-2])
        return a[:-1] + (b[-1],)
    if name == "concat":
        first = ins[0]
        r = len(first)
        axis = o["axis"]
        ax = axis + r if axis < 0 else axis
        if not 1 <= ax < r:
            raise _Bad(f"non-batch axis within rank {r}", axis)
        total = 0
        for s in ins:
            if len(s) != r or any(s[i] != first[i] for i in range(r) if i != ax):
                raise _Bad(first, s)
            total += s[ax]
        return first[:ax] + (total,) + first[ax + 1:]
    if name == "input":
        raise _Bad("declared graph input shape", None)
    raise _Bad("known opcode", name)


def infer(o: Opcode, ins: list[Shape], node: int | None = None) -> Shape:
    try:
        return output_shape(o, ins)
    except _Bad as bad:
        raise ShapeMismatch(node, bad.expected, bad.got) from None


def try_infer(o: Opcode, ins: list[Shape]) -> Shape | None:
    try:
        return output_shape(o, ins)
    except _Bad:
        return None


def propagate_shapes(g: OpGraph) -> dict[tuple[int, int], Shape]:
    """Shape of every (node id, output port); raises ShapeMismatch."""
    declared = dict(g.graph_inputs)
    shapes: dict[tuple[int, int], Shape] = {}
    for nid in g.topological_order():
        o = g.opcode(nid)
        if o.name == "input":
            if nid not in declared:
                raise ShapeMismatch(nid, "declared input shape", None)
            shapes[(nid, 0)] = tuple(declared[nid])
            continue
        ins = [shapes[(e.src, e.src_port)] for e in g.in_edges[nid]]
        shapes[(nid, 0)] = infer(o, ins, nid)
    return shapes


def shapes_ok(g: OpGraph) -> bool:
    try:
        propagate_shapes(g)
    except (ShapeMismatch, KeyError, ValueError):
        return False
    return True
