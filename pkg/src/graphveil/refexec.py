"""Reference interpreter for OpGraphs, used to check that rewrites and
reassembly preserve the computed function.

Models carry no parameters, so convolution weights are pseudo-random but
derived from the convolution's attributes. A fused conv+relu therefore uses
the same weights as the conv it replaced, whatever its node id.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from graphveil.errors import InterfaceMismatch, ShapeMismatch
from graphveil.graph import DYNAMIC, OpGraph

BN_EPS = 1e-5
DYNAMIC_EXTENT = 2  # concrete size for dynamic dims when drawing inputs


@lru_cache(maxsize=None)
def conv_weights(cin: int, cout: int, kernel: int, stride: int) -> np.ndarray:
    rng = np.random.default_rng([cin, cout, kernel, stride])
    w = rng.standard_normal((cout, cin, kernel, kernel)) / np.sqrt(cin * kernel * kernel)
    w.setflags(write=False)
    return w


def conv2d(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Direct no-padding convolution, accumulated one kernel offset at a time."""
    n, c, h, wd = x.shape
    cout, cin, k, _ = w.shape
    if c != cin:
        raise ShapeMismatch(None, f"{cin} channels", x.shape)
    oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
    out = np.zeros((n, cout, oh, ow))
    for a in range(k):
        for b in range(k):
            patch = x[:, :, a : a + stride * (oh - 1) + 1 : stride, b : b + stride * (ow - 1) + 1 : stride]
            out += np.einsum("nchw,oc->nohw", patch, w[:, :, a, b])
    return out


def pool2d(x: np.ndarray, k: int, stride: int, reduce) -> np.ndarray:
    h, w = x.shape[2], x.shape[3]
    oh, ow = (h - k) // stride + 1, (w - k) // stride + 1
    windows = [
        x[:, :, a : a + stride * (oh - 1) + 1 : stride, b : b + stride * (ow - 1) + 1 : stride]
        for a in range(k)
        for b in range(k)
    ]
    return reduce(np.stack(windows), axis=0)


def softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _apply(o, xs: list[np.ndarray]) -> np.ndarray:
    name = o.name
    if name in ("identity", "output"):
        return xs[0]
    if name == "relu":
        return _relu(xs[0])
    if name == "sigmoid":
        return 1.0 / (1.0 + np.exp(-xs[0]))
    if name in ("conv2d", "fused_conv_relu"):
        y = conv2d(xs[0], conv_weights(o["cin"], o["cout"], o["kernel"], o["stride"]), o["stride"])
        return _relu(y) if name == "fused_conv_relu" else y
    if name == "maxpool2d":
        return pool2d(xs[0], o["kernel"], o["stride"], np.max)
    if name == "avgpool2d":
        return pool2d(xs[0], o["kernel"], o["stride"], np.mean)
    if name == "globalavgpool":
        return xs[0].mean(axis=(2, 3))
    if name == "batchnorm":
        # inference form with mean 0, variance 1, scale 1, shift 0
        return xs[0] / np.sqrt(1.0 + BN_EPS)
    if name == "flatten":
        return xs[0].reshape(xs[0].shape[0], -1)
    if name == "reshape":
        x = xs[0]
        return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))
    if name == "transpose":
        return np.swapaxes(xs[0], -1, -2)
    if name == "softmax":
        return softmax(xs[0], o["axis"])
    if name == "add":
        return xs[0] + xs[1]
    if name == "fused_add_relu":
        return _relu(xs[0] + xs[1])
    if name == "mul":
        return xs[0] * xs[1]
    if name == "matmul":
        return np.matmul(xs[0], xs[1])
    if name == "concat":
        return np.concatenate(xs, axis=o["axis"])
    raise ValueError(f"cannot execute opcode {name!r}")


def _concrete(shape) -> tuple[int, ...]:
    return tuple(DYNAMIC_EXTENT if d == DYNAMIC else int(d) for d in shape)


def execute(g: OpGraph, inputs: list[np.ndarray]) -> list[np.ndarray]:
    """Evaluate ``g``; returns one array per graph output, in declared order."""
    if len(inputs) != len(g.graph_inputs):
        raise ShapeMismatch(None, f"{len(g.graph_inputs)} inputs", len(inputs))
    values: dict[int, np.ndarray] = {}
    for (nid, shape), x in zip(g.graph_inputs, inputs):
        x = np.asarray(x, dtype=np.float64)
        if len(x.shape) != len(shape) or any(d != DYNAMIC and d != s for d, s in zip(shape, x.shape)):
            raise ShapeMismatch(nid, shape, x.shape)
        values[nid] = x
    for nid in g.topological_order():
        if nid in values:
            continue
        o = g.opcode(nid)
        try:
            values[nid] = _apply(o, [values[e.src] for e in g.in_edges[nid]])
        except (ValueError, IndexError) as exc:
            raise ShapeMismatch(nid, str(o), str(exc)) from None
    return [values[nid] for nid, _ in g.graph_outputs]


def random_inputs(g: OpGraph, rng: np.random.Generator) -> list[np.ndarray]:
    return [rng.standard_normal(_concrete(s)) for _, s in g.graph_inputs]


@dataclass(frozen=True)
class Verdict:
    passed: bool
    max_rel_error: float
    trials: int

    def to_json(self) -> dict:
        return {"passed": self.passed, "max_rel_error": self.max_rel_error, "trials": self.trials}


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| scaled by the larger magnitude of the two outputs."""
    if a.shape != b.shape:
        return float("inf")
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)))
    diff = float(np.max(np.abs(a - b), initial=0.0))
    return 0.0 if diff == 0.0 else diff / scale


def check_equivalence(g1: OpGraph, g2: OpGraph, trials: int = 20, seed: int = 0, tol: float = 1e-9) -> Verdict:
    if g1.input_shapes() != g2.input_shapes() or len(g1.graph_outputs) != len(g2.graph_outputs):
        raise InterfaceMismatch(
            f"inputs {g1.input_shapes()} vs {g2.input_shapes()}, "
            f"{len(g1.graph_outputs)} vs {len(g2.graph_outputs)} outputs"
        )
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        xs = random_inputs(g1, rng)
        for a, b in zip(execute(g1, xs), execute(g2, xs)):
            worst = max(worst, relative_error(a, b))
    return Verdict(worst <= tol, worst, trials)
