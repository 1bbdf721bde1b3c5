"""Hypothesis strategies for random valid graphs."""

from hypothesis import strategies as st

from graphveil.corpus import GraphBuilder

UNARY = ("relu", "sigmoid", "identity", "batchnorm", "transpose")


@st.composite
def small_graphs(draw, max_ops: int = 12):
    """Random valid, connected elementwise graphs over (1, 4, 4) inputs."""
    b = GraphBuilder()
    live = [b.input(1, 4, 4)]
    if draw(st.booleans()):
        # join the two inputs right away so the graph stays connected
        live += [b.input(1, 4, 4)]
        live.append(b.add("add", live[0], live[1]))
    for _ in range(draw(st.integers(1, max_ops))):
        kind = draw(st.sampled_from(UNARY + ("add", "mul", "matmul")))
        a = draw(st.sampled_from(live))
        if kind in UNARY:
            live.append(b.add(kind, a))
        else:
            live.append(b.add(kind, a, draw(st.sampled_from(live))))
    used = {e.src for e in b.edges}
    for v in list(live):
        if v not in used:
            b.output(v)
    return b.build()


@st.composite
def conv_graphs(draw, max_blocks: int = 4):
    """Random conv/relu/add stacks on a 4-D input, exercising every rewrite."""
    b = GraphBuilder()
    x = b.input(1, 3, 12, 12)
    x = b.conv(x, 4, kernel=1)
    for _ in range(draw(st.integers(1, max_blocks))):
        kind = draw(st.sampled_from(("conv_relu", "residual", "identity", "transposes", "relu")))
        if kind == "conv_relu":
            x = b.add("relu", b.conv(x, 4, kernel=1))
        elif kind == "residual":
            y = b.conv(x, 4, kernel=1)
            x = b.add("relu", b.add("add", x, y))
        elif kind == "identity":
            x = b.add("identity", x)
        elif kind == "transposes":
            x = b.add("transpose", b.add("transpose", x))
        else:
            x = b.add("relu", x)
    b.output(x)
    return b.build()
