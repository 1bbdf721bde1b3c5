"""Exception types shared across graphveil modules."""

from __future__ import annotations


class GraphVeilError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""

    code = "error"

    def to_json(self) -> dict:
        return {"error": self.code, "message": str(self)}


class ParseError(GraphVeilError):
    code = "parse_error"

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class ShapeMismatch(GraphVeilError):
    code = "shape_mismatch"

    def __init__(self, node: int | None, expected, got):
        self.node = node
        self.expected = expected
        self.got = got
        super().__init__(f"shape mismatch at node {node}: expected {expected}, got {got}")


class InvalidGraph(GraphVeilError):
    code = "invalid_graph"

    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(str(v) for v in self.violations[:5])
        super().__init__(f"graph failed validation: {head}")


class EmptyCorpus(GraphVeilError):
    code = "empty_corpus"


class Disconnected(GraphVeilError):
    code = "disconnected"


class Unsatisfiable(GraphVeilError):
    code = "unsatisfiable"

    def __init__(self, node: int, reason: str = ""):
        self.node = node
        super().__init__(f"no opcode fits node {node}" + (f": {reason}" if reason else ""))


class NoSolution(GraphVeilError):
    code = "no_solution"


class InsufficientSolutions(GraphVeilError):
    code = "insufficient_solutions"

    def __init__(self, found: int, needed: int):
        self.found = found
        self.needed = needed
        super().__init__(f"found {found} distinct assignments, needed {needed}")


class InsufficientPool(GraphVeilError):
    code = "insufficient_pool"

    def __init__(self, accepted: int, needed: int):
        self.accepted = accepted
        self.needed = needed
        super().__init__(f"accepted {accepted} topologies, needed {needed}")


class MissingItem(GraphVeilError):
    code = "missing_item"

    def __init__(self, item_id: str, message: str | None = None):
        self.item_id = item_id
        super().__init__(message or f"bundle has no item {item_id}")


class InterfaceChanged(GraphVeilError):
    code = "interface_changed"

    def __init__(self, subgraph_index: int, detail: str = ""):
        self.subgraph_index = subgraph_index
        super().__init__(f"optimized subgraph {subgraph_index} changed its interface {detail}".rstrip())


class InterfaceMismatch(GraphVeilError):
    code = "interface_mismatch"


class SubgraphError(GraphVeilError):
    """Wraps a failure raised while handling one partition."""

    code = "subgraph_error"

    def __init__(self, subgraph_index: int, cause: Exception):
        self.subgraph_index = subgraph_index
        self.cause = cause
        super().__init__(f"subgraph {subgraph_index}: {cause}")
