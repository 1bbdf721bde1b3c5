import pytest

from graphveil.corpus import CorpusSpec, extract_subgraph_pool, generate_corpus
from graphveil.graph import OpGraph, op
from graphveil.pipeline import ObfuscationModels
from graphveil.populate import fit_ngram
from graphveil.topo import train_topo_model

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def chain(*names, shape=(1, 4)) -> OpGraph:
    """input -> names... -> output, one node per opcode."""
    nodes = [(0, op("input"))]
    for i, n in enumerate(names, start=1):
        nodes.append((i, n if not isinstance(n, str) else op(n)))
    last = len(nodes)
    nodes.append((last, op("output")))
    edges = [(i, 0, i + 1, 0) for i in range(last)]
    return OpGraph.build(nodes, edges, [(0, shape)], [(last, 0)])


@pytest.fixture(scope="session")
def corpus():
    return generate_corpus(CorpusSpec(models_per_family=2, seed=0))


@pytest.fixture(scope="session")
def subgraph_pool(corpus):
    return extract_subgraph_pool(corpus, (8, 16))


@pytest.fixture(scope="session")
def ngram(corpus):
    return fit_ngram(corpus)


@pytest.fixture(scope="session")
def topo_model(subgraph_pool):
    return train_topo_model([e.graph for e in subgraph_pool], 8)


@pytest.fixture(scope="session")
def models(ngram, topo_model):
    return ObfuscationModels(ngram, topo_model).ready(0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
