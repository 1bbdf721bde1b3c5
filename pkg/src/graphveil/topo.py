"""Topology generation: an autoregressive BFS-row count model, orientation of
undirected samples into DAGs, and importance sampling of topologies whose
features are spread evenly around a protected subgraph's features.
"""

from __future__ import annotations

import heapq
import json
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from graphveil.density import DensityModel
from graphveil.errors import InsufficientPool
from graphveil.features import FeatureVector, adjacency, bfs_distances, components, compute_features, features_of


@dataclass(frozen=True)
class UGraph:
    """Simple undirected graph on nodes 0..n-1."""

    n: int
    edges: tuple[tuple[int, int], ...]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        es = sorted({(min(a, b), max(a, b)) for a, b in self.edges if a != b})
        object.__setattr__(self, "edges", tuple(es))

    @property
    def adj(self) -> dict[int, set[int]]:
        if "adj" not in self._cache:
            self._cache["adj"] = adjacency(range(self.n), self.edges)
        return self._cache["adj"]

    def feature_vector(self) -> FeatureVector:
        if "fv" not in self._cache:
            self._cache["fv"] = features_of(range(self.n), self.edges)
        return self._cache["fv"]

    def is_connected(self) -> bool:
        return self.n > 0 and len(bfs_distances(self.adj, 0)) == self.n

    def to_json(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, doc: dict) -> "UGraph":
        return cls(int(doc["n"]), tuple(tuple(e) for e in doc["edges"]))


@dataclass(frozen=True)
class Topology:
    """Directed, opcode-free graph on nodes 0..n-1."""

    n: int
    edges: tuple[tuple[int, int], ...]
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(sorted(set(self.edges))))

    @classmethod
    def from_opgraph(cls, g) -> "Topology":
        index = {node.id: i for i, node in enumerate(g.nodes)}
        return cls(len(g.nodes), tuple((index[e.src], index[e.dst]) for e in g.edges))

    @property
    def preds(self) -> list[list[int]]:
        if "preds" not in self._cache:
            p: list[list[int]] = [[] for _ in range(self.n)]
            for a, b in self.edges:
                p[b].append(a)
            self._cache["preds"] = [sorted(x) for x in p]
        return self._cache["preds"]

    @property
    def succs(self) -> list[list[int]]:
        if "succs" not in self._cache:
            s: list[list[int]] = [[] for _ in range(self.n)]
            for a, b in self.edges:
                s[a].append(b)
            self._cache["succs"] = [sorted(x) for x in s]
        return self._cache["succs"]

    def in_degree(self, v: int) -> int:
        return len(self.preds[v])

    def out_degree(self, v: int) -> int:
        return len(self.succs[v])

    def topological_order(self) -> list[int]:
        """Kahn order, smallest id first; ValueError on a cycle."""
        indeg = [len(p) for p in self.preds]
        heap = [v for v in range(self.n) if indeg[v] == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            v = heapq.heappop(heap)
            order.append(v)
            for w in self.succs[v]:
                indeg[w] -= 1
                if indeg[w] == 0:
                    heapq.heappush(heap, w)
        if len(order) != self.n:
            raise ValueError("topology contains a cycle")
        return order

    def is_dag(self) -> bool:
        try:
            self.topological_order()
        except ValueError:
            return False
        return True

    def undirected(self) -> UGraph:
        return UGraph(self.n, self.edges)

    def feature_vector(self) -> FeatureVector:
        return self.undirected().feature_vector()

    def to_json(self) -> dict:
        return {"n": self.n, "edges": [list(e) for e in self.edges]}

    @classmethod
    def from_json(cls, doc: dict) -> "Topology":
        return cls(int(doc["n"]), tuple(tuple(e) for e in doc["edges"]))


def as_ugraph(g) -> UGraph:
    if isinstance(g, UGraph):
        return g
    if isinstance(g, Topology):
        return g.undirected()
    index = {node.id: i for i, node in enumerate(g.nodes)}
    return UGraph(len(g.nodes), tuple((index[e.src], index[e.dst]) for e in g.edges))


def bfs_order(adj: dict[int, set[int]], root: int | None = None) -> list[int]:
    """BFS from ``root`` (default: min id) visiting neighbours in ascending id;
    unreached nodes restart from the smallest unvisited id."""
    seen: set[int] = set()
    order: list[int] = []
    starts = sorted(adj) if root is None else [root] + sorted(adj)
    for s in starts:
        if s in seen:
            continue
        seen.add(s)
        queue = deque([s])
        while queue:
            u = queue.popleft()
            order.append(u)
            for v in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
    return order


# --------------------------------------------------------------------------
# autoregressive row model


def _freeze(x):
    return tuple(_freeze(v) for v in x) if isinstance(x, list) else x


@dataclass
class TopoModel:
    """Counts of adjacency bits toward the previous ``M`` nodes in BFS order.

    Bit ``j`` of row ``i`` says whether node ``i`` links to node ``i - j``. It is
    predicted from the row position (capped at ``M``), the bits already drawn
    in the row, and the previous row. Unseen contexts back off to coarser
    ones. ``M == 0`` drops all context and looks back over every
    predecessor, which makes every edge an independent coin.
    """

    M: int = 8
    smoothing: float = 1.0
    full: dict = field(default_factory=dict)
    mid: dict = field(default_factory=dict)
    coarse: dict = field(default_factory=dict)
    size_dist: dict[int, int] = field(default_factory=dict)

    def _keys(self, i: int, j: int, prefix: tuple, prev: tuple):
        if self.M == 0:
            return ((),)
        b = min(i, self.M)
        return ((b, j, prefix, prev), (b, j, prefix), (j, sum(prefix)))

    def window(self, i: int) -> int:
        return i if self.M == 0 else min(i, self.M)

    def observe(self, i: int, j: int, prefix: tuple, prev: tuple, bit: int) -> None:
        for table, key in zip((self.full, self.mid, self.coarse), self._keys(i, j, prefix, prev)):
            c = table.setdefault(key, [0, 0])
            c[bit] += 1

    def p_edge(self, i: int, j: int, prefix: tuple, prev: tuple) -> float:
        """Probability that bit ``j`` of row ``i`` is set.

        The coarsest context is Laplace-smoothed; each finer context uses the
        next coarser estimate as its prior, with the same pseudo-count mass.
        """
        s = self.smoothing
        keys = self._keys(i, j, prefix, prev)
        tables = (self.full, self.mid, self.coarse)[: len(keys)]
        p = 0.5
        for table, key in reversed(list(zip(tables, keys))):
            c0, c1 = table.get(key, (0, 0))
            p = (c1 + 2 * s * p) / (c0 + c1 + 2 * s)
        return p

    def rows(self, u: UGraph) -> list[tuple[int, ...]]:
        order = bfs_order(u.adj)
        out = []
        for i in range(1, u.n):
            nb = u.adj[order[i]]
            out.append(tuple(int(order[i - j] in nb) for j in range(1, self.window(i) + 1)))
        return out

    def to_json(self) -> dict:
        def dump(table):
            return sorted([list(k) if isinstance(k, tuple) else k, c[0], c[1]] for k, c in table.items())

        return {
            "M": self.M,
            "smoothing": self.smoothing,
            "full": dump(self.full),
            "mid": dump(self.mid),
            "coarse": dump(self.coarse),
            "size_dist": sorted([int(k), int(v)] for k, v in self.size_dist.items()),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "TopoModel":
        def load(rows):
            return {_freeze(k): [c0, c1] for k, c0, c1 in rows}

        return cls(
            doc["M"], doc["smoothing"], load(doc["full"]), load(doc["mid"]), load(doc["coarse"]),
            {int(k): int(v) for k, v in doc["size_dist"]},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TopoModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def train_topo_model(pool, M: int = 8, smoothing: float = 1.0) -> TopoModel:
    """Count BFS adjacency rows over the undirected views of ``pool``."""
    if M < 0:
        raise ValueError("M must be >= 0")
    model = TopoModel(M, smoothing)
    sizes: Counter = Counter()
    for g in pool:
        u = as_ugraph(g)
        sizes[u.n] += 1
        prev: tuple = ()
        for i, row in enumerate(model.rows(u), start=1):
            for j, bit in enumerate(row, start=1):
                model.observe(i, j, row[: j - 1], prev, bit)
            prev = row
    if not sizes:
        raise ValueError("topology model needs a nonempty pool")
    model.size_dist = dict(sizes)
    return model


@dataclass
class TopologyPool:
    graphs: list[UGraph]
    seed: int = 0
    _features: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.graphs)

    def features(self) -> np.ndarray:
        if self._features is None:
            self._features = np.array([g.feature_vector().as_array() for g in self.graphs]).reshape(-1, 4)
        return self._features

    def to_json(self) -> dict:
        return {"seed": self.seed, "graphs": [g.to_json() for g in self.graphs]}

    @classmethod
    def from_json(cls, doc: dict) -> "TopologyPool":
        return cls([UGraph.from_json(g) for g in doc["graphs"]], doc.get("seed", 0))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, separators=(",", ":"))
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "TopologyPool":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


MAX_REJECTS = 100


def _draw_graph(model: TopoModel, n: int, rng: np.random.Generator) -> UGraph:
    edges = []
    prev: tuple = ()
    for i in range(1, n):
        row: list[int] = []
        for j in range(1, model.window(i) + 1):
            bit = int(rng.random() < model.p_edge(i, j, tuple(row), prev))
            row.append(bit)
            if bit:
                edges.append((i - j, i))
        prev = tuple(row)
    return UGraph(n, tuple(edges))


def _largest_component(u: UGraph) -> UGraph:
    big = max(components(u.adj), key=lambda c: (len(c), -min(c)))
    index = {v: k for k, v in enumerate(sorted(big))}
    return UGraph(len(big), tuple((index[a], index[b]) for a, b in u.edges if a in big))


def sample_topologies(model: TopoModel, count: int, seed: int = 0) -> TopologyPool:
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    sizes = sorted(model.size_dist)
    weights = np.array([model.size_dist[s] for s in sizes], dtype=float)
    weights /= weights.sum()
    graphs = []
    for _ in range(count):
        n = int(sizes[rng.choice(len(sizes), p=weights)])
        for _attempt in range(MAX_REJECTS + 1):
            u = _draw_graph(model, n, rng)
            if u.is_connected() and (u.edges or n == 1):
                break
        else:
            u = _largest_component(u)
        graphs.append(u)
    return TopologyPool(graphs, seed)


# --------------------------------------------------------------------------
# orientation


def _farthest(adj: dict[int, set[int]], root: int) -> int:
    dist = bfs_distances(adj, root)
    top = max(dist.values())
    return min(v for v, d in dist.items() if d == top)


def diameter_endpoints(u: UGraph) -> tuple[int, int]:
    a = _farthest(u.adj, 0)
    return a, _farthest(u.adj, a)


def induce_orientation(u: UGraph) -> Topology:
    """Orient every edge from earlier to later BFS position, BFS rooted at the
    smaller-id end of a diameter path. A strict order on positions admits no
    directed cycle."""
    if u.n < 1 or not u.is_connected():
        raise ValueError("orientation needs a connected graph with at least one node")
    start = min(diameter_endpoints(u))
    rank = {v: k for k, v in enumerate(bfs_order(u.adj, start))}
    return Topology(u.n, tuple((a, b) if rank[a] < rank[b] else (b, a) for a, b in u.edges))


# --------------------------------------------------------------------------
# importance sampling around a protected graph


@dataclass(frozen=True)
class SamplingConfig:
    beta: tuple[float, float, float, float]
    pool_size: int = 2000
    target_count: int = 20
    seed: int = 0

    def __post_init__(self):
        beta = tuple(float(b) for b in self.beta)
        if len(beta) != 4 or min(beta) <= 0:
            raise ValueError(f"beta must be 4 positive widths, got {self.beta}")
        object.__setattr__(self, "beta", beta)
        if self.target_count < 1:
            raise ValueError("target_count must be >= 1")


def default_beta(features: np.ndarray, fraction: float = 0.2, floor: float = 1e-3) -> tuple[float, ...]:
    """Box widths as a fraction of the per-feature standard deviation."""
    std = np.asarray(features, dtype=float).reshape(-1, 4).std(axis=0)
    return tuple(float(max(fraction * s, floor)) for s in std)


@dataclass(frozen=True)
class SampleBox:
    lower: np.ndarray
    upper: np.ndarray
    accepted: tuple[int, ...]  # pool indices, in pool order
    in_box: int


def draw_box_samples(g_protected, pool: TopologyPool, density: DensityModel, cfg: SamplingConfig) -> SampleBox:
    """All pool members accepted by the importance sampler, without a quota."""
    if not len(pool):
        raise ValueError("topology pool is empty")
    rng = np.random.default_rng(cfg.seed)
    beta = np.array(cfg.beta)
    alpha = rng.uniform(0.0, beta)
    lower = compute_features(g_protected).as_array() - alpha
    upper = lower + beta
    feats = pool.features()
    u = rng.random(len(pool))
    inside = np.flatnonzero(np.all((feats >= lower) & (feats <= upper), axis=1))
    if not len(inside):
        return SampleBox(lower, upper, (), 0)
    # work in log space: densities of outlying graphs underflow
    logp = np.atleast_1d(density.log_density(feats[inside]))
    accept_p = np.exp(logp.min() - logp)
    chosen = inside[u[inside] < accept_p]
    return SampleBox(lower, upper, tuple(int(i) for i in chosen), len(inside))


def sample_similar(g_protected, pool: TopologyPool, density: DensityModel, cfg: SamplingConfig) -> list[Topology]:
    """Oriented pool topologies whose features fill a box around the protected
    graph's features evenly; raises InsufficientPool below ``target_count``."""
    box = draw_box_samples(g_protected, pool, density, cfg)
    if len(box.accepted) < cfg.target_count:
        raise InsufficientPool(len(box.accepted), cfg.target_count)
    return [induce_orientation(pool.graphs[i]) for i in box.accepted[: cfg.target_count]]
