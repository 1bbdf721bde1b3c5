"""Graph statistics: average degree, clustering, diameter and size.

All four are computed on the simple undirected view of a graph.
"""

from __future__ import annotations

from collections import deque
from dataclasses import astuple, dataclass
from typing import Iterable

import numpy as np

FEATURE_NAMES = ("avg_degree", "clustering", "diameter", "node_count")


@dataclass(frozen=True)
class FeatureVector:
    avg_degree: float
    clustering: float
    diameter: int
    node_count: int

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)


def adjacency(nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> dict[int, set[int]]:
    adj: dict[int, set[int]] = {n: set() for n in nodes}
    for a, b in edges:
        if a != b:
            adj[a].add(b)
            adj[b].add(a)
    return adj


def bfs_distances(adj: dict[int, set[int]], root: int) -> dict[int, int]:
    dist = {root: 0}
    queue = deque([root])
    while queue:
        u = queue.popleft()
        du = dist[u] + 1
        for v in adj[u]:
            if v not in dist:
                dist[v] = du
                queue.append(v)
    return dist


def components(adj: dict[int, set[int]]) -> list[set[int]]:
    seen: set[int] = set()
    comps = []
    for n in sorted(adj):
        if n in seen:
            continue
        comp = set(bfs_distances(adj, n))
        seen |= comp
        comps.append(comp)
    return comps


def features_from_adjacency(adj: dict[int, set[int]]) -> FeatureVector:
    n = len(adj)
    if n == 0:
        raise ValueError("features need at least one node")
    degree_sum = sum(len(nb) for nb in adj.values())
    clustering = 0.0
    for u, nb in adj.items():
        k = len(nb)
        if k < 2:
            continue
        links = sum(len(adj[v] & nb) for v in nb) // 2
        clustering += 2.0 * links / (k * (k - 1))
    # largest component, ties to the one holding the smallest id
    comps = components(adj)
    big = max(comps, key=lambda c: (len(c), -min(c)))
    diameter = 0
    for u in big:
        diameter = max(diameter, max(bfs_distances(adj, u).values()))
    return FeatureVector(degree_sum / n, clustering / n, diameter, n)


def features_of(nodes: Iterable[int], edges: Iterable[tuple[int, int]]) -> FeatureVector:
    return features_from_adjacency(adjacency(nodes, edges))


def compute_features(g) -> FeatureVector:
    """Features of an OpGraph or any object exposing ``nodes``/``edges`` as a
    topology (see graphveil.topo)."""
    if hasattr(g, "feature_vector"):
        return g.feature_vector()
    return features_of((n.id for n in g.nodes), ((e.src, e.dst) for e in g.edges))
