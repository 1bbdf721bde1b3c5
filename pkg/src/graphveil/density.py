"""Product-kernel Gaussian KDE over graph feature vectors."""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from graphveil.features import FeatureVector, compute_features

BANDWIDTH_FLOOR = 1e-6
CHUNK_CELLS = 1 << 21


class DegenerateFeature(UserWarning):
    """A feature had zero variance; its bandwidth was floored."""

    def __init__(self, index: int):
        self.index = index
        super().__init__(f"feature {index} has zero variance; bandwidth floored at {BANDWIDTH_FLOOR}")


@dataclass(frozen=True)
class DensityModel:
    data: np.ndarray  # (n, d)
    bandwidth: np.ndarray  # (d,)

    def log_density(self, x) -> np.ndarray | float:
        """Log density at one point (d,) or a batch (m, d)."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        norm = math.log(len(self.data)) + float(np.sum(np.log(self.bandwidth * math.sqrt(2 * math.pi))))
        out = np.empty(len(pts))
        step = max(1, CHUNK_CELLS // max(1, len(self.data)))  # bounds the (points, data) buffer
        for a in range(0, len(pts), step):
            z = (pts[a : a + step, None, :] - self.data[None, :, :]) / self.bandwidth
            out[a : a + step] = logsumexp(-0.5 * np.sum(z * z, axis=2), axis=1) - norm
        return out if np.ndim(x) == 2 else float(out[0])

    def __call__(self, x) -> np.ndarray | float:
        # floor keeps the density strictly positive far from the data
        return np.maximum(np.exp(self.log_density(x)), np.finfo(float).tiny)

    def to_json(self) -> dict:
        return {"data": self.data.tolist(), "bandwidth": self.bandwidth.tolist()}

    @classmethod
    def from_json(cls, doc: dict) -> "DensityModel":
        return cls(np.asarray(doc["data"], dtype=float), np.asarray(doc["bandwidth"], dtype=float))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "DensityModel":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def fit_density_features(features) -> DensityModel:
    rows = [f.as_array() if isinstance(f, FeatureVector) else np.asarray(f, dtype=float) for f in features]
    data = np.array(sorted(map(tuple, rows)), dtype=float)  # sorted: order-invariant fit
    n, d = data.shape
    std = data.std(axis=0)
    bw = n ** (-1.0 / (d + 4)) * std
    for i in np.flatnonzero(bw < BANDWIDTH_FLOOR):
        warnings.warn(DegenerateFeature(int(i)), stacklevel=3)
    return DensityModel(data, np.maximum(bw, BANDWIDTH_FLOOR))


def fit_density(pool, min_size: int = 20) -> DensityModel:
    """Scott's-rule KDE over the features of ``pool`` (graphs or topologies)."""
    pool = list(pool)
    if len(pool) < min_size:
        raise ValueError(f"density needs at least {min_size} graphs, got {len(pool)}")
    return fit_density_features([compute_features(g) for g in pool])
