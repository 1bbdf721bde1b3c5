"""A learning adversary that tries to tell real subgraphs from sentinels,
plus the residual search space it leaves and distribution comparisons.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np
from scipy.stats import ks_2samp

from graphveil.features import FEATURE_NAMES, FeatureVector, compute_features
from graphveil.graph import ARITY, VOCABULARY, Edge, Node, OpGraph
from graphveil.populate import CANONICAL_4D, FUSED, MAX_ARITY, opcode_variants
from graphveil.topo import Topology

TOP_BIGRAMS: tuple[tuple[str, str], ...] = (
    ("conv2d", "relu"),
    ("conv2d", "batchnorm"),
    ("batchnorm", "relu"),
    ("relu", "conv2d"),
    ("add", "relu"),
    ("matmul", "add"),
    ("relu", "maxpool2d"),
    ("softmax", "matmul"),
)
ADV_FEATURE_NAMES = (
    FEATURE_NAMES
    + tuple(f"hist_{name}" for name in VOCABULARY)
    + tuple(f"bigram_{a}_{b}" for a, b in TOP_BIGRAMS)
)
THRESHOLD_EPS = 1e-9


def adv_features(g: OpGraph) -> np.ndarray:
    """Structural features, normalized opcode histogram, fixed bigram rates."""
    base = compute_features(g).as_array()
    hist = np.zeros(len(VOCABULARY))
    index = {name: i for i, name in enumerate(VOCABULARY)}
    for n in g.nodes:
        hist[index[n.op.name]] += 1
    hist /= max(1, len(g.nodes))
    pairs = [(g.opcode(e.src).name, g.opcode(e.dst).name) for e in g.edges]
    bigrams = np.array([sum(p == b for p in pairs) for b in TOP_BIGRAMS], dtype=float) / max(1, len(pairs))
    return np.concatenate([base, hist, bigrams])


def feature_matrix(graphs: Sequence[OpGraph]) -> np.ndarray:
    return np.array([adv_features(g) for g in graphs]).reshape(-1, len(ADV_FEATURE_NAMES))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))  # symmetric: sigmoid(-z) == 1 - sigmoid(z)


@dataclass
class ClassifierModel:
    """Logistic regression; confidence is the probability of being a sentinel."""

    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    metadata: dict = field(default_factory=dict)

    def confidence_from_features(self, x: np.ndarray) -> np.ndarray:
        return _sigmoid(((x - self.mean) / self.std) @ self.weights + self.bias)

    def confidence(self, graphs: Sequence[OpGraph]) -> np.ndarray:
        return self.confidence_from_features(feature_matrix(graphs))

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "metadata": self.metadata,
        }


def fit_logistic(x: np.ndarray, y: np.ndarray, epochs: int = 500, lr: float = 0.1) -> tuple[np.ndarray, float, np.ndarray, np.ndarray]:
    """Full-batch gradient descent on mean log-loss from zero weights."""
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (x - mean) / std
    w = np.zeros(x.shape[1])
    b = 0.0
    for _ in range(epochs):
        err = _sigmoid(z @ w + b) - y
        w -= lr * (z.T @ err) / len(y)
        b -= lr * float(err.mean())
    return w, b, mean, std


def train_classifier(
    real: Sequence[OpGraph],
    fake: Sequence[OpGraph],
    held_out_name: str = "",
    epochs: int = 500,
    lr: float = 0.1,
    seed: int = 0,
) -> ClassifierModel:
    """``seed`` is recorded only; zero initialisation and full-batch steps
    leave nothing random."""
    if not real or not fake:
        raise ValueError("need at least one real and one fake graph")
    x = np.vstack([feature_matrix(real), feature_matrix(fake)])
    y = np.concatenate([np.zeros(len(real)), np.ones(len(fake))])
    return train_on_features(x, y, held_out_name, epochs, lr, seed)


def train_on_features(x, y, held_out_name="", epochs=500, lr=0.1, seed=0) -> ClassifierModel:
    w, b, mean, std = fit_logistic(np.asarray(x, float), np.asarray(y, float), epochs, lr)
    meta = {"epochs": epochs, "lr": lr, "held_out": held_out_name, "seed": seed}
    return ClassifierModel(w, b, mean, std, meta)


# --------------------------------------------------------------------------
# threshold and candidates


def candidates(specificity, k: int, n: int) -> int:
    """round([1 + (1 - specificity) k]^n), exact for rational specificity.

    Floats are read through their shortest decimal form, so 0.451 means
    451/1000 rather than the nearest binary fraction.
    """
    beta = specificity if isinstance(specificity, Fraction) else Fraction(str(specificity))
    if not 0 <= beta <= 1:
        raise ValueError("specificity must lie in [0, 1]")
    value = (1 + (1 - beta) * k) ** n
    return round(value)


@dataclass(frozen=True)
class AdversaryReport:
    protected_model: str
    n: int
    k: int
    sensitivity: float
    specificity: float
    min_gamma: float
    candidates: int

    def to_json(self) -> dict:
        return {
            "protected_model": self.protected_model,
            "n": self.n,
            "k": self.k,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "min_gamma": self.min_gamma,
            "candidates": str(self.candidates),
        }


def report_from_confidences(real_conf, fake_conf, k: int, n: int, name: str = "") -> AdversaryReport:
    real_conf = np.asarray(real_conf, float)
    fake_conf = np.asarray(fake_conf, float)
    if not len(real_conf) or not len(fake_conf):
        raise ValueError("evaluation sets must be nonempty")
    # smallest threshold that keeps every real graph below it
    gamma = min(1.0, float(real_conf.max()) + THRESHOLD_EPS)
    sensitivity = float(np.mean(real_conf < gamma)) if gamma < 1.0 else float(np.mean(real_conf <= gamma))
    caught = int(np.sum(fake_conf >= gamma))
    beta = Fraction(caught, len(fake_conf))
    return AdversaryReport(name, n, k, sensitivity, float(beta), gamma, candidates(beta, k, n))


def min_threshold(
    model: ClassifierModel, real_eval: Sequence[OpGraph], fake_eval: Sequence[OpGraph], k: int, n: int, name: str = ""
) -> AdversaryReport:
    return report_from_confidences(model.confidence(real_eval), model.confidence(fake_eval), k, n, name or model.metadata.get("held_out", ""))


def evaluate_held_out(
    samples: dict[str, tuple[list[OpGraph], list[OpGraph]]], held_out: str, k: int, n: int, **train_kw
) -> AdversaryReport:
    """Train on every model but ``held_out`` and score its buckets."""
    train_real = [g for name, (r, _) in samples.items() if name != held_out for g in r]
    train_fake = [g for name, (_, f) in samples.items() if name != held_out for g in f]
    model = train_classifier(train_real, train_fake, held_out, **train_kw)
    real, fake = samples[held_out]
    return min_threshold(model, real, fake, k, n, held_out)


# --------------------------------------------------------------------------
# statistics


@dataclass(frozen=True)
class FeatureComparison:
    feature: str
    statistic: float
    pvalue: float
    flagged: bool


@dataclass(frozen=True)
class DistributionReport:
    features: tuple[FeatureComparison, ...]
    alpha: float

    @property
    def flagged(self) -> list[str]:
        return [f.feature for f in self.features if f.flagged]

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "features": [
                {"feature": f.feature, "statistic": f.statistic, "pvalue": f.pvalue, "flagged": f.flagged}
                for f in self.features
            ],
            "flagged": self.flagged,
        }


def _feature_rows(items) -> np.ndarray:
    rows = []
    for x in items:
        if isinstance(x, FeatureVector):
            rows.append(x.as_array())
        elif isinstance(x, np.ndarray):
            rows.append(x)
        else:
            rows.append(compute_features(x).as_array())
    return np.array(rows).reshape(-1, 4)


def compare_distributions(real, fake, alpha: float = 0.01, min_size: int = 20) -> DistributionReport:
    """Two-sample KS test per structural feature."""
    a, b = _feature_rows(real), _feature_rows(fake)
    if len(a) < min_size or len(b) < min_size:
        raise ValueError(f"need at least {min_size} graphs per side, got {len(a)} and {len(b)}")
    out = []
    for i, name in enumerate(FEATURE_NAMES):
        res = ks_2samp(a[:, i], b[:, i])
        out.append(FeatureComparison(name, float(res.statistic), float(res.pvalue), bool(res.pvalue < alpha)))
    return DistributionReport(tuple(out), alpha)


def compare_adv_features(real, fake, alpha: float = 0.01) -> list[FeatureComparison]:
    """KS test on every adversary feature, opcode-derived ones included."""
    a, b = feature_matrix(real), feature_matrix(fake)
    out = []
    for i, name in enumerate(ADV_FEATURE_NAMES):
        if np.all(a[:, i] == a[0, i]) and np.all(b[:, i] == a[0, i]):
            out.append(FeatureComparison(name, 0.0, 1.0, False))
            continue
        res = ks_2samp(a[:, i], b[:, i])
        out.append(FeatureComparison(name, float(res.statistic), float(res.pvalue), bool(res.pvalue < alpha)))
    return out


# --------------------------------------------------------------------------
# weak baseline

_NAMES = tuple(n for n in VOCABULARY if n not in FUSED)


def _baseline_names(indeg: int) -> list[str]:
    return [n for n in _NAMES if ARITY[n][0] <= indeg <= ARITY[n][1]]


def random_opcode_baseline(topologies: Sequence[Topology], seed: int = 0) -> list[OpGraph]:
    """Uniformly random opcodes that respect arity only: no shape check and
    no likelihood model. Attributes are drawn uniformly from their domains.
    Topologies with a node of in-degree above every arity are skipped."""
    if not topologies:
        raise ValueError("need at least one topology")
    rng = np.random.default_rng(seed)
    variants = {n: opcode_variants(n) for n in _NAMES}
    out = []
    for t in topologies:
        if any(t.in_degree(v) > MAX_ARITY for v in range(t.n)):
            continue
        nodes = []
        for v in range(t.n):
            names = _baseline_names(t.in_degree(v))
            name = names[int(rng.integers(len(names)))]
            choices = variants[name]
            nodes.append(Node(v, choices[int(rng.integers(len(choices)))]))
        edges = tuple(Edge(p, 0, v, port) for v in range(t.n) for port, p in enumerate(t.preds[v]))
        gin = tuple((n.id, CANONICAL_4D) for n in nodes if n.op.name == "input")
        gout = tuple((n.id, 0) for n in nodes if n.op.name == "output")
        out.append(OpGraph(tuple(nodes), edges, gin, gout))
    return out
