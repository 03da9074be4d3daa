"""Accuracy and RBF maximum mean discrepancy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial.distance import cdist

from . import numerics as nx
from .numerics import Rng


@dataclass(frozen=True)
class MmdConfig:
    """Gaussian-kernel bandwidth; ``None`` means the pooled median heuristic."""

    bandwidth: Optional[float] = None

    def __post_init__(self):
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")


def _as_array(x) -> np.ndarray:
    x = getattr(x, "features", x)
    x = x.data if isinstance(x, nx.Tensor) else x
    return np.asarray(x, dtype=np.float64)


def predict(c, fe, x) -> np.ndarray:
    """Argmax class; ties go to the lowest index (``np.argmax`` semantics)."""
    with nx.no_grad():
        logits = c(fe(nx.as_tensor(x))).data
    return np.argmax(logits, axis=1)


def accuracy(c, fe, d) -> float:
    points, labels = d.points, d.labels
    if len(labels) == 0:
        raise ValueError("accuracy: empty dataset")
    return float(np.mean(predict(c, fe, points) == labels))


def median_bandwidth(x: np.ndarray, y: np.ndarray) -> float:
    pooled = np.concatenate([x, y])
    d2 = cdist(pooled, pooled, "sqeuclidean")
    d = np.sqrt(d2[np.triu_indices(len(pooled), k=1)])
    med = float(np.median(d))
    return med if med > 0 else 1.0


def rbf_mmd2(x, y, cfg: MmdConfig = MmdConfig()) -> float:
    """Biased squared MMD with kernel ``exp(-|a - b|^2 / (2 h^2))``."""
    x, y = _as_array(x), _as_array(y)
    if len(x) < 2 or len(y) < 2:
        raise ValueError("rbf_mmd2: need at least 2 samples per side")
    h = cfg.bandwidth if cfg.bandwidth is not None else median_bandwidth(x, y)
    g = 1.0 / (2.0 * h * h)
    kxx = np.exp(-g * cdist(x, x, "sqeuclidean")).mean()
    kyy = np.exp(-g * cdist(y, y, "sqeuclidean")).mean()
    # correctly rounded sum, so swapping x and y gives the same bits
    kxy = math.fsum(np.exp(-g * cdist(x, y, "sqeuclidean")).ravel()) / (len(x) * len(y))
    # biased form is a squared RKHS norm; clip rounding below zero
    return max(float(kxx + kyy - 2.0 * kxy), 0.0)


def mmd_permutation_test(x, y, n_perm: int = 200, rng: Rng | None = None,
                         cfg: MmdConfig | None = None) -> float:
    """p-value of the observed MMD^2 under random relabelling of the pooled sample."""
    x, y = _as_array(x), _as_array(y)
    rng = rng or Rng(0)
    cfg = cfg or MmdConfig(median_bandwidth(x, y))
    observed = rbf_mmd2(x, y, cfg)
    pooled = np.concatenate([x, y])
    n = len(x)
    hits = 0
    for _ in range(n_perm):
        perm = rng.permutation(len(pooled))
        if rbf_mmd2(pooled[perm[:n]], pooled[perm[n:]], cfg) >= observed:
            hits += 1
    return (hits + 1) / (n_perm + 1)
