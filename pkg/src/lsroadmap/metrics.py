"""Distance metrics shared by the mapping, roadmap and planner modules."""
from __future__ import annotations

import enum

import numpy as np
from scipy.spatial.distance import cdist, pdist


class Metric(enum.Enum):
    L1 = "l1"
    L2 = "l2"
    LINF = "linf"

    @classmethod
    def parse(cls, name: str) -> "Metric":
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown metric {name!r}, expected one of l1/l2/linf") from None


_CDIST_NAME = {Metric.L1: "cityblock", Metric.L2: "euclidean", Metric.LINF: "chebyshev"}


def distance(a: np.ndarray, b: np.ndarray, metric: Metric) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    d = a - b
    if metric is Metric.L1:
        return float(np.sum(np.abs(d)))
    if metric is Metric.L2:
        return float(np.sqrt(np.sum(d * d)))
    return float(np.max(np.abs(d)))


def pairwise_distances(points: np.ndarray, metric: Metric) -> np.ndarray:
    """Condensed distance vector over all unordered point pairs (scipy layout)."""
    return pdist(np.asarray(points, dtype=float), _CDIST_NAME[metric])


def cross_distances(a: np.ndarray, b: np.ndarray, metric: Metric) -> np.ndarray:
    """|a| x |b| distance matrix."""
    return cdist(np.asarray(a, dtype=float), np.asarray(b, dtype=float), _CDIST_NAME[metric])
