"""Input-purification defenses: simple random sampling and statistical outlier removal.

Both return subsets of the input rows without touching coordinates.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .geometry import PointCloud, sq_dists

DEFENSES = ("none", "srs", "sor")


@dataclass(frozen=True)
class DefenseConfig:
    srs_keep_ratio: float = 0.875
    sor_k: int = 8
    sor_alpha: float = 1.1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.srs_keep_ratio <= 1:
            raise ValueError("srs_keep_ratio must lie in (0, 1]")
        if self.sor_k < 1:
            raise ValueError("sor_k must be at least 1")
        if not self.sor_alpha >= 0:  # also rejects NaN; +inf is the no-op sentinel
            raise ValueError("sor_alpha must be non-negative")

    def as_dict(self):
        return asdict(self)


def _cloud(p):
    return p if isinstance(p, PointCloud) else PointCloud(p)


def srs(p, keep_ratio: float, seed: int) -> PointCloud:
    """Keep ``ceil(keep_ratio * n)`` points drawn uniformly without replacement."""
    p = _cloud(p)
    if not 0 < keep_ratio <= 1:
        raise ValueError("keep_ratio must lie in (0, 1]")
    keep = math.ceil(keep_ratio * p.n)
    if keep < 1:
        raise ValueError("srs would return an empty cloud")
    idx = np.random.default_rng(seed).choice(p.n, size=keep, replace=False)
    return PointCloud(p.points[idx], p.label)


def knn_mean_distance(points, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its ``k`` nearest other points."""
    d = sq_dists(points, points)
    np.fill_diagonal(d, np.inf)
    nearest = np.partition(d, k - 1, axis=1)[:, :k]
    return np.sqrt(nearest).mean(axis=1)


def sor(p, k: int = 8, alpha: float = 1.1) -> PointCloud:
    """Drop points whose mean k-NN distance exceeds ``mu + alpha * sigma``.

    ``sigma`` is the population standard deviation of the per-point means.
    Row order of the survivors is preserved; if every point would be dropped,
    the one with the smallest mean is kept.
    """
    p = _cloud(p)
    if k < 1 or p.n <= k:
        raise ValueError(f"sor needs n > k (n={p.n}, k={k})")
    if not alpha >= 0:
        raise ValueError("alpha must be non-negative")
    if math.isinf(alpha):
        return p
    means = knn_mean_distance(p.points, k)
    keep = means <= means.mean() + alpha * means.std()
    if not keep.any():
        keep[int(means.argmin())] = True
    return PointCloud(p.points[keep], p.label)


def apply_defense(name: str, p, cfg: DefenseConfig, seed: int = None) -> PointCloud:
    """Dispatch by name; ``seed`` overrides ``cfg.seed`` for per-input srs draws."""
    if name == "none":
        return _cloud(p)
    if name == "srs":
        return srs(p, cfg.srs_keep_ratio, cfg.seed if seed is None else seed)
    if name == "sor":
        return sor(p, cfg.sor_k, cfg.sor_alpha)
    raise ValueError(f"unknown defense {name!r}; expected one of {DEFENSES}")
