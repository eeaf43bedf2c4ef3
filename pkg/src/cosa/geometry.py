"""Point-cloud container, distortion metrics and the l-infinity projection.

All metrics run in float64 on dense O(n*m) distance tables; clouds at this
scale have at most a few thousand points so no spatial index is used.

Conventions
-----------
chamfer
    squared Euclidean nearest-neighbour distances, averaged per side and
    summed over both directions.
hausdorff
    symmetric, non-squared: max of the two directed max-min distances.

Nearest-neighbour ties always resolve to the lowest point index (``argmin``
and ``argmax`` return the first hit), which keeps gradients deterministic.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np


class GeometryError(ValueError):
    """Raised when a geometric precondition is violated."""


@dataclass(frozen=True)
class PointCloud:
    """An ``n x 3`` float64 point array with an optional class label."""

    points: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise GeometryError(f"points must have shape (n, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise GeometryError("point cloud is empty")
        if not np.all(np.isfinite(pts)):
            raise GeometryError("point cloud contains non-finite coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        if self.label is not None:
            object.__setattr__(self, "label", int(self.label))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.label)

    def __len__(self):
        return self.n


CloudLike = Union[PointCloud, np.ndarray]


def as_points(p: CloudLike) -> np.ndarray:
    """Return the raw ``(n, 3)`` array of a cloud or array-like."""
    if isinstance(p, PointCloud):
        return p.points
    arr = np.asarray(p, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise GeometryError(f"points must have shape (n, 3), got {arr.shape}")
    if arr.shape[0] == 0:
        raise GeometryError("point cloud is empty")
    return arr


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Explicit differences rather than |a|^2+|b|^2-2ab: exact zeros on
    # identical points and sq_dists(a, b) == sq_dists(b, a).T bit for bit,
    # since every entry sums the x, y, z terms in the same order.
    d = np.subtract.outer(a[:, 0], b[:, 0])
    d *= d
    for k in (1, 2):
        t = np.subtract.outer(a[:, k], b[:, k])
        t *= t
        d += t
    return d


def chamfer(p: CloudLike, q: CloudLike) -> float:
    a, b = as_points(p), as_points(q)
    d = sq_dists(a, b)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


def chamfer_grad(p: CloudLike, q: CloudLike):
    """Chamfer distance and its gradients with respect to both clouds.

    Nearest-neighbour assignments are held fixed, so the result is the exact
    gradient away from ties.  Returns ``(value, grad_p, grad_q)``.
    """
    a, b = as_points(p), as_points(q)
    n, m = a.shape[0], b.shape[0]
    d = sq_dists(a, b)
    nn_ab = d.argmin(axis=1)
    nn_ba = d.argmin(axis=0)
    value = d[np.arange(n), nn_ab].mean() + d[nn_ba, np.arange(m)].mean()

    fwd = (a - b[nn_ab]) * (2.0 / n)
    bwd = (b - a[nn_ba]) * (2.0 / m)
    grad_a = fwd.copy()
    grad_b = bwd.copy()
    np.add.at(grad_b, nn_ab, -fwd)
    np.add.at(grad_a, nn_ba, -bwd)
    return float(value), grad_a, grad_b


def _directed_maxmin(d: np.ndarray):
    # d: squared distances (rows = source points). Returns (sq value, i, j).
    nn = d.argmin(axis=1)
    mins = d[np.arange(d.shape[0]), nn]
    i = int(mins.argmax())
    return mins[i], i, int(nn[i])


def hausdorff(p: CloudLike, q: CloudLike) -> float:
    a, b = as_points(p), as_points(q)
    d = sq_dists(a, b)
    forward = d.min(axis=1).max()
    backward = d.min(axis=0).max()
    return float(np.sqrt(max(forward, backward)))


def hausdorff_grad(p: CloudLike, q: CloudLike):
    """Hausdorff distance and a subgradient routed through its max pair.

    When both directions attain the maximum the forward (p -> q) pair is used.
    Returns ``(value, grad_p, grad_q)``.
    """
    a, b = as_points(p), as_points(q)
    d = sq_dists(a, b)
    fv, fi, fj = _directed_maxmin(d)
    bv, bj, bi = _directed_maxmin(d.T)
    if fv >= bv:
        value, i, j = fv, fi, fj
    else:
        value, i, j = bv, bi, bj
    grad_a = np.zeros_like(a)
    grad_b = np.zeros_like(b)
    dist = np.sqrt(value)
    if dist > 0:
        u = (a[i] - b[j]) / dist
        grad_a[i] = u
        grad_b[j] = -u
    return float(dist), grad_a, grad_b


def _check_paired(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise GeometryError(f"paired clouds differ in shape: {a.shape} vs {b.shape}")


def l2_distortion(p: CloudLike, q: CloudLike) -> float:
    """Frobenius norm of the point-wise displacement between paired clouds."""
    a, b = as_points(p), as_points(q)
    _check_paired(a, b)
    return float(np.linalg.norm(a - b))


def linf_distortion(p: CloudLike, q: CloudLike) -> float:
    a, b = as_points(p), as_points(q)
    _check_paired(a, b)
    return float(np.abs(a - b).max())


def linf_clip(adv: CloudLike, orig: CloudLike, eps: float) -> PointCloud:
    """Project ``adv`` coordinate-wise into the box ``orig +/- eps``.

    The label of ``orig`` is carried over when it is a :class:`PointCloud`.
    """
    a, o = as_points(adv), as_points(orig)
    _check_paired(a, o)
    if not eps >= 0:
        raise GeometryError(f"eps must be non-negative, got {eps}")
    clipped = np.clip(a, o - eps, o + eps)
    if eps == 0:
        clipped = o.copy()
    label = orig.label if isinstance(orig, PointCloud) else getattr(adv, "label", None)
    return PointCloud(clipped, label)


def normalize(p: CloudLike) -> PointCloud:
    """Center at the origin and scale so the farthest point has radius 1."""
    pts = as_points(p)
    centered = pts - pts.mean(axis=0)
    radius = np.sqrt(np.einsum("ij,ij->i", centered, centered).max())
    if radius == 0:
        raise GeometryError("cannot normalize a cloud whose points all coincide")
    out = centered / radius
    label = p.label if isinstance(p, PointCloud) else None
    return PointCloud(out, label)


@dataclass(frozen=True)
class DistortionReport:
    cd: float
    hd: float
    l2: float
    linf: float

    def as_dict(self):
        return {"cd": self.cd, "hd": self.hd, "l2": self.l2, "linf": self.linf}


def distortion_report(orig: CloudLike, adv: CloudLike) -> DistortionReport:
    return DistortionReport(
        cd=chamfer(orig, adv),
        hd=hausdorff(orig, adv),
        l2=l2_distortion(orig, adv),
        linf=linf_distortion(orig, adv),
    )


def batched_chamfer_grad(A: np.ndarray, B: np.ndarray):
    """Mean Chamfer distance over a batch of paired clouds and its gradient w.r.t. ``B``.

    ``A`` is ``(N, n, 3)`` (targets), ``B`` is ``(N, m, 3)``.  Uses the
    ``|a|^2 + |b|^2 - 2ab`` expansion for speed, so values can differ from
    :func:`chamfer` in the last few bits; intended for training loops.
    Returns ``(mean_value, per_cloud_values, grad_B)``.
    """
    N, n, _ = A.shape
    m = B.shape[1]
    aa = np.einsum("bij,bij->bi", A, A)
    bb = np.einsum("bij,bij->bi", B, B)
    d = aa[:, :, None] + bb[:, None, :] - 2.0 * (A @ B.transpose(0, 2, 1))
    np.maximum(d, 0.0, out=d)
    nn_ab = d.argmin(axis=2)
    nn_ba = d.argmin(axis=1)
    rows = np.arange(N)[:, None]
    per = np.take_along_axis(d, nn_ab[..., None], 2)[..., 0].mean(1) \
        + np.take_along_axis(d, nn_ba[:, None, :], 1)[:, 0].mean(1)
    grad = (B - A[rows, nn_ba]) * (2.0 / m)
    fwd = (A - B[rows, nn_ab]) * (2.0 / n)
    flat = (nn_ab + rows * m).reshape(-1)
    g2 = grad.reshape(N * m, 3)
    for k in range(3):
        g2[:, k] -= np.bincount(flat, weights=fwd[..., k].reshape(-1), minlength=N * m)
    return float(per.mean()), per, grad / N
