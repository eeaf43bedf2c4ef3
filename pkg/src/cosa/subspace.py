"""Prototype dictionaries (k-means over class latents) and l1 sparse coding.

The sparse code minimises ``||z - D a||^2 + lam * ||a||_1`` with no 1/2 on
the quadratic.  ISTA steps ``t = 1/L`` along the full gradient
``2 D^T (D a - z)`` with ``L = 2 * lambda_max(D^T D)``, so the matching
soft-threshold is ``t * lam``.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .nn.checkpoint import CKPT_FORMAT, CKPT_VERSION, CheckpointError, load_doc

DICT_KIND = "cosa-dict"

log = logging.getLogger(__name__)


class SparseCodingError(RuntimeError):
    """ISTA hit its iteration cap; carries the best iterate seen."""

    def __init__(self, msg, alpha, residual):
        super().__init__(msg)
        self.alpha = alpha
        self.residual = residual


# --- k-means ----------------------------------------------------------------

@dataclass
class KMeansResult:
    centers: np.ndarray  # (d, m), one center per column
    assignments: np.ndarray
    inertia: List[float] = field(default_factory=list)  # after every assignment step
    iterations: int = 0


def _sq_to_centers(X, C):
    diff = X[:, None, :] - C[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans(xs, m: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-10) -> KMeansResult:
    """Lloyd's algorithm from a k-means++ start.

    ``xs`` is ``(N, d)``.  Assignment ties go to the lowest center index; a
    cluster that loses all its points is moved onto the point farthest from
    its current center.
    """
    X = np.asarray(xs, dtype=np.float64)
    N = X.shape[0]
    if m < 1 or N < m:
        raise ValueError(f"need at least m={m} >= 1 points, got {N}")
    rng = np.random.default_rng(seed)

    C = np.empty((m, X.shape[1]))
    C[0] = X[rng.integers(N)]
    closest = _sq_to_centers(X, C[:1])[:, 0]
    for j in range(1, m):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(N, p=closest / total))
        else:
            # every point already coincides with a center
            idx = int(rng.integers(N))
        C[j] = X[idx]
        closest = np.minimum(closest, _sq_to_centers(X, C[j:j + 1])[:, 0])

    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_to_centers(X, C)
        assign = d.argmin(axis=1)
        mind = d[np.arange(N), assign]
        history.append(float(mind.sum()))
        if len(history) > 1 and history[-2] - history[-1] < tol:
            break
        counts = np.bincount(assign, minlength=m)
        for j in range(m):
            if counts[j]:
                C[j] = X[assign == j].mean(axis=0)
        for j in np.flatnonzero(counts == 0):
            far = int(mind.argmax())
            C[j] = X[far]
            mind[far] = 0.0
    return KMeansResult(C.T.copy(), assign, history, it)


# --- dictionaries -----------------------------------------------------------

@dataclass
class PrototypeDictionary:
    y: int
    D: np.ndarray  # (d, m_y)

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=np.float64)
        if self.D.ndim != 2 or self.D.shape[1] < 1:
            raise ValueError(f"dictionary must be (d, m_y) with m_y >= 1, got {self.D.shape}")
        if not np.all(np.isfinite(self.D)):
            raise ValueError("dictionary has non-finite entries")

    @property
    def d(self):
        return self.D.shape[0]

    @property
    def m(self):
        return self.D.shape[1]

    def condition(self) -> float:
        """lambda_max / lambda_min of ``D^T D`` (inf when rank deficient)."""
        ev = np.linalg.eigvalsh(self.D.T @ self.D)
        return float(ev[-1] / ev[0]) if ev[0] > 0 else float("inf")


def build_dictionaries(encoder, manifest, m_y: int = 5, seed: int = 0) -> Dict[int, PrototypeDictionary]:
    train = manifest.load("train")
    out = {}
    for y in sorted({c.label for c in train}):
        clouds = [c for c in train if c.label == y]
        if len(clouds) < m_y:
            raise ValueError(f"class {y} has {len(clouds)} train samples, fewer than m_y={m_y}")
        Z = encoder(np.stack([c.points for c in clouds]))
        class_seed = int(np.random.SeedSequence([seed, y]).generate_state(1)[0])
        out[y] = PrototypeDictionary(y, kmeans(Z, m_y, seed=class_seed).centers)
    return out


def save_dictionaries(path, dicts: Dict[int, PrototypeDictionary]):
    entries = [{"y": int(y), "m_y": dct.m, "d": dct.d, "columns": dct.D.T.tolist()}
               for y, dct in sorted(dicts.items())]
    doc = {"format": CKPT_FORMAT, "version": CKPT_VERSION, "kind": DICT_KIND, "entries": entries}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_dictionaries(path) -> Dict[int, PrototypeDictionary]:
    doc = load_doc(path, DICT_KIND)
    out = {}
    for e in doc["entries"]:
        D = np.array(e["columns"], dtype=np.float64).T
        if D.shape != (e["d"], e["m_y"]):
            raise CheckpointError(f"{path}: class {e['y']} columns do not match d={e['d']}, m_y={e['m_y']}")
        out[int(e["y"])] = PrototypeDictionary(int(e["y"]), D)
    return out


# --- sparse coding ----------------------------------------------------------

@dataclass
class SparseCode:
    alpha: np.ndarray
    objective: float
    residual: float
    iterations: int
    history: List[float] = field(default_factory=list)
    method: str = "ista"


def lasso_objective(z, D, alpha, lam):
    r = z - D @ alpha
    return float(r @ r + lam * np.abs(alpha).sum())


def kkt_residual(z, D, alpha, lam):
    """Infinity-norm distance of ``-grad`` of the quadratic from ``lam * d||alpha||_1``."""
    g = 2.0 * D.T @ (D @ alpha - z)
    on = alpha != 0
    res = np.where(on, np.abs(g + lam * np.sign(alpha)), np.maximum(np.abs(g) - lam, 0.0))
    return float(res.max()) if res.size else 0.0


def lipschitz(D, iters=100, seed=0):
    """``2 * lambda_max(D^T D)`` by power iteration, inflated by 1% for a safe step."""
    G = D.T @ D
    v = np.random.default_rng(seed).normal(size=G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            break
        v = w / nrm
        lam = float(v @ G @ v)
    return 2.0 * lam * 1.01


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _solve_on_support(DtD, Dtz, signs, lam):
    """Stationary point of the lasso restricted to a fixed sign pattern."""
    alpha = np.zeros(signs.size)
    on = signs != 0
    if on.any():
        rhs = Dtz[on] - 0.5 * lam * signs[on]
        alpha[on] = np.linalg.lstsq(DtD[np.ix_(on, on)], rhs, rcond=None)[0]
    return alpha


def active_set_lasso(z, D, lam, start=None, tol=1e-8, max_atoms=8):
    """Exact lasso solution by sign-pattern search, or ``None`` if no pattern passes ``tol``.

    The sign pattern of ``start`` is tried first, then every pattern in
    ``{-1, 0, 1}^m`` when ``m <= max_atoms``.
    """
    m = D.shape[1]
    DtD, Dtz = D.T @ D, D.T @ z
    candidates = []
    if start is not None:
        candidates.append(np.sign(start))
    if m <= max_atoms:
        candidates.extend(np.array(p, dtype=np.float64) for p in itertools.product((-1, 0, 1), repeat=m))
    for signs in candidates:
        alpha = _solve_on_support(DtD, Dtz, signs, lam)
        if np.any(np.sign(alpha) != signs) or kkt_residual(z, D, alpha, lam) > tol:
            continue
        return alpha  # any verified KKT point is a global minimum of the convex objective
    return None


def sparse_code(z, dictionary, lambda_spa: float = 0.1, tol: float = 1e-8,
                max_iter: int = 20000, track: bool = False, polish: bool = True) -> SparseCode:
    """ISTA on ``||z - D alpha||^2 + lambda_spa ||alpha||_1``.

    Each step moves by ``t = 1/L`` along the full gradient ``2 D^T (D alpha - z)``
    and shrinks by ``t * lambda_spa``.  When ISTA exhausts ``max_iter`` (prototype
    dictionaries are often nearly collinear) and ``polish`` is set, the result is
    finished by :func:`active_set_lasso` and must pass the same KKT bound.
    """
    D = dictionary.D if isinstance(dictionary, PrototypeDictionary) else np.asarray(dictionary, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (D.shape[0],):
        raise ValueError(f"latent has shape {z.shape}, dictionary expects ({D.shape[0]},)")
    if lambda_spa < 0:
        raise ValueError("lambda_spa must be non-negative")
    L = lipschitz(D)
    if L == 0:
        alpha = np.zeros(D.shape[1])
        return SparseCode(alpha, lasso_objective(z, D, alpha, lambda_spa), 0.0, 0)
    t = 1.0 / L
    DtD, Dtz = D.T @ D, D.T @ z
    alpha = np.zeros(D.shape[1])
    history = [lasso_objective(z, D, alpha, lambda_spa)] if track else []
    best, best_res = alpha, kkt_residual(z, D, alpha, lambda_spa)
    for it in range(1, max_iter + 1):
        grad = 2.0 * (DtD @ alpha - Dtz)
        alpha = soft_threshold(alpha - t * grad, t * lambda_spa)
        if track:
            history.append(lasso_objective(z, D, alpha, lambda_spa))
        res = kkt_residual(z, D, alpha, lambda_spa)
        if res < best_res:
            best, best_res = alpha, res
        if res <= tol:
            return SparseCode(alpha, lasso_objective(z, D, alpha, lambda_spa), res, it, history)
    if polish:
        exact = active_set_lasso(z, D, lambda_spa, start=best, tol=tol)
        if exact is not None:
            log.debug("ISTA stalled at residual %.3e; finished by active-set solve", best_res)
            return SparseCode(exact, lasso_objective(z, D, exact, lambda_spa),
                              kkt_residual(z, D, exact, lambda_spa), max_iter, history, "ista+active-set")
    raise SparseCodingError(f"ISTA did not reach residual {tol} in {max_iter} iterations "
                            f"(best {best_res:.3e})", best, best_res)
