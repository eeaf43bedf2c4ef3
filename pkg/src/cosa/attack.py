"""Compact-subspace attack: objective, gradients, Adam loop, ablations and PGD.

The adversarial latent is ``z' = (D + U Gamma) alpha`` where ``D`` is the
class prototype dictionary, ``alpha`` the fixed sparse code of the clean
latent and ``U Gamma`` a rank-``r`` dictionary perturbation.  The loss is::

    L_mis(f_s(Dec(z')), y) + lam_per * (CD + 0.1 HD)(P, Dec(z'))
        + lam_rank * ||Gamma||_* + lam_ort * ||U^T U - I||_F^2

The decoded cloud is matched point-to-point to the clean cloud (optimal
assignment) before the final l-infinity clip, because decoder output order
carries no correspondence with the input order.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import (DistortionReport, PointCloud, as_points, distortion_report, linf_clip,
                       sq_dists)
from .nn.layers import cross_entropy
from .nn.optim import Adam
from .subspace import PrototypeDictionary, sparse_code

log = logging.getLogger(__name__)

MISLOSS_TAGS = ("neg_ce", "margin")
ABLATION_MODES = ("none", "s_only", "b_only", "full")
HD_WEIGHT = 0.1


class AttackError(RuntimeError):
    def __init__(self, msg, trace=None):
        super().__init__(msg)
        self.trace = trace


@dataclass
class AttackConfig:
    lambda_spa: float = 0.1
    lambda_per: float = 1.0
    lambda_rank: float = 1e-4
    lambda_ort: float = 1e-3
    eps: float = 0.18
    iters: int = 2000
    lr: float = 1e-2
    r: int = 3
    m_y: int = 5
    misloss: str = "neg_ce"
    kappa: float = 0.0  # margin floor, only used by misloss="margin"
    seed: int = 0
    snapshot_every: int = 100

    def __post_init__(self):
        for name in ("lambda_spa", "lambda_per", "lambda_rank", "lambda_ort"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.iters < 0 or self.r < 1 or self.m_y < 1:
            raise ValueError("iters >= 0, r >= 1 and m_y >= 1 are required")
        if self.misloss not in MISLOSS_TAGS:
            raise ValueError(f"misloss must be one of {MISLOSS_TAGS}")

    def as_dict(self):
        return asdict(self)


@dataclass
class AttackResult:
    adv: PointCloud
    delta: np.ndarray
    success: bool
    loss_trace: np.ndarray
    distortion: DistortionReport
    pre_clip_linf: float
    U: Optional[np.ndarray] = None
    Gamma: Optional[np.ndarray] = None
    params: Dict[str, np.ndarray] = field(default_factory=dict)
    snapshots: List[dict] = field(default_factory=list)
    mode: str = "full"


# --- matrix terms -----------------------------------------------------------

def perturbed_latent(dictionary, alpha, U, Gamma):
    D = dictionary.D if isinstance(dictionary, PrototypeDictionary) else np.asarray(dictionary)
    alpha = np.asarray(alpha, dtype=np.float64)
    if U.shape[0] != D.shape[0] or U.shape[1] != Gamma.shape[0] or Gamma.shape[1] != D.shape[1] \
            or alpha.shape != (D.shape[1],):
        raise ValueError(f"inconsistent shapes D{D.shape} U{U.shape} Gamma{Gamma.shape} alpha{alpha.shape}")
    return D @ alpha + U @ (Gamma @ alpha)


def _check_finite(M, what):
    M = np.asarray(M, dtype=np.float64)
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{what} has non-finite entries")
    return M


def nuclear_norm(Gamma):
    """Sum of singular values from the eigenvalues of the smaller Gram matrix."""
    G = _check_finite(Gamma, "Gamma")
    gram = G @ G.T if G.shape[0] <= G.shape[1] else G.T @ G
    ev = np.linalg.eigvalsh(gram)
    return float(np.sqrt(np.clip(ev, 0.0, None)).sum())


def nuclear_norm_subgrad(Gamma, tol=1e-10):
    """``U_s V_s^T`` over singular values above ``tol``; zero at ``Gamma = 0``."""
    G = _check_finite(Gamma, "Gamma")
    Us, s, Vt = np.linalg.svd(G, full_matrices=False)
    keep = s > tol
    return Us[:, keep] @ Vt[keep]


def ortho_penalty(U):
    """``||U^T U - I||_F^2`` and its gradient ``4 U (U^T U - I)``."""
    U = _check_finite(U, "U")
    E = U.T @ U - np.eye(U.shape[1])
    return float((E * E).sum()), 4.0 * U @ E


def orthonormal_init(d, r, seed):
    Q, R = np.linalg.qr(np.random.default_rng(seed).normal(size=(d, r)))
    # fix the sign ambiguity of QR so the result is a function of the seed only
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


# --- loss pieces ------------------------------------------------------------

def misclassification_loss(logits, y, tag="neg_ce", kappa=0.0):
    """Attack loss on the surrogate logits and its gradient (lower = more adversarial)."""
    if tag == "neg_ce":
        ce, g = cross_entropy(logits, y)
        return -ce, -g
    other = logits.copy()
    other[y] = -np.inf
    j = int(other.argmax())
    margin = logits[y] - logits[j]
    g = np.zeros_like(logits)
    if margin > -kappa:
        g[y], g[j] = 1.0, -1.0
        return float(margin), g
    return -kappa, g


def perceptual_loss(P, Q):
    """``CD(P, Q) + 0.1 * HD(P, Q)`` and its gradient w.r.t. ``Q``.

    One distance table feeds both terms; nearest-neighbour assignments and
    the Hausdorff max pair are held fixed (lowest index on ties).
    """
    d = sq_dists(P, Q)
    n, m = d.shape
    nn_pq = d.argmin(axis=1)
    nn_qp = d.argmin(axis=0)
    fmin = d[np.arange(n), nn_pq]
    bmin = d[nn_qp, np.arange(m)]
    cd = fmin.mean() + bmin.mean()
    g = (Q - P[nn_qp]) * (2.0 / m)
    fwd = (Q[nn_pq] - P) * (2.0 / n)
    for k in range(3):
        g[:, k] += np.bincount(nn_pq, weights=fwd[:, k], minlength=m)

    fi = int(fmin.argmax())
    bj = int(bmin.argmax())
    if fmin[fi] >= bmin[bj]:
        i, j, hd2 = fi, int(nn_pq[fi]), fmin[fi]
    else:
        i, j, hd2 = int(nn_qp[bj]), bj, bmin[bj]
    hd = np.sqrt(hd2)
    if hd > 0:
        g[j] += HD_WEIGHT * (Q[j] - P[i]) / hd
    return float(cd + HD_WEIGHT * hd), g, float(cd), float(hd)


def _decode_and_score(z, P, y, surrogate, decoder, cfg, use_per=True):
    """Loss terms on ``Dec(z)`` and the gradient w.r.t. ``z``."""
    Q, dcache = decoder.forward(z[None])
    Q = Q[0]
    logits, ccache = surrogate.forward(Q[None])
    mis, gl = misclassification_loss(logits[0], y, cfg.misloss, cfg.kappa)
    _, gQ = surrogate.backward(ccache, gl[None], param_grads=False)
    gQ = gQ[0]
    parts = {"mis": mis}
    loss = mis
    if use_per and cfg.lambda_per > 0:
        per, gper, cd, hd = perceptual_loss(P, Q)
        loss += cfg.lambda_per * per
        gQ = gQ + cfg.lambda_per * gper
        parts.update(per=per, cd=cd, hd=hd)
    _, gz = decoder.backward(dcache, gQ[None], param_grads=False)
    return loss, gz[0], parts, Q


def cosa_objective(P, y, surrogate, decoder, dictionary, alpha, U, Gamma, cfg: AttackConfig):
    """Full objective value, gradients w.r.t. ``U`` and ``Gamma`` and the per-term parts."""
    P = as_points(P)
    D = dictionary.D if isinstance(dictionary, PrototypeDictionary) else np.asarray(dictionary)
    alpha = np.asarray(alpha, dtype=np.float64)
    ga = Gamma @ alpha
    z = perturbed_latent(D, alpha, U, Gamma)
    loss, gz, parts, _ = _decode_and_score(z, P, y, surrogate, decoder, cfg)
    grad_U = np.outer(gz, ga)
    grad_G = np.outer(U.T @ gz, alpha)
    if cfg.lambda_rank > 0:
        nuc = nuclear_norm(Gamma)
        loss += cfg.lambda_rank * nuc
        grad_G += cfg.lambda_rank * nuclear_norm_subgrad(Gamma)
        parts["rank"] = nuc
    if cfg.lambda_ort > 0:
        ort, gort = ortho_penalty(U)
        loss += cfg.lambda_ort * ort
        grad_U += cfg.lambda_ort * gort
        parts["ortho"] = ort
    for name, v in parts.items():
        if not np.isfinite(v):
            raise AttackError(f"non-finite {name} term in objective")
    return float(loss), grad_U, grad_G, parts


# --- parameterisations of the adversarial latent ----------------------------

class _Param:
    """One ablation mode: trainable tensors plus the latent they produce."""

    regularized = False

    def __init__(self, params):
        self.params = params

    def latent(self):
        raise NotImplementedError

    def backward(self, gz):
        raise NotImplementedError

    def low_rank(self):
        return None, None


class _Full(_Param):
    regularized = True

    def __init__(self, D, alpha, U):
        super().__init__({"U": U, "Gamma": np.zeros((U.shape[1], D.shape[1]))})
        self.D, self.alpha = D, alpha

    def latent(self):
        return perturbed_latent(self.D, self.alpha, self.params["U"], self.params["Gamma"])

    def backward(self, gz):
        U, G = self.params["U"], self.params["Gamma"]
        return {"U": np.outer(gz, G @ self.alpha), "Gamma": np.outer(U.T @ gz, self.alpha)}

    def low_rank(self):
        return self.params["U"], self.params["Gamma"]


class _SOnly(_Param):
    regularized = True

    def __init__(self, z0, U):
        super().__init__({"U": U, "Gamma": np.zeros((U.shape[1], 1))})
        self.z0 = z0

    def latent(self):
        return self.z0 + self.params["U"] @ self.params["Gamma"][:, 0]

    def backward(self, gz):
        U, G = self.params["U"], self.params["Gamma"]
        return {"U": np.outer(gz, G[:, 0]), "Gamma": (U.T @ gz)[:, None]}

    def low_rank(self):
        return self.params["U"], self.params["Gamma"]


class _BOnly(_Param):
    def __init__(self, D, alpha):
        super().__init__({"Delta": np.zeros_like(D)})
        self.D, self.alpha = D, alpha

    def latent(self):
        return (self.D + self.params["Delta"]) @ self.alpha

    def backward(self, gz):
        return {"Delta": np.outer(gz, self.alpha)}


class _NoSubspace(_Param):
    def __init__(self, z0):
        super().__init__({"dz": np.zeros_like(z0)})
        self.z0 = z0

    def latent(self):
        return self.z0 + self.params["dz"]

    def backward(self, gz):
        return {"dz": gz.copy()}


def match_points(reference, cloud):
    """Reorder ``cloud`` rows to the optimal one-to-one assignment onto ``reference``."""
    ref, pts = as_points(reference), as_points(cloud)
    if ref.shape != pts.shape:
        raise ValueError(f"cannot match clouds of shapes {ref.shape} and {pts.shape}")
    rows, cols = linear_sum_assignment(sq_dists(ref, pts))
    out = np.empty_like(pts)
    out[rows] = pts[cols]
    return out


def finalize(P: PointCloud, decoded, surrogate, eps):
    """Match the decoded cloud to ``P``, clip into the eps box and score it."""
    matched = match_points(P, decoded)
    pre = float(np.abs(matched - P.points).max())
    adv = linf_clip(matched, P, eps)
    success = int(surrogate.predict(adv.points)) != P.label
    return adv, pre, success


def ablation_attack(mode, P: PointCloud, y, surrogate, autoencoder, dictionary, cfg: AttackConfig):
    """Run one attack variant.

    ``autoencoder`` is an ``(encoder, decoder)`` pair.  Modes:

    ``full``    Gamma/U perturbation of the prototype dictionary (the attack proper)
    ``s_only``  ``z = Enc(P) + U gamma`` with all four loss terms
    ``b_only``  ``z = (D + Delta) alpha`` with an unconstrained ``Delta``
    ``none``    ``z = Enc(P) + dz`` with an unconstrained ``dz``
    """
    if mode not in ABLATION_MODES:
        raise ValueError(f"unknown ablation mode {mode!r}")
    if not isinstance(P, PointCloud):
        P = PointCloud(P, y)
    elif P.label != y:
        P = PointCloud(P.points, y)
    encoder, decoder = autoencoder
    D = dictionary.D if isinstance(dictionary, PrototypeDictionary) else np.asarray(dictionary)
    d = D.shape[0]
    if cfg.r > d:
        raise ValueError(f"rank r={cfg.r} exceeds latent width d={d}")

    if mode in ("full", "b_only"):
        alpha = sparse_code(encoder(P.points), D, cfg.lambda_spa).alpha
        param = _Full(D, alpha, orthonormal_init(d, cfg.r, cfg.seed)) if mode == "full" else _BOnly(D, alpha)
    else:
        z0 = encoder(P.points)
        param = _SOnly(z0, orthonormal_init(d, cfg.r, cfg.seed)) if mode == "s_only" else _NoSubspace(z0)

    opt = Adam(lr=cfg.lr)
    trace = np.empty(cfg.iters)
    snapshots = []
    for it in range(cfg.iters):
        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            snapshots.append(_snapshot(it, param))
        loss, gz, parts, _ = _decode_and_score(param.latent(), P.points, y, surrogate, decoder, cfg)
        grads = param.backward(gz)
        if param.regularized:
            U, G = param.low_rank()
            if cfg.lambda_rank > 0:
                loss += cfg.lambda_rank * nuclear_norm(G)
                grads["Gamma"] += cfg.lambda_rank * nuclear_norm_subgrad(G)
            if cfg.lambda_ort > 0:
                ort, gort = ortho_penalty(U)
                loss += cfg.lambda_ort * ort
                grads["U"] += cfg.lambda_ort * gort
        if not np.isfinite(loss):
            raise AttackError(f"non-finite loss at iteration {it}", trace[:it].copy())
        trace[it] = loss
        opt.step(param.params, grads)
    if cfg.snapshot_every and cfg.iters % cfg.snapshot_every == 0:
        snapshots.append(_snapshot(cfg.iters, param))

    decoded = decoder(param.latent())
    adv, pre, success = finalize(P, decoded, surrogate, cfg.eps)
    U, G = param.low_rank()
    return AttackResult(
        adv=adv, delta=adv.points - P.points, success=success, loss_trace=trace,
        distortion=distortion_report(P, adv), pre_clip_linf=pre,
        U=None if U is None else U.copy(), Gamma=None if G is None else G.copy(),
        params={k: v.copy() for k, v in param.params.items()}, snapshots=snapshots, mode=mode)


def _snapshot(it, param):
    U, G = param.low_rank()
    if U is None:
        return {"iter": it}
    sv = np.linalg.svd(U @ G, compute_uv=False)
    ortho = np.linalg.norm(U.T @ U - np.eye(U.shape[1]))
    return {"iter": it, "singular_values": sv, "ortho_dev": float(ortho)}


def cosa_attack(P, y, surrogate, autoencoder, dictionary, cfg: AttackConfig) -> AttackResult:
    return ablation_attack("full", P, y, surrogate, autoencoder, dictionary, cfg)


def pgd_baseline(P, y, surrogate, eps=0.18, steps=50, step_size=None) -> AttackResult:
    """Sign-gradient ascent on the surrogate cross-entropy inside the eps box."""
    if not isinstance(P, PointCloud):
        P = PointCloud(P, y)
    elif P.label != y:
        P = PointCloud(P.points, y)
    step_size = eps / 10 if step_size is None else step_size
    orig = P.points
    X = orig.copy()
    trace = np.empty(steps)
    for it in range(steps):
        loss, g = surrogate.loss_and_input_grad(X, y)
        if not np.all(np.isfinite(g)):
            raise AttackError(f"non-finite gradient at PGD step {it}", trace[:it].copy())
        trace[it] = loss
        X = np.clip(X + step_size * np.sign(g), orig - eps, orig + eps)
    adv = PointCloud(X, y)
    success = int(surrogate.predict(X)) != y
    return AttackResult(adv=adv, delta=X - orig, success=success, loss_trace=trace,
                        distortion=distortion_report(P, adv), pre_clip_linf=float(np.abs(X - orig).max()),
                        mode="pgd")
