"""Encoder, decoder and the three classifier architectures.

Every model holds a ``params`` dict of float64 arrays and exposes

* ``forward(X) -> (out, cache)`` on batched input,
* ``backward(cache, g, param_grads=True) -> (grads, g_input)``,
* ``__call__`` for a single un-batched input.

Classifier tags:

``A``  per-point MLP, global max pool, MLP head
``B``  k-NN edge features (centre, neighbour - centre), max over neighbours,
       per-point layer, global max pool, MLP head (edge pooling is done in
       closed form, see ``layers.edge_fwd``)
``C``  per-point MLP, global mean pool, MLP head
"""
from __future__ import annotations

import numpy as np

from ..geometry import PointCloud
from . import layers as L

ARCH_TAGS = ("A", "B", "C")


def _init_linear(rng, fan_in, fan_out):
    W = rng.normal(scale=np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
    return W, np.zeros(fan_out)


def _as_batch(X):
    if isinstance(X, PointCloud):
        X = X.points
    X = np.asarray(X, dtype=np.float64)
    return X[None] if X.ndim == 2 else X


class _Model:
    kind = ""

    def __init__(self, params):
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self._check()

    def _check(self):
        for name, arr in self.params.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{self.kind}: parameter {name} is not finite")
        for name, shape in self.shapes().items():
            if self.params[name].shape != shape:
                raise ValueError(f"{self.kind}: {name} has shape {self.params[name].shape}, expected {shape}")

    def shapes(self):
        raise NotImplementedError

    def meta(self):
        raise NotImplementedError


class Encoder(_Model):
    """Per-point MLP ``3 -> h -> h -> d`` followed by a max over points."""

    kind = "encoder"

    def __init__(self, params, d, h):
        self.d, self.h = d, h
        super().__init__(params)

    @classmethod
    def init(cls, d=32, h=64, seed=0):
        rng = np.random.default_rng(seed)
        p = {}
        for i, (a, b) in enumerate([(3, h), (h, h), (h, d)], 1):
            p[f"W{i}"], p[f"b{i}"] = _init_linear(rng, a, b)
        return cls(p, d, h)

    def shapes(self):
        d, h = self.d, self.h
        return {"W1": (3, h), "b1": (h,), "W2": (h, h), "b2": (h,), "W3": (h, d), "b3": (d,)}

    def meta(self):
        return {"d": self.d, "h": self.h}

    def forward(self, X):
        X = _as_batch(X)
        if X.shape[-1] != 3:
            raise ValueError(f"encoder expects (n, 3) points, got {X.shape}")
        p = self.params
        a1, c1 = L.linear_fwd(X, p["W1"], p["b1"])
        h1, m1 = L.leaky_fwd(a1)
        a2, c2 = L.linear_fwd(h1, p["W2"], p["b2"])
        h2, m2 = L.leaky_fwd(a2)
        a3, c3 = L.linear_fwd(h2, p["W3"], p["b3"])
        z, cp = L.maxpool_fwd(a3, axis=1)
        return z, (c1, m1, c2, m2, c3, cp)

    def backward(self, cache, gz, param_grads=True):
        c1, m1, c2, m2, c3, cp = cache
        p, g = self.params, {}
        ga3 = L.maxpool_bwd(cp, gz)
        gh2, g["W3"], g["b3"] = L.linear_bwd(c3, p["W3"], ga3, param_grads)
        ga2 = L.leaky_bwd(m2, gh2)
        gh1, g["W2"], g["b2"] = L.linear_bwd(c2, p["W2"], ga2, param_grads)
        ga1 = L.leaky_bwd(m1, gh1)
        gX, g["W1"], g["b1"] = L.linear_bwd(c1, p["W1"], ga1, param_grads)
        return (g if param_grads else None), gX

    def __call__(self, X):
        z, _ = self.forward(X)
        single = np.ndim(X.points if isinstance(X, PointCloud) else X) == 2
        return z[0] if single else z


class Decoder(_Model):
    """MLP ``d -> h -> h -> 3n`` reshaped to ``n x 3``."""

    kind = "decoder"

    def __init__(self, params, d, h, n):
        self.d, self.h, self.n = d, h, n
        super().__init__(params)

    @classmethod
    def init(cls, d=32, h=64, n=256, seed=0):
        rng = np.random.default_rng(seed)
        p = {}
        for i, (a, b) in enumerate([(d, h), (h, h), (h, 3 * n)], 1):
            p[f"W{i}"], p[f"b{i}"] = _init_linear(rng, a, b)
        p["W3"] *= 0.1
        return cls(p, d, h, n)

    def shapes(self):
        d, h, n = self.d, self.h, self.n
        return {"W1": (d, h), "b1": (h,), "W2": (h, h), "b2": (h,), "W3": (h, 3 * n), "b3": (3 * n,)}

    def meta(self):
        return {"d": self.d, "h": self.h, "n": self.n}

    def forward(self, Z):
        Z = np.asarray(Z, dtype=np.float64)
        Z = Z[None] if Z.ndim == 1 else Z
        if Z.shape[-1] != self.d:
            raise ValueError(f"decoder expects latent width {self.d}, got {Z.shape[-1]}")
        p = self.params
        a1, c1 = L.linear_fwd(Z, p["W1"], p["b1"])
        h1, m1 = L.leaky_fwd(a1)
        a2, c2 = L.linear_fwd(h1, p["W2"], p["b2"])
        h2, m2 = L.leaky_fwd(a2)
        out, c3 = L.linear_fwd(h2, p["W3"], p["b3"])
        return out.reshape(Z.shape[0], self.n, 3), (c1, m1, c2, m2, c3)

    def backward(self, cache, gP, param_grads=True):
        c1, m1, c2, m2, c3 = cache
        p, g = self.params, {}
        gout = gP.reshape(gP.shape[0], 3 * self.n)
        gh2, g["W3"], g["b3"] = L.linear_bwd(c3, p["W3"], gout, param_grads)
        ga2 = L.leaky_bwd(m2, gh2)
        gh1, g["W2"], g["b2"] = L.linear_bwd(c2, p["W2"], ga2, param_grads)
        ga1 = L.leaky_bwd(m1, gh1)
        gZ, g["W1"], g["b1"] = L.linear_bwd(c1, p["W1"], ga1, param_grads)
        return (g if param_grads else None), gZ

    def __call__(self, z):
        out, _ = self.forward(z)
        return out[0] if np.ndim(z) == 1 else out


class Classifier(_Model):
    kind = "classifier"

    def __init__(self, params, arch, h, Z, k=8):
        if arch not in ARCH_TAGS:
            raise ValueError(f"unknown architecture tag {arch!r}")
        self.arch, self.h, self.Z, self.k = arch, h, Z, k
        super().__init__(params)

    @classmethod
    def init(cls, arch, Z=8, h=64, k=8, seed=0):
        rng = np.random.default_rng(seed)
        p = {}
        if arch == "B":
            p["Wc"], p["b1"] = _init_linear(rng, 6, h)
            p["Wd"] = p["Wc"][3:].copy()
            p["Wc"] = p["Wc"][:3].copy()
        else:
            p["W1"], p["b1"] = _init_linear(rng, 3, h)
        p["W2"], p["b2"] = _init_linear(rng, h, h)
        p["W3"], p["b3"] = _init_linear(rng, h, h)
        p["W4"], p["b4"] = _init_linear(rng, h, Z)
        return cls(p, arch, h, Z, k)

    def shapes(self):
        h, Z = self.h, self.Z
        s = {"b1": (h,), "W2": (h, h), "b2": (h,), "W3": (h, h), "b3": (h,), "W4": (h, Z), "b4": (Z,)}
        if self.arch == "B":
            s.update(Wc=(3, h), Wd=(3, h))
        else:
            s["W1"] = (3, h)
        return s

    def meta(self):
        return {"arch": self.arch, "h": self.h, "Z": self.Z, "k": self.k}

    def forward(self, X, nbr=None):
        """Logits ``(B, Z)`` for ``(B, n, 3)`` input.

        For tag ``B`` the neighbour table may be passed in to avoid
        recomputing it; gradients treat it as fixed.
        """
        X = _as_batch(X)
        if X.shape[-1] != 3:
            raise ValueError(f"classifier expects (n, 3) points, got {X.shape}")
        p = self.params
        if self.arch == "B":
            if nbr is None:
                nbr = L.knn_indices(X, self.k)
            e, ce = L.edge_fwd(X, nbr, p["Wc"], p["Wd"], p["b1"])
            h1, me = L.leaky_fwd(e)
            first = (ce, me)
        else:
            a1, c1 = L.linear_fwd(X, p["W1"], p["b1"])
            h1, m1 = L.leaky_fwd(a1)
            first = (c1, m1)
        a2, c2 = L.linear_fwd(h1, p["W2"], p["b2"])
        h2, m2 = L.leaky_fwd(a2)
        if self.arch == "C":
            g, cp = L.meanpool_fwd(h2, axis=1)
        else:
            g, cp = L.maxpool_fwd(h2, axis=1)
        a3, c3 = L.linear_fwd(g, p["W3"], p["b3"])
        h3, m3 = L.leaky_fwd(a3)
        logits, c4 = L.linear_fwd(h3, p["W4"], p["b4"])
        return logits, (first, c2, m2, cp, c3, m3, c4)

    def backward(self, cache, glogits, param_grads=True):
        first, c2, m2, cp, c3, m3, c4 = cache
        p, g = self.params, {}
        gh3, g["W4"], g["b4"] = L.linear_bwd(c4, p["W4"], glogits, param_grads)
        ga3 = L.leaky_bwd(m3, gh3)
        gg, g["W3"], g["b3"] = L.linear_bwd(c3, p["W3"], ga3, param_grads)
        gh2 = L.meanpool_bwd(cp, gg) if self.arch == "C" else L.maxpool_bwd(cp, gg)
        ga2 = L.leaky_bwd(m2, gh2)
        gh1, g["W2"], g["b2"] = L.linear_bwd(c2, p["W2"], ga2, param_grads)
        if self.arch == "B":
            ce, me = first
            ge = L.leaky_bwd(me, gh1)
            gX, g["Wc"], g["Wd"], g["b1"] = L.edge_bwd(ce, p["Wc"], p["Wd"], ge, param_grads)
        else:
            c1, m1 = first
            ga1 = L.leaky_bwd(m1, gh1)
            gX, g["W1"], g["b1"] = L.linear_bwd(c1, p["W1"], ga1, param_grads)
        return (g if param_grads else None), gX

    def __call__(self, X):
        logits, _ = self.forward(X)
        single = np.ndim(X.points if isinstance(X, PointCloud) else X) == 2
        return logits[0] if single else logits

    def predict(self, X):
        return np.argmax(self(X), axis=-1)

    def loss_and_input_grad(self, X, y):
        """Cross-entropy of a single cloud and its gradient w.r.t. the points."""
        logits, cache = self.forward(X)
        loss, gl = L.cross_entropy(logits[0], y)
        _, gX = self.backward(cache, gl[None], param_grads=False)
        return loss, gX[0]
