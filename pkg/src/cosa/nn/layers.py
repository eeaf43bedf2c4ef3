"""Forward/adjoint pairs for the handful of operators the networks use.

Each ``*_fwd`` returns ``(out, cache)``; the matching ``*_bwd`` takes the
cache and the upstream gradient.  Arrays carry arbitrary leading batch axes.
"""
import numpy as np

LEAK = 0.01


def linear_fwd(x, W, b):
    return x @ W + b, x


def linear_bwd(x, W, g, param_grads=True):
    gx = g @ W.T
    if not param_grads:
        return gx, None, None
    gW = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
    return gx, gW, gb


def leaky_fwd(x):
    # slope at exactly 0 is taken from the positive side
    mask = x >= 0
    return np.maximum(x, LEAK * x), mask


def leaky_bwd(mask, g):
    return np.where(mask, g, LEAK * g)


def maxpool_fwd(x, axis):
    """Max over ``axis``; ties route to the lowest index."""
    idx = np.expand_dims(x.argmax(axis=axis), axis)
    return np.take_along_axis(x, idx, axis=axis).squeeze(axis), (idx, x.shape, axis)


def maxpool_bwd(cache, g):
    idx, shape, axis = cache
    gx = np.zeros(shape)
    np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
    return gx


def meanpool_fwd(x, axis):
    return x.mean(axis=axis), (x.shape, axis)


def meanpool_bwd(cache, g):
    shape, axis = cache
    return np.broadcast_to(np.expand_dims(g, axis) / shape[axis], shape).copy()


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, y):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``.

    ``logits`` is ``(Z,)`` or ``(B, Z)``; ``y`` an int or ``(B,)`` ints.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    L = logits[None] if single else logits
    y = np.atleast_1d(np.asarray(y))
    Z = L.shape[-1]
    if y.shape[0] != L.shape[0]:
        raise ValueError("one label per row of logits required")
    if np.any(y < 0) or np.any(y >= Z):
        raise ValueError(f"label out of range [0, {Z})")
    logp = log_softmax(L)
    rows = np.arange(L.shape[0])
    loss = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= L.shape[0]
    return float(loss), (grad[0] if single else grad)


def knn_indices(X, k):
    """Indices of the ``k`` nearest other points, per point, for ``(B, n, 3)`` input.

    Distances use explicit differences so they do not depend on point order;
    the stable sort breaks ties by lowest index.
    """
    B, n, _ = X.shape
    if k >= n:
        raise ValueError(f"neighbour count k={k} must be smaller than n={n}")
    out = np.empty((B, n, k), dtype=np.intp)
    for b in range(B):
        diff = X[b, :, None, :] - X[b, None, :, :]
        d = np.einsum("ijk,ijk->ij", diff, diff)
        np.fill_diagonal(d, np.inf)
        out[b] = np.argsort(d, axis=1, kind="stable")[:, :k]
    return out


def edge_fwd(X, nbr, Wc, Wd, b):
    """Pooled edge-conv pre-activation for ``(B, n, 3)`` points.

    The edge feature ``x_i Wc + (x_j - x_i) Wd + b`` is affine in ``x_j``
    through ``c_j = x_j Wd`` only, and the leaky rectifier is increasing, so
    ``max_j leaky(edge_ij) = leaky(x_i (Wc - Wd) + b + max_j c_j)``.  Pooling
    the neighbour term first avoids materialising the ``(B, n, k, h)`` tensor.
    Returns the pre-activation ``(B, n, h)``; the winning neighbour per
    channel (lowest slot on ties) is cached for the adjoint.
    """
    a = X @ (Wc - Wd)
    c = X @ Wd
    best = np.take_along_axis(c, nbr[:, :, 0][..., None], axis=1)
    arg = np.broadcast_to(nbr[:, :, :1], best.shape).copy()
    for s in range(1, nbr.shape[2]):
        cand = np.take_along_axis(c, nbr[:, :, s][..., None], axis=1)
        win = cand > best
        np.copyto(best, cand, where=win)
        np.copyto(arg, nbr[:, :, s][..., None], where=win)
    return a + best + b, (X, arg)


def edge_bwd(cache, Wc, Wd, g, param_grads=True):
    X, arg = cache
    B, n, h = g.shape
    # scatter each channel's gradient to the neighbour that won the max
    flat = ((np.arange(B)[:, None, None] * n + arg) * h + np.arange(h)).reshape(-1)
    gc = np.bincount(flat, weights=g.reshape(-1), minlength=B * n * h).reshape(B, n, h)
    gX = g @ (Wc - Wd).T + gc @ Wd.T
    if not param_grads:
        return gX, None, None, None
    Xf = X.reshape(-1, X.shape[-1])
    gf, gcf = g.reshape(-1, h), gc.reshape(-1, h)
    gWc = Xf.T @ gf
    gWd = Xf.T @ (gcf - gf)
    gb = gf.sum(axis=0)
    return gX, gWc, gWd, gb
