"""Differentiable primitives over NCHW arrays.

Each primitive builds a ``fwd(*arrays) -> (out, vjp)`` closure and hands it to
:func:`fgprune.tensor.apply`. The vjp receives the output gradient plus a
``needs`` mask and only computes the input gradients that are asked for.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, apply

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _out_extent(n: int, k: int, s: int, p: int) -> int:
    m = (n + 2 * p - k) // s + 1
    if m <= 0:
        raise ShapeError(f"window {k} stride {s} pad {p} does not fit extent {n}")
    return m


# -- elementwise / reductions -------------------------------------------------


def _fwd_add(a, b):
    def vjp(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return a + b, vjp


def add(a, b) -> Tensor:
    return apply("add", _fwd_add, a, b)


def _fwd_mul(a, b):
    def vjp(g, needs):
        return (_unbroadcast(g * b, a.shape) if needs[0] else None,
                _unbroadcast(g * a, b.shape) if needs[1] else None)

    return a * b, vjp


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    return apply("mul", _fwd_mul, a, b)


def _fwd_square(a):
    return a * a, lambda g, needs: (2.0 * a * g,)


def square(a) -> Tensor:
    return apply("square", _fwd_square, a)


def _fwd_sum(a):
    return np.asarray(a.sum(), dtype=a.dtype), lambda g, needs: (np.broadcast_to(g, a.shape).copy(),)


def sum_all(a) -> Tensor:
    return apply("sum", _fwd_sum, a)


def weighted_sum(x, weights) -> Tensor:
    """``sum(x * weights)`` as a scalar; ``weights`` is a constant array."""
    w = np.asarray(weights, dtype=np.asarray(x.data if isinstance(x, Tensor) else x).dtype)

    def fwd(a):
        if w.shape != a.shape:
            raise ShapeError(f"weights {w.shape} do not match input {a.shape}")
        return np.asarray((a * w).sum(), dtype=a.dtype), lambda g, needs: (g * w,)

    return apply("weighted_sum", fwd, x)


def _fwd_relu(x):
    out = np.maximum(x, 0)
    return out, lambda g, needs: (g * (out > 0),)


def relu(x) -> Tensor:
    return apply("relu", _fwd_relu, x)


def reshape(x, shape) -> Tensor:
    def fwd(a):
        return a.reshape(shape), lambda g, needs: (g.reshape(a.shape),)

    return apply("reshape", fwd, x)


def flatten(x) -> Tensor:
    def fwd(a):
        return a.reshape(a.shape[0], -1), lambda g, needs: (g.reshape(a.shape),)

    return apply("flatten", fwd, x)


# -- convolution ----------------------------------------------------------------


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation via im2col + GEMM.

    x: (N, C, H, W), w: (O, C, Kh, Kw), b: (O,) or None.
    """
    s, p = int(stride), int(padding)

    def fwd(x, w, *bias):
        n, c, h, wd = x.shape
        o, ci, kh, kw = w.shape
        if ci != c:
            raise ShapeError(f"conv2d expects {ci} input channels, got {c}")
        ho, wo = _out_extent(h, kh, s, p), _out_extent(wd, kw, s, p)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        # (C*Kh*Kw, N*Ho*Wo): channel-major keeps the inner copy contiguous
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
        wm = w.reshape(o, -1)
        out = wm @ cols
        if bias:
            out += bias[0][:, None]
        out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))

        def vjp(g, needs):
            gm = g.transpose(1, 0, 2, 3).reshape(o, -1)
            gx = gw = gb = None
            if needs[1]:
                gw = (gm @ cols.T).reshape(w.shape)
            if bias and needs[2]:
                gb = gm.sum(axis=1)
            if needs[0]:
                dcols = (wm.T @ gm).reshape(c, kh, kw, n, ho, wo)
                gxp = np.zeros(xp.shape, dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s] += \
                            dcols[:, i, j].transpose(1, 0, 2, 3)
                gx = gxp[:, :, p : p + h, p : p + wd] if p else gxp
            return (gx, gw, gb) if bias else (gx, gw)

        return out, vjp

    if b is None:
        return apply("conv2d", fwd, x, w)
    return apply("conv2d", fwd, x, w, b)


def linear(x, w, b=None) -> Tensor:
    """x: (N, In), w: (Out, In), b: (Out,)."""

    def fwd(x, w, *bias):
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear expects (N, {w.shape[1]}), got {x.shape}")
        out = x @ w.T
        if bias:
            out = out + bias[0]

        def vjp(g, needs):
            gx = g @ w if needs[0] else None
            gw = g.T @ x if needs[1] else None
            if bias:
                return gx, gw, (g.sum(axis=0) if needs[2] else None)
            return gx, gw

        return out, vjp

    if b is None:
        return apply("linear", fwd, x, w)
    return apply("linear", fwd, x, w, b)


# -- normalisation ---------------------------------------------------------------


def batchnorm2d(x, gamma, beta, running_mean, running_var, train: bool,
                eps: float = BN_EPS, stats: dict | None = None) -> Tensor:
    """Batch normalisation over (N, H, W).

    In train mode the batch mean and biased variance normalise the input;
    the caller updates running statistics from ``stats`` (filled with the
    batch mean and unbiased variance). Eval mode uses the running values.
    """
    if train:

        def fwd(x, gamma, beta):
            axes = (0, 2, 3)
            m = x.shape[0] * x.shape[2] * x.shape[3]
            mean = x.mean(axis=axes)
            xc = x - mean[None, :, None, None]
            var = (xc * xc).mean(axis=axes)
            inv = 1.0 / np.sqrt(var + eps)
            xhat = xc * inv[None, :, None, None]
            out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
            if stats is not None:
                stats["mean"] = mean
                stats["var"] = var * (m / max(m - 1, 1))

            def vjp(g, needs):
                gg = (g * xhat).sum(axis=axes) if needs[1] else None
                gb = g.sum(axis=axes) if needs[2] else None
                gx = None
                if needs[0]:
                    dxhat = g * gamma[None, :, None, None]
                    s1 = dxhat.sum(axis=axes)[None, :, None, None]
                    s2 = (dxhat * xhat).sum(axis=axes)[None, :, None, None]
                    gx = (inv[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
                return gx, gg, gb

            return out.astype(x.dtype, copy=False), vjp

        return apply("batchnorm2d_train", fwd, x, gamma, beta)

    def fwd_eval(x, gamma, beta, rm, rv):
        inv = 1.0 / np.sqrt(rv + eps)
        xhat = (x - rm[None, :, None, None]) * inv[None, :, None, None]
        out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]

        def vjp(g, needs):
            gx = g * (gamma * inv)[None, :, None, None] if needs[0] else None
            gg = (g * xhat).sum(axis=(0, 2, 3)) if needs[1] else None
            gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
            return gx, gg, gb, None, None

        return out.astype(x.dtype, copy=False), vjp

    return apply("batchnorm2d_eval", fwd_eval, x, gamma, beta, running_mean, running_var)


# -- pooling / resampling ---------------------------------------------------------


def maxpool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; backward routes to the first row-major maximum."""
    k = int(kernel)
    s = int(stride or kernel)

    def fwd(x):
        n, c, h, w = x.shape
        ho, wo = _out_extent(h, k, s, 0), _out_extent(w, k, s, 0)
        views = [x[:, :, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s]
                 for a in range(k) for b in range(k)]
        out = views[0].copy()
        for v in views[1:]:
            np.maximum(out, v, out=out)

        def vjp(g, needs):
            gx = np.zeros_like(x)
            taken = np.zeros(out.shape, dtype=bool)
            for t, v in enumerate(views):
                hit = (v == out) & ~taken
                taken |= hit
                a, b = divmod(t, k)
                gx[:, :, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s] += g * hit
            return (gx,)

        return out, vjp

    return apply("maxpool2d", fwd, x)


def avgpool2d(x, kernel: int = 2, stride: int | None = None) -> Tensor:
    k = int(kernel)
    s = int(stride or kernel)

    def fwd(x):
        n, c, h, w = x.shape
        ho, wo = _out_extent(h, k, s, 0), _out_extent(w, k, s, 0)
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        win = win[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]
        out = win.mean(axis=(-2, -1))

        def vjp(g, needs):
            gx = np.zeros_like(x)
            gk = g / (k * k)
            for a in range(k):
                for b in range(k):
                    gx[:, :, a : a + s * (ho - 1) + 1 : s, b : b + s * (wo - 1) + 1 : s] += gk
            return (gx,)

        return out.astype(x.dtype, copy=False), vjp

    return apply("avgpool2d", fwd, x)


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""

    def fwd(x):
        hw = x.shape[2] * x.shape[3]

        def vjp(g, needs):
            return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy(),)

        return x.mean(axis=(2, 3)).astype(x.dtype, copy=False), vjp

    return apply("global_avg_pool", fwd, x)


def upsample_nearest(x, scale: int = 2) -> Tensor:
    r = int(scale)

    def fwd(x):
        n, c, h, w = x.shape
        out = np.repeat(np.repeat(x, r, axis=2), r, axis=3)

        def vjp(g, needs):
            return (g.reshape(n, c, h, r, w, r).sum(axis=(3, 5)),)

        return out, vjp

    return apply("upsample_nearest", fwd, x)


# -- losses -------------------------------------------------------------------------


def _log_softmax(z: np.ndarray, axis: int) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean cross-entropy of (N, K) logits against integer labels."""
    y = np.asarray(labels, dtype=np.int64)

    def fwd(z):
        n, k = z.shape
        if y.shape != (n,):
            raise ShapeError(f"labels shape {y.shape} does not match logits {z.shape}")
        if y.size and (y.min() < 0 or y.max() >= k):
            raise ValueError(f"label out of range [0, {k})")
        logp = _log_softmax(z, 1)
        loss = -logp[np.arange(n), y].mean()

        def vjp(g, needs):
            p = np.exp(logp)
            p[np.arange(n), y] -= 1.0
            return (p * (g / n),)

        return np.asarray(loss, dtype=z.dtype), vjp

    return apply("softmax_cross_entropy", fwd, logits)


def pixel_cross_entropy(logit_maps, mask) -> Tensor:
    """Mean per-pixel cross-entropy of (N, D, H, W) logits against an (N, H, W) mask."""
    m = np.asarray(mask, dtype=np.int64)

    def fwd(z):
        n, d, h, w = z.shape
        if m.shape != (n, h, w):
            raise ShapeError(f"mask shape {m.shape} does not match logits {z.shape}")
        if m.size and (m.min() < 0 or m.max() >= d):
            raise ValueError(f"mask value out of range [0, {d})")
        logp = _log_softmax(z, 1)
        picked = np.take_along_axis(logp, m[:, None], axis=1)
        count = n * h * w
        loss = -picked.sum() / count

        def vjp(g, needs):
            p = np.exp(logp)
            np.put_along_axis(p, m[:, None], np.take_along_axis(p, m[:, None], axis=1) - 1.0, axis=1)
            return (p * (g / count),)

        return np.asarray(loss, dtype=z.dtype), vjp

    return apply("pixel_cross_entropy", fwd, logit_maps)
