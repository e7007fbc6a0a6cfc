"""Differentiable layer primitives used by the encoder and decoder stacks.

Spatial tensors are channels-last with a leading batch axis,
``(N, D, H, W, C)`` for volumes and ``(N, H, W, C)`` for images. The 3D ops
also accept an unbatched ``(D, H, W, C)`` tensor.
"""

from __future__ import annotations

import itertools

import numpy as np

from .rng import Rng
from .tensor import Tensor, make_result, reshape


def _unbatched(fn):
    """Let a batched 5-D op accept a single (D, H, W, C) volume."""

    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 4:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        return fn(x, *args, **kwargs)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def dense(x: Tensor, w: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ w + bias`` for ``x`` of shape (n,) or (N, n)."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2 or bias.shape != (w.shape[1],):
        raise ValueError(f"dense dimension mismatch: x {x.shape}, w {w.shape}, bias {bias.shape}")
    xd, wd = x.data, w.data
    y = xd @ wd + bias.data

    def bw(g):
        g2 = g.reshape(-1, wd.shape[1])
        x2 = xd.reshape(-1, wd.shape[0])
        return (g @ wd.T, x2.T @ g2, g2.sum(axis=0))

    return make_result(y, (x, w, bias), "dense", bw)


def _conv_nd(x: Tensor, k: Tensor, bias: Tensor, stride: int, pad: int, op: str) -> Tensor:
    """Channels-last cross-correlation over 2 or 3 spatial axes via im2col."""
    xd, kd = x.data, k.data
    nsp = xd.ndim - 2
    ksize = kd.shape[:nsp]
    cin, cout = kd.shape[nsp], kd.shape[nsp + 1]
    if xd.shape[-1] != cin:
        raise ValueError(f"{op} channel mismatch: input has {xd.shape[-1]}, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"{op} bias shape {bias.shape} does not match {cout} output channels")
    n = xd.shape[0]
    spatial = xd.shape[1:-1]
    out_sp = tuple((s + 2 * pad - kk) // stride + 1 for s, kk in zip(spatial, ksize))
    if min(out_sp) < 1:
        raise ValueError(f"{op} input {xd.shape} too small for kernel {ksize}")
    xp = np.pad(xd, [(0, 0)] + [(pad, pad)] * nsp + [(0, 0)]) if pad else xd
    offsets = list(itertools.product(*[range(kk) for kk in ksize]))

    def window(off):
        return (slice(None),) + tuple(
            slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out_sp)
        ) + (slice(None),)

    if min(cin, cout) <= 2:
        return _conv_direct(x, k, bias, xp, offsets, window, out_sp, op)
    cols = np.empty((n,) + out_sp + (len(offsets), cin), dtype=xd.dtype)
    for i, off in enumerate(offsets):
        cols[..., i, :] = xp[window(off)]
    rows = int(np.prod((n,) + out_sp))
    cols2 = cols.reshape(rows, len(offsets) * cin)
    k2 = kd.reshape(len(offsets) * cin, cout)
    y = (cols2 @ k2 + bias.data).reshape((n,) + out_sp + (cout,))

    def bw(g):
        g2 = g.reshape(rows, cout)
        gk = (cols2.T @ g2).reshape(kd.shape)
        gb = g2.sum(axis=0)
        if not x.requires_grad:
            return (None, gk, gb)
        gcols = (g2 @ k2.T).reshape((n,) + out_sp + (len(offsets), cin))
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        for i, off in enumerate(offsets):
            gxp[window(off)] += gcols[..., i, :]
        return (_unpad(gxp, pad, nsp), gk, gb)

    return make_result(y, (x, k, bias), op, bw)


def _unpad(a: np.ndarray, pad: int, nsp: int) -> np.ndarray:
    if not pad:
        return a
    return a[(slice(None),) + (slice(pad, -pad),) * nsp + (slice(None),)]


def _conv_direct(x, k, bias, xp, offsets, window, out_sp, op):
    # one small matmul per kernel offset; avoids im2col when channels are few
    xd, kd = x.data, k.data
    nsp = len(out_sp)
    pad = (xp.shape[1] - xd.shape[1]) // 2
    cin, cout = kd.shape[-2:]
    y = np.zeros((xd.shape[0],) + out_sp + (cout,), dtype=xd.dtype)
    scalar = cin == 1 and cout == 1
    axes = list(range(nsp + 1))
    for off in offsets:
        v = xp[window(off)]
        y += v * kd[off][0, 0] if scalar else v @ kd[off]
    y += bias.data

    def bw(g):
        gxp = np.zeros(xp.shape, dtype=xd.dtype)
        gk = np.empty_like(kd)
        for off in offsets:
            v = xp[window(off)]
            gk[off] = np.tensordot(v, g, axes=(axes, axes))
            if x.requires_grad:
                gxp[window(off)] += g * kd[off][0, 0] if scalar else g @ kd[off].T
        return (_unpad(gxp, pad, nsp), gk, g.reshape(-1, cout).sum(axis=0))

    return make_result(y, (x, k, bias), op, bw)


@_unbatched
def conv3d_same(x: Tensor, k: Tensor, bias: Tensor) -> Tensor:
    """3x3x3 stride-1 zero-padded cross-correlation; spatial extents are kept.

    ``k`` has shape (3, 3, 3, Cin, Cout).
    """
    if k.ndim != 5 or k.shape[:3] != (3, 3, 3):
        raise ValueError(f"conv3d_same expects a (3, 3, 3, Cin, Cout) kernel, got {k.shape}")
    if x.ndim != 5:
        raise ValueError(f"conv3d_same expects (N, D, H, W, C) input, got {x.shape}")
    return _conv_nd(x, k, bias, stride=1, pad=1, op="conv3d_same")


def conv2d(x: Tensor, k: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2D cross-correlation of (N, H, W, Cin) with a (kh, kw, Cin, Cout) kernel."""
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError(f"conv2d expects (N, H, W, C) input and 4-D kernel, got {x.shape}, {k.shape}")
    return _conv_nd(x, k, bias, stride=stride, pad=pad, op="conv2d")


@_unbatched
def maxpool3d(x: Tensor, pad_odd: bool = False) -> Tensor:
    """2x2x2 max pooling with stride 2.

    Odd spatial extents raise unless ``pad_odd`` is set, in which case the
    trailing edge is padded with -inf. Backward sends each window's gradient
    to its first maximal element in scan order.
    """
    xd = x.data
    n, *sp, c = xd.shape
    odd = [s % 2 for s in sp]
    if any(odd):
        if not pad_odd:
            raise ValueError(f"maxpool3d needs even spatial extents, got {tuple(sp)}")
        xd = np.pad(xd, [(0, 0)] + [(0, o) for o in odd] + [(0, 0)], constant_values=-np.inf)
    d2, h2, w2 = (s // 2 for s in xd.shape[1:4])
    win = (
        xd.reshape(n, d2, 2, h2, 2, w2, 2, c)
        .transpose(0, 1, 3, 5, 7, 2, 4, 6)
        .reshape(n, d2, h2, w2, c, 8)
    )
    arg = win.argmax(axis=-1)
    y = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    padded_shape = xd.shape

    def bw(g):
        mask = np.arange(8) == arg[..., None]
        g8 = (mask * g[..., None]).astype(g.dtype)
        gx = (
            g8.reshape(n, d2, h2, w2, c, 2, 2, 2)
            .transpose(0, 1, 5, 2, 6, 3, 7, 4)
            .reshape(padded_shape)
        )
        return (gx[:, : sp[0], : sp[1], : sp[2], :],)

    return make_result(y, (x,), "maxpool3d", bw)


@_unbatched
def upsample3d(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x2x2 replication."""
    xd = x.data
    n, d, h, w, c = xd.shape
    y = xd.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)

    def bw(g):
        return (g.reshape(n, d, 2, h, 2, w, 2, c).sum(axis=(2, 4, 6)),)

    return make_result(y, (x,), "upsample3d", bw)


def leaky_relu(x: Tensor, alpha: float = 0.1) -> Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    xd = x.data
    a = xd.dtype.type(alpha)
    pos = xd > 0
    y = np.where(pos, xd, a * xd)
    return make_result(y, (x,), "leaky_relu", lambda g: (np.where(pos, g, a * g),))


class BatchNormState:
    """Running per-channel statistics for one batch-norm layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def astype(self, dtype) -> "BatchNormState":
        out = BatchNormState(len(self.running_mean), dtype)
        out.running_mean[:] = self.running_mean
        out.running_var[:] = self.running_var
        return out


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: BatchNormState,
    train: bool,
    momentum: float = 0.99,
    eps: float = 1e-3,
) -> Tensor:
    """Normalize over every axis but the last (channel) one.

    Train mode uses biased batch statistics and folds them into ``stats`` as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    xd = x.data
    c = xd.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm channel mismatch: input {xd.shape}, gamma {gamma.shape}")
    if xd.shape[0] == 0:
        raise ValueError("batchnorm on an empty batch")
    axes = tuple(range(xd.ndim - 1))
    dt = xd.dtype.type
    gd = gamma.data
    if train:
        mean = xd.mean(axis=axes)
        centered = xd - mean
        var = (centered * centered).mean(axis=axes)
        inv_std = dt(1.0) / np.sqrt(var + dt(eps))
        xhat = centered * inv_std
        m = dt(xd.size // c)
        mom = dt(momentum)
        stats.running_mean[:] = mom * stats.running_mean + (dt(1.0) - mom) * mean.astype(stats.running_mean.dtype)
        stats.running_var[:] = mom * stats.running_var + (dt(1.0) - mom) * var.astype(stats.running_var.dtype)

        def bw(g):
            gxhat = g * gd
            s1 = gxhat.sum(axis=axes)
            s2 = (gxhat * xhat).sum(axis=axes)
            gx = (inv_std / m) * (m * gxhat - s1 - xhat * s2)
            return (gx, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    else:
        rm = stats.running_mean.astype(xd.dtype)
        rv = stats.running_var.astype(xd.dtype)
        inv_std = dt(1.0) / np.sqrt(rv + dt(eps))
        xhat = (xd - rm) * inv_std

        def bw(g):
            return (g * gd * inv_std, (g * xhat).sum(axis=axes), g.sum(axis=axes))

    y = xhat * gd + beta.data
    return make_result(y, (x, gamma, beta), "batchnorm", bw)


def dropout(x: Tensor, rate: float, train: bool, rng: Rng | None = None) -> Tensor:
    """Inverted dropout; identity (the same tensor) in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an Rng")
    xd = x.data
    keep = rng.uniform(xd.shape, dtype=np.float32) >= np.float32(rate)
    scale = (keep / xd.dtype.type(1.0 - rate)).astype(xd.dtype)
    return make_result(xd * scale, (x,), "dropout", lambda g: (g * scale,))


def bce_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against ``target``."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ValueError(f"bce shape mismatch: logits {z.shape} vs target {t.shape}")
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.dtype.type(z.size)
    y = np.asarray(per.mean(), dtype=z.dtype)

    def bw(g):
        sig = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
        return ((sig.astype(z.dtype) - t) * (g / n),)

    return make_result(y, (logits,), "bce_with_logits", bw)


def flatten(x: Tensor) -> Tensor:
    """Row-major flattening of everything after the batch axis."""
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))
