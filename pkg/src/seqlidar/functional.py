"""Fused differentiable operators used by the noise-prediction network.

Convolutions use a circular (wrap-around) boundary on the azimuth axis W and
zero padding on the elevation axis H.  All reductions run in a fixed order
(row-major im2col followed by one matrix product per batch item), so equal
inputs give bit-identical outputs.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from seqlidar.errors import ConfigurationError, DimensionError
from seqlidar.tensor import Tensor, as_tensor, matmul, mean, mul, swapaxes

__all__ = [
    "attention",
    "conv2d_circular",
    "conv3d_temporal",
    "group_norm",
    "linear",
    "mse",
    "softmax",
    "temporal_conv",
    "upsample_nearest2x",
]


def _pad_circular_w(x, ph, pw):
    """Zero-pad rows by ``ph`` and wrap columns by ``pw`` on a [N,C,H,W] array."""
    if ph:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (0, 0)))
    if pw:
        x = np.concatenate([x[..., -pw:], x, x[..., :pw]], axis=-1)
    return x


def _fold_circular_w(gp, ph, pw, W):
    """Adjoint of :func:`_pad_circular_w`."""
    if ph:
        gp = gp[:, :, ph:-ph]
    if not pw:
        return np.ascontiguousarray(gp)
    g = gp[..., pw : pw + W].copy()
    g[..., W - pw :] += gp[..., :pw]
    g[..., :pw] += gp[..., pw + W :]
    return g


def conv2d_circular(x, w, b=None, stride=1):
    """2D convolution with circular azimuth padding and zero elevation padding.

    Args:
        x: Input of shape [B, C, H, W].
        w: Kernel of shape [O, C, kh, kw]; both extents must be odd.
        b: Optional bias of shape [O].
        stride: 1, or 2 for the downsampling variant (applies to both axes).

    Returns:
        Tensor of shape [B, O, H // stride, W // stride].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d_circular expects 4-D input and kernel, got {x.shape}, {w.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = w.shape
    if Cw != C:
        raise DimensionError(f"kernel expects {Cw} input channels, input has {C}")
    if kw % 2 == 0 or kh % 2 == 0:
        raise ConfigurationError(f"kernel extents must be odd, got {kh}x{kw}")
    if stride not in (1, 2):
        raise ConfigurationError(f"stride must be 1 or 2, got {stride}")
    if stride == 2 and (H % 2 or W % 2):
        raise DimensionError(f"stride-2 convolution needs even H and W, got {H}x{W}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise DimensionError(f"bias shape {b.shape} != ({O},)")
    ph, pw = kh // 2, kw // 2
    Ho, Wo = H // stride, W // stride
    K = C * kh * kw
    wmat = w.data.reshape(O, K)

    if kh == 1 and kw == 1 and stride == 1:
        cols = x.data.reshape(B, C, H * W)
    else:
        xp = _pad_circular_w(x.data, ph, pw)
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # [B, C, Ho, Wo, kh, kw] -> [B, C, kh, kw, Ho, Wo] -> [B, K, Ho*Wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(B, K, Ho * Wo)
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(B, O, Ho, Wo)

    def back(g):
        g = g.reshape(B, O, Ho * Wo)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 2))
        if x.requires_grad:
            if kh == 1 and kw == 1 and stride == 1:
                gx = np.matmul(np.ascontiguousarray(wmat.T), g).reshape(B, C, H, W)
            elif stride == 1:
                # The adjoint of a stride-1 circular convolution is the same
                # convolution of the output gradient with the flipped,
                # channel-transposed kernel.
                flipped = np.ascontiguousarray(w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gpad = _pad_circular_w(g.reshape(B, O, H, W), ph, pw)
                gwin = sliding_window_view(gpad, (kh, kw), axis=(2, 3))
                gcols = np.ascontiguousarray(gwin.transpose(0, 1, 4, 5, 2, 3)).reshape(B, O * kh * kw, H * W)
                gx = np.matmul(flipped.reshape(C, O * kh * kw), gcols).reshape(B, C, H, W)
            else:
                gcols = np.matmul(np.ascontiguousarray(wmat.T), g)
                gcols = gcols.reshape(B, C, kh, kw, Ho, Wo)
                gp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, :, i, j]
                gx = _fold_circular_w(gp, ph, pw, W)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, back, "conv2d_circular")


def temporal_conv(x, w, b=None):
    """Frame-axis convolution for the [B, F, C, H, W] layout.

    ``w`` has shape [O, C, 3, 1, 1] (or [O, C, 3]); the frame axis is zero
    padded by one frame on each side so output frame f mixes frames
    f-1, f, f+1 only.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim == 5:
        if w.shape[2:] != (3, 1, 1):
            raise ConfigurationError(f"temporal kernel must be (3,1,1), got {w.shape[2:]}")
    elif w.ndim != 3 or w.shape[2] != 3:
        raise ConfigurationError(f"temporal kernel must be (3,1,1), got {w.shape[2:]}")
    if x.ndim != 5:
        raise DimensionError(f"temporal_conv expects [B,F,C,H,W], got {x.shape}")
    B, F, C, H, W = x.shape
    O, Cw = w.shape[:2]
    if Cw != C:
        raise DimensionError(f"kernel expects {Cw} input channels, input has {C}")
    # One contiguous [O, C] matrix per tap; strided operands make matmul crawl.
    taps = np.ascontiguousarray(w.data.reshape(O, C, 3).transpose(2, 0, 1))
    xp = np.zeros((B, F + 2, C, H * W), dtype=x.dtype)
    xp[:, 1:-1] = x.data.reshape(B, F, C, H * W)
    out = np.matmul(taps[0], xp[:, 0:F])
    out += np.matmul(taps[1], xp[:, 1 : F + 1])
    out += np.matmul(taps[2], xp[:, 2 : F + 2])
    if b is not None:
        b = as_tensor(b)
        out += b.data[:, None]
    out = out.reshape(B, F, O, H, W)

    def back(g):
        g = g.reshape(B, F, O, H * W)
        gx = gw = gb = None
        if w.requires_grad:
            gw = np.stack(
                [np.matmul(g, xp[:, d : d + F].swapaxes(-1, -2)).sum(axis=(0, 1)) for d in range(3)],
                axis=-1,
            ).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.sum(axis=(0, 1, 3))
        if x.requires_grad:
            gp = np.zeros_like(xp)
            for d in range(3):
                gp[:, d : d + F] += np.matmul(np.ascontiguousarray(taps[d].T), g)
            gx = gp[:, 1:-1].reshape(B, F, C, H, W)
        return (gx, gw) if b is None else (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, back, "temporal_conv")


def conv3d_temporal(x, w, b=None):
    """3D convolution with a fixed (3,1,1) kernel on [B, C, F, H, W] input."""
    x = as_tensor(x)
    if x.ndim != 5:
        raise DimensionError(f"conv3d_temporal expects [B,C,F,H,W], got {x.shape}")
    y = temporal_conv(x.transpose(0, 2, 1, 3, 4), w, b)
    return y.transpose(0, 2, 1, 3, 4)


def group_norm(x, groups, gamma, beta, eps=1e-5):
    """Group normalization over channel groups of a [B, C, ...] tensor."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    N, C = x.shape[:2]
    if groups <= 0 or C % groups:
        raise ConfigurationError(f"{C} channels cannot be split into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError("gamma and beta must have shape [C]")
    spatial = x.shape[2:]
    xg = x.data.reshape(N, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    bshape = (1, C) + (1,) * len(spatial)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def back(g):
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = (g * gamma.data.reshape(bshape)).reshape(N, groups, -1)
            xh = xhat.reshape(N, groups, -1)
            gx = inv * (
                dxhat
                - dxhat.mean(axis=2, keepdims=True)
                - xh * (dxhat * xh).mean(axis=2, keepdims=True)
            )
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return Tensor._make(out.astype(x.dtype, copy=False), (x, gamma, beta), back, "group_norm")


def softmax(x, axis=-1):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), back, "softmax")


def attention(q, k, v):
    """Scaled dot-product attention softmax(q k^T / sqrt(D)) v over the key axis."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise DimensionError("attention expects [N, L, D] operands")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[:2] != v.shape[:2] or q.shape[0] != k.shape[0]:
        raise DimensionError(f"incompatible key/value shapes {k.shape}, {v.shape}")
    D = q.shape[-1]
    if D <= 0:
        raise DimensionError("attention needs D > 0")
    scores = mul(matmul(q, swapaxes(k, 1, 2)), 1.0 / math.sqrt(D))
    return matmul(softmax(scores, axis=-1), v)


def linear(x, w, b=None):
    """Affine map over the last axis; ``w`` has shape [out, in]."""
    x, w = as_tensor(x), as_tensor(w)
    n_in = x.shape[-1]
    if w.shape[1] != n_in:
        raise DimensionError(f"linear expects last dim {w.shape[1]}, got {n_in}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, n_in)
    out = x2 @ w.data.T
    if b is not None:
        b = as_tensor(b)
        out += b.data
    out = out.reshape(lead + (w.shape[0],))

    def back(g):
        g2 = g.reshape(-1, w.shape[0])
        gx = (g2 @ w.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ x2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, back, "linear")


def upsample_nearest2x(x):
    """Nearest-neighbour upsampling of the last two axes by a factor of two."""
    x = as_tensor(x)
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)
    shape = x.shape

    def back(g):
        return (g.reshape(shape[:-2] + (shape[-2], 2, shape[-1], 2)).sum(axis=(-3, -1)),)

    return Tensor._make(out, (x,), back, "upsample_nearest2x")


def mse(a, b):
    """Mean squared error over all elements."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    d = a - b
    return mean(d * d)
