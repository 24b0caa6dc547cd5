"""Differentiable ops for 5D ``(batch, channel, d0, d1, d2)`` tensors."""
from __future__ import annotations

import numpy as np

from .. import kernels
from ..errors import DimensionError
from .tensor import Tensor, as_tensor, make

# working-set cap for one im2col block
COL_BYTES = 192 * 2**20

# "direct" uses the compiled stride-1 kernels, "im2col" is numpy only
CONV_IMPL = "direct" if kernels.BACKEND == "cython" else "im2col"


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return make(a.data * b.data, (a, b),
                lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def sum(x):  # noqa: A001 - mirrors the numpy name
    x = as_tensor(x)
    return make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def relu(x):
    keep = x.data > 0
    return make(x.data * keep, (x,), lambda g: (g * keep,))


def sigmoid(x):
    z = x.data
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return make(out, (x,), lambda g: (g * out * (1.0 - out),))


def cat(tensors, axis=1):
    """Concatenate along ``axis`` (channels by default)."""
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        for ax, (a, b) in enumerate(zip(ref, t.shape)):
            if ax != axis and a != b:
                raise DimensionError(f"cat: axis {ax} differs ({a} vs {b})")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return make(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


# --- convolution -----------------------------------------------------------

def _check5(x, name):
    if x.data.ndim != 5:
        raise DimensionError(f"{name}: expected 5D (N, C, D, H, W) input, got shape {x.shape}")


def conv_output_size(n, k, padding, dilation, stride=1):
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _tap_slices(k, dilation, stride, out_shape):
    # tap t reads padded index o*stride + dilation*(k-1-t): x(v - d*u) with u = t - (k-1)/2
    taps = []
    for ta in range(k):
        for tb in range(k):
            for tc in range(k):
                sl = tuple(
                    slice(dilation * (k - 1 - t), dilation * (k - 1 - t) + stride * (n - 1) + 1, stride)
                    for t, n in zip((ta, tb, tc), out_shape)
                )
                taps.append(((ta, tb, tc), sl))
    return taps


def _groups(ntaps, per_tap_bytes):
    step = max(1, min(ntaps, COL_BYTES // max(per_tap_bytes, 1)))
    return [range(s, min(ntaps, s + step)) for s in range(0, ntaps, step)]


def conv3d(x, weight, bias=None, padding=1, dilation=1, stride=1):
    """Dilated 3D convolution ``y(v) = sum_u x(v - d*u) h(u) + b`` over input channels.

    ``weight`` has shape ``(C_out, C_in, k, k, k)``; tap index ``t`` holds
    ``h(t - (k-1)/2)``. ``padding`` is zero padding per side on every axis.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check5(x, "conv3d")
    N, ci = x.shape[:2]
    co, wci, k = weight.shape[:3]
    if weight.data.ndim != 5 or weight.shape[2:] != (k, k, k):
        raise DimensionError(f"conv3d: kernel must be (C_out, C_in, k, k, k), got {weight.shape}")
    if wci != ci:
        raise DimensionError(f"conv3d: channel axis mismatch, input has {ci}, kernel expects {wci}")
    if dilation < 1 or stride < 1:
        raise DimensionError("conv3d: dilation and stride must be >= 1")
    out_shape = tuple(conv_output_size(n, k, padding, dilation, stride) for n in x.shape[2:])
    for axis, n in zip("DHW", out_shape):
        if n < 1:
            raise DimensionError(f"conv3d: spatial axis {axis} too small for kernel {k}, dilation {dilation}")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x.data
    if CONV_IMPL == "direct" and stride == 1:
        return _conv3d_direct(x, weight, bias, xp, p, dilation, out_shape)
    taps = _tap_slices(k, dilation, stride, out_shape)
    V = N * int(np.prod(out_shape))
    groups = _groups(len(taps), ci * V * 8)
    wmat = weight.data.reshape(co, ci, k * k * k)

    def columns(idx):
        cols = np.empty((len(idx), ci, N) + out_shape)
        for row, t in enumerate(idx):
            cols[row] = xp[(slice(None), slice(None)) + taps[t][1]].transpose(1, 0, 2, 3, 4)
        return cols.reshape(len(idx) * ci, V)

    def wgroup(idx):
        # (co, taps, ci) ordering to match column rows
        return wmat[:, :, idx.start:idx.stop].transpose(0, 2, 1).reshape(co, len(idx) * ci)

    acc = np.zeros((co, V))
    for idx in groups:
        acc += wgroup(idx) @ columns(idx)
    if bias is not None:
        bias = as_tensor(bias)
        acc += bias.data[:, None]
    out = acc.reshape((co, N) + out_shape).transpose(1, 0, 2, 3, 4).copy()

    def backward(g):
        gm = g.transpose(1, 0, 2, 3, 4).reshape(co, V)
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros((co, k * k * k, ci)) if weight.requires_grad else None
        for idx in groups:
            cols = columns(idx)
            if gw is not None:
                gw[:, idx.start:idx.stop, :] = (gm @ cols.T).reshape(co, len(idx), ci)
            if gx is not None:
                dcols = (wgroup(idx).T @ gm).reshape((len(idx), ci, N) + out_shape)
                for row, t in enumerate(idx):
                    gx[(slice(None), slice(None)) + taps[t][1]] += dcols[row].transpose(1, 0, 2, 3, 4)
        if gx is not None and p:
            gx = gx[:, :, p:-p, p:-p, p:-p]
        if gw is not None:
            gw = gw.transpose(0, 2, 1).reshape(weight.shape)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make(out, parents, backward)


def _conv3d_direct(x, weight, bias, xp, p, dilation, out_shape):
    core = kernels._impl
    N, co, k = x.shape[0], weight.shape[0], weight.shape[2]
    xp = np.ascontiguousarray(xp)
    w = np.ascontiguousarray(weight.data)
    out = np.zeros((N, co) + out_shape)
    core.conv3d_forward(xp, w, out, dilation)
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data[None, :, None, None, None]

    def backward(g):
        g = np.ascontiguousarray(g)
        gx = gw = None
        if x.requires_grad:
            # adjoint: full correlation of g with the flipped, channel-swapped kernel
            q = dilation * (k - 1)
            gp = np.pad(g, ((0, 0), (0, 0), (q, q), (q, q), (q, q)))
            wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
            gx = np.zeros(xp.shape)
            core.conv3d_forward(gp, wt, gx, dilation)
            if p:
                gx = gx[:, :, p:-p, p:-p, p:-p]
        if weight.requires_grad:
            gw = np.zeros(weight.shape)
            core.conv3d_backward_weight(g, xp, gw, dilation)
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make(out, parents, backward)


def conv_transpose3d(x, weight, bias=None):
    """Transposed convolution, kernel 2 and stride 2: doubles every spatial dim.

    ``weight`` has shape ``(C_in, C_out, 2, 2, 2)``.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    _check5(x, "conv_transpose3d")
    N, ci, D, H, W = x.shape
    if weight.shape[0] != ci or weight.shape[2:] != (2, 2, 2):
        raise DimensionError(f"conv_transpose3d: kernel {weight.shape} incompatible with {ci} input channels")
    co = weight.shape[1]
    xm = x.data.transpose(1, 0, 2, 3, 4).reshape(ci, -1)
    wm = weight.data.reshape(ci, co * 8)
    y = (wm.T @ xm).reshape(co, 2, 2, 2, N, D, H, W)
    out = y.transpose(4, 0, 5, 1, 6, 2, 7, 3).reshape(N, co, 2 * D, 2 * H, 2 * W)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None, None]

    def backward(g):
        gm = g.reshape(N, co, D, 2, H, 2, W, 2).transpose(1, 3, 5, 7, 0, 2, 4, 6).reshape(co * 8, -1)
        gx = (wm @ gm).reshape(ci, N, D, H, W).transpose(1, 0, 2, 3, 4) if x.requires_grad else None
        gw = (xm @ gm.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if bias is not None else None
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make(np.ascontiguousarray(out), parents, backward)


def max_pool3d(x):
    """2x2x2 max pooling with stride 2; gradient routes to the first maximum."""
    x = as_tensor(x)
    _check5(x, "max_pool3d")
    N, C, D, H, W = x.shape
    for axis, n in zip("DHW", (D, H, W)):
        if n % 2:
            raise DimensionError(f"max_pool3d: spatial axis {axis} has odd size {n}")
    win = x.data.reshape(N, C, D // 2, 2, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    win = win.reshape(N, C, D // 2, H // 2, W // 2, 8)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gw = np.zeros((N, C, D // 2, H // 2, W // 2, 8))
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(N, C, D // 2, H // 2, W // 2, 2, 2, 2).transpose(0, 1, 2, 5, 3, 6, 4, 7)
        return (gw.reshape(N, C, D, H, W),)

    return make(out, (x,), backward)


def batch_norm3d(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over batch and space.

    Training mode normalizes with the batch statistics and updates the
    running buffers in place (unbiased variance); eval mode uses the buffers.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check5(x, "batch_norm3d")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batch_norm3d: expected ({C},) scale/shift")
    axes = (0, 2, 3, 4)
    shp = (1, C, 1, 1, 1)
    if training:
        m = x.data.size // C
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running_mean is not None:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mean
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shp)) * invstd.reshape(shp)
    out = xhat * gamma.data.reshape(shp) + beta.data.reshape(shp)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(shp)
        if training:
            m = x.data.size // C
            gx = (invstd.reshape(shp) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(shp)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(shp)
            )
        else:
            gx = dxhat * invstd.reshape(shp)
        return (gx, ggamma, gbeta)

    return make(out, (x, gamma, beta), backward)


# --- losses ------------------------------------------------------------------

BCE_EPS = 1e-7


def bce_loss(out, gt, eps=BCE_EPS):
    """Mean binary cross entropy over all voxels.

    ``out`` is clamped to ``[eps, 1 - eps]`` before the logs; the clamp
    passes no gradient where it is active.
    """
    out = as_tensor(out)
    gt_arr = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if out.shape != gt_arr.shape:
        raise DimensionError(f"bce_loss: output shape {out.shape} != target shape {gt_arr.shape}")
    p = np.clip(out.data, eps, 1.0 - eps)
    V = p.size
    loss = -(gt_arr * np.log(p) + (1.0 - gt_arr) * np.log1p(-p)).sum() / V

    def backward(g):
        inside = (out.data >= eps) & (out.data <= 1.0 - eps)
        grad = -(gt_arr / p - (1.0 - gt_arr) / (1.0 - p)) / V
        return (g * grad * inside,)

    return make(np.asarray(loss), (out,), backward)
