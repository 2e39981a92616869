"""Forward primitives with local backward rules.

Every function takes and returns :class:`~lmunet.tensor.Tensor` values, never
mutates its inputs, and registers a backward rule on the active tape.  Shapes
follow the channel-first convention for spatial tensors and (L, C) for
flattened sequences.
"""

from __future__ import annotations

from itertools import product as _iterproduct
from math import prod

import numpy as np

from . import counting
from .errors import ParameterError, ShapeError
from .tensor import Tensor, record_op


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _pad_pairs(padding, rank):
    """Normalize padding to one (low, high) pair per spatial axis."""
    if isinstance(padding, int):
        if padding < 0:
            raise ParameterError(f"padding must be >= 0, got {padding}")
        return ((padding, padding),) * rank
    pairs = []
    for p in padding:
        if isinstance(p, int):
            pairs.append((p, p))
        else:
            lo, hi = p
            pairs.append((int(lo), int(hi)))
    if len(pairs) != rank:
        raise ShapeError(f"padding spec {padding!r} does not cover {rank} spatial axes")
    return tuple(pairs)


# ---------------------------------------------------------------------------
# linear / convolutions


def linear(x, w, b=None):
    """y[..., o] = sum_i x[..., i] * w[o, i] (+ b[o]); leading axes preserved."""
    c_out, c_in = w.shape
    if x.shape[-1] != c_in:
        raise ShapeError(f"linear: input shape {x.shape} does not end in {c_in} "
                         f"(weight shape {w.shape})")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    leading = prod(x.shape[:-1]) if x.ndim > 1 else 1
    counting.add(*counting.linear_cost(leading, c_in, c_out))

    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gx = g @ w.data if x.requires_grad else None
        g2 = g.reshape(-1, c_out)
        x2 = x.data.reshape(-1, c_in)
        gw = g2.T @ x2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record_op("linear", inputs, y, bwd)


def _conv_out_extents(spatial, ksize, pairs, stride):
    out = []
    for n, k, (lo, hi) in zip(spatial, ksize, pairs):
        span = n + lo + hi - k
        if span < 0:
            raise ShapeError(f"kernel {ksize} larger than padded input {spatial} "
                             f"with padding {pairs}")
        out.append(span // stride + 1)
    return tuple(out)


def dwconv(x, k, b=None, stride=1, padding=1):
    """Depthwise cross-correlation: one kernel per channel, spatial rank 1..3.

    x: (C, spatial...), k: (C, kernel...), padding: int or per-axis pairs.
    """
    rank = x.ndim - 1
    if rank < 1 or rank > 3:
        raise ShapeError(f"dwconv supports spatial rank 1..3, got input shape {x.shape}")
    if k.ndim - 1 != rank or k.shape[0] != x.shape[0]:
        raise ShapeError(f"dwconv: kernel shape {k.shape} does not match input {x.shape}")
    channels = x.shape[0]
    ksize = k.shape[1:]
    pairs = _pad_pairs(padding, rank)
    out_sp = _conv_out_extents(x.shape[1:], ksize, pairs, stride)

    xp = np.pad(x.data, ((0, 0),) + pairs)
    y = np.zeros((channels,) + out_sp, dtype=x.dtype)
    kexp = (slice(None),) + (None,) * rank
    offset_slices = []
    for off in _iterproduct(*(range(s) for s in ksize)):
        sl = (slice(None),) + tuple(
            slice(o, o + out_sp[a] * stride, stride) for a, o in enumerate(off))
        offset_slices.append((off, sl))
        y += k.data[(slice(None),) + off][kexp] * xp[sl]
    if b is not None:
        y += b.data[kexp]
    counting.add(*counting.dwconv_cost(channels, prod(out_sp), prod(ksize)))

    inputs = (x, k) if b is None else (x, k, b)
    spatial_axes = tuple(range(1, rank + 1))

    def bwd(g):
        gk = np.zeros_like(k.data)
        for off, sl in offset_slices:
            gk[(slice(None),) + off] = (g * xp[sl]).sum(axis=spatial_axes)
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for off, sl in offset_slices:
                gxp[sl] += k.data[(slice(None),) + off][kexp] * g
            crop = (slice(None),) + tuple(
                slice(lo, lo + n) for (lo, _), n in zip(pairs, x.shape[1:]))
            gx = gxp[crop]
        if b is None:
            return gx, gk
        return gx, gk, g.sum(axis=spatial_axes)

    return record_op("dwconv", inputs, y, bwd)


def conv(x, w, b=None, stride=1, padding=1):
    """Full (channel-mixing) cross-correlation; used by the conv3 ablation.

    x: (C_in, spatial...), w: (C_out, C_in, kernel...).
    """
    rank = x.ndim - 1
    if rank < 1 or rank > 3:
        raise ShapeError(f"conv supports spatial rank 1..3, got input shape {x.shape}")
    if w.ndim - 2 != rank or w.shape[1] != x.shape[0]:
        raise ShapeError(f"conv: weight shape {w.shape} does not match input {x.shape}")
    c_out, c_in = w.shape[:2]
    ksize = w.shape[2:]
    pairs = _pad_pairs(padding, rank)
    out_sp = _conv_out_extents(x.shape[1:], ksize, pairs, stride)

    xp = np.pad(x.data, ((0, 0),) + pairs)
    y = np.zeros((c_out,) + out_sp, dtype=x.dtype)
    offset_slices = []
    for off in _iterproduct(*(range(s) for s in ksize)):
        sl = (slice(None),) + tuple(
            slice(o, o + out_sp[a] * stride, stride) for a, o in enumerate(off))
        offset_slices.append((off, sl))
        y += np.tensordot(w.data[(slice(None), slice(None)) + off], xp[sl], axes=([1], [0]))
    if b is not None:
        y += b.data[(slice(None),) + (None,) * rank]
    counting.add(*counting.conv_cost(prod(out_sp), c_in, c_out, prod(ksize)))

    inputs = (x, w) if b is None else (x, w, b)
    spatial_axes = tuple(range(1, rank + 1))

    def bwd(g):
        gw = np.zeros_like(w.data)
        for off, sl in offset_slices:
            gw[(slice(None), slice(None)) + off] = np.tensordot(
                g, xp[sl], axes=(spatial_axes, spatial_axes))
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for off, sl in offset_slices:
                gxp[sl] += np.tensordot(w.data[(slice(None), slice(None)) + off], g,
                                        axes=([0], [0]))
            crop = (slice(None),) + tuple(
                slice(lo, lo + n) for (lo, _), n in zip(pairs, x.shape[1:]))
            gx = gxp[crop]
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=spatial_axes)

    return record_op("conv", inputs, y, bwd)


def pointwise_conv(x, w, b=None):
    """1x1(x1) convolution: a linear map over the channel axis at every site."""
    if x.shape[0] != w.shape[1]:
        raise ShapeError(f"pointwise_conv: input channels {x.shape} do not match "
                         f"weight shape {w.shape}")
    c_out, c_in = w.shape
    rank = x.ndim - 1
    y = np.tensordot(w.data, x.data, axes=([1], [0]))
    if b is not None:
        y = y + b.data[(slice(None),) + (None,) * rank]
    counting.add(*counting.pointwise_cost(prod(x.shape[1:]), c_in, c_out))

    inputs = (x, w) if b is None else (x, w, b)
    spatial_axes = tuple(range(1, rank + 1))

    def bwd(g):
        gx = np.tensordot(w.data, g, axes=([0], [0])) if x.requires_grad else None
        gw = np.tensordot(g, x.data, axes=(spatial_axes, spatial_axes))
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=spatial_axes)

    return record_op("pointwise_conv", inputs, y, bwd)


# ---------------------------------------------------------------------------
# normalization / activations


def layernorm(x, gamma, beta, eps=1e-5):
    """Normalize over the trailing channel axis with biased variance."""
    if eps <= 0:
        raise ParameterError(f"layernorm eps must be > 0, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layernorm: gamma {gamma.shape} / beta {beta.shape} "
                         f"do not match channel width {c} of input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xh = xc * inv
    y = gamma.data * xh + beta.data
    counting.add(*counting.norm_cost(x.size))

    def bwd(g):
        lead_axes = tuple(range(g.ndim - 1))
        g_gamma = (g * xh).sum(axis=lead_axes)
        g_beta = g.sum(axis=lead_axes)
        gxh = g * gamma.data
        gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True)
                    - xh * (gxh * xh).mean(axis=-1, keepdims=True))
        return gx, g_gamma, g_beta

    return record_op("layernorm", (x, gamma, beta), y, bwd)


def silu(x):
    """x * sigmoid(x)."""
    s = _sigmoid(x.data)
    y = x.data * s
    counting.add(*counting.act_cost(x.size))

    def bwd(g):
        return (g * (s * (1.0 + x.data * (1.0 - s))),)

    return record_op("silu", (x,), y, bwd)


def relu(x):
    y = np.maximum(x.data, 0)
    counting.add(*counting.act_cost(x.size))

    def bwd(g):
        return (g * (x.data > 0),)

    return record_op("relu", (x,), y, bwd)


def softplus(x):
    """ln(1 + e^x), computed without overflow for large |x|."""
    y = np.maximum(x.data, 0) + np.log1p(np.exp(-np.abs(x.data)))
    counting.add(*counting.act_cost(x.size))

    def bwd(g):
        return (g * _sigmoid(x.data),)

    return record_op("softplus", (x,), y, bwd)


def softmax(x, axis=0):
    """Normalized exponentials along ``axis`` (the channel axis by default)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    counting.add(*counting.act_cost(x.size))

    def bwd(g):
        inner = (g * p).sum(axis=axis, keepdims=True)
        return (p * (g - inner),)

    return record_op("softmax", (x,), p, bwd)


# ---------------------------------------------------------------------------
# pooling / resampling


def maxpool2(x):
    """Kernel-2, stride-2 max pooling over every spatial axis."""
    rank = x.ndim - 1
    if rank < 1 or rank > 3:
        raise ShapeError(f"maxpool2 supports spatial rank 1..3, got {x.shape}")
    for n in x.shape[1:]:
        if n % 2 != 0:
            raise ShapeError(f"maxpool2 requires even spatial extents, got {x.shape}")
    c = x.shape[0]
    out_sp = tuple(n // 2 for n in x.shape[1:])
    window = 2 ** rank

    split = [c]
    for n in out_sp:
        split += [n, 2]
    perm = [0] + [1 + 2 * a for a in range(rank)] + [2 + 2 * a for a in range(rank)]
    xw = x.data.reshape(split).transpose(perm).reshape((c,) + out_sp + (window,))
    idx = xw.argmax(axis=-1)
    y = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
    counting.add(*counting.maxpool_cost(prod(y.shape), window))

    inv_perm = tuple(np.argsort(perm))

    def bwd(g):
        gw = np.zeros((c,) + out_sp + (window,), dtype=g.dtype)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        # undo the transpose+reshape that built the window view
        gw = gw.reshape((c,) + out_sp + (2,) * rank)
        return (gw.transpose(inv_perm).reshape(x.shape),)

    return record_op("maxpool2", (x,), y, bwd)


def _axis_lerp_indices(n, dtype):
    """Half-pixel-center source indices and weights for doubling one axis."""
    dst = np.arange(2 * n, dtype=np.float64)
    src = (dst + 0.5) / 2.0 - 0.5
    i0f = np.floor(src)
    w1 = (src - i0f).astype(dtype)
    i0 = np.clip(i0f, 0, n - 1).astype(np.intp)
    i1 = np.clip(i0f + 1, 0, n - 1).astype(np.intp)
    return i0, i1, w1


def upsample2x(x):
    """Separable 2x linear interpolation, half-pixel centers, edge clamp.

    Supports spatial rank 2 (bilinear) and 3 (trilinear).
    """
    rank = x.ndim - 1
    if rank not in (2, 3):
        raise ShapeError(f"upsample2x supports spatial rank 2 or 3, got {x.shape}")
    counting.add(*counting.upsample_cost(x.shape))

    plans = []
    y = x.data
    for axis in range(1, rank + 1):
        i0, i1, w1 = _axis_lerp_indices(y.shape[axis], x.dtype)
        wshape = [1] * y.ndim
        wshape[axis] = len(w1)
        w1b = w1.reshape(wshape)
        y = (1.0 - w1b) * np.take(y, i0, axis=axis) + w1b * np.take(y, i1, axis=axis)
        plans.append((axis, i0, i1, w1b))

    def bwd(g):
        for axis, i0, i1, w1b in reversed(plans):
            src_len = (g.shape[axis]) // 2
            gm = np.moveaxis(g, axis, 0)
            w1m = np.moveaxis(np.broadcast_to(w1b, g.shape), axis, 0)
            acc = np.zeros((src_len,) + gm.shape[1:], dtype=g.dtype)
            np.add.at(acc, i0, (1.0 - w1m) * gm)
            np.add.at(acc, i1, w1m * gm)
            g = np.moveaxis(acc, 0, axis)
        return (g,)

    return record_op("upsample2x", (x,), y, bwd)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    counting.add(*counting.elemwise_cost(a.size))

    def bwd(g):
        return g, g

    return record_op("add", (a, b), a.data + b.data, bwd)


def hadamard(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"hadamard: shapes {a.shape} and {b.shape} differ")
    counting.add(*counting.elemwise_cost(a.size))

    def bwd(g):
        return g * b.data, g * a.data

    return record_op("hadamard", (a, b), a.data * b.data, bwd)


def scale_channels(x, s, axis=-1):
    """Multiply by a length-C vector broadcast along the channel axis.

    The channel axis is trailing for (L, C) tensors and first for spatial ones.
    """
    ax = axis % x.ndim
    if s.ndim != 1 or s.shape[0] != x.shape[ax]:
        raise ShapeError(f"scale_channels: vector {s.shape} does not match axis {axis} "
                         f"of input {x.shape}")
    shape = [1] * x.ndim
    shape[ax] = s.shape[0]
    sb = s.data.reshape(shape)
    counting.add(*counting.elemwise_cost(x.size))

    other_axes = tuple(a for a in range(x.ndim) if a != ax)

    def bwd(g):
        gs = (g * x.data).sum(axis=other_axes)
        return g * sb, gs

    return record_op("scale_channels", (x, s), x.data * sb, bwd)


# ---------------------------------------------------------------------------
# reshapes


def flatten_spatial(x):
    """(C, spatial...) -> (L, C) with row-major spatial order."""
    if x.ndim < 2:
        raise ShapeError(f"flatten_spatial needs a spatial tensor, got {x.shape}")
    c = x.shape[0]
    spatial = x.shape[1:]
    y = np.moveaxis(x.data, 0, -1).reshape(prod(spatial), c)

    def bwd(g):
        return (np.moveaxis(g.reshape(spatial + (c,)), -1, 0),)

    return record_op("flatten_spatial", (x,), y, bwd)


def unflatten_spatial(x, spatial):
    """(L, C) -> (C, spatial...); inverse of flatten_spatial for matching L."""
    if x.ndim != 2:
        raise ShapeError(f"unflatten_spatial needs an (L, C) tensor, got {x.shape}")
    spatial = tuple(int(n) for n in spatial)
    l, c = x.shape
    if prod(spatial) != l:
        raise ShapeError(f"unflatten_spatial: extents {spatial} do not multiply to L={l}")
    y = np.moveaxis(x.data.reshape(spatial + (c,)), -1, 0)

    def bwd(g):
        return (np.moveaxis(g, 0, -1).reshape(l, c),)

    return record_op("unflatten_spatial", (x,), y, bwd)


def transpose_lc(x):
    """Swap the two axes of an (L, C) tensor."""
    if x.ndim != 2:
        raise ShapeError(f"transpose_lc needs a rank-2 tensor, got {x.shape}")

    def bwd(g):
        return (g.T,)

    return record_op("transpose_lc", (x,), x.data.T, bwd)


def scalar(value, dtype=np.float32):
    """Constant scalar tensor, convenient for loss weighting."""
    return Tensor(np.asarray(value, dtype=dtype))
