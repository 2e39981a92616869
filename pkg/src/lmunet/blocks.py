"""Composite layers: the gated state-space mixer, residual mixer layers, and
the encoder / bottleneck / decoder blocks, plus the conv3 and self-attention
stand-ins used by the ablation variants.

All blocks are pure given their weights and keep the package's shape
contracts: encoder (C, s) -> (2C, s/2), bottleneck identity, decoder
(C, s) -> (C/2, 2s).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import counting, ops
from .errors import ConfigError, ShapeError
from .ssm import SsmParams, selective_scan_par
from .tensor import Tensor, record_op

SEQ_CONV_WIDTH = 4  # causal depthwise width inside the mixer


@dataclass
class VssWeights:
    """Two-branch gated state-space mixer over (L, C) sequences."""

    w_in1: Tensor
    b_in1: Tensor
    conv_k: Tensor     # (E, SEQ_CONV_WIDTH) causal depthwise kernel
    conv_b: Tensor
    ssm: SsmParams
    norm_g: Tensor
    norm_b: Tensor
    w_in2: Tensor
    b_in2: Tensor
    w_out: Tensor
    b_out: Tensor


@dataclass
class Conv3Weights:
    """Full 3x3(x3) convolution standing in for the state-space mixer."""

    kernel: Tensor     # (C, C, 3, 3[, 3])
    bias: Tensor


@dataclass
class AttentionWeights:
    """Multi-head self-attention standing in for the bottleneck mixer."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    heads: int


@dataclass
class RvmWeights:
    """One residual mixer layer; ``s`` is None when the scaled residual is off."""

    norm1_g: Tensor
    norm1_b: Tensor
    mixer: object      # VssWeights | Conv3Weights | AttentionWeights
    s: Tensor | None
    norm2_g: Tensor
    norm2_b: Tensor
    w_proj: Tensor


@dataclass
class DecoderWeights:
    dw_k: Tensor
    dw_b: Tensor
    s_prime: Tensor
    w_half: Tensor
    b_half: Tensor


def vss_forward(x, w):
    """Gated two-branch mixer on (L, C).

    Branch 1: linear expand, causal depthwise conv (width 4, left pad 3),
    SiLU, selective scan, layernorm.  Branch 2: linear expand, SiLU.  The
    branches merge by Hadamard product and project back to C channels.
    """
    a = ops.linear(x, w.w_in1, w.b_in1)
    a = ops.transpose_lc(a)
    a = ops.dwconv(a, w.conv_k, w.conv_b, stride=1,
                   padding=((SEQ_CONV_WIDTH - 1, 0),))
    a = ops.transpose_lc(a)
    a = ops.silu(a)
    a = selective_scan_par(a, w.ssm)
    a = ops.layernorm(a, w.norm_g, w.norm_b)
    gate = ops.silu(ops.linear(x, w.w_in2, w.b_in2))
    return ops.linear(ops.hadamard(a, gate), w.w_out, w.b_out)


def conv3_forward(x, w, spatial):
    """Drop-in mixer: unflatten, full 3-wide convolution, re-flatten."""
    s = ops.unflatten_spatial(x, spatial)
    s = ops.conv(s, w.kernel, w.bias, stride=1, padding=1)
    return ops.flatten_spatial(s)


def self_attention_forward(x, w):
    """Multi-head scaled dot-product attention on (L, C)."""
    length, channels = x.shape
    if length < 1:
        raise ShapeError("self_attention_forward needs at least one token")
    heads = w.heads
    if channels % heads != 0:
        raise ConfigError(f"channels {channels} not divisible by head count {heads}")
    dim = channels // heads
    scale = 1.0 / np.sqrt(dim)

    def split(m):
        return m.reshape(length, heads, dim).transpose(1, 0, 2)

    q = split(x.data @ w.w_q.data.T)
    k = split(x.data @ w.w_k.data.T)
    v = split(x.data @ w.w_v.data.T)
    scores = (q @ k.transpose(0, 2, 1)) * np.asarray(scale, dtype=x.dtype)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    probs = e / e.sum(axis=-1, keepdims=True)
    ctx = probs @ v
    merged = ctx.transpose(1, 0, 2).reshape(length, channels)
    y = merged @ w.w_o.data.T
    counting.add(*counting.attention_cost(length, channels, heads))

    def bwd(gy):
        d_wo = gy.T @ merged
        d_merged = gy @ w.w_o.data
        d_ctx = d_merged.reshape(length, heads, dim).transpose(1, 0, 2)
        d_probs = d_ctx @ v.transpose(0, 2, 1)
        d_v = probs.transpose(0, 2, 1) @ d_ctx
        d_scores = probs * (d_probs - (d_probs * probs).sum(axis=-1, keepdims=True))
        d_q = (d_scores @ k) * scale
        d_k = (d_scores.transpose(0, 2, 1) @ q) * scale

        def merge(m):
            return m.transpose(1, 0, 2).reshape(length, channels)

        dq, dk, dv = merge(d_q), merge(d_k), merge(d_v)
        dx = None
        if x.requires_grad:
            dx = dq @ w.w_q.data + dk @ w.w_k.data + dv @ w.w_v.data
        return dx, dq.T @ x.data, dk.T @ x.data, dv.T @ x.data, d_wo

    return record_op("self_attention", (x, w.w_q, w.w_k, w.w_v, w.w_o), y, bwd)


def mixer_forward(x, mixer, spatial):
    if isinstance(mixer, VssWeights):
        return vss_forward(x, mixer)
    if isinstance(mixer, Conv3Weights):
        return conv3_forward(x, mixer, spatial)
    if isinstance(mixer, AttentionWeights):
        return self_attention_forward(x, mixer)
    raise ConfigError(f"unknown mixer weights type {type(mixer).__name__}")


def rvm_forward(m, w, spatial=None):
    """Residual mixer layer on (L, C) -> (L, C_out).

    mixer(norm(m)) plus the per-channel scaled input when ``w.s`` is present,
    then a second norm and the output projection.
    """
    n1 = ops.layernorm(m, w.norm1_g, w.norm1_b)
    v = mixer_forward(n1, w.mixer, spatial)
    if w.s is not None:
        v = ops.add(v, ops.scale_channels(m, w.s, axis=-1))
    n2 = ops.layernorm(v, w.norm2_g, w.norm2_b)
    return ops.linear(n2, w.w_proj)


def encoder_block_forward(f, layers):
    """(C, spatial) -> (2C, spatial/2): flatten, mixer layers (last one doubles
    channels), unflatten, max-pool."""
    spatial = f.shape[1:]
    for n in spatial:
        if n % 2 != 0:
            raise ShapeError(f"encoder block requires even spatial extents, got {f.shape}")
    x = ops.flatten_spatial(f)
    for lw in layers:
        x = rvm_forward(x, lw, spatial)
    y = ops.unflatten_spatial(x, spatial)
    return ops.maxpool2(y)


def bottleneck_forward(f, layers):
    """Shape-preserving stack of exactly four residual mixer layers."""
    if len(layers) != 4:
        raise ConfigError(f"bottleneck takes exactly 4 layers, got {len(layers)}")
    spatial = f.shape[1:]
    x = ops.flatten_spatial(f)
    for lw in layers:
        x = rvm_forward(x, lw, spatial)
    return ops.unflatten_spatial(x, spatial)


def decoder_block_forward(p_in, f_skip, w):
    """(C, s) + (C, s) -> (C/2, 2s): additive fusion, depthwise conv with a
    scaled residual and ReLU, pointwise halving, 2x upsample."""
    if p_in.shape != f_skip.shape:
        raise ShapeError(f"decoder fusion needs equal shapes, got {p_in.shape} "
                         f"and {f_skip.shape}")
    if p_in.shape[0] % 2 != 0:
        raise ConfigError(f"decoder needs an even channel count, got {p_in.shape[0]}")
    q = ops.add(p_in, f_skip)
    d = ops.dwconv(q, w.dw_k, w.dw_b, stride=1, padding=1)
    r = ops.relu(ops.add(d, ops.scale_channels(q, w.s_prime, axis=0)))
    h = ops.pointwise_conv(r, w.w_half, w.b_half)
    return ops.upsample2x(h)
