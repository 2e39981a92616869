"""Operation-cost conventions and a runtime counter hook.

One multiply-accumulate counts as 2 FLOPs.  Normalizations and pointwise
activations count 5 FLOPs per element.  The selective scan counts 6*N FLOPs
per (timestep, channel) element-step and 2*N MACs (recurrence plus readout).
Bias additions are not counted.  Every formula below returns (macs, flops);
primitives report through :func:`add` so an instrumented forward pass and the
analytic cost model share one set of definitions.
"""

from __future__ import annotations

from contextvars import ContextVar
from math import prod

CONVENTION = "mac=2flop, norm/act=5flop/elem, scan=6N flop/elem-step, bias free"

_ACTIVE_COUNTER: ContextVar = ContextVar("lmunet_op_counter", default=None)


class OpCounter:
    """Accumulates MAC and FLOP totals while active."""

    def __init__(self):
        self.macs = 0
        self.flops = 0

    def __enter__(self):
        self._token = _ACTIVE_COUNTER.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_COUNTER.reset(self._token)
        return False


def add(macs, flops):
    c = _ACTIVE_COUNTER.get()
    if c is not None:
        c.macs += int(macs)
        c.flops += int(flops)


def linear_cost(leading, c_in, c_out):
    macs = leading * c_in * c_out
    return macs, 2 * macs


def dwconv_cost(channels, out_sites, kernel_size):
    macs = channels * out_sites * kernel_size
    return macs, 2 * macs


def conv_cost(out_sites, c_in, c_out, kernel_size):
    macs = out_sites * c_in * c_out * kernel_size
    return macs, 2 * macs


def pointwise_cost(sites, c_in, c_out):
    macs = sites * c_in * c_out
    return macs, 2 * macs


def norm_cost(elems):
    return 0, 5 * elems


def act_cost(elems):
    return 0, 5 * elems


def elemwise_cost(out_elems):
    return 0, out_elems


def maxpool_cost(out_elems, window):
    return 0, out_elems * (window - 1)


def upsample_cost(in_shape):
    """Separable 2x interpolation: 2 MACs per produced element per axis stage."""
    macs = 0
    shape = list(in_shape)
    for axis in range(1, len(shape)):
        shape[axis] *= 2
        macs += 2 * prod(shape)
    return macs, 2 * macs


def scan_cost(length, channels, n_state):
    steps = length * channels
    return 2 * n_state * steps, 6 * n_state * steps


def attention_cost(length, channels, heads):
    macs = 0
    flops = 0
    for _ in range(4):  # q, k, v, o projections
        m, f = linear_cost(length, channels, channels)
        macs += m
        flops += f
    score_macs = length * length * channels   # q @ k^T over all heads
    out_macs = length * length * channels     # weights @ v
    macs += score_macs + out_macs
    flops += 2 * (score_macs + out_macs)
    flops += 5 * heads * length * length      # softmax over score rows
    return macs, flops
