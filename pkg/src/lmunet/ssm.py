"""Selective state-space sequence kernel.

The recurrence treats each channel c as an independent diagonal state-space
system with N states.  Per timestep t the input produces its own step size
and mixing vectors:

    delta[t, c] = softplus(w_dt_up @ (w_dt_down @ x[t]) + dt_bias)[c]
    (B[t], C[t]) = split(w_bc @ x[t])
    A = -exp(a_log)                          (strictly negative, stable)
    abar[t, c, n] = exp(delta[t, c] * A[c, n])      zero-order hold
    u[t, c, n]    = delta[t, c] * B[t, n] * x[t, c] Euler input path
    h[t] = abar[t] * h[t-1] + u[t],  h[0] = 0
    y[t, c] = sum_n C[t, n] * h[t, c, n] + d_skip[c] * x[t, c]

Two kernels compute the same recurrence: a sequential loop and a
work-efficient two-phase (up-sweep / down-sweep) parallel prefix over the
affine-map composition (a2, u2) o (a1, u1) = (a2*a1, a2*u1 + u2), identity
(1, 0).  Both register one fused record on the tape; the backward pass runs
the adjoint recurrence with the same prefix machinery.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from math import ceil

import numpy as np

from . import counting
from .errors import ContractError
from .tensor import Tensor, record_op

_NUM_THREADS = 1


def set_num_threads(n):
    """Cap the worker pool used by the parallel kernel (1 disables it)."""
    global _NUM_THREADS
    _NUM_THREADS = max(1, int(n))


@dataclass
class SsmParams:
    """Learnable parameters of one selective-scan unit over C channels."""

    a_log: Tensor      # (C, N), state matrix stored as log(-A)
    d_skip: Tensor     # (C,), direct feedthrough
    w_bc: Tensor       # (2N, C), per-step B and C projections
    w_dt_down: Tensor  # (R, C)
    w_dt_up: Tensor    # (C, R)
    dt_bias: Tensor    # (C,)

    @property
    def channels(self):
        return self.a_log.shape[0]

    @property
    def n_state(self):
        return self.a_log.shape[1]

    @property
    def dt_rank(self):
        return self.w_dt_down.shape[0]

    def tensors(self):
        return (self.a_log, self.d_skip, self.w_bc,
                self.w_dt_down, self.w_dt_up, self.dt_bias)


def default_dt_rank(channels):
    return max(1, ceil(channels / 16))


def a_log_init(channels, n_state, dtype=np.float32):
    """log(-A) chosen so -A[c, n] = n + 1."""
    row = np.log(np.arange(1, n_state + 1, dtype=np.float64))
    return np.tile(row, (channels, 1)).astype(dtype)


def dt_bias_init(channels, rng, dtype=np.float32):
    """Bias making softplus(dt_bias) log-uniform in [0.001, 0.1]."""
    dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=channels))
    return np.log(np.expm1(dt)).astype(dtype)


def make_ssm_params(channels, n_state=16, dt_rank=None, rng=None,
                    dtype=np.float32, requires_grad=True):
    """Standalone parameter set with the package's standard initialization."""
    rng = rng or np.random.default_rng(0)
    r = dt_rank or default_dt_rank(channels)

    def uniform(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    def t(arr):
        return Tensor(arr, requires_grad=requires_grad)

    return SsmParams(
        a_log=t(a_log_init(channels, n_state, dtype)),
        d_skip=t(np.ones(channels, dtype=dtype)),
        w_bc=t(uniform((2 * n_state, channels), channels)),
        w_dt_down=t(uniform((r, channels), channels)),
        w_dt_up=t(uniform((channels, r), r)),
        dt_bias=t(dt_bias_init(channels, rng, dtype)),
    )


# ---------------------------------------------------------------------------
# step algebra (used by the parallel kernel and its tests)


@dataclass
class ScanStep:
    """One affine recurrence element h -> a * h + u."""

    a: np.ndarray
    u: np.ndarray


def compose_steps(second, first):
    """(a2, u2) o (a1, u1) = (a2*a1, a2*u1 + u2); ``first`` applies first."""
    return ScanStep(second.a * first.a, second.a * first.u + second.u)


def identity_step(shape=(), dtype=np.float64):
    return ScanStep(np.ones(shape, dtype=dtype), np.zeros(shape, dtype=dtype))


# ---------------------------------------------------------------------------
# raw recurrence kernels on (L, ...) arrays


def _scan_h_seq(abar, u):
    h = np.zeros_like(u[0])
    out = np.empty_like(u)
    for t in range(u.shape[0]):
        h = abar[t] * h + u[t]
        out[t] = h
    return out


def _prefix_h(abar, u):
    """h for all t via Blelloch scan over the affine composition."""
    length = abar.shape[0]
    size = 1
    while size < length:
        size *= 2
    a = np.ones((size,) + abar.shape[1:], dtype=abar.dtype)
    v = np.zeros_like(a)
    a[:length] = abar
    v[:length] = u

    d = 1
    while d < size:
        lo = slice(d - 1, size, 2 * d)
        hi = slice(2 * d - 1, size, 2 * d)
        a_lo = a[lo].copy()
        v_lo = v[lo].copy()
        a[hi], v[hi] = a[hi] * a_lo, a[hi] * v_lo + v[hi]
        d *= 2

    a[size - 1] = 1.0
    v[size - 1] = 0.0
    d = size // 2
    while d >= 1:
        lo = slice(d - 1, size, 2 * d)
        hi = slice(2 * d - 1, size, 2 * d)
        ta = a[lo].copy()
        tu = v[lo].copy()
        a[lo] = a[hi]
        v[lo] = v[hi]
        a[hi] = ta * a[lo]
        v[hi] = ta * v[lo] + tu
        d //= 2

    # positions now hold the exclusive prefix; fold in each element once
    return abar * v[:length] + u


_PAR_MIN_LENGTH = 64


def _scan_h_par(abar, u):
    if abar.shape[0] < _PAR_MIN_LENGTH:
        return _scan_h_seq(abar, u)
    if _NUM_THREADS > 1 and abar.ndim == 3 and abar.shape[1] >= 2 * _NUM_THREADS:
        chunks = np.array_split(np.arange(abar.shape[1]), _NUM_THREADS)
        out = np.empty_like(u)
        with ThreadPoolExecutor(max_workers=_NUM_THREADS) as pool:
            futures = [pool.submit(_prefix_h, abar[:, c], u[:, c]) for c in chunks]
            for c, fut in zip(chunks, futures):
                out[:, c] = fut.result()
        return out
    return _prefix_h(abar, u)


# ---------------------------------------------------------------------------
# parameter projection and discretization


def _project_arrays(xd, p):
    z = xd @ p.w_dt_down.data.T
    dtp = z @ p.w_dt_up.data.T + p.dt_bias.data
    delta = np.maximum(dtp, 0) + np.log1p(np.exp(-np.abs(dtp)))
    bc = xd @ p.w_bc.data.T
    n = p.n_state
    return z, delta, bc[:, :n], bc[:, n:]


def project_step_params(x, p):
    """Per-step (delta, B, C) from the input sequence; forward values only."""
    _, delta, b, c = _project_arrays(x.data, p)
    return Tensor(delta), Tensor(b), Tensor(c)


def discretize(delta, a, b):
    """abar[t,c,n] = exp(delta[t,c] * A[c,n]);  bbar[t,c,n] = delta[t,c] * B[t,n]."""
    dd = delta.data if isinstance(delta, Tensor) else np.asarray(delta)
    ad = a.data if isinstance(a, Tensor) else np.asarray(a)
    bd = b.data if isinstance(b, Tensor) else np.asarray(b)
    if np.any(dd < 0):
        raise ContractError("discretize requires delta >= 0")
    abar = np.exp(dd[:, :, None] * ad[None])
    bbar = dd[:, :, None] * bd[:, None, :]
    return abar, bbar


# ---------------------------------------------------------------------------
# fused differentiable scan


def _selective_scan(x, p, scan_h, op_name):
    if x.ndim != 2:
        raise ContractError(f"selective scan expects an (L, C) tensor, got {x.shape}")
    length, channels = x.shape
    if length == 0:
        raise ContractError("selective scan on an empty sequence")
    n = p.n_state
    r = p.dt_rank

    xd = x.data
    z, delta, b_t, c_t = _project_arrays(xd, p)
    a = -np.exp(p.a_log.data)
    abar = np.exp(delta[:, :, None] * a[None])
    u = (delta * xd)[:, :, None] * b_t[:, None, :]
    h = scan_h(abar, u)
    y = np.einsum("lcn,ln->lc", h, c_t) + p.d_skip.data * xd

    counting.add(*counting.linear_cost(length, channels, 2 * n))   # w_bc
    counting.add(*counting.linear_cost(length, channels, r))       # dt down
    counting.add(*counting.linear_cost(length, r, channels))       # dt up
    counting.add(*counting.act_cost(length * channels))            # softplus
    counting.add(*counting.scan_cost(length, channels, n))

    inputs = (x,) + p.tensors()

    def bwd(gy):
        # adjoint of the recurrence: lam[t] = gy[t] x C[t] + abar[t+1] * lam[t+1]
        resid = gy[:, :, None] * c_t[:, None, :]
        ar = abar[::-1]
        shift = np.concatenate([np.ones_like(ar[:1]), ar[:-1]], axis=0)
        lam = scan_h(shift, resid[::-1])[::-1]

        h_prev = np.concatenate([np.zeros_like(h[:1]), h[:-1]], axis=0)
        dabar = lam * h_prev
        ddelta = (dabar * abar * a[None]).sum(axis=-1) \
            + np.einsum("lcn,ln->lc", lam, b_t) * xd
        da = np.einsum("lcn,lc->cn", dabar * abar, delta)
        da_log = da * a
        db = np.einsum("lcn,lc->ln", lam, delta * xd)
        dc = np.einsum("lc,lcn->ln", gy, h)
        dd_skip = (gy * xd).sum(axis=0)

        sig = 1.0 - np.exp(-delta)          # sigmoid of the pre-softplus value
        ddtp = ddelta * sig
        d_dt_bias = ddtp.sum(axis=0)
        dw_dt_up = ddtp.T @ z
        dz = ddtp @ p.w_dt_up.data
        dw_dt_down = dz.T @ xd
        dbc = np.concatenate([db, dc], axis=1)
        dw_bc = dbc.T @ xd

        dx = None
        if x.requires_grad:
            dx = gy * p.d_skip.data \
                + np.einsum("lcn,ln->lc", lam, b_t) * delta \
                + dz @ p.w_dt_down.data \
                + dbc @ p.w_bc.data
        return dx, da_log, dd_skip, dw_bc, dw_dt_down, dw_dt_up, d_dt_bias

    return record_op(op_name, inputs, y, bwd)


def selective_scan_seq(x, p):
    """Causal selective scan, sequential kernel."""
    return _selective_scan(x, p, _scan_h_seq, "selective_scan_seq")


def selective_scan_par(x, p):
    """Causal selective scan, parallel-prefix kernel (sequential below L=64)."""
    return _selective_scan(x, p, _scan_h_par, "selective_scan_par")
