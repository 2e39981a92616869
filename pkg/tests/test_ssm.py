"""Selective-scan kernel: oracles, parallel/sequential equivalence, stability,
causality, drive linearity, and the recurrence gradient."""

import numpy as np
import pytest

from conftest import gradcheck, reduce_to_scalar
from lmunet import ssm
from lmunet.errors import ContractError
from lmunet.ssm import (ScanStep, compose_steps, discretize, identity_step,
                        make_ssm_params, project_step_params,
                        selective_scan_par, selective_scan_seq)
from lmunet.tensor import Tensor

RTOL = 1e-6


def params64(rng, channels, n_state, dt_rank=None):
    return make_ssm_params(channels, n_state=n_state, dt_rank=dt_rank,
                           rng=rng, dtype=np.float64)


def project_oracle(x, p):
    length, channels = x.shape
    n = p.n_state
    wdd = p.w_dt_down.data
    wdu = p.w_dt_up.data
    wbc = p.w_bc.data
    delta = np.zeros((length, channels))
    b = np.zeros((length, n))
    c = np.zeros((length, n))
    for t in range(length):
        z = np.array([sum(wdd[r, i] * x[t, i] for i in range(channels))
                      for r in range(wdd.shape[0])])
        for ch in range(channels):
            pre = sum(wdu[ch, r] * z[r] for r in range(len(z))) + p.dt_bias.data[ch]
            delta[t, ch] = np.logaddexp(0.0, pre)
        bc = np.array([sum(wbc[row, i] * x[t, i] for i in range(channels))
                       for row in range(2 * n)])
        b[t] = bc[:n]
        c[t] = bc[n:]
    return delta, b, c


def scan_oracle(x, p):
    """Fully unrolled recurrence, scalar loops everywhere."""
    length, channels = x.shape
    n = p.n_state
    a = -np.exp(p.a_log.data)
    delta, b, c = project_oracle(x, p)
    h = np.zeros((channels, n))
    y = np.zeros((length, channels))
    for t in range(length):
        for ch in range(channels):
            for st in range(n):
                abar = np.exp(delta[t, ch] * a[ch, st])
                h[ch, st] = abar * h[ch, st] + delta[t, ch] * b[t, st] * x[t, ch]
            y[t, ch] = sum(c[t, st] * h[ch, st] for st in range(n)) \
                + p.d_skip.data[ch] * x[t, ch]
    return y


class TestProjection:
    def test_zero_input_zero_bias(self, rng):
        p = params64(rng, 3, 4)
        p.dt_bias.data[:] = 0.0
        x = Tensor(np.zeros((5, 3)), dtype=np.float64)
        delta, b, c = project_step_params(x, p)
        assert np.allclose(delta.data, np.log(2.0), atol=1e-9)
        assert np.allclose(b.data, 0.0)
        assert np.allclose(c.data, 0.0)

    def test_random_vs_matrix_oracle(self, rng):
        for _ in range(100):
            channels = int(rng.integers(1, 5))
            n = int(rng.integers(1, 5))
            length = int(rng.integers(1, 7))
            p = params64(rng, channels, n)
            x = Tensor(rng.standard_normal((length, channels)), dtype=np.float64)
            delta, b, c = project_step_params(x, p)
            od, ob, oc = project_oracle(x.data, p)
            assert np.allclose(delta.data, od, rtol=RTOL)
            assert np.allclose(b.data, ob, rtol=RTOL, atol=1e-12)
            assert np.allclose(c.data, oc, rtol=RTOL, atol=1e-12)


class TestDiscretize:
    def test_zero_delta_boundary(self):
        abar, bbar = discretize(np.zeros((2, 3)), -np.ones((3, 4)),
                                np.ones((2, 4)))
        assert np.allclose(abar, 1.0)
        assert np.allclose(bbar, 0.0)

    def test_unit_closed_form(self):
        abar, _ = discretize(np.ones((1, 1)), np.array([[-1.0]]),
                             np.ones((1, 1)))
        assert np.allclose(abar, np.exp(-1.0))

    def test_random_vs_scalar_loop(self, rng):
        for _ in range(100):
            length, channels, n = rng.integers(1, 6, size=3)
            delta = rng.uniform(0.01, 2.0, size=(length, channels))
            a = -rng.uniform(0.1, 3.0, size=(channels, n))
            b = rng.standard_normal((length, n))
            abar, bbar = discretize(delta, a, b)
            for t in range(length):
                for c in range(channels):
                    for s in range(n):
                        assert np.isclose(abar[t, c, s],
                                          np.exp(delta[t, c] * a[c, s]), rtol=RTOL)
                        assert np.isclose(bbar[t, c, s],
                                          delta[t, c] * b[t, s], rtol=RTOL)

    def test_negative_delta_rejected(self):
        with pytest.raises(ContractError):
            discretize(np.array([[-0.1]]), np.array([[-1.0]]), np.ones((1, 1)))


class TestScanKernels:
    def test_single_step_closed_form(self, rng):
        p = params64(rng, 2, 3)
        x = Tensor(rng.standard_normal((1, 2)), dtype=np.float64)
        delta, b, c = project_oracle(x.data, p)
        want = np.zeros((1, 2))
        for ch in range(2):
            h = delta[0, ch] * b[0] * x.data[0, ch]
            want[0, ch] = (c[0] * h).sum() + p.d_skip.data[ch] * x.data[0, ch]
        got = selective_scan_seq(x, p)
        assert np.allclose(got.data, want, rtol=RTOL)

    def test_zero_input_zero_output(self, rng):
        p = params64(rng, 3, 4)
        y = selective_scan_seq(Tensor(np.zeros((6, 3)), dtype=np.float64), p)
        assert np.allclose(y.data, 0.0)

    def test_random_vs_unrolled_oracle(self, rng):
        for _ in range(100):
            p = params64(rng, 2, 4)
            x = Tensor(rng.standard_normal((8, 2)), dtype=np.float64)
            got = selective_scan_seq(x, p)
            assert np.allclose(got.data, scan_oracle(x.data, p), rtol=RTOL)

    def test_empty_sequence_rejected(self, rng):
        p = params64(rng, 2, 2)
        with pytest.raises(ContractError):
            selective_scan_seq(Tensor(np.zeros((0, 2)), dtype=np.float64), p)


class TestParallelScan:
    def test_composition_law_scalars(self):
        out = compose_steps(ScanStep(np.array(0.5), np.array(1.0)),
                            ScanStep(np.array(0.2), np.array(3.0)))
        assert np.isclose(out.a, 0.1)
        assert np.isclose(out.u, 2.5)

    def test_identity_element(self, rng):
        step = ScanStep(rng.uniform(0, 1, size=(2, 3)), rng.standard_normal((2, 3)))
        out = compose_steps(identity_step((2, 3)), step)
        assert np.allclose(out.a, step.a)
        assert np.allclose(out.u, step.u)

    def test_matches_sequential_on_random_instances(self, rng):
        for _ in range(200):
            length = int(rng.integers(1, 65))
            channels = int(rng.integers(1, 5))
            p = make_ssm_params(channels, n_state=int(rng.integers(1, 9)), rng=rng)
            x = Tensor(rng.standard_normal((length, channels)).astype(np.float32))
            a = selective_scan_seq(x, p).data
            b = selective_scan_par(x, p).data
            assert np.max(np.abs(a - b)) <= 1e-5 * max(1.0, np.max(np.abs(a)))

    @pytest.mark.parametrize("length", [64, 100, 256, 777, 1024])
    def test_matches_sequential_long(self, rng, length):
        p = make_ssm_params(4, n_state=8, rng=rng)
        x = Tensor(rng.standard_normal((length, 4)).astype(np.float32))
        a = selective_scan_seq(x, p).data
        b = selective_scan_par(x, p).data
        assert np.max(np.abs(a - b)) <= 1e-5 * max(1.0, np.max(np.abs(a)))

    def test_matches_sequential_float64(self, rng):
        p = params64(rng, 3, 6)
        x = Tensor(rng.standard_normal((512, 3)), dtype=np.float64)
        a = selective_scan_seq(x, p).data
        b = selective_scan_par(x, p).data
        assert np.allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_threaded_kernel_matches(self, rng):
        p = make_ssm_params(8, n_state=4, rng=rng)
        x = Tensor(rng.standard_normal((256, 8)).astype(np.float32))
        want = selective_scan_par(x, p).data
        ssm.set_num_threads(4)
        try:
            got = selective_scan_par(x, p).data
        finally:
            ssm.set_num_threads(1)
        assert np.array_equal(got, want)


class TestScanProperties:
    def test_stability_abar_in_unit_interval(self, rng):
        p = params64(rng, 3, 5)
        x = rng.standard_normal((32, 3)) * 5.0
        delta, b, _ = project_oracle(x, p)
        abar, _ = discretize(delta, -np.exp(p.a_log.data), b)
        assert np.all(abar > 0.0)
        assert np.all(abar <= 1.0)

    def test_causality(self, rng):
        p = params64(rng, 2, 4)
        x = rng.standard_normal((20, 2))
        full = selective_scan_seq(Tensor(x, dtype=np.float64), p).data
        for cut in (1, 5, 13):
            part = selective_scan_seq(Tensor(x[:cut], dtype=np.float64), p).data
            assert np.allclose(part, full[:cut], rtol=1e-12, atol=1e-12)

    def test_drive_linearity_with_frozen_projections(self, rng):
        p = params64(rng, 2, 3)
        x = rng.standard_normal((12, 2))
        delta, b, c = project_oracle(x, p)
        abar, bbar = discretize(delta, -np.exp(p.a_log.data), b)
        for alpha in (0.5, 2.0, -3.0):
            drive = bbar * x[:, :, None]
            h = ssm._scan_h_seq(abar, drive)
            base = np.einsum("lcn,ln->lc", h, c)
            h2 = ssm._scan_h_seq(abar, bbar * (alpha * x)[:, :, None])
            scaled = np.einsum("lcn,ln->lc", h2, c)
            assert np.allclose(scaled, alpha * base, rtol=1e-9, atol=1e-12)

    def test_gradient_matches_finite_differences(self, rng):
        p = params64(rng, 2, 4, dt_rank=2)
        x = Tensor(rng.standard_normal((8, 2)), requires_grad=True,
                   dtype=np.float64)
        mix = rng.standard_normal((8, 2))
        gradcheck(lambda: reduce_to_scalar(selective_scan_seq(x, p), mix),
                  [x] + list(p.tensors()))

    def test_parallel_gradient_matches_sequential(self, rng):
        p = make_ssm_params(3, n_state=4, rng=rng, dtype=np.float64)
        x64 = rng.standard_normal((130, 3))
        mix = rng.standard_normal((130, 3))
        grads = {}
        for name, fn in (("seq", selective_scan_seq), ("par", selective_scan_par)):
            from lmunet.tensor import Tape, backward
            x = Tensor(x64.copy(), requires_grad=True, dtype=np.float64)
            with Tape() as tape:
                loss = reduce_to_scalar(fn(x, p), mix)
            backward(loss, tape)
            grads[name] = (x.grad.copy(), p.a_log.grad.copy())
        assert np.allclose(grads["seq"][0], grads["par"][0], rtol=1e-9, atol=1e-12)
        assert np.allclose(grads["seq"][1], grads["par"][1], rtol=1e-9, atol=1e-12)
