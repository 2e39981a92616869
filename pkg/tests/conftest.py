"""Shared helpers: finite-difference gradient checking and scalar reduction."""

import numpy as np
import pytest

from lmunet import ops
from lmunet.tensor import Tape, Tensor, backward


def reduce_to_scalar(t, weights):
    """Weighted sum of all elements built only from tape primitives."""
    w = Tensor(np.asarray(weights, dtype=t.dtype))
    prod = ops.hadamard(t, w)
    if prod.ndim == 1:
        ones = Tensor(np.ones((1, prod.shape[0]), dtype=t.dtype))
        return ops.linear(prod, ones)
    if prod.ndim > 2:
        prod = ops.flatten_spatial(prod)
    length, chans = prod.shape
    col = ops.linear(prod, Tensor(np.ones((1, chans), dtype=t.dtype)))
    row = ops.linear(ops.transpose_lc(col), Tensor(np.ones((1, length), dtype=t.dtype)))
    return row


def gradcheck(make_loss, tensors, h=1e-5, rtol=1e-6, atol=1e-8):
    """Compare tape gradients of ``make_loss()`` against central differences.

    All tensors must be float64 leaves; returns the worst combined error.
    """
    for t in tensors:
        assert t.dtype == np.float64, "gradcheck needs float64 tensors"
        assert t.requires_grad

    with Tape() as tape:
        loss = make_loss()
    backward(loss, tape)

    worst = 0.0
    for t in tensors:
        assert t.grad is not None, "tensor did not receive a gradient"
        flat = t.data.reshape(-1)
        grad = t.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = make_loss().item()
            flat[i] = orig - h
            down = make_loss().item()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            err = abs(grad[i] - fd) / (atol / rtol + abs(fd))
            worst = max(worst, err)
    assert worst < rtol, f"gradient mismatch: worst relative error {worst:.3e}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
