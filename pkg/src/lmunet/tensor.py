"""Dense float tensors plus a recorded-operation tape for reverse-mode gradients.

Layout conventions used throughout the package:

* spatial tensors are channel-first: (C, H, W) or (C, H, W, D)
* flattened sequence tensors are (L, C), row-major over the spatial axes
* buffers are contiguous row-major numpy arrays, float32 or float64

Gradients are computed by replaying a :class:`Tape` in reverse.  Every
primitive appends one record (inputs, output, local backward rule) while a
tape is active; :func:`backward` then accumulates adjoints record by record.
Forward calls never mutate their inputs.
"""

from __future__ import annotations

from contextvars import ContextVar

import numpy as np

from .errors import ContractError, TapeStateError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_ACTIVE_TAPE: ContextVar = ContextVar("lmunet_active_tape", default=None)


class Tensor:
    """A dense float32/float64 array with optional gradient bookkeeping."""

    __slots__ = ("data", "requires_grad", "grad", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None  # same-shape numpy array after backward, else None
        self.op = None    # producing op name; None marks a leaf

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self):
        """Copy of this tensor outside any graph."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}{flag})"


class _TapeRecord:
    __slots__ = ("op", "inputs", "out", "backward")

    def __init__(self, op, inputs, out, backward):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.backward = backward


class Tape:
    """Ordered record of operations for one backward pass.

    Use as a context manager; primitives executed inside the block are
    recorded in topological order.  A tape drives exactly one backward pass
    and is consumed by it.
    """

    def __init__(self):
        self.records = []
        self.consumed = False
        self._token = None

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def __len__(self):
        return len(self.records)


def current_tape():
    return _ACTIVE_TAPE.get()


def record_op(name, inputs, out_data, backward):
    """Wrap ``out_data`` in a Tensor and record the op on the active tape.

    ``backward`` maps the output adjoint (numpy array) to a tuple of input
    adjoints aligned with ``inputs`` (entries may be None).  Recording only
    happens when a tape is active and some input requires a gradient.
    """
    requires = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires)
    out.op = name
    tape = _ACTIVE_TAPE.get()
    if tape is not None and requires:
        if tape.consumed:
            raise TapeStateError("cannot record onto a consumed tape")
        tape.records.append(_TapeRecord(name, tuple(inputs), out, backward))
    return out


def backward(loss, tape):
    """Reverse-accumulate d(loss)/d(leaf) for every leaf with requires_grad.

    Sets ``.grad`` on each such leaf and returns a dict mapping the leaf
    tensor to its gradient array.  The tape is consumed afterwards.
    """
    if tape.consumed:
        raise TapeStateError("tape already consumed by a previous backward pass")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads = {id(loss): np.ones_like(loss.data)}
    leaf_by_id = {}
    if loss.op is None and loss.requires_grad:
        leaf_by_id[id(loss)] = loss

    for rec in reversed(tape.records):
        g_out = grads.pop(id(rec.out), None)
        if g_out is None:
            continue
        input_grads = rec.backward(g_out)
        for t, g in zip(rec.inputs, input_grads):
            if g is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if t.op is None:
                leaf_by_id[key] = t

    tape.consumed = True

    result = {}
    for key, leaf in leaf_by_id.items():
        g = grads.get(key)
        if g is None:
            continue
        leaf.grad = np.ascontiguousarray(g)
        result[leaf] = leaf.grad
    return result
