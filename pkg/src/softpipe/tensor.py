"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tape` records every differentiable operation executed while it is
active; :func:`backward` replays the recorded rules in reverse order to
populate ``.grad`` on every tensor that requires one.  The tape is rebuilt on
every forward pass (define-by-run), which is what lets the free-running
greedy decoder have a data-dependent graph length.

Float32 is the training dtype; gradient checking demands float64 because
central differences are unreliable in single precision.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

from softpipe import kernels
from softpipe.exceptions import (
    ContractError,
    NumericError,
    RangeError,
    ShapeError,
    StateError,
)

DEFAULT_DTYPE = np.float32

_STATE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = []
        _STATE.stack = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense array with an optional gradient and recorded history.

    ``data`` is always an owned numpy array.  ``grad`` is lazily created by
    :func:`backward` and accumulates across backward calls until cleared
    (gradient accumulation relies on this).
    """

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        return multiply(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Entry:
    __slots__ = ("out", "inputs", "bwd")

    def __init__(self, out: Tensor, inputs: tuple, bwd: Callable):
        self.out = out
        self.inputs = inputs
        self.bwd = bwd


class Tape:
    """Ordered record of operations; replayed in reverse by :func:`backward`.

    One tape serves one forward/backward cycle and is confined to the thread
    that created it.  A second backward on the same tape is an error.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._consumed = False

    def __len__(self) -> int:
        return len(self._entries)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack().pop()


class no_grad:
    """Context manager that disables recording (eval-mode forward passes)."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=False, dtype=dtype)


def parameter(data, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=True, dtype=dtype)


def _record(out_data: np.ndarray, inputs: tuple, bwd: Callable) -> Tensor:
    tape = active_tape()
    req = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req:
        out._tape = tape
        tape._entries.append(_Entry(out, inputs, bwd))
    return out


def _check_same_dtype(*tensors: Tensor) -> None:
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ContractError(f"mixed element types in one op: {sorted(map(str, dtypes))}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum out broadcast dimensions so grad matches the input's shape."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), bwd)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(a.data - b.data, (a, b), bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b)
    a_data, b_data = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * b_data, a.shape), _unbroadcast(g * a_data, b.shape)

    return _record(a_data * b_data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)

    def bwd(g):
        return (g * c,)

    return _record(a.data * c, (a,), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for 2-D operands or batched 3-D operands."""
    _check_same_dtype(a, b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul needs two 2-D or two 3-D tensors, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2] or (a.ndim == 3 and a.shape[0] != b.shape[0]):
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def bwd(g):
        return g @ b_data.swapaxes(-1, -2), a_data.swapaxes(-1, -2) @ g

    return _record(a_data @ b_data, (a, b), bwd)


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        return (g.transpose(inverse),)

    return _record(a.data.transpose(axes), (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    old_shape = a.shape

    def bwd(g):
        return (g.reshape(old_shape),)

    return _record(a.data.reshape(shape), (a,), bwd)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    _check_same_dtype(*tensors)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    return concatenate([reshape(t, (1, t.size)) for t in tensors], axis=0)


def index_row(a: Tensor, i: int) -> Tensor:
    """Select row ``i`` of a 2-D tensor as a 1-D tensor."""
    shape, dtype = a.shape, a.data.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        out[i] = g
        return (out,)

    return _record(a.data[i].copy(), (a,), bwd)


def embedding_select(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Gather columns of a ``[D, V]`` embedding table into ``[len(ids), D]`` rows."""
    ids_arr = np.asarray(ids, dtype=np.int64)
    v = table.shape[1]
    bad = np.nonzero((ids_arr < 0) | (ids_arr >= v))[0]
    if bad.size:
        raise RangeError(f"token id {int(ids_arr[bad[0]])} at position {int(bad[0])} outside vocabulary of size {v}")
    shape, dtype = table.shape, table.data.dtype

    def bwd(g):
        out = np.zeros(shape, dtype=dtype)
        np.add.at(out.T, ids_arr, g)
        return (out,)

    return _record(table.data[:, ids_arr].T.copy(), (table,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _record(np.where(mask, a.data, a.data.dtype.type(0)), (a,), bwd)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode (p == 0 is the identity)."""
    if p == 0.0:
        return a
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / a.data.dtype.type(1.0 - p)

    def bwd(g):
        return (g * keep,)

    return _record(a.data * keep, (a,), bwd)


def sum_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype

    def bwd(g):
        return (np.broadcast_to(g, shape).astype(dtype, copy=True),)

    return _record(a.data.sum(), (a,), bwd)


def mean_all(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.data.dtype
    n = a.size

    def bwd(g):
        return (np.broadcast_to(g / n, shape).astype(dtype, copy=True),)

    return _record(a.data.mean(), (a,), bwd)


def mean_of(tensors: Sequence[Tensor]) -> Tensor:
    """Mean of scalar tensors (batch averaging)."""
    return mean_all(stack_rows([reshape(t, (1,)) for t in tensors]))


# ---------------------------------------------------------------------------
# kernel-backed primitives
# ---------------------------------------------------------------------------


def _as_rows(x: np.ndarray, axis: int):
    """View ``x`` with ``axis`` as the last dimension, flattened to 2-D."""
    axis = axis % x.ndim
    moved = x if axis == x.ndim - 1 else np.moveaxis(x, axis, -1)
    rows = np.ascontiguousarray(moved).reshape(-1, moved.shape[-1])
    return rows, moved.shape, axis


def _from_rows(rows: np.ndarray, moved_shape, axis: int, ndim: int):
    out = rows.reshape(moved_shape)
    if axis != ndim - 1:
        out = np.moveaxis(out, -1, axis)
    return np.ascontiguousarray(out)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    rows, moved_shape, ax = _as_rows(a.data, axis)
    y_rows = kernels.softmax_fwd(rows)
    y = _from_rows(y_rows, moved_shape, ax, a.ndim)

    def bwd(g):
        g_rows, _, _ = _as_rows(g, ax)
        dx = kernels.softmax_bwd(y_rows, g_rows)
        return (_from_rows(dx, moved_shape, ax, a.ndim),)

    return _record(y, (a,), bwd)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    rows, moved_shape, ax = _as_rows(a.data, axis)
    y_rows = kernels.log_softmax_fwd(rows)
    y = _from_rows(y_rows, moved_shape, ax, a.ndim)

    def bwd(g):
        g_rows, _, _ = _as_rows(g, ax)
        dx = kernels.log_softmax_bwd(y_rows, g_rows)
        return (_from_rows(dx, moved_shape, ax, a.ndim),)

    return _record(y, (a,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of a 2-D tensor, then apply an affine map."""
    _check_same_dtype(x, gain, bias)
    if x.ndim != 2 or gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(f"layer_norm expects [T, D] with [D] gain/bias, got {x.shape}, {gain.shape}, {bias.shape}")
    x_data, gain_data = x.data, gain.data
    y, mean, rstd = kernels.layer_norm_fwd(x_data, gain_data, bias.data, eps)

    def bwd(g):
        return kernels.layer_norm_bwd(x_data, gain_data, mean, rstd, np.ascontiguousarray(g))

    return _record(y, (x, gain, bias), bwd)


def cross_entropy(log_probs: Tensor, targets: Sequence[int], mask: Sequence[bool] | None = None) -> Tensor:
    """Token-mean negative log-likelihood of ``targets`` under ``log_probs``.

    ``log_probs`` is ``[T, V]`` (rows are log-distributions); masked-out steps
    do not contribute.  The mean over unmasked steps keeps the value
    comparable across sequence lengths.
    """
    t_len, v = log_probs.shape
    targets_arr = np.asarray(targets, dtype=np.int64)
    if targets_arr.shape != (t_len,):
        raise ShapeError(f"targets length {targets_arr.shape} does not match log_probs rows {t_len}")
    if mask is None:
        mask_arr = np.ones(t_len, dtype=np.uint8)
    else:
        mask_arr = np.asarray(mask, dtype=np.uint8)
        if mask_arr.shape != (t_len,):
            raise ShapeError(f"mask length {mask_arr.shape} does not match log_probs rows {t_len}")
    if not mask_arr.any():
        raise ContractError("cross_entropy requires at least one unmasked step")
    bad = np.nonzero(mask_arr & ((targets_arr < 0) | (targets_arr >= v)))[0]
    if bad.size:
        raise RangeError(f"target id {int(targets_arr[bad[0]])} at step {int(bad[0])} outside vocabulary of size {v}")

    shape, dtype = log_probs.shape, log_probs.data.dtype
    loss, n = kernels.nll_fwd(np.ascontiguousarray(log_probs.data), targets_arr, mask_arr)

    def bwd(g):
        return (kernels.nll_bwd(shape, dtype, targets_arr, mask_arr, n, float(g)),)

    return _record(np.asarray(loss, dtype=dtype), (log_probs,), bwd)


# ---------------------------------------------------------------------------
# backward pass and gradient checking
# ---------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` for every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into existing ``.grad`` arrays, which is what makes
    gradient accumulation across micro-batches work.  Calling backward twice
    on the same tape is an error: the graph must be rebuilt first.
    """
    if loss.shape != ():
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss is not on a recorded tape (was it computed under no_grad?)")
    if tape._consumed:
        raise StateError("backward already ran on this tape; rebuild the forward pass first")
    tape._consumed = True

    reachable = {id(loss)}
    needed: list[_Entry] = []
    for entry in reversed(tape._entries):
        if id(entry.out) in reachable:
            needed.append(entry)
            for t in entry.inputs:
                if t.requires_grad:
                    reachable.add(id(t))

    seeds = np.ones((), dtype=loss.data.dtype)
    loss.grad = seeds if loss.grad is None else loss.grad + seeds
    for entry in needed:
        gout = entry.out.grad
        if gout is None:
            continue
        grads = entry.bwd(gout)
        for t, g in zip(entry.inputs, grads):
            if g is None or not t.requires_grad:
                continue
            if t.grad is None:
                t.grad = g
            else:
                t.grad = t.grad + g


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` must deterministically rebuild the loss from the current parameter
    values.  Only float64 parameters are accepted; single precision makes the
    difference quotient meaningless at useful ``eps``.
    """
    params = list(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 parameters")
        p.grad = None

    with Tape():
        loss = f()
        if not np.isfinite(loss.item()):
            raise NumericError(f"loss is not finite: {loss.item()}")
        backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            out = f().item()
        if not math.isfinite(out):
            raise NumericError(f"perturbed loss is not finite: {out}")
        return out

    max_rel = 0.0
    for p, a_full in zip(params, analytic):
        flat = p.data.reshape(-1)
        a_flat = a_full.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = value()
            flat[i] = orig - eps
            f_minus = value()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(a_flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
    for p in params:
        p.grad = None
    return max_rel
