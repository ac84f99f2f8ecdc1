"""Tape-based reverse-mode automatic differentiation over dense numpy arrays.

A single implicit tape records every operation whose inputs require
gradients.  ``backward(loss)`` replays the tape once in reverse, accumulates
cotangents into ``Tensor.grad``, and clears the tape; a second ``backward``
without new recorded work is an error.  Kernels are plain numpy, so results
are deterministic for a fixed thread count.

Custom operations with hand-derived backward rules (the rasterizer needs
several) plug in through :func:`register_custom_op` and behave exactly like
the built-ins during replay.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_FLOAT_DTYPES = (np.float32, np.float64)


class AutodiffError(ValueError):
    """Raised for shape mismatches, bad backward rules, or tape misuse."""


class Tensor:
    """Dense multi-dimensional value, optionally tracked for gradients."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below do the real work.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return subtract(self, _as_tensor(other))

    def __rsub__(self, other):
        return subtract(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def const(x, dtype=None) -> Tensor:
    """Wrap a value as a non-trainable tensor."""
    return Tensor(x, requires_grad=False, dtype=dtype)


class _Entry:
    """One recorded operation: inputs, outputs, and its backward rule."""

    __slots__ = ("name", "inputs", "outputs", "backward", "checked")

    def __init__(self, name, inputs, outputs, backward):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward
        self.checked = False


class Tape:
    """Ordered operation record; inputs of every entry precede it."""

    def __init__(self):
        self.entries: list[_Entry] = []
        self.enabled = True

    def clear(self):
        self.entries.clear()

    def __len__(self):
        return len(self.entries)


_tape = Tape()


def get_tape() -> Tape:
    return _tape


@contextlib.contextmanager
def no_grad():
    """Suspend tape recording (evaluation-only regions, FD probes)."""
    prev = _tape.enabled
    _tape.enabled = False
    try:
        yield
    finally:
        _tape.enabled = prev


def _record(name: str, inputs: Sequence[Tensor], out_data, backward) -> Tensor | tuple:
    multi = isinstance(out_data, (tuple, list))
    arrays = tuple(out_data) if multi else (out_data,)
    outputs = tuple(Tensor(a) for a in arrays)
    if _tape.enabled and any(t.requires_grad for t in inputs):
        for o in outputs:
            o.requires_grad = True
        _tape.entries.append(_Entry(name, tuple(inputs), outputs, backward))
    return outputs if multi else outputs[0]


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    The loss must be scalar-shaped.  The tape is consumed: it is cleared on
    return and a repeated call without new recorded operations raises.
    """
    if loss.size != 1:
        raise AutodiffError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not _tape.entries:
        raise AutodiffError("backward: tape is empty (already consumed or nothing recorded)")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    try:
        for entry in reversed(_tape.entries):
            out_grads = []
            seen = False
            for o in entry.outputs:
                g = grads.get(id(o))
                if g is None:
                    g = np.zeros_like(o.data)
                else:
                    seen = True
                out_grads.append(g)
            if not seen:
                continue
            in_grads = entry.backward(*out_grads)
            if not isinstance(in_grads, (tuple, list)):
                in_grads = (in_grads,)
            if len(in_grads) != len(entry.inputs):
                raise AutodiffError(
                    f"{entry.name}: backward returned {len(in_grads)} gradients "
                    f"for {len(entry.inputs)} inputs"
                )
            for t, g in zip(entry.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if not entry.checked and g.shape != t.data.shape:
                    raise AutodiffError(
                        f"{entry.name}: backward produced gradient of shape {g.shape} "
                        f"for input of shape {t.data.shape}"
                    )
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
            entry.checked = True
        for entry in _tape.entries:
            for t in entry.inputs + entry.outputs:
                if t.requires_grad and id(t) in grads:
                    g = grads[id(t)]
                    t.grad = g if t.grad is None else t.grad + g
                    del grads[id(t)]
    finally:
        _tape.clear()


# ---------------------------------------------------------------------------
# primitive operations
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise AutodiffError(
            f"{name}: shapes {a.data.shape} and {b.data.shape} are not compatible"
        ) from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _record("add", (a, b), out, bwd)


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("subtract", a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _record("subtract", (a, b), out, bwd)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("multiply", a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record("multiply", (a, b), out, bwd)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    out = a.data * s

    def bwd(g):
        return (g * s,)

    return _record("scale", (a,), out, bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise AutodiffError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return g @ bd.T, ad.T @ g

    return _record("matmul", (a, b), out, bwd)


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _record("relu", (a,), out, bwd)


def sigmoid(a: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (a,), out, bwd)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)

    def bwd(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (a,), out, bwd)


def square(a: Tensor) -> Tensor:
    out = a.data * a.data
    ad = a.data

    def bwd(g):
        return (2.0 * g * ad,)

    return _record("square", (a,), out, bwd)


def absolute(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bwd(g):
        return (g * sign,)

    return _record("absolute", (a,), out, bwd)


def min_zero(a: Tensor) -> Tensor:
    """Elementwise min(0, x)."""
    out = np.minimum(a.data, 0.0)
    mask = a.data < 0

    def bwd(g):
        return (g * mask,)

    return _record("min_zero", (a,), out, bwd)


def tsum(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(), dtype=a.dtype)
    shape = a.data.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).astype(a.dtype, copy=True),)

    return _record("sum", (a,), out, bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    out = np.asarray(a.data.sum() / n, dtype=a.dtype)
    shape = a.data.shape

    def bwd(g):
        return (np.broadcast_to(g / n, shape).astype(a.dtype, copy=True),)

    return _record("mean", (a,), out, bwd)


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Dot product over the last axis: (..., K) x (..., K) -> (...,)."""
    if a.shape != b.shape:
        raise AutodiffError(f"dot: shapes {a.shape} and {b.shape} differ")
    out = np.einsum("...k,...k->...", a.data, b.data)
    ad, bd = a.data, b.data

    def bwd(g):
        ge = g[..., None]
        return ge * bd, ge * ad

    return _record("dot", (a, b), out, bwd)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = list(parts)
    if not parts:
        raise AutodiffError("concat: need at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(parts), out, bwd)


def gather(a: Tensor, index, axis: int = 0) -> Tensor:
    """Index-select rows (axis 0) or columns (last axis)."""
    idx = np.asarray(index, dtype=np.int64)
    n = a.data.shape[axis]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise AutodiffError(
            f"gather: index out of range for axis {axis} of length {n}"
        )
    out = np.take(a.data, idx, axis=axis)
    shape = a.data.shape
    dtype = a.dtype

    def bwd(g):
        ga = np.zeros(shape, dtype=dtype)
        if axis in (0,):
            np.add.at(ga, idx, g)
        elif axis in (-1, a.data.ndim - 1):
            np.add.at(ga.swapaxes(0, -1), idx, g.swapaxes(0, -1))
        else:
            raise AutodiffError("gather: only axis 0 or -1 supported")
        return (ga,)

    return _record("gather", (a,), out, bwd)


def scatter_add(values: Tensor, index, size: int) -> Tensor:
    """Sum rows of ``values`` into a fresh (size, ...) array at ``index``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != values.data.shape[0]:
        raise AutodiffError(
            f"scatter_add: {idx.shape[0]} indices for {values.data.shape[0]} rows"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise AutodiffError(f"scatter_add: index out of range for size {size}")
    out = np.zeros((size,) + values.data.shape[1:], dtype=values.dtype)
    np.add.at(out, idx, values.data)

    def bwd(g):
        return (np.take(g, idx, axis=0),)

    return _record("scatter_add", (values,), out, bwd)


def sum_groups(a: Tensor, group: int) -> Tensor:
    """Sum consecutive groups of ``group`` rows: (N*group, C) -> (N, C)."""
    n = a.data.shape[0]
    if n % group:
        raise AutodiffError(f"sum_groups: {n} rows not divisible by {group}")
    out = a.data.reshape((n // group, group) + a.data.shape[1:]).sum(axis=1)

    def bwd(g):
        return (np.repeat(g, group, axis=0),)

    return _record("sum_groups", (a,), out, bwd)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise AutodiffError(f"reshape: cannot view {a.shape} as {shape}") from None
    in_shape = a.data.shape

    def bwd(g):
        return (g.reshape(in_shape),)

    return _record("reshape", (a,), out, bwd)


def overlay(base: Tensor, values: Tensor, index) -> Tensor:
    """Copy of ``base`` with rows at ``index`` replaced by ``values``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != values.data.shape[0]:
        raise AutodiffError(
            f"overlay: {idx.shape[0]} indices for {values.data.shape[0]} rows"
        )
    if values.data.shape[1:] != base.data.shape[1:]:
        raise AutodiffError(
            f"overlay: row shapes differ: {values.data.shape[1:]} vs {base.data.shape[1:]}"
        )
    if idx.size and (idx.min() < 0 or idx.max() >= base.data.shape[0]):
        raise AutodiffError("overlay: index out of range")
    out = base.data.copy()
    out[idx] = values.data

    def bwd(g):
        gb = g.copy()
        gb[idx] = 0.0
        return gb, g[idx].copy()

    return _record("overlay", (base, values), out, bwd)


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalize over the last axis to unit Euclidean length."""
    norm = np.sqrt(np.sum(a.data * a.data, axis=-1, keepdims=True))
    denom = np.maximum(norm, eps)
    out = a.data / denom

    def bwd(g):
        dot_gy = np.sum(g * out, axis=-1, keepdims=True)
        return ((g - out * dot_gy) / denom,)

    return _record("l2_normalize", (a,), out, bwd)


def clamp01(a: Tensor) -> Tensor:
    """Clamp to [0, 1], composed from relu so the tape handles it."""
    low = relu(a)
    return subtract(const(np.asarray(1.0, dtype=a.dtype)), relu(subtract(const(np.asarray(1.0, dtype=a.dtype)), low)))


def cross3(a: Tensor, b: Tensor) -> Tensor:
    """Cross product of (..., 3) rows, composed from gathers and products."""
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise AutodiffError("cross3: last axis must be 3")
    a1, a2, a0 = (gather(a, [i], axis=-1) for i in (1, 2, 0))
    b1, b2, b0 = (gather(b, [i], axis=-1) for i in (1, 2, 0))
    c0 = subtract(multiply(a1, b2), multiply(a2, b1))
    c1 = subtract(multiply(a2, b0), multiply(a0, b2))
    c2 = subtract(multiply(a0, b1), multiply(a1, b0))
    return concat([c0, c1, c2], axis=-1)


def register_custom_op(forward: Callable, backward: Callable, name: str = "custom"):
    """Create a tape-aware operation from a forward/backward pair.

    ``forward(*arrays, **consts)`` returns ``(output_array_or_tuple, ctx)``;
    ``backward(ctx, *output_cotangents)`` returns one cotangent array (or
    ``None``) per tensor input.  Shape consistency of the backward rule is
    validated on its first use.
    """

    def handle(*tensors: Tensor, **consts):
        arrays = [t.data for t in tensors]
        out, ctx = forward(*arrays, **consts)

        def bwd(*out_grads):
            return backward(ctx, *out_grads)

        return _record(name, tensors, out, bwd)

    handle.op_name = name
    return handle


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class AdamState:
    """First/second-moment buffers and the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step = 0
        self.m: list[np.ndarray] = []
        self.v: list[np.ndarray] = []

    def _ensure(self, params: Sequence[Tensor]):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise AutodiffError(
                f"adam_step: state tracks {len(self.m)} parameters, got {len(params)}"
            )
        for buf, p in zip(self.m, params):
            if buf.shape != p.data.shape:
                raise AutodiffError(
                    f"adam_step: state shape {buf.shape} does not match parameter {p.data.shape}"
                )


def adam_step(params: Sequence[Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; gradients are zeroed afterwards."""
    params = list(params)
    for p in params:
        if p.grad is None:
            raise AutodiffError("adam_step: parameter has no gradient")
    state._ensure(params)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / c1
        vhat = v / c2
        p.data -= (lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype, copy=False)
        p.grad = None
