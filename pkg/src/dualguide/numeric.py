"""Dense float64 tensors with tape-based reverse-mode gradients.

Only the primitives the guidance loop differentiates through are provided.
A ``Tensor`` either carries no tape (a plain value) or belongs to exactly one
``GradTape``; any op touching a taped tensor records itself on that tape.

    >>> tape = GradTape()
    >>> x = tape.watch([3.0])
    >>> y = mul(x, x)
    >>> tape.gradient(y, [x])[0]
    array([6.])
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "Tensor",
    "GradTape",
    "as_array",
    "matmul",
    "transpose",
    "reshape",
    "add",
    "sub",
    "mul",
    "scale",
    "square",
    "softmax_lastdim",
    "minmax_lastdim",
    "concat",
    "take",
    "mean",
    "total",
    "backward",
    "inject_adjoint_fault",
]


class DimensionError(ValueError):
    """Raised when operand shapes are not conformable."""


class Tensor:
    """Immutable row-major float64 array, optionally tracked by a tape."""

    __slots__ = ("data", "tape", "slot")

    def __init__(self, data, *, _tape: GradTape | None = None, _slot: int = -1, _copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=_copy) if _copy else np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise FloatingPointError("tensor values must be finite (NaN/Inf rejected)")
        arr.flags.writeable = False
        self.data = arr
        self.tape = _tape
        self.slot = _slot

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __repr__(self) -> str:
        tag = "" if self.tape is None else f", slot={self.slot}"
        return f"Tensor(shape={self.shape}{tag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])


# name -> multiplicative corruption applied to the recorded adjoint (test hook)
_ADJOINT_FAULTS: dict[str, float] = {}


@contextlib.contextmanager
def inject_adjoint_fault(op_name: str, factor: float = 1.01):
    """Scale every adjoint produced by ``op_name`` while the context is active.

    Exists so the gradient-check gate can prove it detects a wrong adjoint.
    """
    _ADJOINT_FAULTS[op_name] = factor
    try:
        yield
    finally:
        _ADJOINT_FAULTS.pop(op_name, None)


class GradTape:
    """Ordered record of primitive ops, replayed in reverse by ``backward``."""

    def __init__(self):
        self._records: list[tuple[int, tuple[int, ...], Callable, str]] = []
        self.leaves: list[Tensor] = []
        self._n_slots = 0
        self.replay_order: list[int] = []

    def __len__(self) -> int:
        return len(self._records)

    def _new_slot(self) -> int:
        self._n_slots += 1
        return self._n_slots - 1

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf."""
        arr = np.array(value.data if isinstance(value, Tensor) else value, dtype=np.float64)
        leaf = Tensor(arr, _tape=self, _slot=self._new_slot(), _copy=False)
        self.leaves.append(leaf)
        return leaf

    def _record(self, name: str, out: np.ndarray, inputs: Sequence[Tensor | None], vjp: Callable) -> Tensor:
        slot = self._new_slot()
        in_slots = tuple(t.slot if t is not None and t.tape is self else -1 for t in inputs)
        fault = _ADJOINT_FAULTS.get(name)
        if fault is not None:
            clean = vjp

            def vjp(g, _clean=clean, _f=fault):
                return tuple(None if a is None else a * _f for a in _clean(g))

        self._records.append((slot, in_slots, vjp, name))
        return Tensor(out, _tape=self, _slot=slot, _copy=False)

    def gradient(self, output: Tensor, leaves: Sequence[Tensor], seed=None) -> list[np.ndarray]:
        """Return d(output . seed)/d(leaf) for each requested leaf."""
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if seed is None:
            if output.size != 1:
                raise DimensionError("a seed is required for non-scalar outputs")
            seed_arr = np.ones(output.shape)
        else:
            seed_arr = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
            if seed_arr.shape != output.shape:
                raise DimensionError(f"seed shape {seed_arr.shape} != output shape {output.shape}")

        grads: dict[int, np.ndarray] = {output.slot: seed_arr}
        self.replay_order = []
        for idx in range(len(self._records) - 1, -1, -1):
            slot, in_slots, vjp, _ = self._records[idx]
            g = grads.pop(slot, None)
            if g is None:
                continue
            self.replay_order.append(idx)
            for in_slot, in_grad in zip(in_slots, vjp(g)):
                if in_slot < 0 or in_grad is None:
                    continue
                if in_slot in grads:
                    grads[in_slot] = grads[in_slot] + in_grad
                else:
                    grads[in_slot] = in_grad

        out = []
        for leaf in leaves:
            if leaf.tape is not self:
                raise ValueError("leaf was not watched by this tape")
            g = grads.get(leaf.slot)
            out.append(np.zeros(leaf.shape) if g is None else np.array(g, dtype=np.float64))
        return out


def backward(tape: GradTape, output: Tensor, seed=None) -> list[np.ndarray]:
    """Gradients of ``output`` for every leaf watched by ``tape``, in watch order.

    Leaves the output does not depend on receive exact zeros.
    """
    return tape.gradient(output, tape.leaves, seed)


def as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _tape_of(*xs) -> GradTape | None:
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands belong to different tapes")
            tape = x.tape
    return tape


def _finish(name: str, out: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        return Tensor(out, _copy=False)
    tracked = [x if isinstance(x, Tensor) else None for x in inputs]
    return tape._record(name, out, tracked, vjp)


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and x.tape is not None


# --------------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    """(..., m, k) @ (..., k, n) with identical leading batch dimensions."""
    A, B = as_array(a), as_array(b)
    if A.ndim < 2 or B.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {A.shape} and {B.shape}")
    if A.shape[-1] != B.shape[-2]:
        raise DimensionError(f"inner dimensions differ: {A.shape} @ {B.shape}")
    if A.shape[:-2] != B.shape[:-2]:
        raise DimensionError(f"leading dimensions differ: {A.shape} @ {B.shape}")
    out = A @ B

    def vjp(g):
        ga = g @ np.swapaxes(B, -1, -2) if _tracked(a) else None
        gb = np.swapaxes(A, -1, -2) @ g if _tracked(b) else None
        return ga, gb

    return _finish("matmul", out, (a, b), vjp)


def transpose(a, axes: Sequence[int]) -> Tensor:
    A = as_array(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _finish("transpose", np.transpose(A, axes).copy(), (a,), lambda g: (np.transpose(g, inv),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    A = as_array(a)
    shape = tuple(shape)
    if math.prod(shape) != A.size:
        raise DimensionError(f"cannot reshape {A.shape} into {shape}")
    old = A.shape
    return _finish("reshape", A.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),))


def _same_shape(name, A, B):
    if A.shape != B.shape:
        raise DimensionError(f"{name}: shapes differ {A.shape} vs {B.shape}")


def add(a, b) -> Tensor:
    A, B = as_array(a), as_array(b)
    _same_shape("add", A, B)
    return _finish("add", A + B, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    A, B = as_array(a), as_array(b)
    _same_shape("sub", A, B)
    return _finish("sub", A - B, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    A, B = as_array(a), as_array(b)
    _same_shape("mul", A, B)
    return _finish("mul", A * B, (a, b), lambda g: (g * B, g * A))


def scale(a, k: float) -> Tensor:
    k = float(k)
    return _finish("scale", as_array(a) * k, (a,), lambda g: (g * k,))


def square(a) -> Tensor:
    A = as_array(a)
    return _finish("square", A * A, (a,), lambda g: (2.0 * A * g,))


def softmax_lastdim(x) -> Tensor:
    X = as_array(x)
    if X.ndim == 0 or X.shape[-1] < 1:
        raise DimensionError("softmax needs a non-empty last dimension")
    e = np.exp(X - X.max(axis=-1, keepdims=True))
    Y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (Y * (g - (g * Y).sum(axis=-1, keepdims=True)),)

    return _finish("softmax_lastdim", Y, (x,), vjp)


def minmax_lastdim(x, eps: float = 1e-12) -> Tensor:
    """Rescale each last-axis row to [0, 1]; rows with range < eps become zeros."""
    X = as_array(x)
    lo = X.min(axis=-1, keepdims=True)
    hi = X.max(axis=-1, keepdims=True)
    rng = hi - lo
    flat = rng < eps
    safe = np.where(flat, 1.0, rng)
    Y = np.where(flat, 0.0, (X - lo) / safe)

    def vjp(g):
        g = np.where(flat, 0.0, g)
        gx = g / safe
        d_lo = (g * (Y - 1.0)).sum(axis=-1, keepdims=True) / safe
        d_hi = -(g * Y).sum(axis=-1, keepdims=True) / safe
        # the row min/max receive the adjoint of the affine rescale
        np.put_along_axis(gx, X.argmin(axis=-1)[..., None],
                          np.take_along_axis(gx, X.argmin(axis=-1)[..., None], -1) + d_lo, -1)
        np.put_along_axis(gx, X.argmax(axis=-1)[..., None],
                          np.take_along_axis(gx, X.argmax(axis=-1)[..., None], -1) + d_hi, -1)
        return (gx,)

    return _finish("minmax_lastdim", Y, (x,), vjp)


def concat(xs: Sequence, axis: int) -> Tensor:
    arrs = [as_array(x) for x in xs]
    if not arrs:
        raise DimensionError("concat of nothing")
    nd = arrs[0].ndim
    ax = axis % nd
    for A in arrs[1:]:
        if A.ndim != nd or A.shape[:ax] + A.shape[ax + 1 :] != arrs[0].shape[:ax] + arrs[0].shape[ax + 1 :]:
            raise DimensionError(f"concat: incompatible shapes {[x.shape for x in arrs]}")
    out = np.concatenate(arrs, axis=ax)
    bounds = np.cumsum([A.shape[ax] for A in arrs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _finish("concat", out, tuple(xs), vjp)


def take(a, indices: Sequence[int], axis: int) -> Tensor:
    """Gather positions ``indices`` along ``axis`` (repeats allowed)."""
    A = as_array(a)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % A.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= A.shape[ax]):
        raise IndexError(f"take: indices {idx.tolist()} out of range for axis length {A.shape[ax]}")
    out = np.take(A, idx, axis=ax)

    def vjp(g):
        full = np.zeros(A.shape)
        moved = np.moveaxis(full, ax, 0)
        np.add.at(moved, idx, np.moveaxis(g, ax, 0))
        return (full,)

    return _finish("take", out, (a,), vjp)


def mean(a) -> Tensor:
    A = as_array(a)
    n = A.size
    return _finish("mean", np.array(A.sum() / n), (a,), lambda g: (np.full(A.shape, float(g) / n),))


def total(a) -> Tensor:
    A = as_array(a)
    return _finish("total", np.array(A.sum()), (a,), lambda g: (np.full(A.shape, float(g)),))


def sum_all(xs: Iterable) -> Tensor:
    """Sum of equally-shaped tensors (a fold of ``add``)."""
    xs = list(xs)
    acc = xs[0]
    for x in xs[1:]:
        acc = add(acc, x)
    return acc
