"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`GradTape` records every primitive applied to a tensor that requires
gradients.  Replaying the record backwards yields vector-Jacobian products for
the leaves.  Arithmetic is carried out by numpy, except for :func:`matmul`,
which accumulates the inner dimension in a fixed sequential order so results
do not depend on the BLAS build or its thread count.

Example::

    x = Tensor([3.0], requires_grad=True)
    with GradTape() as tape:
        loss = sum(x * x)
    (gx,) = tape.gradient(loss, [x])   # array([6.])
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an API precondition is violated."""


class Tensor:
    """Immutable float64 array node.

    ``requires_grad`` marks a leaf whose gradient is wanted; outputs of
    recorded operations inherit the flag.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_ACTIVE_TAPES: list["GradTape"] = []


class _Record:
    __slots__ = ("name", "output", "inputs", "vjp")

    def __init__(self, name: str, output: Tensor, inputs: tuple[Tensor, ...], vjp: VJP):
        self.name = name
        self.output = output
        self.inputs = inputs
        self.vjp = vjp


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager.  Operations are appended in execution order,
    which is a topological order of the computation graph, so the reverse
    replay visits each record once after all of its consumers.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._index: dict[int, int] = {}

    def __enter__(self) -> "GradTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self._records)

    @property
    def op_names(self) -> list[str]:
        return [r.name for r in self._records]

    def _record(self, name: str, output: Tensor, inputs: tuple[Tensor, ...], vjp: VJP) -> None:
        self._index[id(output)] = len(self._records)
        self._records.append(_Record(name, output, inputs, vjp))

    def gradient(self, loss: Tensor, sources: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of scalar ``loss`` with respect to each tensor in ``sources``.

        Sources that the loss does not depend on get a zero array.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
        if id(loss) not in self._index:
            raise ContractError("loss was not produced on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records[: self._index[id(loss)] + 1]):
            g_out = grads.pop(id(rec.output), None)
            if g_out is None:
                continue
            for inp, g_in in zip(rec.inputs, rec.vjp(g_out)):
                if g_in is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g_in
                else:
                    grads[key] = g_in
        return [np.array(grads.get(id(s), np.zeros_like(s.data))) for s in sources]


def backward(tape: GradTape, loss: Tensor, params: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional alias of :meth:`GradTape.gradient`."""
    return tape.gradient(loss, params)


def apply_op(name: str, out_data: np.ndarray, inputs: Iterable[Tensor], vjp: VJP) -> Tensor:
    """Wrap ``out_data`` as the output of a primitive and record it on active tapes.

    ``vjp`` maps the output cotangent to one cotangent (or ``None``) per input.
    This is the extension point for primitives defined outside this module.
    """
    inputs = tuple(inputs)
    needs_grad = any(t.requires_grad for t in inputs) and bool(_ACTIVE_TAPES)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        for tape in _ACTIVE_TAPES:
            tape._record(name, out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        "add", a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        "sub", a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        "mul", a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return apply_op(
        "div", out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return apply_op("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    """Square root; the derivative at exactly zero is taken as zero."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, 0.5 * g / safe, 0.0),)

    return apply_op("sqrt", out, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return apply_op("clip", np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant mask ``cond`` is true, else from ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)
    return apply_op(
        "where", np.where(cond, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                   _unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )


# ---------------------------------------------------------------------------
# Reductions and normalizers
# ---------------------------------------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return apply_op("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return sum(a, axis=axis, keepdims=keepdims) / float(count)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op("softmax", out, (x,), vjp)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    prob = np.exp(out)

    def vjp(g):
        return (g - prob * g.sum(axis=axis, keepdims=True),)

    return apply_op("log_softmax", out, (x,), vjp)


# ---------------------------------------------------------------------------
# Linear algebra and shape manipulation
# ---------------------------------------------------------------------------

def _matmul_data(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Sequential accumulation over k: no FMA, no blocking, same bits as a naive loop.
    k_dim = a.shape[-1]
    out_shape = np.broadcast_shapes(a.shape[:-2], b.shape[:-2]) + (a.shape[-2], b.shape[-1])
    out = np.zeros(out_shape)
    for k in range(k_dim):
        out = out + a[..., :, k:k + 1] * b[..., k:k + 1, :]
    return out


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with leading batch axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not broadcast") from None

    def vjp(g):
        ga = _matmul_data(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = _matmul_data(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, a.shape),
            None if gb is None else _unbroadcast(gb, b.shape),
        )

    return apply_op("matmul", _matmul_data(a.data, b.data), (a, b), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return apply_op("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply_op("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def pad(a, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad ``a`` along one axis."""
    a = as_tensor(a)
    axis = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[axis] = (before, after)
    n = a.shape[axis]

    def vjp(g):
        return (np.take(g, np.arange(before, before + n), axis=axis),)

    return apply_op("pad", np.pad(a.data, widths), (a,), vjp)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    axis = axis % a.ndim
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(a.shape)
        full[idx] = g
        return (full,)

    return apply_op("slice", a.data[idx], (a,), vjp)


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return [np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(parts))]

    return apply_op("concat", np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


# ---------------------------------------------------------------------------
# Oracle
# ---------------------------------------------------------------------------

def finite_difference_gradient(f: Callable[[np.ndarray], float], x, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` receives an array shaped like ``x``.  An object array of
    extended-precision numbers (e.g. ``mpmath.mpf``) is perturbed and
    differenced in that type; the result is always float64.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    if isinstance(x, Tensor):
        x = x.data
    x = np.array(x, dtype=object if np.asarray(x).dtype == object else np.float64)
    grad = np.zeros(x.shape)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(x.copy())
        flat[i] = orig - eps
        f_minus = f(x.copy())
        flat[i] = orig
        gflat[i] = float((f_plus - f_minus) / (2 * eps))
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
