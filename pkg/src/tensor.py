"""
Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a contiguous numpy array. Operations executed while a Tape is
active (``with Tape() as tape:``) and touching at least one tensor that
requires gradients are appended to the tape together with their backward
rule; ``backward(loss, tape)`` replays the tape once in reverse.
"""

from __future__ import annotations

import itertools
import math
from collections.abc import Callable, Sequence
from contextvars import ContextVar
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np

from .error_handler import ContractViolation, InvalidShapeError


class DType(str, Enum):
    F32 = "f32"
    F64 = "f64"

    @property
    def numpy(self) -> type[np.floating[Any]]:
        return np.float32 if self is DType.F32 else np.float64

    @classmethod
    def of(cls, array: np.ndarray) -> DType:
        return cls.F64 if array.dtype == np.float64 else cls.F32


_tensor_ids = itertools.count()

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Row-major numeric array that can participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "id", "_node")

    def __init__(
        self,
        data: Any,
        dtype: DType | str | None = None,
        requires_grad: bool = False,
    ) -> None:
        array = np.asarray(data)
        if dtype is None:
            resolved = DType.of(array)
        else:
            resolved = DType(dtype)
        self.data: np.ndarray = np.ascontiguousarray(array, dtype=resolved.numpy)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.id = next(_tensor_ids)
        self._node: TapeNode | None = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def dtype(self) -> DType:
        return DType.of(self.data)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data, self.dtype)

    def copy(self) -> Tensor:
        out = Tensor(self.data.copy(), self.dtype, self.requires_grad)
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.value}{flag})"

    def __deepcopy__(self, memo: dict[int, Any]) -> Tensor:
        out = self.copy()
        out.grad = None if self.grad is None else self.grad.copy()
        return out

    # -- operators -----------------------------------------------------

    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(other, self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(other, self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(other, self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __neg__(self) -> Tensor:
        return neg(self)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, key: Any) -> Tensor:
        return index(self, key)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def sum(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape: int) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], tuple | list):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)


@dataclass(frozen=True)
class TapeNode:
    """One recorded operation: inputs, output and the rule mapping dL/dout to dL/dinputs."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: BackwardRule


_active_tape: ContextVar[Tape | None] = ContextVar("_active_tape", default=None)


class Tape:
    """Append-only record of differentiable operations, in execution order."""

    def __init__(self) -> None:
        self.nodes: list[TapeNode] = []
        self._outputs: set[int] = set()
        self._token: Any = None

    def record(self, node: TapeNode) -> None:
        self.nodes.append(node)
        self._outputs.add(node.output.id)

    def __contains__(self, tensor: Tensor) -> bool:
        return tensor.id in self._outputs

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> Tape:
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        _active_tape.reset(self._token)
        self._token = None


def current_tape() -> Tape | None:
    return _active_tape.get()


def no_grad() -> _NoGrad:
    """Context manager that suspends recording for the enclosed block."""
    return _NoGrad()


class _NoGrad:
    def __enter__(self) -> None:
        self._token = _active_tape.set(None)

    def __exit__(self, exc_type: Any, exc_val: Any, exc_tb: Any) -> None:
        _active_tape.reset(self._token)


def as_tensor(value: Any, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value), dtype)


def _check_dtypes(inputs: Sequence[Tensor]) -> DType:
    dtype = inputs[0].dtype
    for t in inputs[1:]:
        if t.dtype is not dtype:
            raise ContractViolation(
                f"mixed dtypes in one graph: {dtype.value} and {t.dtype.value}"
            )
    return dtype


def make_result(
    op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardRule
) -> Tensor:
    """Wrap an op's output and record it on the active tape when a gradient is needed."""
    dtype = _check_dtypes(inputs)
    out = Tensor(data, dtype)
    tape = _active_tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = TapeNode(op, tuple(inputs), out, backward)
        out._node = node
        tape.record(node)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """
    Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf that requires it.

    Gradients add onto whatever ``.grad`` already holds; zero them between
    steps with ParameterSet.zero_grad().
    """
    tape = tape if tape is not None else current_tape()
    if loss.size != 1 or loss.ndim != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape is None or loss not in tape:
        raise ContractViolation("loss was not recorded on the given tape")

    pending: dict[int, np.ndarray] = {loss.id: np.ones((), dtype=loss.data.dtype)}
    for node in reversed(tape.nodes):
        grad_out = pending.pop(node.output.id, None)
        if grad_out is None:
            continue
        for tensor, grad_in in zip(node.inputs, node.backward(grad_out), strict=True):
            if grad_in is None or not tensor.requires_grad:
                continue
            grad_in = np.asarray(grad_in, dtype=tensor.data.dtype).reshape(tensor.shape)
            if tensor.is_leaf:
                tensor.grad = grad_in.copy() if tensor.grad is None else tensor.grad + grad_in
            elif tensor.id in pending:
                pending[tensor.id] = pending[tensor.id] + grad_in
            else:
                pending[tensor.id] = grad_in


# -- elementwise -------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary_operands(a: Any, b: Any) -> tuple[Tensor, Tensor]:
    like = a if isinstance(a, Tensor) else b
    ta, tb = as_tensor(a, like), as_tensor(b, like)
    try:
        np.broadcast_shapes(ta.shape, tb.shape)
    except ValueError as e:
        raise InvalidShapeError(str(e), ta.shape, tb.shape) from e
    return ta, tb


def add(a: Any, b: Any) -> Tensor:
    ta, tb = _binary_operands(a, b)
    return make_result(
        "add",
        ta.data + tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(g, tb.shape)),
    )


def sub(a: Any, b: Any) -> Tensor:
    ta, tb = _binary_operands(a, b)
    return make_result(
        "sub",
        ta.data - tb.data,
        (ta, tb),
        lambda g: (_unbroadcast(g, ta.shape), _unbroadcast(-g, tb.shape)),
    )


def mul(a: Any, b: Any) -> Tensor:
    ta, tb = _binary_operands(a, b)
    return make_result(
        "mul",
        ta.data * tb.data,
        (ta, tb),
        lambda g: (
            _unbroadcast(g * tb.data, ta.shape),
            _unbroadcast(g * ta.data, tb.shape),
        ),
    )


def div(a: Any, b: Any) -> Tensor:
    ta, tb = _binary_operands(a, b)
    return make_result(
        "div",
        ta.data / tb.data,
        (ta, tb),
        lambda g: (
            _unbroadcast(g / tb.data, ta.shape),
            _unbroadcast(-g * ta.data / (tb.data * tb.data), tb.shape),
        ),
    )


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    return make_result(
        "pow",
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", np.where(mask, a.data, 0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


# -- linear algebra ----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim > 2 or b.ndim > 2 or a.shape[-1] != b.shape[0]:
        raise InvalidShapeError(f"matmul {a.shape} @ {b.shape}", a.shape, b.shape)
    A, B = a.data, b.data

    def rule(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if A.ndim == 1 and B.ndim == 1:
            return g * B, g * A
        if A.ndim == 1:
            return B @ g, np.outer(A, g)
        if B.ndim == 1:
            return np.outer(g, B), A.T @ g
        return g @ B.T, A.T @ g

    return make_result("matmul", A @ B, (a, b), rule)


# -- reductions --------------------------------------------------------


def _normalize_axes(axis: int | tuple[int, ...] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else axis
    return tuple(a % ndim for a in axes)


def _ordered_sum(data: np.ndarray, axes: tuple[int, ...], keepdims: bool) -> np.ndarray:
    kept = [ax for ax in range(data.ndim) if ax not in axes]
    count = math.prod(data.shape[ax] for ax in axes)
    rows = np.transpose(data, kept + list(axes)).reshape(
        tuple(data.shape[ax] for ax in kept) + (count,)
    )
    if count == 0:
        out = np.zeros(rows.shape[:-1], dtype=data.dtype)
    else:
        # add.accumulate runs strictly in index order, unlike pairwise sum()
        out = np.cumsum(rows, axis=-1)[..., -1]
    return np.expand_dims(out, axes) if keepdims else out


def reduce_sum(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    """
    Sum over ``axis``, accumulating left to right over the reduced
    elements in row-major order, in the tensor's own dtype.
    """
    axes = tuple(sorted(set(_normalize_axes(axis, a.ndim))))
    out = _ordered_sum(a.data, axes, keepdims)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_result("sum", np.asarray(out), (a,), rule)


def reduce_mean(
    a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    """Ordered sum from ``reduce_sum`` times the reciprocal of the element count."""
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return reduce_sum(a, axis, keepdims) * (1.0 / count)


# -- structure ---------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise InvalidShapeError(str(e), a.shape) from e
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(perm))
    return make_result(
        "transpose",
        np.ascontiguousarray(a.data.transpose(perm)),
        (a,),
        lambda g: (g.transpose(inverse),),
    )


def index(a: Tensor, key: Any) -> Tensor:
    if isinstance(key, Tensor):
        key = key.data.astype(np.intp)

    def rule(g: np.ndarray) -> tuple[np.ndarray]:
        full = np.zeros(a.shape, dtype=a.data.dtype)
        np.add.at(full, key, g)
        return (full,)

    return make_result("index", np.array(a.data[key]), (a,), rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InvalidShapeError("stack of no tensors")
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise InvalidShapeError("stack needs equal shapes", *shapes)
    out = np.stack([t.data for t in tensors], axis=axis)
    count = len(tensors)
    return make_result(
        "stack",
        out,
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(count)),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise InvalidShapeError("concat of no tensors")
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise InvalidShapeError(str(e), *(t.shape for t in tensors)) from e
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return make_result(
        "concat",
        out,
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def zeros(shape: Sequence[int], dtype: DType = DType.F32) -> Tensor:
    return Tensor(np.zeros(tuple(shape), dtype=dtype.numpy), dtype)
