# utils/autodiff.py
"""
Reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D matrix. Scalars are 1x1, vectors are 1xC rows.
Two broadcast forms are supported and nothing else:
  - scalar (1x1) against any matrix
  - row vector (1xC) against an RxC matrix

A result only keeps parent references when at least one operand requires a
gradient, so inference paths build no graph at all.
"""
from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import ContractError, DimensionError, DomainError

GUARD = 1e-12

Backward = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]
Operand = Union["Tensor", float, int, np.ndarray, Sequence[float]]


def _as_matrix(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dims, got shape {arr.shape}")
    return arr


def _broadcast_shape(a: Tuple[int, int], b: Tuple[int, int]) -> Tuple[int, int]:
    if a == b:
        return a
    if a == (1, 1):
        return b
    if b == (1, 1):
        return a
    if a[0] == 1 and a[1] == b[1]:
        return b
    if b[0] == 1 and b[1] == a[1]:
        return a
    raise DimensionError(f"cannot broadcast {a} with {b}")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape == (1, 1):
        return grad.sum().reshape(1, 1)
    if shape[0] == 1:
        return grad.sum(axis=0, keepdims=True)
    raise DimensionError(f"cannot reduce gradient {grad.shape} to {shape}")


def _lift(x: Operand) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    __slots__ = ("values", "requires_grad", "grad", "op", "_parents", "_backward", "_spent")

    def __init__(self, values, requires_grad: bool = False):
        self.values = _as_matrix(values)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: Tuple[Tensor, ...] = ()
        self._backward: Optional[Backward] = None
        self._spent = False

    @classmethod
    def _result(cls, values: np.ndarray, parents: Sequence["Tensor"], backward: Backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.values = values
        out.grad = None
        out.op = op
        out._spent = False
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # ----------------------------------------------------------
    # Introspection
    # ----------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ContractError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.values[0, 0])

    def numpy(self) -> np.ndarray:
        return self.values.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # ----------------------------------------------------------
    # Operators
    # ----------------------------------------------------------
    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: Operand) -> "Tensor":
        return div(self, other)

    def __rtruediv__(self, other: Operand) -> "Tensor":
        return div(other, self)

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: Operand) -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def log(self, guard: bool = True) -> "Tensor":
        return log(self, guard=guard)

    def relu(self) -> "Tensor":
        return relu(self)

    def softplus(self) -> "Tensor":
        return softplus(self)

    def sigmoid(self) -> "Tensor":
        return sigmoid(self)

    def tanh(self) -> "Tensor":
        return tanh(self)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def clamp(self, low: float, high: float) -> "Tensor":
        return clamp(self, low, high)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_sum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return reduce_mean(self, axis)

    def take_rows(self, indices: Sequence[int]) -> "Tensor":
        return take_rows(self, indices)

    def slice_cols(self, start: int, stop: int) -> "Tensor":
        return take_cols(self, start, stop)


# ----------------------------------------------------------
# Binary elementwise ops
# ----------------------------------------------------------
def add(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.values + b.values, (a, b), backward, "add")


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.values - b.values, (a, b), backward, "sub")


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g * b.values, a.shape), _unbroadcast(g * a.values, b.shape)

    return Tensor._result(a.values * b.values, (a, b), backward, "mul")


def _safe_denominator(values: np.ndarray) -> np.ndarray:
    sign = np.where(values < 0, -1.0, 1.0)
    return np.where(np.abs(values) < GUARD, sign * GUARD, values)


def div(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a.shape, b.shape)
    denom = _safe_denominator(b.values)
    out = a.values / denom

    def backward(g):
        return (
            _unbroadcast(g / denom, a.shape),
            _unbroadcast(-g * out / denom, b.shape),
        )

    return Tensor._result(out, (a, b), backward, "div")


def matmul(a: Operand, b: Operand) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        return g @ b.values.T, a.values.T @ g

    return Tensor._result(a.values @ b.values, (a, b), backward, "matmul")


# ----------------------------------------------------------
# Unary elementwise ops
# ----------------------------------------------------------
def exp(x: Operand) -> Tensor:
    x = _lift(x)
    out = np.exp(x.values)

    def backward(g):
        return (g * out,)

    return Tensor._result(out, (x,), backward, "exp")


def log(x: Operand, guard: bool = True) -> Tensor:
    x = _lift(x)
    if not guard and np.any(x.values <= 0):
        raise DomainError("log of a non-positive value")
    safe = np.maximum(x.values, GUARD)

    def backward(g):
        return (np.where(x.values > GUARD, g / safe, 0.0),)

    return Tensor._result(np.log(safe), (x,), backward, "log")


def sqrt(x: Operand) -> Tensor:
    x = _lift(x)
    out = np.sqrt(np.maximum(x.values, 0.0))

    # derivative is unbounded at 0; zero it below GUARD
    def backward(g):
        return (np.where(x.values > GUARD, g * 0.5 / np.maximum(out, GUARD), 0.0),)

    return Tensor._result(out, (x,), backward, "sqrt")


def relu(x: Operand) -> Tensor:
    x = _lift(x)
    mask = x.values > 0

    def backward(g):
        return (g * mask,)

    return Tensor._result(np.where(mask, x.values, 0.0), (x,), backward, "relu")


def _sigmoid(values: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -values))


def softplus(x: Operand) -> Tensor:
    x = _lift(x)

    def backward(g):
        return (g * _sigmoid(x.values),)

    return Tensor._result(np.logaddexp(0.0, x.values), (x,), backward, "softplus")


def sigmoid(x: Operand) -> Tensor:
    x = _lift(x)
    out = _sigmoid(x.values)

    def backward(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), backward, "sigmoid")


def tanh(x: Operand) -> Tensor:
    x = _lift(x)
    out = np.tanh(x.values)

    def backward(g):
        return (g * (1.0 - out * out),)

    return Tensor._result(out, (x,), backward, "tanh")


def clamp(x: Operand, low: float, high: float) -> Tensor:
    x = _lift(x)
    inside = (x.values >= low) & (x.values <= high)

    def backward(g):
        return (g * inside,)

    return Tensor._result(np.clip(x.values, low, high), (x,), backward, "clamp")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "exp": exp,
    "log": log,
    "relu": relu,
    "softplus": softplus,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def elementwise(op: str, *operands: Operand) -> Tensor:
    """Dispatch by name: elementwise("relu", x), elementwise("add", a, b)."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}; choose one of {sorted(_ELEMENTWISE)}")
    return fn(*operands)


# ----------------------------------------------------------
# Shape ops and reductions
# ----------------------------------------------------------
def transpose(x: Operand) -> Tensor:
    x = _lift(x)

    def backward(g):
        return (g.T,)

    return Tensor._result(x.values.T.copy(), (x,), backward, "transpose")


def reduce_sum(x: Operand, axis: Optional[int] = None) -> Tensor:
    x = _lift(x)
    if axis is None:
        out = x.values.sum().reshape(1, 1)
    else:
        out = x.values.sum(axis=axis, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(out, (x,), backward, "sum")


def reduce_mean(x: Operand, axis: Optional[int] = None) -> Tensor:
    x = _lift(x)
    count = x.values.size if axis is None else x.shape[axis]
    if count == 0:
        raise ContractError("mean over an empty tensor")
    return reduce_sum(x, axis) * (1.0 / count)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_lift(t) for t in tensors]
    if not parts:
        raise ContractError("concat of an empty list")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"concat along axis {axis}: mismatched shapes {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1], :] for i in range(len(parts)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    out = np.concatenate([p.values for p in parts], axis=axis)
    return Tensor._result(out, parts, backward, "concat")


def take_rows(x: Operand, indices: Sequence[int]) -> Tensor:
    x = _lift(x)
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(x.values)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._result(x.values[idx, :], (x,), backward, "take_rows")


def take_cols(x: Operand, start: int, stop: int) -> Tensor:
    x = _lift(x)
    if not (0 <= start < stop <= x.cols):
        raise DimensionError(f"column slice [{start}:{stop}] outside {x.shape}")

    def backward(g):
        full = np.zeros_like(x.values)
        full[:, start:stop] = g
        return (full,)

    return Tensor._result(x.values[:, start:stop].copy(), (x,), backward, "take_cols")


# ----------------------------------------------------------
# Tape and backward pass
# ----------------------------------------------------------
class Tape:
    """Nodes reachable from a root, parents always before children."""

    def __init__(self, nodes: List[Tensor]):
        self.nodes = nodes

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
        order: List[Tensor] = []
        seen = set()
        stack: List[Tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, root: Tensor) -> None:
        root.grad = np.ones_like(root.values)
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g.copy() if parent.grad is None else parent.grad + g
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._spent = True


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from a 1x1 loss."""
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) loss, got {loss.shape}")
    if loss._spent:
        raise ContractError("backward already ran on this graph; run a new forward pass")
    if not loss.requires_grad:
        loss._spent = True
        return
    Tape.record(loss).backward(loss)
