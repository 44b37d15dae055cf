"""
Dense float tensors with define-by-run reverse-mode differentiation.

Every operation on a Tensor that requires a gradient appends a record to the
computation graph. Records are numbered in creation order, which is always a
valid topological order, so backward() simply walks them in reverse.

Broadcasting is limited to scalar-vs-tensor and equal shapes; model code
expands explicitly with Tensor.expand().
"""
from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

DEFAULT_DTYPE = np.float32

_sequence = itertools.count()
_grad_state = threading.local()

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""
    pass


def is_grad_enabled() -> bool:
    return getattr(_grad_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording graph nodes (per thread)."""
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


@dataclass
class Node:
    seq: int
    op: str
    inputs: tuple
    output_id: int
    backward: Callable[[np.ndarray], tuple]


class Graph:
    """Operation records reachable from an output, in creation order."""

    def __init__(self, records: list[Node]) -> None:
        self.records = records

    @classmethod
    def trace(cls, output: "Tensor") -> "Graph":
        if output.node is None:
            return cls([])
        seen: dict[int, Node] = {}
        stack = [output.node]
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            seen[node.seq] = node
            for tensor in node.inputs:
                if tensor.node is not None and tensor.node.seq not in seen:
                    stack.append(tensor.node)
        return cls([seen[seq] for seq in sorted(seen)])

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[Node]:
        return iter(self.records)


class Tensor:
    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=None) -> None:
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(data, dtype=dtype or DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    # ------------------------------------------------------------------
    # construction helpers
    # ------------------------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, op: str, inputs: tuple, backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.asarray(data)
        out.grad = None
        out.node = None
        tracked = is_grad_enabled() and any(t.requires_grad for t in inputs)
        out.requires_grad = tracked
        if tracked:
            out.node = Node(next(_sequence), op, inputs, id(out), backward)
        return out

    def _coerce(self, other: ArrayLike) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype), dtype=self.data.dtype)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # ------------------------------------------------------------------
    # backward pass
    # ------------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if grad is None:
            if self.size != 1:
                raise ShapeError(
                    f"backward() without an explicit gradient needs a single-element output, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"gradient shape {grad.shape} does not match output shape {self.shape}")

        if self.node is None:
            if self.requires_grad:
                self._accumulate(grad)
            return

        grads: dict[int, np.ndarray] = {id(self): grad}
        for record in reversed(Graph.trace(self).records):
            upstream = grads.pop(record.output_id, None)
            if upstream is None:
                continue
            local = record.backward(upstream)
            for tensor, g in zip(record.inputs, local):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor.node is None:
                    tensor._accumulate(g)
                elif id(tensor) in grads:
                    grads[id(tensor)] = grads[id(tensor)] + g
                else:
                    grads[id(tensor)] = g

    def _accumulate(self, grad: np.ndarray) -> None:
        grad = np.asarray(grad, dtype=self.data.dtype).reshape(self.shape)
        if self.grad is None:
            self.grad = grad.copy()
        else:
            self.grad = self.grad + grad

    # ------------------------------------------------------------------
    # elementwise arithmetic
    # ------------------------------------------------------------------
    def _binary(self, other: ArrayLike, op: str, forward, grad_a, grad_b) -> "Tensor":
        other = self._coerce(other)
        a, b = self, other
        if a.shape == b.shape:
            av, bv = a.data, b.data
        elif b.size == 1 and b.ndim <= a.ndim:
            av, bv = a.data, b.data.reshape(())
        elif a.size == 1 and a.ndim <= b.ndim:
            av, bv = a.data.reshape(()), b.data
        else:
            raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")
        out = forward(av, bv)

        def backward(g: np.ndarray) -> tuple:
            ga = grad_a(g, av, bv, out)
            gb = grad_b(g, av, bv, out)
            return _reduce_to(ga, a.shape), _reduce_to(gb, b.shape)

        return Tensor._result(out, op, (a, b), backward)

    def __add__(self, other: ArrayLike) -> "Tensor":
        return self._binary(
            other, "add", np.add,
            lambda g, a, b, o: g,
            lambda g, a, b, o: g,
        )

    def __sub__(self, other: ArrayLike) -> "Tensor":
        return self._binary(
            other, "sub", np.subtract,
            lambda g, a, b, o: g,
            lambda g, a, b, o: -g,
        )

    def __mul__(self, other: ArrayLike) -> "Tensor":
        return self._binary(
            other, "mul", np.multiply,
            lambda g, a, b, o: g * b,
            lambda g, a, b, o: g * a,
        )

    def __truediv__(self, other: ArrayLike) -> "Tensor":
        return self._binary(
            other, "div", np.divide,
            lambda g, a, b, o: g / b,
            lambda g, a, b, o: -g * a / (b * b),
        )

    def __radd__(self, other: ArrayLike) -> "Tensor":
        return self._coerce(other) + self

    def __rsub__(self, other: ArrayLike) -> "Tensor":
        return self._coerce(other) - self

    def __rmul__(self, other: ArrayLike) -> "Tensor":
        return self._coerce(other) * self

    def __rtruediv__(self, other: ArrayLike) -> "Tensor":
        return self._coerce(other) / self

    def _unary(self, op: str, out: np.ndarray, local_grad) -> "Tensor":
        x = self.data

        def backward(g: np.ndarray) -> tuple:
            return (local_grad(g, x, out),)

        return Tensor._result(out, op, (self,), backward)

    def __neg__(self) -> "Tensor":
        return self._unary("neg", -self.data, lambda g, x, o: -g)

    def __pow__(self, exponent: Union[int, float]) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("Only constant int/float exponents are supported")
        c = exponent
        return self._unary("pow", self.data ** c, lambda g, x, o: g * c * x ** (c - 1))

    def exp(self) -> "Tensor":
        return self._unary("exp", np.exp(self.data), lambda g, x, o: g * o)

    def log(self) -> "Tensor":
        return self._unary("log", np.log(self.data), lambda g, x, o: g / x)

    def relu(self) -> "Tensor":
        return self._unary("relu", np.maximum(self.data, 0), lambda g, x, o: g * (x > 0))

    def sigmoid(self) -> "Tensor":
        return self._unary("sigmoid", _sigmoid(self.data), lambda g, x, o: g * o * (1 - o))

    def tanh(self) -> "Tensor":
        return self._unary("tanh", np.tanh(self.data), lambda g, x, o: g * (1 - o * o))

    def softplus(self) -> "Tensor":
        return self._unary("softplus", np.logaddexp(0, self.data), lambda g, x, o: g * _sigmoid(x))

    def abs(self) -> "Tensor":
        return self._unary("abs", np.abs(self.data), lambda g, x, o: g * np.sign(x))

    def clamp(self, low: float, high: float) -> "Tensor":
        return self._unary(
            "clamp", np.clip(self.data, low, high),
            lambda g, x, o: g * ((x >= low) & (x <= high)),
        )

    # ------------------------------------------------------------------
    # reductions
    # ------------------------------------------------------------------
    def sum(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g: np.ndarray) -> tuple:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._result(out, "sum", (self,), backward)

    def mean(self, axis: Optional[int] = None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int = 0) -> "Tensor":
        """Maximum along one axis; the gradient goes to the first maximal entry."""
        index = np.expand_dims(np.argmax(self.data, axis=axis), axis)
        out = np.take_along_axis(self.data, index, axis=axis).squeeze(axis)
        shape = self.shape

        def backward(g: np.ndarray) -> tuple:
            grad = np.zeros(shape, dtype=g.dtype)
            np.put_along_axis(grad, index, np.expand_dims(g, axis), axis=axis)
            return (grad,)

        return Tensor._result(out, "max", (self,), backward)

    # ------------------------------------------------------------------
    # shape manipulation
    # ------------------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot reshape {original} into {shape}") from exc
        return Tensor._result(out, "reshape", (self,), lambda g: (g.reshape(original),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._result(
            self.data.transpose(axes), "transpose", (self,), lambda g: (g.transpose(inverse),)
        )

    @property
    def T(self) -> "Tensor":
        return self.transpose()

    def expand(self, *shape) -> "Tensor":
        """Explicitly repeat size-1 axes up to `shape` (same rank required)."""
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        if len(shape) != self.ndim or any(s != t and s != 1 for s, t in zip(self.shape, shape)):
            raise ShapeError(f"expand: cannot expand {self.shape} to {shape}")
        axes = tuple(i for i, (s, t) in enumerate(zip(self.shape, shape)) if s != t)
        out = np.broadcast_to(self.data, shape)

        def backward(g: np.ndarray) -> tuple:
            return (g.sum(axis=axes, keepdims=True) if axes else g,)

        return Tensor._result(out, "expand", (self,), backward)

    def __getitem__(self, index) -> "Tensor":
        shape = self.shape
        out = self.data[index]
        fancy = _is_fancy(index)

        def backward(g: np.ndarray) -> tuple:
            grad = np.zeros(shape, dtype=g.dtype)
            if fancy:
                np.add.at(grad, index, g)
            else:
                grad[index] += g
            return (grad,)

        return Tensor._result(out, "getitem", (self,), backward)

    def cumsum_exclusive(self, axis: int = -1) -> "Tensor":
        """Running sum along `axis` that excludes the current entry."""
        out = np.cumsum(self.data, axis=axis) - self.data

        def backward(g: np.ndarray) -> tuple:
            reverse = np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis)
            return (reverse - g,)

        return Tensor._result(out, "cumsum_exclusive", (self,), backward)

    # ------------------------------------------------------------------
    # linear algebra
    # ------------------------------------------------------------------
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x)
    positive = x >= 0
    out[positive] = 1.0 / (1.0 + np.exp(-x[positive]))
    e = np.exp(x[~positive])
    out[~positive] = e / (1.0 + e)
    return out


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (np.ndarray, list)) for p in parts)


ELEMENTWISE_OPS = {
    "add": lambda a, b: a + b,
    "sub": lambda a, b: a - b,
    "mul": lambda a, b: a * b,
    "div": lambda a, b: a / b,
    "neg": lambda a, _: -a,
    "exp": lambda a, _: a.exp(),
    "log": lambda a, _: a.log(),
    "relu": lambda a, _: a.relu(),
    "sigmoid": lambda a, _: a.sigmoid(),
    "tanh": lambda a, _: a.tanh(),
    "softplus": lambda a, _: a.softplus(),
}


def elementwise(op_name: str, a: Tensor, b: Optional[ArrayLike] = None, exponent: Optional[float] = None) -> Tensor:
    """Apply a named elementwise op; `pow` takes a constant exponent."""
    if op_name == "pow":
        if exponent is None:
            raise ValueError("pow requires a constant exponent")
        return a ** exponent
    try:
        fn = ELEMENTWISE_OPS[op_name]
    except KeyError:
        raise ValueError(f"Unknown elementwise op '{op_name}'") from None
    return fn(a, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.data, b.data

    def backward(g: np.ndarray) -> tuple:
        return g @ bv.T, av.T @ g

    return Tensor._result(av @ bv, "matmul", (a, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from exc
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray) -> tuple:
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, "concat", tensors, backward)


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1: (C,H,W) * (O,C,3,3) -> (O,H,W)."""
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d: expected (C,H,W) and (O,C,3,3), got {x.shape} and {kernel.shape}")
    channels, height, width = x.shape
    out_channels = kernel.shape[0]
    if kernel.shape[1] != channels:
        raise ShapeError(f"conv2d: kernel expects {kernel.shape[1]} channels, input has {channels}")

    padded = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(height * width, channels * 9)
    weights = kernel.data.reshape(out_channels, channels * 9)
    out = (cols @ weights.T).T.reshape(out_channels, height, width)

    def backward(g: np.ndarray) -> tuple:
        g2 = g.reshape(out_channels, height * width)
        grad_kernel = (g2 @ cols).reshape(kernel.shape)
        dcols = (g2.T @ weights).reshape(height, width, channels, 3, 3)
        grad_padded = np.zeros((channels, height + 2, width + 2), dtype=g.dtype)
        for dy in range(3):
            for dx in range(3):
                grad_padded[:, dy:dy + height, dx:dx + width] += dcols[:, :, :, dy, dx].transpose(2, 0, 1)
        return grad_padded[:, 1:-1, 1:-1], grad_kernel

    return Tensor._result(out, "conv2d", (x, kernel), backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    """(C,H,W) -> (C,2H,2W) by pixel replication."""
    channels, height, width = x.shape
    out = x.data.repeat(2, axis=1).repeat(2, axis=2)

    def backward(g: np.ndarray) -> tuple:
        return (g.reshape(channels, height, 2, width, 2).sum(axis=(2, 4)),)

    return Tensor._result(out, "upsample_nearest2x", (x,), backward)


def bilinear_matrix(size: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """(2*size, size) interpolation matrix with half-pixel centers and clamped edges."""
    matrix = np.zeros((2 * size, size), dtype=np.float64)
    for i in range(2 * size):
        src = (i + 0.5) / 2.0 - 0.5
        src = min(max(src, 0.0), size - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, size - 1)
        frac = src - lo
        matrix[i, lo] += 1.0 - frac
        matrix[i, hi] += frac
    return matrix.astype(dtype)


def resize_bilinear2x(x: Tensor) -> Tensor:
    """(C,H,W) -> (C,2H,2W) bilinear resize."""
    _, height, width = x.shape
    rows = bilinear_matrix(height, x.data.dtype)
    cols = bilinear_matrix(width, x.data.dtype)
    out = np.einsum("ph,chw,qw->cpq", rows, x.data, cols)

    def backward(g: np.ndarray) -> tuple:
        return (np.einsum("ph,cpq,qw->chw", rows, g, cols),)

    return Tensor._result(out, "resize_bilinear2x", (x,), backward)


def scatter_rows(values: Tensor, index: np.ndarray, size: int, fill: ArrayLike) -> Tensor:
    """Place rows of `values` at `index` in a (size, C) buffer pre-filled with `fill`."""
    index = np.asarray(index, dtype=np.int64)
    if values.ndim != 2 or values.shape[0] != index.shape[0]:
        raise ShapeError(f"scatter_rows: values {values.shape} do not match {index.shape[0]} indices")
    out = np.empty((size, values.shape[1]), dtype=values.data.dtype)
    out[...] = np.asarray(fill, dtype=values.data.dtype)
    out[index] = values.data

    def backward(g: np.ndarray) -> tuple:
        return (g[index],)

    return Tensor._result(out, "scatter_rows", (values,), backward)
