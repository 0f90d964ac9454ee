"""
Dense tensors with a tape-based reverse-mode autodiff.

A Tensor wraps a contiguous float32 numpy array. Primitive operations record
themselves on the active ComputationTape when any input requires a gradient;
backward() replays the tape in reverse. Tapes are bound to the current
context (contextvars), so concurrent training contexts never share one.

Implicit broadcasting follows numpy rules for binary elementwise operations
only; every other primitive checks its shapes and raises ShapeError.
"""

from __future__ import annotations

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ShapeError, TripletError

logger = logging.getLogger("triplet.tensor")

ArrayLike = Union["Tensor", np.ndarray, float, int]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_DTYPE: contextvars.ContextVar = contextvars.ContextVar("triplet_dtype", default=np.float32)
_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("triplet_tape", default=None)


@contextlib.contextmanager
def float64_precision() -> Iterator[None]:
    """Create every new tensor in float64 (used by grad_check)."""
    token = _DTYPE.set(np.float64)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording: nothing computed inside reaches the tape."""
    token = _ACTIVE_TAPE.set(None)
    try:
        yield
    finally:
        _ACTIVE_TAPE.reset(token)


class Tensor:
    """Dense array of reals with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 1000  # ndarray <op> Tensor dispatches to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None) -> None:
        self.data = np.asarray(data, dtype=_DTYPE.get(), order="C")
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # Operator sugar; the real work lives in the module-level primitives.
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

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)


# ============================================================================
# Tape
# ============================================================================

@dataclass
class TapeNode:
    """One primitive application: inputs, output and the local VJP."""
    op: str
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: BackwardFn


class ComputationTape:
    """
    Ordered record of primitive applications.

    Nodes are appended in execution order, which is already a topological
    order; replaying them reversed visits each node exactly once.

    Usage:
        with ComputationTape() as tape:
            loss = f(x)
        backward(loss, tape)
    """

    def __init__(self) -> None:
        self.nodes: List[TapeNode] = []
        self.consumed = False
        self._token = None

    def __enter__(self) -> "ComputationTape":
        if self.consumed:
            raise TripletError("cannot record on a consumed tape")
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward_fn: BackwardFn) -> None:
        self.nodes.append(TapeNode(op, inputs, output, backward_fn))

    def leaves(self) -> List[Tensor]:
        """requires_grad inputs that no recorded node produced, first-seen order."""
        produced = {id(node.output) for node in self.nodes}
        seen = set()
        leaves = []
        for node in self.nodes:
            for t in node.inputs:
                if t.requires_grad and id(t) not in produced and id(t) not in seen:
                    seen.add(id(t))
                    leaves.append(t)
        return leaves


def _as_tensor(value: ArrayLike) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _make(data: np.ndarray, inputs: Tuple[Tensor, ...], op: str, backward_fn: BackwardFn) -> Tensor:
    out = Tensor(data)
    tape = _ACTIVE_TAPE.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward_fn)
    return out


def _propagate(loss: Tensor, tape: ComputationTape) -> Dict[int, np.ndarray]:
    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            prev = grads.get(key)
            grads[key] = gi if prev is None else prev + gi
    return grads


def backward(loss: Tensor, tape: ComputationTape, leaves: Optional[Iterable[Tensor]] = None) -> None:
    """
    Populate .grad on every requires_grad leaf and consume the tape.

    Leaves default to those recorded on the tape; pass `leaves` to also
    receive zero gradients for tensors the loss never touched.
    Gradients accumulate into existing .grad buffers.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", "loss must be a scalar", loss.shape)
    if tape.consumed:
        raise TripletError("backward: tape already consumed")

    targets = list(tape.leaves()) if leaves is None else list(leaves)
    grads = _propagate(loss, tape) if loss.requires_grad else {}
    for leaf in targets:
        g = grads.get(id(leaf))
        g = np.zeros_like(leaf.data) if g is None else g.astype(leaf.data.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g

    tape.nodes.clear()
    tape.consumed = True


def gradients(loss: Tensor, tape: ComputationTape, wrt: Sequence[Tensor]) -> List[np.ndarray]:
    """Gradients of `loss` w.r.t. `wrt` without consuming the tape or touching .grad."""
    if loss.data.size != 1:
        raise ShapeError("gradients", "loss must be a scalar", loss.shape)
    grads = _propagate(loss, tape) if loss.requires_grad else {}
    return [grads.get(id(t), np.zeros_like(t.data)) for t in wrt]


# ============================================================================
# Elementwise primitives
# ============================================================================

def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, "operands do not broadcast", a.shape, b.shape) from None


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), "add",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub",
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b), "mul",
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b), "div",
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def neg(x: Tensor) -> Tensor:
    return _make(-x.data, (x,), "neg", lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    return _make(x.data ** exponent, (x,), "pow",
                 lambda g: (g * exponent * x.data ** (exponent - 1),))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), "square", lambda g: (2.0 * g * x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), "exp", lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), "log", lambda g: (g / x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def tabs(x: Tensor) -> Tensor:
    return _make(np.abs(x.data), (x,), "abs", lambda g: (g * np.sign(x.data),))


def sin(x: Tensor) -> Tensor:
    return _make(np.sin(x.data), (x,), "sin", lambda g: (g * np.cos(x.data),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), "relu", lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * scale, (x,), "leaky_relu", lambda g: (g * scale,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), "sigmoid", lambda g: (g * out * (1.0 - out),))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    v = x.data
    inner = _GELU_C * (v + 0.044715 * v ** 3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def _backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * v ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return _make(out, (x,), "gelu", _backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when p == 0."""
    if not training or p <= 0.0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return _make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))


# ============================================================================
# Reductions and structure
# ============================================================================

def _normalize_axes(axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(np.reshape(g, out.shape), axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), "sum", _backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def _backward(g):
        if not keepdims:
            g = np.expand_dims(np.reshape(g, out.shape), axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return _make(out, (x,), "mean", _backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape into {tuple(shape)}", x.shape) from None
    return _make(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"invalid permutation {axes}", x.shape)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), "transpose",
                 lambda g: (g.transpose(inverse),))


def flip(x: Tensor, axis: int) -> Tensor:
    return _make(np.flip(x.data, axis=axis).copy(), (x,), "flip",
                 lambda g: (np.flip(g, axis=axis).copy(),))


def getitem(x: Tensor, index) -> Tensor:
    out = np.asarray(x.data[index], order="C")

    def _backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g) if _is_fancy(index) else full.__setitem__(index, g)
        return (full,)

    return _make(out, (x,), "getitem", _backward)


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ShapeError("concat", f"extents differ off axis {axis}", *(u.shape for u in tensors))
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        return tuple(np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), "concat", _backward)


def pad(x: Tensor, widths: Sequence[Tuple[int, int]]) -> Tensor:
    """Zero padding; widths is one (before, after) pair per axis."""
    widths = tuple((int(a), int(b)) for a, b in widths)
    if len(widths) != x.ndim:
        raise ShapeError("pad", f"need {x.ndim} width pairs, got {len(widths)}", x.shape)
    if all(a == 0 and b == 0 for a, b in widths):
        return x
    crop = tuple(slice(a, a + n) for (a, _), n in zip(widths, x.shape))
    return _make(np.pad(x.data, widths), (x,), "pad", lambda g: (g[crop],))


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", "inner extents differ or rank < 2", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", "batch extents do not broadcast", a.shape, b.shape) from None

    def _backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(out, (a, b), "matmul", _backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), "softmax", _backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat each voxel `factor` times along the three trailing axes."""
    if x.ndim != 5:
        raise ShapeError("upsample_nearest", "expected [B,C,D,H,W]", x.shape)
    out = x.data
    for axis in (2, 3, 4):
        out = np.repeat(out, factor, axis=axis)
    B, C, D, H, W = x.shape

    def _backward(g):
        g = g.reshape(B, C, D, factor, H, factor, W, factor)
        return (g.sum(axis=(3, 5, 7)),)

    return _make(out, (x,), "upsample_nearest", _backward)
