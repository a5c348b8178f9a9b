"""Dense N-D tensors with reverse-mode automatic differentiation.

The engine is define-by-run: every differentiable operation records a
closure on its output that knows how to push gradients back to its
inputs. Calling :meth:`Tensor.backward` on a scalar loss topologically
sorts the recorded graph and runs the closures in reverse.

Volumes use the canonical layout ``(batch, channel, depth, height,
width)``; parameters may be lower rank. Computation runs in float32 by
default; a float64 mode (:func:`use_dtype`) exists for gradient
verification against :func:`finite_diff_grad`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "elementwise_add",
    "elementwise_mul",
    "sigmoid",
    "leaky_relu",
    "concat_channels",
    "split_channels",
    "finite_diff_grad",
    "no_grad",
    "grad_enabled",
    "default_dtype",
    "use_dtype",
]


class ShapeError(ValueError):
    """Raised when tensor shapes violate an operation's contract."""


_default_dtype = np.float32
_grad_enabled = True


def default_dtype():
    """Dtype newly created tensors use (float32 unless overridden)."""
    return _default_dtype


@contextlib.contextmanager
def use_dtype(dtype):
    """Temporarily switch the default dtype (float64 for gradient checks)."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _default_dtype = prev


def grad_enabled() -> bool:
    return _grad_enabled


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / oracle evaluations)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(_default_dtype)


class Tensor:
    """Array plus gradient slot, participating in the autograd tape.

    ``data`` is immutable by convention after creation; only ``grad`` and
    (for parameters, via the optimizer) in-place ``data`` updates between
    forward passes are mutated. Gradients accumulate additively, so an
    explicit :meth:`zero_grad` is required between optimizer steps.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = ()):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward: Callable[[], None] | None = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- graph construction helpers -------------------------------------

    @staticmethod
    def _make(data, parents: tuple, backward: Callable[[], None] | None) -> "Tensor":
        """Wrap an op result; records the tape only when tracking is on."""
        track = _grad_enabled and any(p.requires_grad for p in parents)
        if not track:
            return Tensor(data)
        out = Tensor(data, requires_grad=True, _parents=parents)
        out._backward = backward
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            return elementwise_add(self, other)
        c = float(other)
        return _unary(self, self.data + c, lambda g: g)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return elementwise_add(self, -other)
        return self + (-float(other))

    def __rsub__(self, other):
        return (-self) + float(other)

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return elementwise_mul(self, other)
        c = float(other)
        return _unary(self, self.data * c, lambda g: g * c)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            if other.shape != self.shape:
                raise ShapeError(f"division shapes differ: {self.shape} vs {other.shape}")
            out_data = self.data / other.data

            def backward():
                g = out.grad
                self._accumulate(g / other.data)
                other._accumulate(-g * self.data / (other.data * other.data))

            out = Tensor._make(out_data, (self, other), backward)
            return out
        return self * (1.0 / float(other))

    # -- reductions and pointwise transcendentals ------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape))

        out = Tensor._make(out_data, (self,), backward)
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def log(self) -> "Tensor":
        return _unary(self, np.log(self.data), lambda g: g / self.data)

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)
        return _unary(self, out_data, lambda g: g * out_data)

    def clip(self, lo: float, hi: float) -> "Tensor":
        """Clamp values to [lo, hi]; gradient is zero outside the range."""
        out_data = np.clip(self.data, lo, hi)
        inside = (self.data >= lo) & (self.data <= hi)
        return _unary(self, out_data, lambda g: g * inside)

    # -- backward ---------------------------------------------------------

    def backward(self) -> None:
        """Reverse accumulation from a scalar loss.

        Populates ``grad`` on every ``requires_grad`` tensor reachable
        through the tape. Gradients add across multiple uses of a tensor.
        """
        if self.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor with no gradient tape")

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward()


def _toposort(root: Tensor) -> list:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def _unary(x: Tensor, out_data: np.ndarray, grad_fn: Callable[[np.ndarray], np.ndarray]) -> Tensor:
    def backward():
        x._accumulate(grad_fn(out.grad))

    out = Tensor._make(out_data, (x,), backward)
    return out


# -- spec'd operations ----------------------------------------------------


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    """c = a + b for equal shapes; gradient passes through to both."""
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")

    def backward():
        a._accumulate(out.grad)
        b._accumulate(out.grad)

    out = Tensor._make(a.data + b.data, (a, b), backward)
    return out


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    """c = a * b for equal shapes; da += g*b, db += g*a."""
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")

    def backward():
        a._accumulate(out.grad * b.data)
        b._accumulate(out.grad * a.data)

    out = Tensor._make(a.data * b.data, (a, b), backward)
    return out


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, computed branch-wise so |x| up to ~1e4 stays finite.

    For x >= 0 uses 1/(1+exp(-x)); for x < 0 uses exp(x)/(1+exp(x)).
    Output is strictly inside (0, 1) for finite input.
    """
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out_data[~pos] = ex / (1.0 + ex)
    # keep the open interval even where rounding would saturate to 0 or 1
    one = d.dtype.type(1.0)
    zero = d.dtype.type(0.0)
    np.clip(out_data, np.nextafter(zero, one), np.nextafter(one, zero), out=out_data)
    return _unary(x, out_data, lambda g: g * out_data * (1.0 - out_data))


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """y = x for x >= 0 else slope*x. Slope must be non-negative."""
    if slope < 0:
        raise ValueError(f"leaky_relu slope must be >= 0, got {slope}")
    d = x.data
    factor = np.where(d >= 0, d.dtype.type(1.0), d.dtype.type(slope))
    return _unary(x, d * factor, lambda g: g * factor)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis (axis 1); a leads."""
    if a.ndim != b.ndim or a.ndim < 2:
        raise ShapeError(f"concat needs equal ranks >= 2: {a.shape} vs {b.shape}")
    if a.shape[:1] + a.shape[2:] != b.shape[:1] + b.shape[2:]:
        raise ShapeError(f"concat non-channel extents differ: {a.shape} vs {b.shape}")
    k = a.shape[1]

    def backward():
        a._accumulate(out.grad[:, :k])
        b._accumulate(out.grad[:, k:])

    out = Tensor._make(np.concatenate([a.data, b.data], axis=1), (a, b), backward)
    return out


def split_channels(x: Tensor, k: int) -> tuple[Tensor, Tensor]:
    """Split along the channel axis: channels [0,k) and [k,end)."""
    if x.ndim < 2:
        raise ShapeError(f"split needs rank >= 2, got {x.shape}")
    channels = x.shape[1]
    if not 0 < k < channels:
        raise ShapeError(f"split point {k} out of range for {channels} channels")

    first = _unary(x, np.ascontiguousarray(x.data[:, :k]), lambda g: _pad_channels(g, 0, channels - k))
    second = _unary(x, np.ascontiguousarray(x.data[:, k:]), lambda g: _pad_channels(g, k, 0))
    return first, second


def _pad_channels(g: np.ndarray, before: int, after: int) -> np.ndarray:
    pad = [(0, 0)] * g.ndim
    pad[1] = (before, after)
    return np.pad(g, pad)


def finite_diff_grad(f: Callable[[Tensor], "Tensor | float"], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar-valued f, element by element.

    Evaluates in float64 regardless of the input dtype; this is the
    independent oracle the backward pass is checked against.
    """
    if h <= 0:
        raise ValueError(f"step h must be positive, got {h}")
    base = x.data.astype(np.float64).copy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)

    def evaluate(arr: np.ndarray) -> float:
        with no_grad():
            result = f(Tensor(arr.reshape(x.shape)))
        return result.item() if isinstance(result, Tensor) else float(result)

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = evaluate(base)
        flat[i] = orig - h
        lo = evaluate(base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad
