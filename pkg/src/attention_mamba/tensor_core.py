"""Dense tensors with reverse-mode automatic differentiation.

Every forward operation returns a new :class:`Tensor` that remembers its
parents and a backward closure; ``backward()`` replays the implicit tape
once in reverse topological order. Arrays are numpy, row-major, float32
or float64. The op set is exactly what the forecasting model needs; there
is no GPU path and no graph optimization.

Elementwise binary ops follow numpy broadcasting; gradients are summed
back over broadcast axes. Only leading-batch broadcasting is part of the
documented contract, but the general rule is implemented because the
state-space recurrence expands [B,C,1]-by-[B,1,S] style products.
"""

from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf as _sp_erf, expit as _sp_expit

__all__ = [
    "Tensor",
    "ShapeError",
    "matmul",
    "concatenate",
    "slice_axis",
    "reverse",
    "softmax_last",
    "affine",
    "conv1d_depthwise_causal",
    "adaptive_avg_pool_last",
    "adaptive_max_pool_last",
    "pool_window_bounds",
    "backward",
    "gradients",
    "zero_grad",
    "count_macs",
    "MacCounter",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TWO_OVER_SQRTPI = 2.0 / math.sqrt(math.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


# --------------------------------------------------------------------------
# multiply-accumulate counting (used by the complexity benchmark)

class MacCounter:
    """Accumulates multiply-accumulate counts of matmul/affine/conv ops."""

    __slots__ = ("total",)

    def __init__(self) -> None:
        self.total = 0


_mac_state = threading.local()


def _mac_stack() -> list:
    stack = getattr(_mac_state, "stack", None)
    if stack is None:
        stack = []
        _mac_state.stack = stack
    return stack


@contextmanager
def count_macs():
    """Count multiply-accumulates of contraction ops run inside the block.

    Counters nest; an inner block also feeds any enclosing counter.
    """
    counter = MacCounter()
    stack = _mac_stack()
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.remove(counter)


def _add_macs(n: int) -> None:
    stack = getattr(_mac_state, "stack", None)
    if stack:
        for counter in stack:
            counter.total += n


# --------------------------------------------------------------------------
# tensor

class Tensor:
    """A dense n-d float array, optionally a node on the autodiff tape.

    ``requires_grad`` marks roots (parameters) and propagates through ops;
    subgraphs that cannot reach a root keep no tape references.
    """

    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        """Detached copy of the underlying array."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other, like=self)
        out = _node(self.data + other.data, (self, other))
        if out.requires_grad:
            def back(g):
                if self.requires_grad:
                    _acc(self, _unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    _acc(other, _unbroadcast(g, other.data.shape))
            out._backward = back
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other, like=self)
        out = _node(self.data - other.data, (self, other))
        if out.requires_grad:
            def back(g):
                if self.requires_grad:
                    _acc(self, _unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    _acc(other, _unbroadcast(-g, other.data.shape))
            out._backward = back
        return out

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other, like=self)
        out = _node(self.data * other.data, (self, other))
        if out.requires_grad:
            def back(g):
                if self.requires_grad:
                    _acc(self, _unbroadcast(g * other.data, self.data.shape))
                if other.requires_grad:
                    _acc(other, _unbroadcast(g * self.data, other.data.shape))
            out._backward = back
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other, like=self)
        out = _node(self.data / other.data, (self, other))
        if out.requires_grad:
            def back(g):
                if self.requires_grad:
                    _acc(self, _unbroadcast(g / other.data, self.data.shape))
                if other.requires_grad:
                    _acc(other, _unbroadcast(-g * self.data / (other.data * other.data), other.data.shape))
            out._backward = back
        return out

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        out = _node(-self.data, (self,))
        if out.requires_grad:
            def back(g):
                _acc(self, -g)
            out._backward = back
        return out

    def __matmul__(self, other):
        return matmul(self, other)

    # -- shape ops ----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.data.shape
        out = _node(self.data.reshape(shape), (self,))
        if out.requires_grad:
            def back(g):
                _acc(self, g.reshape(old))
            out._backward = back
        return out

    def transpose_last2(self) -> "Tensor":
        """Swap the two trailing axes; materializes a contiguous copy."""
        if self.data.ndim < 2:
            raise ShapeError(f"transpose_last2 needs ndim >= 2, got shape {self.data.shape}")
        out = _node(np.ascontiguousarray(self.data.swapaxes(-1, -2)), (self,))
        if out.requires_grad:
            def back(g):
                _acc(self, np.ascontiguousarray(g.swapaxes(-1, -2)))
            out._backward = back
        return out

    # -- reductions ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            shape = self.data.shape
            def back(g):
                _acc(self, _spread(g, shape, axis, keepdims))
            out._backward = back
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = _node(self.data.mean(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            shape = self.data.shape
            count = self.data.size if axis is None else _axis_count(shape, axis)
            def back(g):
                _acc(self, _spread(g, shape, axis, keepdims) / count)
            out._backward = back
        return out

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Max along one axis; gradient routes to the first maximal element."""
        idx = np.argmax(self.data, axis=axis)
        out_data = np.take_along_axis(self.data, np.expand_dims(idx, axis), axis=axis)
        if not keepdims:
            out_data = np.squeeze(out_data, axis=axis)
        out = _node(out_data, (self,))
        if out.requires_grad:
            shape = self.data.shape
            def back(g):
                gx = np.zeros(shape, dtype=g.dtype)
                gg = g if keepdims else np.expand_dims(g, axis)
                np.put_along_axis(gx, np.expand_dims(idx, axis), gg, axis=axis)
                _acc(self, gx)
            out._backward = back
        return out

    # -- pointwise nonlinearities --------------------------------------------

    def exp(self) -> "Tensor":
        out = _node(np.exp(self.data), (self,))
        if out.requires_grad:
            def back(g):
                _acc(self, g * out.data)
            out._backward = back
        return out

    def sqrt(self) -> "Tensor":
        out = _node(np.sqrt(self.data), (self,))
        if out.requires_grad:
            def back(g):
                _acc(self, g * 0.5 / out.data)
            out._backward = back
        return out

    def erf(self) -> "Tensor":
        out = _node(_sp_erf(self.data), (self,))
        if out.requires_grad:
            x = self.data
            def back(g):
                _acc(self, g * _TWO_OVER_SQRTPI * np.exp(-x * x))
            out._backward = back
        return out

    def sigmoid(self) -> "Tensor":
        out = _node(_sp_expit(self.data), (self,))
        if out.requires_grad:
            def back(g):
                s = out.data
                _acc(self, g * s * (1.0 - s))
            out._backward = back
        return out

    def silu(self) -> "Tensor":
        s = _sp_expit(self.data)
        out = _node(self.data * s, (self,))
        if out.requires_grad:
            x = self.data
            def back(g):
                _acc(self, g * (s * (1.0 + x * (1.0 - s))))
            out._backward = back
        return out

    def gelu(self) -> "Tensor":
        """Exact GeLU 0.5*x*(1 + erf(x/sqrt(2))), not the tanh approximation."""
        cdf = 0.5 * (1.0 + _sp_erf(self.data * _INV_SQRT2))
        out = _node(self.data * cdf, (self,))
        if out.requires_grad:
            x = self.data
            def back(g):
                pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
                _acc(self, g * (cdf + x * pdf))
            out._backward = back
        return out

    def softplus(self) -> "Tensor":
        out = _node(np.logaddexp(np.zeros((), dtype=self.data.dtype), self.data), (self,))
        if out.requires_grad:
            x = self.data
            def back(g):
                _acc(self, g * _sp_expit(x))
            out._backward = back
        return out

    def backward(self) -> None:
        backward(self)


# --------------------------------------------------------------------------
# internals

def _as_tensor(x, like: "Tensor | None" = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=like.data.dtype))
    return Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: tuple) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    out._prev = parents if out.requires_grad else ()
    out._backward = None
    return out


def _acc(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _axis_count(shape: tuple, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    return int(np.prod([shape[a] for a in axis]))


def _spread(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g, shape).astype(g.dtype, copy=True)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape).astype(g.dtype, copy=True)


# --------------------------------------------------------------------------
# free-function ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product [..., M, K] @ [..., K, P].

    Leading batch extents must agree or broadcast from 1. Counts M*K*P
    multiply-accumulates per batch element when a counter is active.
    """
    a = _as_tensor(a)
    b = _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs ndim >= 2 operands, got {a.data.shape} @ {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(f"matmul inner extents disagree: {a.data.shape} @ {b.data.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents disagree: {a.data.shape} @ {b.data.shape}") from exc
    m, k = a.data.shape[-2], a.data.shape[-1]
    p = b.data.shape[-1]
    _add_macs(int(np.prod(data.shape[:-2], dtype=np.int64)) * m * k * p)
    out = _node(data, (a, b))
    if out.requires_grad:
        def back(g):
            if a.requires_grad:
                ga = np.matmul(g, b.data.swapaxes(-1, -2))
                _acc(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(a.data.swapaxes(-1, -2), g)
                _acc(b, _unbroadcast(gb, b.data.shape))
        out._backward = back
    return out


def concatenate(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        def back(g):
            start = 0
            for t, size in zip(tensors, sizes):
                if t.requires_grad:
                    sl = [slice(None)] * g.ndim
                    sl[axis] = slice(start, start + size)
                    _acc(t, g[tuple(sl)])
                start += size
        out._backward = back
    return out


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    """Contiguous slice [start:stop) along one axis, keeping the axis."""
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)
    out = _node(x.data[sl], (x,))
    if out.requires_grad:
        shape = x.data.shape
        def back(g):
            gx = np.zeros(shape, dtype=g.dtype)
            gx[sl] = g
            _acc(x, gx)
        out._backward = back
    return out


def reverse(x: Tensor, axis: int) -> Tensor:
    """Reverse along one axis; an exact involution."""
    out = _node(np.ascontiguousarray(np.flip(x.data, axis=axis)), (x,))
    if out.requires_grad:
        def back(g):
            _acc(x, np.flip(g, axis=axis))
        out._backward = back
    return out


def softmax_last(x: Tensor) -> Tensor:
    """Softmax along the last axis, stabilized by max subtraction."""
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = _node(s, (x,))
    if out.requires_grad:
        def back(g):
            dot = (g * s).sum(axis=-1, keepdims=True)
            _acc(x, s * (g - dot))
        out._backward = back
    return out


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """y = x @ weight + bias along the last axis; weight is [in, out]."""
    if x.data.shape[-1] != weight.data.shape[0]:
        raise ShapeError(
            f"affine input extent {x.data.shape[-1]} does not match weight {weight.data.shape}"
        )
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, x.data.shape[-1])
    y = x2 @ weight.data + bias.data
    _add_macs(x2.shape[0] * weight.data.shape[0] * weight.data.shape[1])
    out = _node(y.reshape(lead + (weight.data.shape[1],)), (x, weight, bias))
    if out.requires_grad:
        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            if x.requires_grad:
                _acc(x, (g2 @ weight.data.T).reshape(x.data.shape))
            if weight.requires_grad:
                _acc(weight, x2.T @ g2)
            if bias.requires_grad:
                _acc(bias, g2.sum(axis=0))
        out._backward = back
    return out


def conv1d_depthwise_causal(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel causal 1-D convolution.

    x is [B, C, N], weight [C, K] with taps ordered oldest-to-newest, bias
    [C]. The input is zero-padded on the left by K-1 so output t depends
    only on inputs <= t.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"conv1d expects [B, C, N], got {x.data.shape}")
    if weight.data.shape[0] != x.data.shape[1]:
        raise ShapeError(
            f"conv1d channel mismatch: input {x.data.shape} vs kernel {weight.data.shape}"
        )
    batch, channels, n_seq = x.data.shape
    width = weight.data.shape[1]
    xp = np.pad(x.data, ((0, 0), (0, 0), (width - 1, 0)))
    y = np.zeros_like(x.data)
    for k in range(width):
        y += weight.data[:, k][None, :, None] * xp[:, :, k:k + n_seq]
    y += bias.data[None, :, None]
    _add_macs(batch * channels * n_seq * width)
    out = _node(y, (x, weight, bias))
    if out.requires_grad:
        def back(g):
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for k in range(width):
                    gxp[:, :, k:k + n_seq] += weight.data[:, k][None, :, None] * g
                _acc(x, gxp[:, :, width - 1:])
            if weight.requires_grad:
                gw = np.empty_like(weight.data)
                for k in range(width):
                    gw[:, k] = np.einsum("bcn,bcn->c", g, xp[:, :, k:k + n_seq])
                _acc(weight, gw)
            if bias.requires_grad:
                _acc(bias, g.sum(axis=(0, 2)))
        out._backward = back
    return out


def pool_window_bounds(in_size: int, out_size: int) -> list:
    """Adaptive pooling windows [floor(i*I/O), ceil((i+1)*I/O)) per output i.

    Well defined for any out_size >= 1; when out_size > in_size the windows
    overlap and replicate (every window still has width >= 1).
    """
    if out_size < 1:
        raise ShapeError(f"pooling target must be >= 1, got {out_size}")
    return [
        (i * in_size // out_size, -((i + 1) * in_size // -out_size))
        for i in range(out_size)
    ]


def adaptive_avg_pool_last(x: Tensor, out_size: int) -> Tensor:
    """Adaptive average pooling along the last axis."""
    bounds = pool_window_bounds(x.data.shape[-1], out_size)
    cols = [x.data[..., s:e].mean(axis=-1) for s, e in bounds]
    out = _node(np.stack(cols, axis=-1), (x,))
    if out.requires_grad:
        shape = x.data.shape
        def back(g):
            gx = np.zeros(shape, dtype=g.dtype)
            for i, (s, e) in enumerate(bounds):
                gx[..., s:e] += g[..., i:i + 1] / (e - s)
            _acc(x, gx)
        out._backward = back
    return out


def adaptive_max_pool_last(x: Tensor, out_size: int) -> Tensor:
    """Adaptive max pooling along the last axis.

    The gradient routes to the first maximal element of each window.
    """
    bounds = pool_window_bounds(x.data.shape[-1], out_size)
    cols = []
    arg = []
    for s, e in bounds:
        window = x.data[..., s:e]
        idx = np.argmax(window, axis=-1)
        cols.append(np.take_along_axis(window, idx[..., None], axis=-1)[..., 0])
        arg.append(idx + s)
    out = _node(np.stack(cols, axis=-1), (x,))
    if out.requires_grad:
        shape = x.data.shape
        def back(g):
            gflat = np.zeros((int(np.prod(shape[:-1], dtype=np.int64)), shape[-1]), dtype=g.dtype)
            rows = np.arange(gflat.shape[0])
            for i in range(out_size):
                np.add.at(gflat, (rows, arg[i].reshape(-1)), g[..., i].reshape(-1))
            _acc(x, gflat.reshape(shape))
        out._backward = back
    return out


# --------------------------------------------------------------------------
# backward pass

def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Visits every reachable tape node exactly once, in reverse topological
    order, accumulating ``.grad`` on each node that requires grad.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._prev:
            stack.append((parent, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def gradients(loss: Tensor, params: Iterable[Tensor]) -> list:
    """Gradient of a scalar loss for each parameter, in order.

    Clears stale grads first; parameters unreachable from the loss get a
    zero gradient of their shape.
    """
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
