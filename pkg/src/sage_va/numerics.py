"""Dense float64 tensors with tape-free reverse-mode differentiation.

Each operation returns a new :class:`Tensor` that remembers its operands and a
vector-Jacobian rule.  :func:`backward` walks that record in reverse
topological order.  Nothing is cached between forward passes, so the graph is
rebuilt from scratch on every call and no state is shared between threads.
"""

from __future__ import annotations

from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, DomainError

__all__ = [
    "Tensor",
    "Graph",
    "tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "relu",
    "tanh",
    "exp",
    "tsum",
    "mean",
    "transpose",
    "reshape",
    "concat",
    "take_rows",
    "softmax",
    "conv1d",
    "layer_norm",
    "backward",
    "grad_check",
    "relative_error",
]

_LN_EPS = 1e-5

# when set, relu appends its activation masks here (finite-difference kink detection)
_relu_trace: ContextVar[list | None] = ContextVar("relu_trace", default=None)


class Tensor:
    """An immutable float64 array that can take part in differentiation."""

    __slots__ = ("data", "requires_grad", "name", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._vjp is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, idx):
        return _getitem(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad, name)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_shape(a, b, "div")
    out = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    trace = _relu_trace.get()
    if trace is not None:
        trace.append(mask)
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


# ---------------------------------------------------------------------------
# reductions and shape ops


def tsum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), vjp)


def mean(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _make(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = a.data.reshape(shape)
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis for p in parts)


def _getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def vjp(g):
        full = np.zeros(a.shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), vjp)


def take_rows(a: Tensor, rows) -> Tensor:
    """Select rows by integer index array (duplicates allowed)."""
    return _getitem(a, np.asarray(rows, dtype=np.intp))


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_lift(p) for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [p.shape[ax] for p in parts])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(out, parts, vjp)


# ---------------------------------------------------------------------------
# linear algebra and network primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def _softmax_vjp(y: np.ndarray, g: np.ndarray) -> np.ndarray:
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def softmax(v: Tensor, axis: int = -1) -> Tensor:
    """Max-shifted softmax along ``axis`` (the last axis by default)."""
    v = _lift(v)
    if v.ndim == 0:
        raise DomainError("softmax needs at least one axis")
    if axis not in (-1, v.ndim - 1):
        raise DimensionError("softmax is only defined along the last axis")
    shifted = v.data - v.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=-1, keepdims=True)
    # looked up at call time so tests can swap in a faulty rule
    return _make(y, (v,), lambda g: (_softmax_vjp(y, g),))


def conv1d(x: Tensor, kernel: Tensor, dilation: int = 1) -> Tensor:
    """Length-preserving dilated 1-D convolution with symmetric zero padding.

    ``x`` is ``T x C_in`` and ``kernel`` is ``K x C_in x C_out`` with ``K`` odd.
    Output row ``t`` is ``sum_k x[t + (k - (K-1)/2) * dilation] @ kernel[k]``.
    """
    if kernel.ndim != 3:
        raise DimensionError(f"conv1d kernel must be K x C_in x C_out, got {kernel.shape}")
    K, c_in, _ = kernel.shape
    if K % 2 == 0:
        raise ConfigError(f"conv1d needs an odd kernel size for symmetric padding, got K={K}")
    if dilation < 1:
        raise ConfigError(f"dilation must be a positive integer, got {dilation}")
    if x.ndim != 2 or x.shape[1] != c_in:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernel {kernel.shape}")
    T = x.shape[0]
    pad = (K - 1) * dilation // 2
    xp = np.pad(x.data, ((pad, pad), (0, 0)))
    w = kernel.data
    out = sum(xp[k * dilation:k * dilation + T] @ w[k] for k in range(K))

    def vjp(g):
        dxp = np.zeros_like(xp)
        dw = np.empty_like(w)
        for k in range(K):
            lo = k * dilation
            dxp[lo:lo + T] += g @ w[k].T
            dw[k] = xp[lo:lo + T].T @ g
        return dxp[pad:pad + T], dw

    return _make(out, (x, kernel), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = _LN_EPS) -> Tensor:
    """Row-wise normalization with population variance, then ``gamma * xhat + beta``."""
    D = x.shape[-1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise DimensionError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), vjp)


# ---------------------------------------------------------------------------
# differentiation


class Graph:
    """Recorded operations reachable from an output, in topological order.

    ``nodes[i]`` only consumes leaves or outputs of ``nodes[j]`` with ``j < i``.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.order = order

    @property
    def nodes(self) -> list[Tensor]:
        return [t for t in self.order if not t.is_leaf]

    @property
    def leaves(self) -> list[Tensor]:
        return [t for t in self.order if t.is_leaf]


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None,
             graph: Graph | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to leaves.

    Returns a dict keyed by leaf tensor.  With ``wrt`` given, exactly those
    tensors are keyed and any that ``loss`` does not depend on get zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph or Graph(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(graph.order):
        g = grads.get(id(node))
        if g is None or node.is_leaf:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    if wrt is None:
        targets = [t for t in graph.leaves if t.requires_grad]
    else:
        targets = list(wrt)
    return {t: grads.get(id(t), np.zeros(t.shape)) for t in targets}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


@contextmanager
def trace_relu() -> Iterator[list]:
    """Collect the activation mask of every relu evaluated inside the block."""
    masks: list = []
    token = _relu_trace.set(masks)
    try:
        yield masks
    finally:
        _relu_trace.reset(token)


def same_activation_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def central_difference(evaluate: Callable[[float], float], step: float) -> tuple[float, bool]:
    """``(f(+h) - f(-h)) / 2h`` and whether both sides share one relu activation pattern.

    If any relu flips between the two evaluations the step straddles a kink
    and the difference quotient does not estimate the derivative.
    """
    with trace_relu() as plus_masks:
        fp = evaluate(step)
    with trace_relu() as minus_masks:
        fm = evaluate(-step)
    return (fp - fm) / (2.0 * step), same_activation_pattern(plus_masks, minus_masks)


def numeric_partial(f: Callable[[Tensor], Tensor], x: Tensor, index: tuple,
                    step: float) -> tuple[float, bool]:
    """Central difference of ``f`` along one coordinate of ``x`` (see :func:`central_difference`)."""
    def evaluate(h):
        shifted = x.data.copy()
        shifted[index] += h
        return f(Tensor(shifted)).item()

    return central_difference(evaluate, step)


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5,
               coords: Sequence[tuple] | None = None) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``coords`` restricts the comparison to a subset of indices of ``x``.
    Coordinates whose step crosses a relu kink are not compared.
    """
    leaf = Tensor(x.data, requires_grad=True)
    analytic = backward(f(leaf), wrt=[leaf])[leaf]
    if coords is None:
        coords = list(np.ndindex(*x.shape))
    worst = 0.0
    for index in coords:
        num, smooth = numeric_partial(f, x, index, step)
        if smooth:
            worst = max(worst, float(relative_error(analytic[index], num)))
    return worst
