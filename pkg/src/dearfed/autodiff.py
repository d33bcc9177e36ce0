"""Reverse-mode automatic differentiation over dense float64 arrays.

Small dynamic-graph engine: every operation records its parents and a
backward closure on the result tensor, and ``backward()`` replays the tape
in reverse topological order. Deliberately float64-only and single-threaded
per graph so that repeated runs are bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's arity rules."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node of the compute graph: a float64 array plus optional gradient.

    Leaf tensors created with ``requires_grad=True`` accumulate gradients
    in ``.grad`` after ``backward()``; interior nodes are created by the
    operations below and carry the closures that propagate gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad=False, _parents=(), _backward_fn=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ----------------------------------------------------

    def _topo_order(self):
        """Iterative post-order DFS; each node appears exactly once."""
        order, visited, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        return order

    def backward(self):
        """Accumulate gradients of this scalar into every reachable leaf."""
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar output, got shape {self.data.shape}"
            )
        self.grad = np.ones_like(self.data)
        for node in reversed(self._topo_order()):
            if node._backward_fn is None or node.grad is None:
                continue
            for parent, contrib in node._backward_fn(node.grad):
                if not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad += contrib

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitive operations ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data + b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(g, b.data.shape)))

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data - b.data

    def bwd(g):
        return ((a, _unbroadcast(g, a.data.shape)), (b, _unbroadcast(-g, b.data.shape)))

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def neg(a) -> Tensor:
    a = _lift(a)
    return Tensor(-a.data, _parents=(a,), _backward_fn=lambda g: ((a, -g),))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data * b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g * b.data, a.data.shape)),
            (b, _unbroadcast(g * a.data, b.data.shape)),
        )

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out_data = a.data / b.data

    def bwd(g):
        return (
            (a, _unbroadcast(g / b.data, a.data.shape)),
            (b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)),
        )

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-d operands, got {a.data.shape} and {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        return ((a, g @ b.data.T), (b, a.data.T @ g))

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    s = _sigmoid(a.data)

    def bwd(g):
        return ((a, g * s * (1.0 - s)),)

    return Tensor(s, _parents=(a,), _backward_fn=bwd)


def tanh(a) -> Tensor:
    a = _lift(a)
    t = np.tanh(a.data)

    def bwd(g):
        return ((a, g * (1.0 - t * t)),)

    return Tensor(t, _parents=(a,), _backward_fn=bwd)


def exp(a) -> Tensor:
    a = _lift(a)
    e = np.exp(a.data)

    def bwd(g):
        return ((a, g * e),)

    return Tensor(e, _parents=(a,), _backward_fn=bwd)


def log(a) -> Tensor:
    a = _lift(a)

    def bwd(g):
        return ((a, g / a.data),)

    return Tensor(np.log(a.data), _parents=(a,), _backward_fn=bwd)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.data.shape).copy()),)

    return Tensor(out_data, _parents=(a,), _backward_fn=bwd)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.data.shape[axis]

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g / count, a.data.shape).copy()),)

    return Tensor(out_data, _parents=(a,), _backward_fn=bwd)


def concatenate(tensors, axis=0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        pieces = []
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            pieces.append((t, g[tuple(idx)]))
        return tuple(pieces)

    return Tensor(out_data, _parents=tuple(tensors), _backward_fn=bwd)


def take(a, key) -> Tensor:
    """Basic slicing/indexing (no repeated indices) with scatter backward."""
    a = _lift(a)
    out_data = a.data[key]

    def bwd(g):
        full = np.zeros_like(a.data)
        full[key] += g
        return ((a, full),)

    return Tensor(out_data, _parents=(a,), _backward_fn=bwd)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        return ((a, g.reshape(a.data.shape)),)

    return Tensor(out_data, _parents=(a,), _backward_fn=bwd)


def minimum(a, b) -> Tensor:
    """Elementwise minimum; gradient follows the smaller operand (ties to `a`)."""
    a, b = _lift(a), _lift(b)
    take_a = a.data <= b.data
    out_data = np.where(take_a, a.data, b.data)

    def bwd(g):
        return (
            (a, _unbroadcast(g * take_a, a.data.shape)),
            (b, _unbroadcast(g * ~take_a, b.data.shape)),
        )

    return Tensor(out_data, _parents=(a, b), _backward_fn=bwd)


def squared_error(pred, target) -> Tensor:
    """Mean squared error reduction over all elements."""
    pred, target = _lift(pred), _lift(target)
    if pred.data.shape != target.data.shape:
        raise ShapeError(
            f"squared_error shapes differ: {pred.data.shape} vs {target.data.shape}"
        )
    d = pred - target
    return mean(mul(d, d))


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for one flat parameter vector."""

    lr: float
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_size(cls, n: int, lr: float) -> "AdamState":
        return cls(lr=lr, m=np.zeros(n), v=np.zeros(n))


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """One in-place Adam update of `params`; returns the same array."""
    if params.shape != grads.shape:
        raise ShapeError(f"param/grad lengths differ: {params.shape} vs {grads.shape}")
    if state.m.shape != params.shape:
        raise ShapeError(f"Adam state sized {state.m.shape} for params {params.shape}")
    bad = np.flatnonzero(~np.isfinite(grads))
    if bad.size:
        raise FloatingPointError(f"non-finite gradient at index {bad[0]}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def clip_global_norm(grads: np.ndarray, max_norm: float = 5.0) -> np.ndarray:
    """Scale `grads` so the global L2 norm is at most `max_norm`."""
    norm = float(np.linalg.norm(grads))
    if norm > max_norm:
        return grads * (max_norm / norm)
    return grads


# -- parameter registry -----------------------------------------------------


@dataclass
class Net:
    """Ordered registry of named leaf parameters shared by all networks.

    Provides the flat-vector view used by the Adam updates and model
    serialization: parameters concatenate in insertion order.
    """

    params: dict = field(default_factory=dict)

    def add_param(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True)
        self.params[name] = t
        return t

    @property
    def num_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def get_vector(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self.params.values()])

    def set_vector(self, vec: np.ndarray) -> None:
        if vec.size != self.num_params:
            raise ShapeError(f"vector length {vec.size} != {self.num_params}")
        off = 0
        for t in self.params.values():
            n = t.data.size
            t.data[...] = vec[off:off + n].reshape(t.data.shape)
            off += n

    def grad_vector(self) -> np.ndarray:
        parts = []
        for t in self.params.values():
            g = t.grad if t.grad is not None else np.zeros_like(t.data)
            parts.append(g.ravel())
        return np.concatenate(parts)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None


def init_params(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.normal(0.0, scale, size=shape)


# -- gradient checking ------------------------------------------------------


def grad_check(loss_fn, nets, h: float = 1e-5) -> float:
    """Max floored relative error between analytic and central-difference grads.

    `loss_fn` rebuilds the graph from the current parameter values of the
    given nets and returns a scalar Tensor. The numeric side perturbs each
    coordinate by ±h and re-runs the forward pass, so it is independent of
    the backward code it is checking.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if isinstance(nets, Net):
        nets = [nets]
    for net in nets:
        net.zero_grad()
    loss_fn().backward()
    analytic = [net.grad_vector() for net in nets]

    worst = 0.0
    for net, a_vec in zip(nets, analytic):
        vec = net.get_vector()
        numeric = np.zeros_like(vec)
        for i in range(vec.size):
            orig = vec[i]
            vec[i] = orig + h
            net.set_vector(vec)
            hi = loss_fn().item()
            vec[i] = orig - h
            net.set_vector(vec)
            lo = loss_fn().item()
            vec[i] = orig
            numeric[i] = (hi - lo) / (2.0 * h)
        net.set_vector(vec)
        denom = np.maximum(np.maximum(np.abs(a_vec), np.abs(numeric)), 1e-4)
        worst = max(worst, float(np.max(np.abs(a_vec - numeric) / denom)))
    return worst
