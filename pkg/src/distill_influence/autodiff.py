"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tensor`` wraps a numpy array and, when it depends on a trainable leaf,
records the local backward closure needed to push gradients to its parents.
Graphs are single-use: ``backward`` consumes every interior node it visits.

Model parameters live in a ``ParamVector``, an ordered list of named
segments. Each ParamVector owns one leaf tensor per segment, so a forward
pass that reads ``params.tensor(name)`` is differentiable w.r.t. exactly
that ParamVector and nothing else.
"""
from __future__ import annotations

import threading
from collections import Counter
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels
from .errors import (
    ArityError,
    CongruenceError,
    DisconnectedGraphError,
    GraphConsumedError,
    ShapeError,
)

PROB_FLOOR = 1e-12


# --------------------------------------------------------------------------
# call instrumentation


class _Counters(threading.local):
    def __init__(self):
        self.stack: list[Counter] = []


_counters = _Counters()


@contextmanager
def count_calls():
    """Count forwards and backwards issued inside the block.

    Keys are ``("forward", role)`` and ``("backward", role)`` where role is
    the ``ParamVector.role`` of the model evaluated / differentiated.
    """
    c: Counter = Counter()
    _counters.stack.append(c)
    try:
        yield c
    finally:
        _counters.stack.remove(c)


def record_call(kind: str, role: str) -> None:
    for c in _counters.stack:
        c[(kind, role)] += 1


# --------------------------------------------------------------------------
# Tensor


class Tensor:
    __slots__ = ("value", "requires_grad", "_parents", "_backward", "_consumed", "__weakref__")

    def __init__(self, value, requires_grad: bool = False, _parents=(), _backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        if self.value.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.value.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.value.shape[0]

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __rtruediv__(self, other):
        return mul(as_tensor(other), reciprocal(self))

    def __pow__(self, exponent):
        return power(self, float(exponent))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents, backward):
    """Build an op output; it joins the graph only if some parent does."""
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(value)
    return Tensor(value, True, tuple(parents), backward)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementary ops ----------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.value, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def reciprocal(a):
    out = 1.0 / a.value
    return _make(out, (a,), lambda g: (-g * out * out,))


def power(a, k: float):
    av = a.value
    return _make(av**k, (a,), lambda g: (g * k * av ** (k - 1.0),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    av, bv = a.value, b.value
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def relu(a):
    mask = a.value > 0
    return _make(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def tanh(a):
    out = np.tanh(a.value)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a, floor: float = PROB_FLOOR):
    """Natural log with the argument clamped below at ``floor``."""
    v = a.value
    clamped = v < floor
    safe = np.where(clamped, floor, v)
    return _make(np.log(safe), (a,), lambda g: (np.where(clamped, 0.0, g / safe),))


def tsum(a, axis=None):
    shape = a.shape
    if axis is None:
        return _make(a.value.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return _make(
        a.value.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def tmean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return tsum(a, axis) * (1.0 / n)


def softmax(a):
    """Row-wise softmax of a 2-D tensor."""
    if a.value.ndim != 2:
        raise ShapeError(f"softmax expects a 2-D tensor, got shape {a.shape}")
    out = kernels.softmax_rows(a.value)
    return _make(out, (a,), lambda g: (kernels.softmax_rows_backward(out, g),))


def xent_rows(target, probs, floor: float = PROB_FLOOR):
    """Per-row ``-sum_c target * log(max(probs, floor))``, differentiable in both."""
    target, probs = as_tensor(target), as_tensor(probs)
    if target.shape != probs.shape or probs.value.ndim != 2:
        raise ShapeError(f"xent shape mismatch {target.shape} vs {probs.shape}")
    tv, qv = target.value, probs.value
    return _make(
        kernels.xent_rows(tv, qv, floor),
        (target, probs),
        lambda g: kernels.xent_rows_backward(tv, qv, floor, g),
    )


# backward -------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad_of(loss: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray | None]:
    """Gradients of scalar ``loss`` w.r.t. ``leaves``; ``None`` for unreached leaves."""
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed by a previous backward")
    if not loss.requires_grad:
        raise DisconnectedGraphError("loss does not depend on any trainable tensor")
    order = _topo(loss)
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
        if node._parents:
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
            node._parents = ()
            node._backward = None
            node._consumed = True
    return [grads.get(id(leaf)) for leaf in leaves]


# --------------------------------------------------------------------------
# parameter containers


class _Segmented:
    """Ordered ``(name, array)`` segments with flatten/unflatten."""

    __slots__ = ("names", "arrays", "role")

    def __init__(self, segments: Iterable[tuple[str, np.ndarray]], role: str = ""):
        names, arrays = [], []
        for name, arr in segments:
            names.append(name)
            arrays.append(np.asarray(arr, dtype=np.float64))
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate segment names in {names}")
        self.names = tuple(names)
        self.arrays = tuple(arrays)
        self.role = role

    @property
    def shapes(self):
        return tuple(a.shape for a in self.arrays)

    @property
    def total_dim(self) -> int:
        return sum(a.size for a in self.arrays)

    def __len__(self):
        return len(self.names)

    def __getitem__(self, name) -> np.ndarray:
        return self.arrays[self.names.index(name)]

    def items(self):
        return zip(self.names, self.arrays)

    def flatten(self) -> np.ndarray:
        if not self.arrays:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.arrays])

    def _split(self, vec) -> list[tuple[str, np.ndarray]]:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.total_dim,):
            raise ShapeError(f"expected flat vector of length {self.total_dim}, got {vec.shape}")
        out, off = [], 0
        for name, a in self.items():
            out.append((name, vec[off : off + a.size].reshape(a.shape).copy()))
            off += a.size
        return out

    def congruent(self, other: "_Segmented") -> bool:
        return self.names == other.names and self.shapes == other.shapes

    def check_congruent(self, other: "_Segmented") -> None:
        if not self.congruent(other):
            raise CongruenceError(
                f"structure mismatch: {list(zip(self.names, self.shapes))} vs "
                f"{list(zip(other.names, other.shapes))}"
            )

    def bit_equal(self, other: "_Segmented") -> bool:
        return self.congruent(other) and all(
            np.array_equal(a, b) for a, b in zip(self.arrays, other.arrays)
        )


class ParamVector(_Segmented):
    """All trainable parameters of one model, as named segments.

    Treated as immutable: every update returns a new ParamVector. ``role``
    (e.g. "teacher", "student") tags forward/backward counts.
    """

    __slots__ = ("_leaves", "_trainable")

    def __init__(self, segments, role: str = "", trainable: bool = True):
        super().__init__(segments, role)
        for a in self.arrays:
            a.setflags(write=False)
        self._trainable = trainable
        self._leaves = None

    @property
    def trainable(self) -> bool:
        return self._trainable

    def leaves(self) -> tuple[Tensor, ...]:
        if self._leaves is None:
            self._leaves = tuple(Tensor(a, requires_grad=self._trainable) for a in self.arrays)
        return self._leaves

    def tensor(self, name: str) -> Tensor:
        return self.leaves()[self.names.index(name)]

    def detached(self) -> "ParamVector":
        """Same values; forward passes through it never reach any gradient."""
        p = ParamVector.__new__(ParamVector)
        p.names, p.arrays, p.role = self.names, self.arrays, self.role
        p._trainable, p._leaves = False, None
        return p

    def unflatten(self, vec) -> "ParamVector":
        return ParamVector(self._split(vec), self.role, self._trainable)

    def with_role(self, role: str) -> "ParamVector":
        return ParamVector(self.items(), role, self._trainable)

    def __repr__(self):
        return f"ParamVector(role={self.role!r}, total_dim={self.total_dim}, segments={list(self.names)})"


class GradVector(_Segmented):
    """Gradient with the same segment layout as the ParamVector it differentiates."""

    __slots__ = ()

    @classmethod
    def zeros_like(cls, params: _Segmented) -> "GradVector":
        return cls(((n, np.zeros_like(a)) for n, a in params.items()), params.role)

    def unflatten(self, vec) -> "GradVector":
        return GradVector(self._split(vec), self.role)

    def dot(self, other: "GradVector") -> float:
        self.check_congruent(other)
        return float(sum(np.vdot(a, b) for a, b in zip(self.arrays, other.arrays)))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def scale(self, k: float) -> "GradVector":
        return GradVector(((n, k * a) for n, a in self.items()), self.role)

    def __add__(self, other: "GradVector") -> "GradVector":
        self.check_congruent(other)
        return GradVector(((n, a + b) for (n, a), b in zip(self.items(), other.arrays)), self.role)

    def __sub__(self, other: "GradVector") -> "GradVector":
        return self + other.scale(-1.0)

    def is_zero(self) -> bool:
        return all(not np.any(a) for a in self.arrays)

    def __repr__(self):
        return f"GradVector(role={self.role!r}, total_dim={self.total_dim})"


def mean_grads(grads: Sequence[GradVector]) -> GradVector:
    if not grads:
        raise ValueError("mean of an empty gradient list")
    first = grads[0]
    acc = [np.zeros_like(a) for a in first.arrays]
    for g in grads:
        first.check_congruent(g)
        for buf, a in zip(acc, g.arrays):
            buf += a
    return GradVector(((n, buf / len(grads)) for n, buf in zip(first.names, acc)), first.role)


# --------------------------------------------------------------------------
# public operations


def backward(loss: Tensor, wrt: ParamVector) -> GradVector:
    """d(loss)/d(wrt) for a scalar ``loss``; consumes the graph.

    Raises DisconnectedGraphError when no segment of ``wrt`` feeds ``loss``.
    Segments that are unreachable while others are reached get zeros.
    """
    if not wrt.trainable:
        raise DisconnectedGraphError("cannot differentiate w.r.t. detached parameters")
    raw = grad_of(loss, wrt.leaves())
    if all(g is None for g in raw):
        raise DisconnectedGraphError(
            f"loss is not connected to parameters {wrt.role or '<unnamed>'!s}"
        )
    record_call("backward", wrt.role)
    return GradVector(
        ((n, np.zeros_like(a) if g is None else np.asarray(g, dtype=np.float64).reshape(a.shape))
         for (n, a), g in zip(wrt.items(), raw)),
        wrt.role,
    )


def per_sample_grads(loss_fn: Callable, batch, wrt: ParamVector) -> list[GradVector]:
    """One gradient per sample: ``loss_fn`` is re-run on each single-row sub-batch.

    ``loss_fn(batch)`` must return a 1-D Tensor holding one loss per row.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("per_sample_grads needs a nonempty batch")
    out = []
    for i in range(n):
        losses = loss_fn(batch.subset([i]))
        if losses.value.ndim != 1 or losses.value.shape[0] != 1:
            raise ArityError(
                f"loss_fn returned shape {losses.shape} for a batch of 1; expected (1,)"
            )
        out.append(backward(losses.sum(), wrt))
    return out


def sgd_step(params: ParamVector, grad: GradVector, lr: float) -> ParamVector:
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    return axpy_params(params, grad, -lr)


def axpy_params(params: ParamVector, direction: GradVector, scale: float) -> ParamVector:
    """``params + scale * direction`` as a new ParamVector."""
    params.check_congruent(direction)
    return ParamVector(
        ((n, a + scale * d) for (n, a), d in zip(params.items(), direction.arrays)),
        params.role,
        params.trainable,
    )
