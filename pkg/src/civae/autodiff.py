"""Dense reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Tape` is rebuilt for every forward pass.  Leaves registered on the
tape are the trainable inputs; every operation on taped tensors appends one
node whose parents were recorded earlier, so the node list is already in
topological order and ``backward`` is a single reverse sweep.

The functional helpers (:func:`exp`, :func:`log`, ...) accept either plain
ndarrays or :class:`Tensor` objects, so the same model code runs with or
without a tape.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id, op, message=""):
        self.node_id = node_id
        self.op = op
        super().__init__(f"non-finite value at node {node_id} ({op}){message}")


@dataclass
class _Node:
    op: str
    parents: tuple
    vjp: Callable | None


class Tape:
    """Ordered record of primitive operations."""

    def __init__(self, check_finite=True):
        self.nodes: list[_Node] = []
        self.leaves: list[int] = []
        self.check_finite = check_finite

    def leaf(self, value, name=None) -> "Tensor":
        value = np.asarray(value, dtype=np.float64)
        idx = len(self.nodes)
        self.nodes.append(_Node("leaf" if name is None else f"leaf:{name}", (), None))
        self.leaves.append(idx)
        return Tensor(value, self, idx)

    def _record(self, op, value, parents, vjp):
        idx = len(self.nodes)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(idx, op)
        self.nodes.append(_Node(op, tuple(parents), vjp))
        return Tensor(value, self, idx)

    def backward(self, output: "Tensor") -> list[np.ndarray]:
        """Gradients of scalar ``output`` for every leaf, in registration order."""
        if output.tape is not self:
            raise ValueError("output was not recorded on this tape")
        if output.value.size != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: dict[int, np.ndarray] = {output.idx: np.ones_like(output.value)}
        for idx in range(output.idx, -1, -1):
            g = grads.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            if node.vjp is None:
                grads[idx] = g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg
        # leaves never popped above keep their accumulated value
        return [grads.get(i, None) for i in self.leaves]

    def gradients(self, output, leaves: Sequence["Tensor"]) -> list[np.ndarray]:
        all_grads = self.backward(output)
        pos = {idx: k for k, idx in enumerate(self.leaves)}
        out = []
        for t in leaves:
            g = all_grads[pos[t.idx]]
            out.append(np.zeros_like(t.value) if g is None else g)
        return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{op}: incompatible extents {a} and {b}") from None


class Tensor:
    """A value, optionally recorded on a tape."""

    __array_ufunc__ = None
    __slots__ = ("value", "tape", "idx")

    def __init__(self, value, tape=None, idx=None):
        self.value = value
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, node={self.idx})"

    def __len__(self):
        return len(self.value)

    # arithmetic
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

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def value_of(x):
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def _parent(x):
    return x.idx if isinstance(x, Tensor) and x.tape is not None else None


def _emit(op, value, inputs, vjp):
    """Return ``value`` as a bare array or record it when any input is taped."""
    tape = _tape_of(*inputs)
    if tape is None:
        if any(isinstance(x, Tensor) for x in inputs):
            return Tensor(value)
        return value
    return tape._record(op, value, [_parent(x) for x in inputs], vjp)


# binary primitives -----------------------------------------------------------

def add(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av.shape, bv.shape, "add")
    return _emit("add", av + bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av.shape, bv.shape, "sub")
    return _emit("sub", av - bv, (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av.shape, bv.shape, "mul")
    return _emit("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_shape(av.shape, bv.shape, "div")
    out = av / bv
    return _emit("div", out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul: incompatible extents {av.shape} and {bv.shape}")
    return _emit("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def log_mix(a, b, weight):
    """``log((1 - w) exp(a) + w exp(b))`` with a constant weight ``w`` in [0, 1].

    At ``w == 0`` the result is exactly ``a`` (and exactly ``b`` at ``w == 1``).
    """
    av, bv = value_of(a), value_of(b)
    w = np.asarray(weight, dtype=np.float64)
    _broadcast_shape(av.shape, bv.shape, "log_mix")
    with np.errstate(divide="ignore"):
        la = av + np.log1p(-w)
        lb = bv + np.log(w)
    out = np.logaddexp(la, lb)

    def vjp(g):
        ga = g * np.exp(la - out)
        gb = g * np.exp(lb - out)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit("log_mix", out, (a, b), vjp)


# unary primitives ------------------------------------------------------------

def neg(a):
    av = value_of(a)
    return _emit("neg", -av, (a,), lambda g: (-g,))


def exp(a):
    av = value_of(a)
    out = np.exp(av)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return _emit("log", out, (a,), lambda g: (g / av,))


def tanh(a):
    av = value_of(a)
    out = np.tanh(av)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def leaky_relu(a, slope=LEAKY_SLOPE):
    av = value_of(a)
    pos = av > 0
    out = np.where(pos, av, slope * av)
    return _emit("leaky_relu", out, (a,), lambda g: (np.where(pos, g, slope * g),))


def square(a):
    av = value_of(a)
    return _emit("square", av * av, (a,), lambda g: (2.0 * g * av,))


def clip(a, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    av = value_of(a)
    inside = (av >= lo) & (av <= hi)
    return _emit("clip", np.clip(av, lo, hi), (a,), lambda g: (np.where(inside, g, 0.0),))


def sum_(a, axis=None, keepdims=False):
    av = value_of(a)
    out = np.sum(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, av.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    count = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    out = np.mean(av, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, av.shape).copy(),)

    return _emit("mean", np.asarray(out), (a,), vjp)


def broadcast_to(a, shape):
    av = value_of(a)
    shape = tuple(shape)
    _broadcast_shape(av.shape, shape, "broadcast")
    return _emit("broadcast", np.broadcast_to(av, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, av.shape),))


def reshape(a, shape):
    av = value_of(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {av.shape} as {shape}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def getitem(a, key):
    av = value_of(a)
    out = av[key]

    def vjp(g):
        full = np.zeros_like(av)
        if _fancy(key):
            np.add.at(full, key, g)
        else:
            full[key] = g
        return (full,)

    return _emit("getitem", np.array(out), (a,), vjp)


def _fancy(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(xs, axis=-1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(xs), vjp)


def stop_gradient(a):
    return value_of(a).copy()


# optimiser -------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    skipped: int = 0


def adam_step(state: AdamState, params: list, grads: list) -> list:
    """One bias-corrected Adam step that *decreases* the objective.

    Returns the updated parameter arrays.  A non-finite gradient skips the
    step entirely and leaves the counter and moments untouched.
    """
    if len(params) != len(grads):
        raise ShapeError(f"adam_step: {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param {p.shape} vs grad {g.shape}")
    if not all(np.all(np.isfinite(g)) for g in grads):
        state.skipped += 1
        logger.warning("adam_step: non-finite gradient, step %d skipped", state.step + 1)
        return list(params)
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - state.lr * mhat / (np.sqrt(vhat) + state.eps))
    return out
