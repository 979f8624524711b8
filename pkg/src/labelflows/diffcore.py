"""Reverse-mode differentiation on numpy arrays, a flat parameter store and Adam.

Ops are define-by-run: each call on a :class:`Node` appends one entry to the
owning :class:`Tape`.  Ops applied only to plain arrays skip the tape and
return arrays, so model code runs unchanged for inference.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

__all__ = [
    "NonFiniteError",
    "Node",
    "Tape",
    "ParamStore",
    "AdamState",
    "adam_step",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "linear",
    "unstack",
    "tanh",
    "exp",
    "log",
    "square",
    "hinge",
    "clamp",
    "sum",
    "mean",
    "log_softmax",
    "value_of",
]


class NonFiniteError(FloatingPointError):
    """Raised when a recorded intermediate contains inf or nan."""

    def __init__(self, index: int, op: str):
        super().__init__(f"non-finite value at tape node {index} ({op})")
        self.index = index
        self.op = op


class Node:
    __slots__ = ("tape", "index", "value", "parents", "vjp", "op")
    __array_priority__ = 100.0

    def __init__(self, tape, index, value, parents, vjp, op):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, index={self.index}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Ordered record of primitive ops for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.output: Node | None = None
        self._params: ParamStore | None = None
        self._leaves: dict[str, Node] = {}

    def leaf(self, value: np.ndarray, name: str = "") -> Node:
        node = Node(self, len(self.nodes), value, (), None, f"leaf:{name}")
        self.nodes.append(node)
        return node

    def record(self, op, value, parents, vjp) -> Node:
        value = np.asarray(value)
        index = len(self.nodes)
        if not np.isfinite(value).all():
            raise NonFiniteError(index, op)
        node = Node(self, index, value, parents, vjp, op)
        self.nodes.append(node)
        return node

    def forward(self, fn: Callable, params: "ParamStore", *inputs) -> float:
        """Run ``fn(leaves, *inputs)`` and record it; ``leaves`` maps names to nodes.

        ``fn`` must return a scalar node.  Returns its value as a float.
        """
        self.nodes = []
        self.output = None
        self._params = params
        self._leaves = {name: self.leaf(view, name) for name, view in params.items()}
        for x in inputs:
            if isinstance(x, np.ndarray) and not np.isfinite(x).all():
                raise ValueError("inputs contain non-finite values")
        out = fn(self._leaves, *inputs)
        if not isinstance(out, Node) or out.tape is not self:
            raise TypeError("forward function must return a node on this tape")
        if out.value.size != 1:
            raise ValueError(f"forward output must be scalar, got shape {out.value.shape}")
        self.output = out
        return float(out.value.reshape(()))

    def backward(self) -> np.ndarray:
        """Gradient of the recorded output, flattened in ParamStore order."""
        if self.output is None:
            raise RuntimeError("backward called before forward")
        adj: list = [None] * len(self.nodes)
        adj[self.output.index] = np.ones_like(self.output.value)
        owned: set[int] = set()
        for node in reversed(self.nodes[: self.output.index + 1]):
            g = adj[node.index]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if parent is None or pg is None:
                    continue
                i = parent.index
                if isinstance(pg, _IndexedGrad):
                    if i not in owned:
                        base = adj[i]
                        adj[i] = np.zeros(parent.value.shape) if base is None else np.array(base)
                        owned.add(i)
                    adj[i][pg.key] += pg.value
                elif adj[i] is None:
                    adj[i] = pg
                else:
                    adj[i] = adj[i] + pg
                    owned.add(i)
        grad = np.zeros(self._params.total_dim)
        for name, leaf in self._leaves.items():
            g = adj[leaf.index]
            if g is not None:
                grad[self._params.slice(name)] = np.reshape(g, -1)
        return grad


class _IndexedGrad:
    """Gradient contribution to one leading-axis slice of a parent."""

    __slots__ = ("key", "value")

    def __init__(self, key, value):
        self.key = key
        self.value = value


def value_of(a):
    return a.value if isinstance(a, Node) else a


def _tape_of(*args) -> Tape | None:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _op(name, value, args, vjp):
    tape = _tape_of(*args)
    if tape is None:
        return value
    parents = tuple(a if isinstance(a, Node) else None for a in args)
    return tape.record(name, value, parents, vjp)


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    sa, sb = np.shape(av), np.shape(bv)
    return _op("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    sa, sb = np.shape(av), np.shape(bv)
    return _op("sub", out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a):
    return _op("neg", -value_of(a), (a,), lambda g: (-g,))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    sa, sb = np.shape(av), np.shape(bv)

    def vjp(g):
        ga = _unbroadcast(g * bv, sa) if isinstance(a, Node) else None
        gb = _unbroadcast(g * av, sb) if isinstance(b, Node) else None
        return ga, gb

    return _op("mul", out, (a, b), vjp)


def _mT(a):
    return np.swapaxes(a, -1, -2)


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading (batch) axes."""
    av, bv = value_of(a), value_of(b)

    def vjp(g):
        ga = _unbroadcast(g @ _mT(bv), av.shape) if isinstance(a, Node) else None
        gb = _unbroadcast(_mT(av) @ g, bv.shape) if isinstance(b, Node) else None
        return ga, gb

    return _op("matmul", av @ bv, (a, b), vjp)


def linear(h, W, b, activation: str | None = None):
    """Fused ``h @ W + b``, optionally followed by tanh.

    Batched when ``W`` has a leading group axis.  The fused form avoids extra
    passes over large activations.
    """
    hv, Wv, bv = value_of(h), value_of(W), value_of(b)
    out = hv @ Wv
    out += bv
    if activation == "tanh":
        np.tanh(out, out=out)
    elif activation is not None:
        raise ValueError(f"unknown activation {activation!r}")

    def vjp(g):
        if activation == "tanh":
            gz = out * out
            np.subtract(1.0, gz, out=gz)
            gz *= g
        else:
            gz = g
        gh = _unbroadcast(gz @ _mT(Wv), hv.shape) if isinstance(h, Node) else None
        gW = _unbroadcast(_mT(hv) @ gz, Wv.shape) if isinstance(W, Node) else None
        gb = _unbroadcast(gz, bv.shape) if isinstance(b, Node) else None
        return gh, gW, gb

    return _op("linear" if activation is None else f"linear_{activation}", out, (h, W, b), vjp)


def unstack(a) -> list:
    """Split along the leading axis; gradients flow back slice by slice."""
    av = value_of(a)
    if _tape_of(a) is None:
        return [av[k] for k in range(av.shape[0])]
    return [_op("unstack", av[k], (a,), lambda g, k=k: (_IndexedGrad(k, g),))
            for k in range(av.shape[0])]


def tanh(a):
    out = np.tanh(value_of(a))
    return _op("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    out = np.exp(value_of(a))
    return _op("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return _op("log", np.log(av), (a,), lambda g: (g / av,))


def square(a):
    av = value_of(a)
    return _op("square", av * av, (a,), lambda g: (2.0 * g * av,))


def hinge(a):
    """Positive part ``[a]_+``; the subgradient at 0 is 0."""
    av = value_of(a)
    active = av > 0
    return _op("hinge", np.where(active, av, 0.0), (a,), lambda g: (g * active,))


def clamp(a, lo: float, hi: float):
    av = value_of(a)
    inside = (av >= lo) & (av <= hi)
    return _op("clamp", np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    av = value_of(a)
    shape = np.shape(av)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return _op("sum", np.sum(av, axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims=False):
    av = value_of(a)
    n = av.size if axis is None else av.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log_softmax(a, axis: int = -1):
    av = value_of(a)
    shifted = av - av.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)
    return _op("log_softmax", out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


class ParamStore:
    """Named tensors backed by one contiguous float64 vector.

    ``store[name]`` is a reshaped view into ``store.flat``; optimizers update
    ``flat`` in place.
    """

    def __init__(self):
        self._flat = np.zeros(0)
        self._pending: list[np.ndarray] = []
        self._size = 0
        self._index: dict[str, tuple[int, tuple[int, ...]]] = {}

    @property
    def flat(self) -> np.ndarray:
        if self._pending:
            self._flat = np.concatenate([self._flat, *self._pending])
            self._pending = []
        return self._flat

    @flat.setter
    def flat(self, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if value.shape != (self.total_dim,):
            raise ValueError(f"expected flat vector of length {self.total_dim}")
        self._pending = []
        self._flat = value

    def add(self, name: str, value) -> None:
        if name in self._index:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.asarray(value, dtype=np.float64)
        if not np.isfinite(value).all():
            raise ValueError(f"parameter {name!r} has non-finite values")
        self._index[name] = (self._size, value.shape)
        self._pending.append(value.reshape(-1).copy())
        self._size += value.size

    def slice(self, name: str) -> slice:
        start, shape = self._index[name]
        return slice(start, start + int(np.prod(shape, dtype=int)))

    def shape(self, name: str) -> tuple[int, ...]:
        return self._index[name][1]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.flat[self.slice(name)].reshape(self.shape(name))

    def __setitem__(self, name: str, value) -> None:
        self.flat[self.slice(name)] = np.asarray(value, dtype=np.float64).reshape(-1)

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self._index)

    def names(self) -> list[str]:
        return list(self._index)

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        for name in self._index:
            yield name, self[name]

    @property
    def total_dim(self) -> int:
        return self._size

    def copy(self) -> "ParamStore":
        other = ParamStore()
        other._flat = self.flat.copy()
        other._size = self._size
        other._index = dict(self._index)
        return other


@dataclass
class AdamState:
    """Moments and schedule for Adam with per-epoch exponential decay."""

    dim: int
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.996
    t: int = 0
    epoch: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.m is None:
            self.m = np.zeros(self.dim)
        if self.v is None:
            self.v = np.zeros(self.dim)

    @property
    def lr(self) -> float:
        return self.lr0 * self.decay**self.epoch

    def end_epoch(self) -> None:
        self.epoch += 1


def adam_step(params: ParamStore, grads: np.ndarray, state: AdamState) -> ParamStore:
    """One bias-corrected Adam update of ``params.flat`` in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape or state.m.shape != grads.shape:
        raise ValueError(
            f"dimension mismatch: params {params.flat.shape}, grads {grads.shape}, state {state.m.shape}"
        )
    if not np.isfinite(grads).all():
        bad = np.flatnonzero(~np.isfinite(grads))
        raise FloatingPointError(
            f"non-finite gradient in {bad.size} entries (first flat index {bad[0]}) at step {state.t + 1}"
        )
    state.t += 1
    # in-place moment updates; the parameter vector is large relative to the batch
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    sq = np.multiply(grads, grads)
    sq *= 1.0 - state.beta2
    state.v += sq
    step_size = state.lr / (1.0 - state.beta1**state.t)
    denom = np.sqrt(state.v, out=sq)
    denom *= 1.0 / np.sqrt(1.0 - state.beta2**state.t)
    denom += state.eps
    np.divide(state.m, denom, out=denom)
    denom *= step_size
    flat = params.flat
    flat -= denom
    params.flat = flat
    return params
