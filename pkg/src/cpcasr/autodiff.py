"""Tape-based reverse-mode autodiff over float64 numpy arrays.

A :class:`Graph` is an append-only list of nodes.  Every primitive records its
output value together with a vector-Jacobian product closure; ``backward``
walks the tape in reverse and accumulates adjoints.  A graph is meant to be
built fresh for each training step.

Fused operations defined elsewhere (the GRU recurrence, the CTC loss) use
:meth:`Graph.record` directly with a hand-written adjoint.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonScalarLoss, ShapeMismatch

# Ops whose adjoints are deliberately scaled; only used to prove the
# gradient checker catches a broken backward pass.
_CORRUPTED: set[str] = set()


@contextlib.contextmanager
def corrupt_adjoint(*ops: str):
    _CORRUPTED.update(ops)
    try:
        yield
    finally:
        _CORRUPTED.difference_update(ops)


class Node:
    __slots__ = ("graph", "id", "value")

    __array_ufunc__ = None  # ndarray <op> Node defers to the Node operators

    def __init__(self, graph: "Graph", id: int, value: np.ndarray):
        self.graph = graph
        self.id = id
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        op = self.graph.nodes[self.id][0]
        return f"Node(id={self.id}, op={op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


VJP = Callable[[np.ndarray], tuple]


class Graph:
    def __init__(self):
        # (op kind, input ids, vjp or None)
        self.nodes: list[tuple[str, tuple[int, ...], VJP | None]] = []
        self._values: list[Node] = []
        self.params: dict[str, int] = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, value, vjp):
        node = Node(self, len(self.nodes), value)
        self.nodes.append((op, tuple(inputs), vjp))
        self._values.append(node)
        return node

    def const(self, value) -> Node:
        return self._append("const", (), np.asarray(value, dtype=np.float64), None)

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        node = self._append("param", (), np.array(value, dtype=np.float64), None)
        self.params[name] = node.id
        return node

    def lift(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        return self.const(x)

    def record(self, op: str, inputs, value, vjp: VJP) -> Node:
        """Append a primitive; ``vjp(g)`` returns one adjoint (or None) per input."""
        inputs = [self.lift(x) for x in inputs]
        if op in _CORRUPTED:
            inner = vjp

            def vjp(g):
                return tuple(None if d is None else 1.1 * d for d in inner(g))

        return self._append(op, [n.id for n in inputs], np.asarray(value, dtype=np.float64), vjp)

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every parameter, keyed by name."""
        if loss.graph is not self:
            raise ValueError("loss belongs to a different graph")
        if loss.value.size != 1:
            raise NonScalarLoss(f"loss has shape {loss.shape}")
        adj: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for nid in range(loss.id, -1, -1):
            g = adj.get(nid)
            if g is None:
                continue
            _, inputs, vjp = self.nodes[nid]
            if vjp is None:
                continue
            del adj[nid]
            for iid, d in zip(inputs, vjp(g)):
                if d is None or self.nodes[iid][0] == "const":
                    continue
                if iid in adj:
                    adj[iid] = adj[iid] + d
                else:
                    adj[iid] = d
        out = {}
        for name, pid in self.params.items():
            g = adj.get(pid)
            out[name] = np.zeros_like(self._values[pid].value) if g is None else g
        return out


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TypeError("at least one operand must be a Node")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _val(x):
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    g = _graph_of(a, b)
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv, "add")
    return g.record(
        "add", (a, b), av + bv, lambda d: (_unbroadcast(d, av.shape), _unbroadcast(d, bv.shape))
    )


def sub(a, b) -> Node:
    g = _graph_of(a, b)
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv, "sub")
    return g.record(
        "sub", (a, b), av - bv, lambda d: (_unbroadcast(d, av.shape), -_unbroadcast(d, bv.shape))
    )


def mul(a, b) -> Node:
    g = _graph_of(a, b)
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv, "mul")
    return g.record(
        "mul",
        (a, b),
        av * bv,
        lambda d: (_unbroadcast(d * bv, av.shape), _unbroadcast(d * av, bv.shape)),
    )


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return x.graph.record("scale", (x,), x.value * c, lambda d: (d * c,))


def tanh(x: Node) -> Node:
    y = np.tanh(x.value)
    return x.graph.record("tanh", (x,), y, lambda d: (d * (1.0 - y * y),))


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Node) -> Node:
    y = _sigmoid(x.value)
    return x.graph.record("sigmoid", (x,), y, lambda d: (d * y * (1.0 - y),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return x.graph.record("relu", (x,), np.where(mask, x.value, 0.0), lambda d: (d * mask,))


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return x.graph.record("exp", (x,), y, lambda d: (d * y,))


def log(x: Node) -> Node:
    v = x.value
    return x.graph.record("log", (x,), np.log(v), lambda d: (d / v,))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Node:
    """``(..., n) @ (n, m)``; batch dimensions live only on the left operand."""
    g = _graph_of(a, b)
    av, bv = _val(a), _val(b)
    if av.ndim < 1 or bv.ndim != 2 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: {av.shape} @ {bv.shape}")

    def vjp(d):
        da = d @ bv.T
        db = av.reshape(-1, av.shape[-1]).T @ d.reshape(-1, bv.shape[1])
        return da, db

    return g.record("matmul", (a, b), av @ bv, vjp)


def conv1d(x, w, stride: int = 1) -> Node:
    """Valid 1-D convolution, channels last.

    x: (B, L, C_in); w: (C_out, C_in, k) -> (B, floor((L - k) / stride) + 1, C_out)
    """
    g = _graph_of(x, w)
    xv, wv = _val(x), _val(w)
    if xv.ndim != 3 or wv.ndim != 3 or xv.shape[2] != wv.shape[1]:
        raise ShapeMismatch(f"conv1d: input {xv.shape}, kernel {wv.shape}")
    B, L, cin = xv.shape
    cout, _, k = wv.shape
    if L < k:
        raise ShapeMismatch(f"conv1d: input length {L} < kernel {k}")
    lout = (L - k) // stride + 1
    cols = sliding_window_view(xv, k, axis=1)[:, : stride * (lout - 1) + 1 : stride]
    cols = cols.reshape(B, lout, cin * k)
    wmat = wv.reshape(cout, cin * k)
    out = cols @ wmat.T

    def vjp(d):
        dcols = (d @ wmat).reshape(B, lout, cin, k)
        dx = np.zeros_like(xv)
        span = stride * (lout - 1) + 1
        for j in range(k):
            dx[:, j : j + span : stride, :] += dcols[..., j]
        dw = (d.reshape(-1, cout).T @ cols.reshape(-1, cin * k)).reshape(wv.shape)
        return dx, dw

    return g.record("conv1d", (x, w), out, vjp)


def conv1d_length(length: int, kernel: int, stride: int) -> int:
    return (length - kernel) // stride + 1


# ---------------------------------------------------------------- shape ops


def concat(xs, axis: int = -1) -> Node:
    g = _graph_of(*xs)
    vals = [_val(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {exc}") from None
    bounds = np.cumsum([0] + [v.shape[axis] for v in vals])

    def vjp(d):
        return tuple(
            np.take(d, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return g.record("concat", xs, out, vjp)


def getitem(x: Node, key) -> Node:
    shape = x.shape

    def vjp(d):
        dx = np.zeros(shape)
        np.add.at(dx, key, d)
        return (dx,)

    return x.graph.record("slice", (x,), x.value[key], vjp)


def take(x: Node, idx) -> Node:
    """Gather along axis 0 with an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def vjp(d):
        dx = np.zeros(shape)
        np.add.at(dx, idx, d)
        return (dx,)

    return x.graph.record("take", (x,), x.value[idx], vjp)


def reshape(x: Node, shape) -> Node:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: {exc}") from None
    return x.graph.record("reshape", (x,), out, lambda d: (d.reshape(old),))


# ---------------------------------------------------------------- reductions


def sum_(x: Node, axis=None) -> Node:
    shape = x.shape

    def vjp(d):
        if axis is not None:
            d = np.expand_dims(d, axis)
        return (np.broadcast_to(d, shape).copy(),)

    return x.graph.record("sum", (x,), np.sum(x.value, axis=axis), vjp)


def mean(x: Node, axis=None) -> Node:
    n = x.value.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def log_softmax(x: Node, axis: int = -1) -> Node:
    v = x.value
    m = v.max(axis=axis, keepdims=True)
    lse = m + np.log(np.exp(v - m).sum(axis=axis, keepdims=True))
    y = v - lse
    p = np.exp(y)
    return x.graph.record("log_softmax", (x,), y, lambda d: (d - p * d.sum(axis=axis, keepdims=True),))


PRIMITIVES = (
    "add",
    "sub",
    "mul",
    "scale",
    "tanh",
    "sigmoid",
    "relu",
    "exp",
    "log",
    "matmul",
    "conv1d",
    "concat",
    "slice",
    "take",
    "reshape",
    "sum",
    "mean",
    "log_softmax",
)


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_param: dict[str, float]
    n_coords: int
    tol: float
    worst: tuple[str, tuple] | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def check_gradients(
    build_loss: Callable[[dict[str, Node]], Node],
    params: dict[str, np.ndarray],
    eps: float = 1e-5,
    tol: float = 1e-4,
) -> GradCheckReport:
    """Compare tape gradients with central finite differences, coordinate by coordinate.

    ``build_loss`` receives a dict of parameter nodes on a fresh graph and must
    return a scalar node.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values):
        g = Graph()
        nodes = {k: g.param(k, v) for k, v in values.items()}
        return build_loss(nodes), g

    loss, g = evaluate(params)
    grads = g.backward(loss)

    per_param, worst, worst_err, n = {}, None, 0.0, 0
    for name, value in params.items():
        perr = 0.0
        for coord in np.ndindex(value.shape):
            orig = value[coord]

            def f(delta):
                value[coord] = orig + delta
                return float(evaluate(params)[0].value)

            fd = (f(eps) - f(-eps)) / (2 * eps)
            value[coord] = orig
            ad = float(grads[name][coord])
            err = abs(ad - fd) / max(1e-8, abs(ad) + abs(fd))
            n += 1
            if err > perr:
                perr = err
            if err > worst_err:
                worst_err, worst = err, (name, coord)
        per_param[name] = perr
    return GradCheckReport(worst_err, per_param, n, tol, worst)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update; returns new (params, state), inputs untouched."""
    if set(params) != set(grads):
        raise ShapeMismatch(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m, v = np.zeros_like(p), np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeMismatch(f"{name}: moment {m.shape} vs parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(state.lr, b1, b2, state.eps, t, new_m, new_v)


def finite(params: dict[str, np.ndarray]) -> bool:
    return all(np.all(np.isfinite(v)) for v in params.values())
