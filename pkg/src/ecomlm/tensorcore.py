"""Dense float64 tensors with an eager, taped reverse-mode autodiff.

A :class:`Graph` records every operation as it is evaluated.  Calling
:meth:`Graph.backward` on a scalar node walks the tape in exact reverse
insertion order and accumulates gradients into the :class:`ParameterSet`
entries that fed the computation.

Tensors are plain ``numpy.ndarray`` objects of dtype float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

OP_KINDS = (
    "constant",
    "param",
    "matmul",
    "add",
    "multiply",
    "scale",
    "softmax",
    "layer_norm",
    "relu",
    "tanh",
    "embedding_lookup",
    "transpose",
    "sum",
    "mean",
    "squared_euclidean",
    "cross_entropy_from_logits",
    "hinge",
    "concat",
    "slice_cols",
)

LAYER_NORM_EPS = 1e-10


class ShapeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamEntry:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


class ParameterSet:
    """Named model parameters with gradient accumulators and Adam moments."""

    def __init__(self):
        self._entries: dict[str, ParamEntry] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, dtype=DTYPE)
        self._entries[name] = ParamEntry(
            value, np.zeros_like(value), np.zeros_like(value), np.zeros_like(value)
        )
        return value

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name) -> ParamEntry:
        return self._entries[name]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def value(self, name: str) -> np.ndarray:
        return self._entries[name].value

    def zero_grad(self):
        for e in self._entries.values():
            e.grad.fill(0.0)

    def num_elements(self) -> int:
        return sum(e.value.size for e in self._entries.values())

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for name, e in self._entries.items():
            out._entries[name] = ParamEntry(
                e.value.copy(), e.grad.copy(), e.m.copy(), e.v.copy()
            )
        return out

    def merge(self, other: "ParameterSet"):
        """Take ownership of every entry of ``other`` (names must be new)."""
        for name, e in other.items():
            if name in self._entries:
                raise KeyError(f"duplicate parameter name {name!r}")
            self._entries[name] = e


# ---------------------------------------------------------------------------
# op implementations: each returns (value, vjp) where vjp maps the output
# gradient to a tuple of input gradients (None for non-differentiable inputs)


def _require(cond, kind, *shapes):
    if not cond:
        raise ShapeError(f"{kind}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes))


def _broadcast_ok(a, b):
    if a.shape == b.shape:
        return True
    small = b if a.ndim >= b.ndim else a
    big = a if small is b else b
    if small.size == 1 and small.ndim <= 1:
        return True
    return small.ndim == 1 and big.ndim == 2 and big.shape[1] == small.shape[0]


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    if len(shape) == 0:
        return np.array(g.sum())
    if len(shape) == 1 and shape[0] == 1 and g.ndim != 1:
        return g.sum().reshape(1)
    if len(shape) == 1 and g.ndim == 2:
        return g.sum(axis=0)
    return g.sum().reshape(shape)


def _op_matmul(a, b):
    _require(a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0], "matmul", a.shape, b.shape)
    out = a @ b
    return out, lambda g: (g @ b.T, a.T @ g)


def _op_add(a, b):
    _require(_broadcast_ok(a, b), "add", a.shape, b.shape)
    out = a + b
    return out, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _op_multiply(a, b):
    _require(_broadcast_ok(a, b), "multiply", a.shape, b.shape)
    out = a * b
    return out, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _op_scale(a, *, factor: float):
    return a * factor, lambda g: (g * factor,)


def _op_softmax(a):
    _require(a.ndim >= 1, "softmax", a.shape)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return s, vjp


def _op_layer_norm(a, *, eps: float = LAYER_NORM_EPS):
    _require(a.ndim == 2, "layer_norm", a.shape)
    mu = a.mean(axis=1, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        gm = g.mean(axis=1, keepdims=True)
        gy = (g * y).mean(axis=1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return y, vjp


def _op_relu(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


def _op_tanh(a):
    t = np.tanh(a)
    return t, lambda g: (g * (1.0 - t * t),)


def _op_embedding_lookup(table, *, ids):
    ids = np.asarray(ids, dtype=np.int64)
    _require(table.ndim == 2, "embedding_lookup", table.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding_lookup: ids out of range for table {tuple(table.shape)} "
            f"(min {ids.min()}, max {ids.max()})"
        )
    out = table[ids]

    def vjp(g):
        gt = np.zeros_like(table)
        np.add.at(gt, ids, g)
        return (gt,)

    return out, vjp


def _op_transpose(a):
    _require(a.ndim == 2, "transpose", a.shape)
    return a.T.copy(), lambda g: (g.T,)


def _op_sum(a):
    return np.array(a.sum()), lambda g: (np.broadcast_to(g, a.shape).copy(),)


def _op_mean(a):
    n = a.size
    _require(n > 0, "mean", a.shape)
    return np.array(a.sum() / n), lambda g: (np.full(a.shape, float(g) / n),)


def _op_squared_euclidean(a, b):
    _require(a.shape == b.shape, "squared_euclidean", a.shape, b.shape)
    diff = a - b
    return np.array((diff * diff).sum()), lambda g: (2.0 * g * diff, -2.0 * g * diff)


def _op_cross_entropy(logits, *, targets):
    targets = np.asarray(targets, dtype=np.int64)
    _require(
        logits.ndim == 2 and targets.ndim == 1 and targets.shape[0] == logits.shape[0] and logits.shape[0] > 0,
        "cross_entropy_from_logits",
        logits.shape,
        targets.shape,
    )
    if targets.min() < 0 or targets.max() >= logits.shape[1]:
        raise ShapeError(f"cross_entropy_from_logits: target out of range for logits {tuple(logits.shape)}")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def vjp(g):
        p = np.exp(logp)
        p[rows, targets] -= 1.0
        return (p * (float(g) / n),)

    return np.array(loss), vjp


def _op_hinge(a):
    mask = a > 0
    return a * mask, lambda g: (g * mask,)


def _op_concat(*arrays, axis: int = 0):
    _require(len(arrays) > 0, "concat")
    ref = arrays[0]
    for x in arrays[1:]:
        ok = x.ndim == ref.ndim and all(
            x.shape[k] == ref.shape[k] for k in range(ref.ndim) if k != axis
        )
        _require(ok, "concat", ref.shape, x.shape)
    out = np.concatenate(arrays, axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, vjp


def _op_slice_cols(a, *, start: int, stop: int):
    _require(a.ndim == 2 and 0 <= start < stop <= a.shape[1], "slice_cols", a.shape, (start, stop))
    out = a[:, start:stop].copy()

    def vjp(g):
        ga = np.zeros_like(a)
        ga[:, start:stop] = g
        return (ga,)

    return out, vjp


_OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "add": _op_add,
    "multiply": _op_multiply,
    "scale": _op_scale,
    "softmax": _op_softmax,
    "layer_norm": _op_layer_norm,
    "relu": _op_relu,
    "tanh": _op_tanh,
    "embedding_lookup": _op_embedding_lookup,
    "transpose": _op_transpose,
    "sum": _op_sum,
    "mean": _op_mean,
    "squared_euclidean": _op_squared_euclidean,
    "cross_entropy_from_logits": _op_cross_entropy,
    "hinge": _op_hinge,
    "concat": _op_concat,
    "slice_cols": _op_slice_cols,
}


# ---------------------------------------------------------------------------
# graph


class Node:
    __slots__ = ("graph", "id", "kind", "inputs", "value", "grad", "vjp", "param_name")

    def __init__(self, graph, id, kind, inputs, value, vjp=None, param_name=None):
        self.graph = graph
        self.id = id
        self.kind = kind
        self.inputs = inputs
        self.value = value
        self.grad = None
        self.vjp = vjp
        self.param_name = param_name

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Node({self.id}, {self.kind}, shape={self.value.shape})"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.add(self, self.graph.scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, float(other))
        return self.graph.multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    @property
    def T(self):
        return self.graph.transpose(self)


class Graph:
    """An eager value graph; node ids are insertion indices."""

    def __init__(self, params: ParameterSet | None = None):
        self.params = params
        self.nodes: list[Node] = []
        self._param_nodes: dict[str, Node] = {}

    def __len__(self):
        return len(self.nodes)

    def _push(self, kind, inputs, value, vjp=None, param_name=None) -> Node:
        node = Node(self, len(self.nodes), kind, tuple(inputs), value, vjp, param_name)
        self.nodes.append(node)
        return node

    def _as_node(self, x) -> Node:
        if isinstance(x, Node):
            if x.graph is not self:
                raise ValueError("node belongs to a different graph")
            return x
        if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
            return self.nodes[int(x)]
        return self.constant(x)

    # leaves

    def constant(self, value) -> Node:
        return self._push("constant", (), np.asarray(value, dtype=DTYPE))

    def param(self, name: str) -> Node:
        if self.params is None:
            raise ValueError("graph has no ParameterSet attached")
        node = self._param_nodes.get(name)
        if node is None:
            node = self._push("param", (), self.params[name].value, param_name=name)
            self._param_nodes[name] = node
        return node

    # generic dispatch

    def record(self, kind: str, inputs: Sequence, **attrs) -> int:
        """Evaluate ``kind`` on the given input nodes (or ids) and return the new node id."""
        if kind not in _OPS:
            raise ValueError(f"unsupported op kind {kind!r}")
        nodes = [self._as_node(x) for x in inputs]
        value, vjp = _OPS[kind](*(n.value for n in nodes), **attrs)
        value = np.asarray(value, dtype=DTYPE)
        if not np.all(np.isfinite(value)):
            raise FloatingPointError(f"{kind}: non-finite output")
        return self._push(kind, [n.id for n in nodes], value, vjp).id

    def _op(self, kind, *inputs, **attrs) -> Node:
        return self.nodes[self.record(kind, inputs, **attrs)]

    def matmul(self, a, b):
        return self._op("matmul", a, b)

    def add(self, a, b):
        return self._op("add", a, b)

    def multiply(self, a, b):
        return self._op("multiply", a, b)

    def scale(self, a, factor: float):
        return self._op("scale", a, factor=float(factor))

    def softmax(self, a):
        return self._op("softmax", a)

    def layer_norm(self, a, eps: float = LAYER_NORM_EPS):
        return self._op("layer_norm", a, eps=eps)

    def relu(self, a):
        return self._op("relu", a)

    def tanh(self, a):
        return self._op("tanh", a)

    def embedding_lookup(self, table, ids):
        return self._op("embedding_lookup", table, ids=ids)

    def transpose(self, a):
        return self._op("transpose", a)

    def sum(self, a):
        return self._op("sum", a)

    def mean(self, a):
        return self._op("mean", a)

    def squared_euclidean(self, a, b):
        return self._op("squared_euclidean", a, b)

    def cross_entropy_from_logits(self, logits, targets):
        return self._op("cross_entropy_from_logits", logits, targets=targets)

    def hinge(self, a):
        return self._op("hinge", a)

    def concat(self, items: Iterable, axis: int = 0):
        return self._op("concat", *items, axis=axis)

    def slice_cols(self, a, start: int, stop: int):
        return self._op("slice_cols", a, start=start, stop=stop)

    # reverse pass

    def backward(self, loss, seed: float = 1.0):
        """Accumulate d(seed * loss)/d(param) into the attached ParameterSet."""
        loss = self._as_node(loss)
        if loss.value.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.value.shape}")
        loss.grad = np.full(loss.value.shape, float(seed))
        for node in reversed(self.nodes[: loss.id + 1]):
            g = node.grad
            if g is None:
                continue
            if node.kind == "param":
                self.params[node.param_name].grad += g
            elif node.vjp is not None:
                for inp_id, gi in zip(node.inputs, node.vjp(g)):
                    if gi is None:
                        continue
                    inp = self.nodes[inp_id]
                    if inp.kind == "constant":
                        continue
                    if inp.grad is None:
                        inp.grad = np.array(gi, dtype=DTYPE)
                    else:
                        inp.grad = inp.grad + gi
        for node in self.nodes:
            node.grad = None


def backward(loss: Node, seed: float = 1.0):
    loss.graph.backward(loss, seed)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float | None = None

    @property
    def ok(self) -> bool:
        return self.tolerance is None or self.max_rel_error < self.tolerance


def grad_check(
    builder: Callable[[Graph], Node],
    params: ParameterSet,
    tolerance: float | None = None,
    step: float = 1e-5,
    max_elements: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckResult:
    """Compare taped gradients against central finite differences.

    The error for one parameter is ``|analytic - numeric| / max(|analytic|,
    |numeric|, 1e-8)`` with ``|.|`` the Euclidean norm over the checked
    elements; the result holds the maximum over parameters.  With
    ``max_elements`` only a random subset of each parameter is probed.
    """
    params.zero_grad()
    g = Graph(params)
    g.backward(builder(g))
    rng = rng if rng is not None else np.random.default_rng(0)

    def evaluate():
        return float(builder(Graph(params)).value)

    per_param = {}
    for name, entry in params.items():
        flat = entry.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        analytic = entry.grad.reshape(-1)[idx].copy()
        numeric = np.empty_like(analytic)
        for k, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate()
            flat[i] = orig - step
            down = evaluate()
            flat[i] = orig
            numeric[k] = (up - down) / (2.0 * step)
        denom = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
        per_param[name] = float(np.linalg.norm(analytic - numeric) / denom)
    params.zero_grad()
    worst = max(per_param.values()) if per_param else 0.0
    return GradCheckResult(worst, per_param, tolerance)


def global_grad_norm(params: ParameterSet) -> float:
    return math.sqrt(sum(float((e.grad * e.grad).sum()) for _, e in params.items()))
