"""Minimal reverse-mode autodiff over numpy arrays, plus Adam and a gradient checker.

Graphs are define-by-run: every call to an op below builds a new :class:`Node`
holding its value and, when any input requires gradients, a list of
``(parent, vjp)`` pairs. :func:`backward` walks the graph once in reverse
topological order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

FLOAT32 = np.float32
FLOAT64 = np.float64


class Node:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, parents=(), requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.value.shape}, dtype={self.value.dtype}, requires_grad={self.requires_grad})"

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: add(self, neg(other))
    __rsub__ = lambda self, other: add(other, neg(self))
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __rmatmul__ = lambda self, other: matmul(other, self)

    def __truediv__(self, other):
        if isinstance(other, Node):
            raise TypeError("division by a Node is not a primitive; multiply by exp(-log) instead")
        return mul(self, 1.0 / other)


def parameter(value, name=None, dtype=None):
    arr = np.array(value, dtype=dtype if dtype is not None else np.asarray(value).dtype)
    return Node(arr, requires_grad=True, name=name)


def constant(value, dtype=None):
    return Node(np.asarray(value, dtype=dtype))


def as_node(x, like=None):
    if isinstance(x, Node):
        return x
    arr = np.asarray(x)
    # constants adopt the float width of the Node they combine with
    if like is not None and like.dtype.kind == "f" and arr.dtype.kind in "fiub":
        arr = arr.astype(like.dtype)
    return Node(arr)


def _make(value, inputs_and_vjps):
    live = [(p, f) for p, f in inputs_and_vjps if p.requires_grad]
    if not live:
        return Node(value)
    return Node(value, parents=live, requires_grad=True)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- primitives --------------------------------------------------------------

def add(a, b):
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.value + b.value,
                 [(a, lambda g: _unbroadcast(g, sa)), (b, lambda g: _unbroadcast(g, sb))])


def mul(a, b):
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    return _make(av * bv,
                 [(a, lambda g: _unbroadcast(g * bv, av.shape)),
                  (b, lambda g: _unbroadcast(g * av, bv.shape))])


def neg(a):
    a = as_node(a)
    return _make(-a.value, [(a, lambda g: -g)])


def matmul(a, b):
    """Matrix product with numpy broadcasting over leading dimensions."""
    a, b = _pair(a, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    if av.ndim == 2 and bv.ndim == 3:
        return _left_matmul(a, b)

    def ga(g):
        return _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)

    def gb(g):
        return _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)

    return _make(av @ bv, [(a, ga), (b, gb)])


def _left_matmul(a, b):
    # (m, k) @ (n, k, p) as one flat GEMM instead of n small ones
    av, bv = a.value, b.value
    n, k, p = bv.shape
    flat_b = np.moveaxis(bv, 1, 0).reshape(k, n * p)
    out = np.moveaxis((av @ flat_b).reshape(-1, n, p), 0, 1)

    def ga(g):
        flat_g = np.moveaxis(g, 1, 0).reshape(-1, n * p)
        return flat_g @ flat_b.T

    def gb(g):
        flat_g = np.moveaxis(g, 1, 0).reshape(-1, n * p)
        return np.moveaxis((av.T @ flat_g).reshape(k, n, p), 0, 1)

    return _make(np.ascontiguousarray(out), [(a, ga), (b, gb)])


def tanh(a):
    a = as_node(a)
    out = np.tanh(a.value)
    return _make(out, [(a, lambda g: g * (1.0 - out * out))])


def sigmoid(a):
    a = as_node(a)
    out = _sigmoid(a.value)
    return _make(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a):
    """log(1 + exp(a)), evaluated without overflow."""
    a = as_node(a)
    v = a.value
    out = np.logaddexp(np.zeros((), dtype=v.dtype), v)
    return _make(out, [(a, lambda g: g * _sigmoid(v))])


def log_sigmoid(a):
    return neg(softplus(neg(a)))


def log(a):
    a = as_node(a)
    v = a.value
    return _make(np.log(v), [(a, lambda g: g / v)])


def exp(a):
    a = as_node(a)
    out = np.exp(a.value)
    return _make(out, [(a, lambda g: g * out)])


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape).copy()

    return _make(np.sum(a.value, axis=axis, keepdims=keepdims), [(a, vjp)])


def mean(a, axis=None, keepdims=False):
    a = as_node(a)
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def concat(nodes, axis=-1):
    nodes = [as_node(n) for n in nodes]
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def piece(i):
        return lambda g: np.split(g, cuts, axis=axis)[i]

    return _make(np.concatenate([n.value for n in nodes], axis=axis),
                 [(n, piece(i)) for i, n in enumerate(nodes)])


def gather(a, index):
    """Rows of ``a`` picked by an integer array; result shape ``index.shape + a.shape[1:]``."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.intp)
    shape = a.shape

    width = int(np.prod(shape[1:]))
    flat = (index.reshape(-1, 1) * width + np.arange(width)).reshape(-1)

    def vjp(g):
        out = np.bincount(flat, weights=g.reshape(-1), minlength=shape[0] * width)
        return out.reshape(shape).astype(g.dtype, copy=False)

    return _make(a.value[index], [(a, vjp)])


def detach(a):
    return Node(as_node(a).value)


def _pair(a, b):
    if isinstance(a, Node):
        return a, as_node(b, like=a)
    b = as_node(b)
    return as_node(a, like=b), b


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    e = np.exp(v[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# -- backward ----------------------------------------------------------------

def _topo_order(root):
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Node) -> None:
    """Populate ``.grad`` on every gradient-requiring node reachable from ``root``."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order = _topo_order(root)
    for node in order:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        g = node.grad
        for parent, vjp in node.parents:
            parent.grad += vjp(g)


def forward_backward(root: Node, params: Mapping[str, Node] | None = None) -> dict[str, np.ndarray]:
    """Backpropagate from ``root`` and return gradients keyed by parameter name.

    With ``params`` given, parameters that do not influence ``root`` get a zero
    gradient. Without it, every named leaf in the graph is reported.
    """
    if params is not None:
        for p in params.values():
            p.grad = None
    backward(root)
    if params is None:
        leaves = [n for n in _topo_order(root) if n.requires_grad and not n.parents and n.name]
        return {n.name: n.grad for n in leaves}
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.value)
    return out


# -- optimizer ---------------------------------------------------------------

@dataclass
class ParameterStore:
    params: dict[str, Node]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __post_init__(self):
        for name, p in self.params.items():
            if p.name is None:
                p.name = name
            self.m.setdefault(name, np.zeros_like(p.value))
            self.v.setdefault(name, np.zeros_like(p.value))

    def values(self) -> dict[str, np.ndarray]:
        return {k: p.value for k, p in self.params.items()}

    def astype(self, dtype) -> "ParameterStore":
        return ParameterStore({k: parameter(p.value, name=k, dtype=dtype) for k, p in self.params.items()})


def adam_step(store: ParameterStore, gradients: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParameterStore:
    """One in-place Adam update with bias correction."""
    for name in store.params:
        if name not in gradients:
            raise KeyError(f"no gradient supplied for parameter {name!r}")
    store.step += 1
    t = store.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = np.asarray(gradients[name], dtype=p.value.dtype)
        m, v = store.m[name], store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.value -= (lr * (m / bc1) / (np.sqrt(v / bc2) + eps)).astype(p.value.dtype)
    return store


# -- gradient check ----------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: tuple[str, tuple[int, ...]] | None
    per_param: dict[str, float]


def grad_check(scalar_fn: Callable[[dict[str, Node]], Node], params: Mapping[str, np.ndarray],
               h: float = 1e-5, tol: float = 1e-4, abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients of ``scalar_fn`` against central differences in float64.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    ``scalar_fn`` must be deterministic: any noise it draws has to come from a
    seed fixed outside the function.
    """
    base = {k: np.array(v, dtype=FLOAT64) for k, v in params.items()}
    nodes = {k: parameter(v, name=k) for k, v in base.items()}
    root = scalar_fn(nodes)
    if not np.isfinite(root.value).all():
        raise FloatingPointError("scalar_fn returned a non-finite value")
    analytic = forward_backward(root, nodes)

    def evaluate(name, arr):
        inputs = {k: constant(v) for k, v in base.items()}
        inputs[name] = constant(arr)
        val = float(scalar_fn(inputs).value)
        if not np.isfinite(val):
            raise FloatingPointError(f"non-finite value while perturbing {name!r}")
        return val

    worst, worst_err, per_param = None, 0.0, {}
    for name, arr in base.items():
        param_err = 0.0
        for idx in np.ndindex(arr.shape):
            plus, minus = arr.copy(), arr.copy()
            plus[idx] += h
            minus[idx] -= h
            numeric = (evaluate(name, plus) - evaluate(name, minus)) / (2.0 * h)
            a = float(analytic[name][idx])
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            param_err = max(param_err, err)
            if err >= worst_err:
                worst_err, worst = err, (name, idx)
        per_param[name] = param_err
    return GradCheckReport(worst_err, worst_err <= tol, worst, per_param)
