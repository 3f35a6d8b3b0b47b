"""Reverse-mode autodiff over dense 2-D float64 arrays.

Graphs are define-by-run: every op computes its value when the node is
created, so building the expression *is* the forward pass. ``forward`` can
re-evaluate an existing graph after leaf values were changed in place, which
is what the finite-difference checker relies on.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

_ids = itertools.count()


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class ContractError(RuntimeError):
    pass


class Node:
    """One vertex of the expression graph."""

    __slots__ = ("op", "inputs", "attrs", "value", "grad", "requires_grad", "name", "_id")

    def __init__(self, op, inputs, value, requires_grad, attrs=None, name=None):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"


def _as2d(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim != 2:
        raise DimensionError(f"input: expected at most 2 dims, got {a.ndim}")
    return a


def const(value, name: str | None = None) -> Node:
    """Leaf without gradient (data, masks, fixed selection matrices)."""
    return Node("input", (), _as2d(value), False, name=name)


def param(value, name: str | None = None) -> Node:
    """Leaf that collects a gradient. ``value`` is used without copying."""
    return Node("input", (), _as2d(value), True, name=name)


# ---------------------------------------------------------------------------
# op registry: name -> (check, forward, backward)
#
# forward(attrs, *values) -> value
# backward(attrs, g, out, *values) -> tuple of grads (None where not needed)
# ---------------------------------------------------------------------------


@dataclass
class OpDef:
    forward: Callable
    backward: Callable
    check: Callable | None = None


OPS: dict[str, OpDef] = {}


def _register(name, forward, backward, check=None):
    OPS[name] = OpDef(forward, backward, check)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    for k in (0, 1):
        if a.shape[k] != b.shape[k] and a.shape[k] != 1 and b.shape[k] != 1:
            raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}")


def _check_matmul(attrs, a, b):
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")


_register(
    "matmul",
    lambda at, a, b: a @ b,
    lambda at, g, out, a, b: (g @ b.T, a.T @ g),
    _check_matmul,
)
_register(
    "add",
    lambda at, a, b: a + b,
    lambda at, g, out, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    lambda at, a, b: _check_broadcast("add", a, b),
)
_register(
    "mul",
    lambda at, a, b: a * b,
    lambda at, g, out, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
    lambda at, a, b: _check_broadcast("mul", a, b),
)


def _concat_fwd(at, *vals):
    return np.concatenate(vals, axis=1)


def _concat_bwd(at, g, out, *vals):
    edges = np.cumsum([v.shape[1] for v in vals])[:-1]
    return tuple(np.split(g, edges, axis=1))


def _check_concat(at, *vals):
    rows = {v.shape[0] for v in vals}
    if len(rows) != 1:
        raise DimensionError(f"concat-cols: row counts differ {[v.shape for v in vals]}")


_register("concat-cols", _concat_fwd, _concat_bwd, _check_concat)
_register("scale", lambda at, a: a * at, lambda at, g, out, a: (g * at,))
_register("neg", lambda at, a: -a, lambda at, g, out, a: (-g,))
_register("exp", lambda at, a: np.exp(a), lambda at, g, out, a: (g * out,))
_register("log", lambda at, a: np.log(a), lambda at, g, out, a: (g / a,))
_register("relu", lambda at, a: np.maximum(a, 0.0), lambda at, g, out, a: (g * (a > 0),))
def _leaky_fwd(at, a):
    # valid for slopes in [0, 1]
    return np.maximum(a, at * a)


def _leaky_bwd(at, g, out, a):
    d = np.where(a > 0, 1.0, at)
    return (g * d,)


_register("leaky-relu", _leaky_fwd, _leaky_bwd)


def _sigmoid(a):
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


_register("sigmoid", lambda at, a: _sigmoid(a), lambda at, g, out, a: (g * out * (1.0 - out),))


def _softmax_fwd(at, a):
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd(at, g, out, a):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


_register("row-softmax", _softmax_fwd, _softmax_bwd)


def _maxpool_bwd(at, g, out, a):
    # ties route to the first maximal row
    idx = a.argmax(axis=0)
    ga = np.zeros_like(a)
    ga[idx, np.arange(a.shape[1])] = g[0]
    return (ga,)


_register("row-max-pool", lambda at, a: a.max(axis=0, keepdims=True), _maxpool_bwd)


def _check_mask(at, a):
    if at.shape != a.shape:
        raise DimensionError(f"dropout-mask: mask {at.shape} does not match input {a.shape}")


_register("dropout-mask", lambda at, a: a * at, lambda at, g, out, a: (g * at,), _check_mask)
_register("transpose", lambda at, a: a.T.copy(), lambda at, g, out, a: (g.T,))


def _check_reshape(at, a):
    if a.size != at[0] * at[1]:
        raise DimensionError(f"reshape: cannot view {a.shape} as {at}")


_register(
    "reshape",
    lambda at, a: a.reshape(at),
    lambda at, g, out, a: (g.reshape(a.shape),),
    _check_reshape,
)
_register("sum", lambda at, a: a.sum().reshape(1, 1), lambda at, g, out, a: (np.full_like(a, g[0, 0]),))
_register(
    "mean-rows",
    lambda at, a: a.mean(axis=0, keepdims=True),
    lambda at, g, out, a: (np.repeat(g, a.shape[0], axis=0) / a.shape[0],),
)


def _pairwise_fwd(at, a, b, e=None):
    # row i*m + j holds a[i] + b[j] (+ w[i, j] * e)
    n, m = a.shape[0], b.shape[0]
    out = a[:, None, :] + b[None, :, :]
    if e is not None:
        out += at[:, :, None] * e
    return out.reshape(n * m, a.shape[1])


def _pairwise_bwd(at, g, out, a, b, e=None):
    n, m = a.shape[0], b.shape[0]
    g3 = g.reshape(n, m, a.shape[1])
    if e is None:
        return g3.sum(axis=1), g3.sum(axis=0)
    return g3.sum(axis=1), g3.sum(axis=0), at.reshape(1, n * m) @ g


def _check_pairwise(at, a, b, e=None):
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise-add: column counts differ {a.shape} vs {b.shape}")
    if e is not None:
        if e.shape != (1, a.shape[1]):
            raise DimensionError(f"pairwise-add: edge vector must be (1, {a.shape[1]}), got {e.shape}")
        if at.shape != (a.shape[0], b.shape[0]):
            raise DimensionError(f"pairwise-add: weights {at.shape} do not match ({a.shape[0]}, {b.shape[0]})")


_register("pairwise-add", _pairwise_fwd, _pairwise_bwd, _check_pairwise)

BCE_CLAMP = 1e-12


def _bce_fwd(at, p):
    y, w = at
    q = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(w * y * np.log(q) + (1.0 - y) * np.log1p(-q))


def _bce_bwd(at, g, out, p):
    y, w = at
    q = np.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return (g * (-w * y / q + (1.0 - y) / (1.0 - q)),)


def _check_bce(at, p):
    if p.shape != (1, 1):
        raise DimensionError(f"weighted-bce: prediction must be 1x1, got {p.shape}")


_register("weighted-bce", _bce_fwd, _bce_bwd, _check_bce)


def _apply(op: str, inputs: tuple[Node, ...], attrs=None) -> Node:
    d = OPS[op]
    vals = [n.value for n in inputs]
    if d.check is not None:
        d.check(attrs, *vals)
    rg = False
    for n in inputs:
        if n.requires_grad:
            rg = True
            break
    return Node(op, inputs, d.forward(attrs, *vals), rg, attrs)


# ---------------------------------------------------------------------------
# public op constructors
# ---------------------------------------------------------------------------


def matmul(a: Node, b: Node) -> Node:
    return _apply("matmul", (a, b))


def add(a: Node, b: Node) -> Node:
    return _apply("add", (a, b))


def mul(a: Node, b: Node) -> Node:
    return _apply("mul", (a, b))


def concat_cols(*nodes: Node) -> Node:
    return _apply("concat-cols", tuple(nodes))


def scale(a: Node, k: float) -> Node:
    return _apply("scale", (a,), float(k))


def neg(a: Node) -> Node:
    return _apply("neg", (a,))


def exp(a: Node) -> Node:
    return _apply("exp", (a,))


def log(a: Node) -> Node:
    return _apply("log", (a,))


def relu(a: Node) -> Node:
    return _apply("relu", (a,))


def leaky_relu(a: Node, slope: float = 0.2) -> Node:
    return _apply("leaky-relu", (a,), float(slope))


def sigmoid(a: Node) -> Node:
    return _apply("sigmoid", (a,))


def row_softmax(a: Node) -> Node:
    return _apply("row-softmax", (a,))


def row_max_pool(a: Node) -> Node:
    """Column-wise max over rows: (n, m) -> (1, m)."""
    return _apply("row-max-pool", (a,))


def dropout(a: Node, mask: np.ndarray | None) -> Node:
    """Multiply by a pre-sampled mask; ``None`` means evaluation mode."""
    if mask is None:
        return a
    return _apply("dropout-mask", (a,), np.asarray(mask, dtype=np.float64))


def transpose(a: Node) -> Node:
    return _apply("transpose", (a,))


def reshape(a: Node, rows: int, cols: int) -> Node:
    return _apply("reshape", (a,), (int(rows), int(cols)))


def sum_all(a: Node) -> Node:
    return _apply("sum", (a,))


def mean_rows(a: Node) -> Node:
    return _apply("mean-rows", (a,))


def pairwise_add(a: Node, b: Node, weights: np.ndarray | None = None, e: Node | None = None) -> Node:
    """(n, d), (m, d) -> (n*m, d) with row i*m + j equal to a[i] + b[j].

    With ``weights`` (n, m) and ``e`` (1, d), row i*m + j also gains weights[i, j] * e.
    """
    if (weights is None) != (e is None):
        raise ValueError("pairwise_add: weights and e go together")
    if e is None:
        return _apply("pairwise-add", (a, b))
    return _apply("pairwise-add", (a, b, e), np.asarray(weights, dtype=np.float64))


def weighted_bce(pred: Node, label: int, pos_weight: float) -> Node:
    return _apply("weighted-bce", (pred,), (float(label), float(pos_weight)))


def dropout_mask(rng: np.random.Generator, shape, p: float) -> np.ndarray | None:
    """Inverted-dropout mask with entries 0 or 1/(1-p); ``None`` when p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if p == 0.0:
        return None
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


# ---------------------------------------------------------------------------
# graph traversal
# ---------------------------------------------------------------------------


def topo_order(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n._id in seen:
            continue
        seen[n._id] = n
        stack.extend(n.inputs)
    # creation order is a valid topological order for define-by-run graphs
    return sorted(seen.values(), key=lambda n: n._id)


def forward(root: Node) -> np.ndarray:
    """Re-evaluate every non-leaf node from the current leaf values."""
    for n in topo_order(root):
        if n.op == "input":
            continue
        d = OPS[n.op]
        vals = [p.value for p in n.inputs]
        if d.check is not None:
            d.check(n.attrs, *vals)
        n.value = d.forward(n.attrs, *vals)
        if not np.all(np.isfinite(n.value)):
            raise NumericError(f"{n.op}: non-finite output")
    return root.value


def backward(root: Node) -> dict[Node, np.ndarray]:
    """Populate ``.grad`` on every node that requires it; returns leaf grads."""
    if root.value.shape != (1, 1):
        raise ContractError(f"backward needs a scalar (1x1) root, got {root.value.shape}")
    order = topo_order(root)
    for n in order:
        n.grad = None
    root.grad = np.ones((1, 1))
    leaves = {}
    for n in reversed(order):
        g = n.grad
        if g is None or not n.requires_grad:
            continue
        if n.op == "input":
            leaves[n] = g
            continue
        grads = OPS[n.op].backward(n.attrs, g, n.value, *[p.value for p in n.inputs])
        for p, gp in zip(n.inputs, grads):
            if gp is None or not p.requires_grad:
                continue
            p.grad = gp if p.grad is None else p.grad + gp
    return leaves


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    max_rel_error: float
    worst_index: tuple[int, int]
    passed: bool


@dataclass
class GradCheckReport:
    entries: list[GradCheckEntry] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(e.passed for e in self.entries)

    @property
    def max_rel_error(self) -> float:
        return max((e.max_rel_error for e in self.entries), default=0.0)

    def failures(self) -> list[str]:
        return [e.name for e in self.entries if not e.passed]


def relative_error(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)


def check_gradients(root: Node, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare backward gradients to central differences for every leaf param.

    Parameter values are perturbed in place and restored afterwards.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ValueError(f"step h must lie in [1e-7, 1e-4], got {h}")
    if root.value.shape != (1, 1):
        raise ContractError("check_gradients needs a scalar root")
    order = topo_order(root)
    params = [n for n in order if n.op == "input" and n.requires_grad]
    forward(root)
    backward(root)
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.value)) for p in params}

    report = GradCheckReport()
    for k, p in enumerate(params):
        numeric = np.zeros_like(p.value)
        for idx in np.ndindex(*p.value.shape):
            orig = p.value[idx]
            p.value[idx] = orig + h
            fp = forward(root)[0, 0]
            p.value[idx] = orig - h
            fm = forward(root)[0, 0]
            p.value[idx] = orig
            numeric[idx] = (fp - fm) / (2.0 * h)
        err = relative_error(analytic[id(p)], numeric)
        worst = np.unravel_index(int(err.argmax()), err.shape) if err.size else (0, 0)
        max_err = float(err.max()) if err.size else 0.0
        report.entries.append(
            GradCheckEntry(p.name or f"param{k}", max_err, tuple(int(i) for i in worst), max_err < tol)
        )
    forward(root)
    return report


# ---------------------------------------------------------------------------
# parameters and optimizer
# ---------------------------------------------------------------------------


class ParamSet:
    """Named matrices stored as views into one flat buffer."""

    def __init__(self, shapes: dict[str, tuple[int, int]]):
        self.shapes = dict(shapes)
        self.size = sum(r * c for r, c in self.shapes.values())
        self.flat = np.zeros(self.size)
        self.views: dict[str, np.ndarray] = {}
        self._slices: dict[str, slice] = {}
        off = 0
        for name, (r, c) in self.shapes.items():
            self._slices[name] = slice(off, off + r * c)
            self.views[name] = self.flat[off : off + r * c].reshape(r, c)
            off += r * c

    def __getitem__(self, name: str) -> np.ndarray:
        return self.views[name]

    def __contains__(self, name: str) -> bool:
        return name in self.views

    def names(self) -> list[str]:
        return list(self.shapes)

    def copy(self) -> "ParamSet":
        out = ParamSet(self.shapes)
        out.flat[:] = self.flat
        return out

    def nodes(self) -> dict[str, Node]:
        # views are already 2-D float64; skip re-validation
        return {k: Node("input", (), v, True, name=k) for k, v in self.views.items()}

    def gather_grads(self, nodes: dict[str, Node]) -> np.ndarray:
        g = np.zeros(self.size)
        for name, n in nodes.items():
            if n.grad is not None:
                g[self._slices[name]] = n.grad.ravel()
        return g


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, params: ParamSet, grads: np.ndarray) -> ParamSet:
    """One bias-corrected Adam update, applied in place."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape:
        raise DimensionError(f"adam: gradient shape {grads.shape} != parameter shape {params.flat.shape}")
    if state.m is None:
        state.m = np.zeros_like(params.flat)
        state.v = np.zeros_like(params.flat)
    elif state.m.shape != params.flat.shape:
        raise DimensionError("adam: moment shapes do not match parameters")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1.0 - b1) * grads
    state.v *= b2
    state.v += (1.0 - b2) * grads * grads
    mhat = state.m / (1.0 - b1**state.step)
    vhat = state.v / (1.0 - b2**state.step)
    params.flat -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params


def leaves(root: Node) -> Iterable[Node]:
    return [n for n in topo_order(root) if n.op == "input"]
