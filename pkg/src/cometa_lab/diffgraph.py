"""Small define-by-run autodiff engine over dense float64 matrices.

Every value is a 2-D ``numpy`` array. Nodes are evaluated eagerly when they
are created, so a :class:`Graph` is simply a tape in creation order. The
vector-Jacobian rules are written once against a tiny "ops" interface that is
backed either by plain numpy (fast path) or by the graph itself, which is what
makes ``grad(..., create_graph=True)`` differentiable a second time.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

OPS = (
    "input", "matmul", "add", "mul", "scale", "concat", "slice", "transpose",
    "relu", "sigmoid", "reciprocal", "sum", "repeat", "mean", "bce",
    "take", "scatter",
)

BCE_EPS = 1e-12


class GraphError(Exception):
    pass


class ShapeError(GraphError):
    pass


class MissingFeedError(GraphError):
    pass


@dataclass(eq=False)
class Node:
    id: int
    op: str
    parents: tuple["Node", ...]
    value: np.ndarray
    requires_grad: bool
    name: str | None = None
    meta: dict = field(default_factory=dict)
    graph: "Graph | None" = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node#{self.id}<{self.op}{label} {self.shape}>"


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
    if 0 in arr.shape:
        raise ShapeError(f"dimensions must be positive, got {arr.shape}")
    return arr


def _broadcast_ok(a: tuple, b: tuple) -> bool:
    return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))


def _bce_value(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    return np.array([[loss.mean()]])


def _compute(op: str, vals: Sequence[np.ndarray], meta: dict) -> np.ndarray:
    if op == "matmul":
        return vals[0] @ vals[1]
    if op == "add":
        return vals[0] + vals[1]
    if op == "mul":
        return vals[0] * vals[1]
    if op == "scale":
        return vals[0] * meta["c"]
    if op == "concat":
        return np.concatenate(vals, axis=meta["axis"])
    if op == "slice":
        lo, hi = meta["start"], meta["stop"]
        return vals[0][:, lo:hi] if meta["axis"] == 1 else vals[0][lo:hi, :]
    if op == "transpose":
        return vals[0].T.copy()
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "sigmoid":
        x = vals[0]
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if op == "reciprocal":
        return 1.0 / vals[0]
    if op == "sum":
        return vals[0].sum(axis=meta["axis"], keepdims=True)
    if op == "repeat":
        return np.repeat(vals[0], meta["n"], axis=meta["axis"])
    if op == "mean":
        return np.array([[vals[0].mean()]])
    if op == "bce":
        return _bce_value(vals[0], meta["labels"])
    if op == "take":
        return vals[0][meta["index"]]
    if op == "scatter":
        out = np.zeros((meta["rows"], vals[0].shape[1]))
        np.add.at(out, meta["index"], vals[0])
        return out
    raise GraphError(f"unknown op {op!r}")


def _infer_shape(op: str, shapes: Sequence[tuple], meta: dict) -> tuple:
    """Output shape for ``op``; raises ShapeError on inconsistent operands."""
    if op == "matmul":
        (n, k), (k2, m) = shapes
        if k != k2:
            raise ShapeError(f"matmul inner dimensions differ: {shapes[0]} @ {shapes[1]}")
        return (n, m)
    if op in ("add", "mul"):
        a, b = shapes
        if not _broadcast_ok(a, b):
            raise ShapeError(f"{op} operands not broadcastable: {a} vs {b}")
        return (max(a[0], b[0]), max(a[1], b[1]))
    if op in ("scale", "relu", "sigmoid", "reciprocal"):
        return shapes[0]
    if op == "concat":
        ax = meta["axis"]
        other = 1 - ax
        if len({s[other] for s in shapes}) != 1:
            raise ShapeError(f"concat along axis {ax} needs equal axis-{other} sizes: {list(shapes)}")
        out = [0, 0]
        out[other] = shapes[0][other]
        out[ax] = sum(s[ax] for s in shapes)
        return tuple(out)
    if op == "slice":
        ax = meta["axis"]
        lo, hi = meta["start"], meta["stop"]
        if not 0 <= lo < hi <= shapes[0][ax]:
            raise ShapeError(f"slice [{lo}:{hi}] out of range for axis {ax} of {shapes[0]}")
        out = list(shapes[0])
        out[ax] = hi - lo
        return tuple(out)
    if op == "transpose":
        return shapes[0][::-1]
    if op == "sum":
        out = list(shapes[0])
        out[meta["axis"]] = 1
        return tuple(out)
    if op == "repeat":
        if shapes[0][meta["axis"]] != 1:
            raise ShapeError(f"repeat expects size 1 along axis {meta['axis']}, got {shapes[0]}")
        out = list(shapes[0])
        out[meta["axis"]] = meta["n"]
        return tuple(out)
    if op == "mean":
        return (1, 1)
    if op == "bce":
        if shapes[0] != meta["labels"].shape:
            raise ShapeError(f"bce predictions {shapes[0]} vs labels {meta['labels'].shape}")
        return (1, 1)
    if op == "take":
        idx = meta["index"]
        if idx.size and (idx.min() < 0 or idx.max() >= shapes[0][0]):
            raise ShapeError(f"take index out of range for table with {shapes[0][0]} rows")
        return (len(idx), shapes[0][1])
    if op == "scatter":
        if len(meta["index"]) != shapes[0][0]:
            raise ShapeError("scatter index length must match gradient rows")
        return (meta["rows"], shapes[0][1])
    raise GraphError(f"unknown op {op!r}")


class Graph:
    """A tape of eagerly evaluated nodes."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _new(self, op: str, parents: Sequence[Node], meta: dict | None = None,
             name: str | None = None) -> Node:
        meta = meta or {}
        for p in parents:
            if p.graph is not self:
                raise GraphError(f"{p!r} belongs to a different graph")
        try:
            shape = _infer_shape(op, [p.shape for p in parents], meta)
        except ShapeError as exc:
            where = ", ".join(repr(p) for p in parents)
            raise ShapeError(f"node #{len(self.nodes)} ({op} of {where}): {exc}") from None
        value = _compute(op, [p.value for p in parents], meta)
        assert value.shape == shape
        node = Node(len(self.nodes), op, tuple(parents), value,
                    any(p.requires_grad for p in parents), name, meta, self)
        self.nodes.append(node)
        return node

    # leaves --------------------------------------------------------------
    def input(self, value, requires_grad: bool = False, name: str | None = None,
              placeholder: bool = False) -> Node:
        arr = _as_matrix(value)
        node = Node(len(self.nodes), "input", (), arr, requires_grad, name,
                    {"placeholder": placeholder}, self)
        self.nodes.append(node)
        return node

    def const(self, value, name: str | None = None) -> Node:
        return self.input(value, requires_grad=False, name=name)

    def param(self, value, name: str | None = None) -> Node:
        return self.input(value, requires_grad=True, name=name)

    # operations ----------------------------------------------------------
    def matmul(self, a: Node, b: Node) -> Node:
        return self._new("matmul", (a, b))

    def add(self, a: Node, b: Node) -> Node:
        return self._new("add", (a, b))

    def mul(self, a: Node, b: Node) -> Node:
        return self._new("mul", (a, b))

    def scale(self, a: Node, c: float) -> Node:
        return self._new("scale", (a,), {"c": float(c)})

    def concat(self, parts: Sequence[Node], axis: int = 1) -> Node:
        parts = tuple(parts)
        if len(parts) == 1:
            return parts[0]
        bounds = np.cumsum([0] + [p.shape[axis] for p in parts]).tolist()
        return self._new("concat", parts, {"axis": axis, "bounds": bounds})

    def slice(self, a: Node, start: int, stop: int, axis: int = 1) -> Node:
        return self._new("slice", (a,), {"start": start, "stop": stop, "axis": axis})

    def transpose(self, a: Node) -> Node:
        return self._new("transpose", (a,))

    def relu(self, a: Node) -> Node:
        return self._new("relu", (a,))

    def sigmoid(self, a: Node) -> Node:
        return self._new("sigmoid", (a,))

    def reciprocal(self, a: Node) -> Node:
        return self._new("reciprocal", (a,))

    def sum(self, a: Node, axis: int) -> Node:
        return self._new("sum", (a,), {"axis": axis})

    def repeat(self, a: Node, n: int, axis: int) -> Node:
        return self._new("repeat", (a,), {"n": int(n), "axis": axis})

    def mean(self, a: Node) -> Node:
        return self._new("mean", (a,))

    def bce(self, predictions: Node, labels) -> Node:
        y = np.asarray(labels, dtype=np.float64).reshape(predictions.shape)
        return self._new("bce", (predictions,), {"labels": y})

    def take(self, table: Node, index) -> Node:
        idx = np.asarray(index, dtype=np.int64).ravel()
        if idx.size == 0:
            raise ShapeError("take needs at least one index")
        return self._new("take", (table,), {"index": idx})

    def scatter(self, rows_grad: Node, index, n_rows: int) -> Node:
        idx = np.asarray(index, dtype=np.int64).ravel()
        return self._new("scatter", (rows_grad,), {"index": idx, "rows": int(n_rows)})

    def one_minus(self, a: Node) -> Node:
        return self.add(self.scale(a, -1.0), self.const(np.ones((1, 1))))

    def broadcast_to(self, a: Node, shape: tuple[int, int]) -> Node:
        for axis in (0, 1):
            if a.shape[axis] == 1 and shape[axis] != 1:
                a = self.repeat(a, shape[axis], axis)
        return a

    def unbroadcast(self, a: Node, shape: tuple[int, int]) -> Node:
        for axis in (0, 1):
            if shape[axis] == 1 and a.shape[axis] != 1:
                a = self.sum(a, axis)
        return a

    # replay --------------------------------------------------------------
    def forward(self, feeds: Mapping[str | Node, object], root: Node | None = None) -> np.ndarray:
        return forward(self, feeds, root)


# ---------------------------------------------------------------------------
# Two backends for the VJP rules.

class _NumpyOps:
    """VJP backend on raw arrays; no graph is recorded."""

    @staticmethod
    def val(x):
        return x

    def const(self, v):
        return v

    def matmul(self, a, b):
        return a @ b

    def add(self, a, b):
        return a + b

    def mul(self, a, b):
        return a * b

    def scale(self, a, c):
        return a * c

    def transpose(self, a):
        return a.T

    def slice(self, a, lo, hi, axis):
        return a[:, lo:hi] if axis == 1 else a[lo:hi, :]

    def pad(self, a, lo, total, axis):
        shape = list(a.shape)
        shape[axis] = total
        out = np.zeros(shape)
        if axis == 1:
            out[:, lo:lo + a.shape[1]] = a
        else:
            out[lo:lo + a.shape[0], :] = a
        return out

    def reciprocal(self, a):
        return 1.0 / a

    def one_minus(self, a):
        return 1.0 - a

    def broadcast_to(self, a, shape):
        return np.broadcast_to(a, shape).copy()

    def unbroadcast(self, a, shape):
        for axis in (0, 1):
            if shape[axis] == 1 and a.shape[axis] != 1:
                a = a.sum(axis=axis, keepdims=True)
        return a

    def take(self, a, idx):
        return a[idx]

    def scatter(self, a, idx, rows):
        out = np.zeros((rows, a.shape[1]))
        np.add.at(out, idx, a)
        return out


class _GraphOps:
    """VJP backend that records every step, enabling higher-order gradients."""

    def __init__(self, graph: Graph):
        self.g = graph

    @staticmethod
    def val(x):
        return x.value

    def const(self, v):
        return self.g.const(v)

    def matmul(self, a, b):
        return self.g.matmul(a, b)

    def add(self, a, b):
        return self.g.add(a, b)

    def mul(self, a, b):
        return self.g.mul(a, b)

    def scale(self, a, c):
        return self.g.scale(a, c)

    def transpose(self, a):
        return self.g.transpose(a)

    def slice(self, a, lo, hi, axis):
        return self.g.slice(a, lo, hi, axis)

    def pad(self, a, lo, total, axis):
        parts = []
        shape = list(a.shape)
        if lo > 0:
            shape[axis] = lo
            parts.append(self.g.const(np.zeros(shape)))
        parts.append(a)
        rest = total - lo - a.shape[axis]
        if rest > 0:
            shape[axis] = rest
            parts.append(self.g.const(np.zeros(shape)))
        return self.g.concat(parts, axis)

    def reciprocal(self, a):
        return self.g.reciprocal(a)

    def one_minus(self, a):
        return self.g.one_minus(a)

    def broadcast_to(self, a, shape):
        return self.g.broadcast_to(a, shape)

    def unbroadcast(self, a, shape):
        return self.g.unbroadcast(a, shape)

    def take(self, a, idx):
        return self.g.take(a, idx)

    def scatter(self, a, idx, rows):
        return self.g.scatter(a, idx, rows)


def _vjp(ops, node: Node, g, ins: Sequence, out) -> list:
    """Gradients w.r.t. each parent. ``ins``/``out`` are arrays or nodes per backend."""
    op = node.op
    if op == "matmul":
        a, b = ins
        return [ops.matmul(g, ops.transpose(b)), ops.matmul(ops.transpose(a), g)]
    if op == "add":
        return [ops.unbroadcast(g, p.shape) for p in node.parents]
    if op == "mul":
        a, b = ins
        return [ops.unbroadcast(ops.mul(g, b), node.parents[0].shape),
                ops.unbroadcast(ops.mul(g, a), node.parents[1].shape)]
    if op == "scale":
        return [ops.scale(g, node.meta["c"])]
    if op == "concat":
        ax, bounds = node.meta["axis"], node.meta["bounds"]
        return [ops.slice(g, bounds[i], bounds[i + 1], ax) for i in range(len(node.parents))]
    if op == "slice":
        ax = node.meta["axis"]
        return [ops.pad(g, node.meta["start"], node.parents[0].shape[ax], ax)]
    if op == "transpose":
        return [ops.transpose(g)]
    if op == "relu":
        # the mask is piecewise constant, so it enters as a constant
        return [ops.mul(g, ops.const((node.parents[0].value > 0).astype(np.float64)))]
    if op == "sigmoid":
        return [ops.mul(g, ops.mul(out, ops.one_minus(out)))]
    if op == "reciprocal":
        return [ops.scale(ops.mul(g, ops.mul(out, out)), -1.0)]
    if op == "sum":
        return [ops.broadcast_to(g, node.parents[0].shape)]
    if op == "repeat":
        return [ops.unbroadcast(g, node.parents[0].shape)]
    if op == "mean":
        shape = node.parents[0].shape
        return [ops.scale(ops.broadcast_to(g, shape), 1.0 / (shape[0] * shape[1]))]
    if op == "bce":
        (p,) = ins
        y = node.meta["labels"]
        pv = node.parents[0].value
        inside = ((pv > BCE_EPS) & (pv < 1.0 - BCE_EPS)).astype(np.float64)
        # d/dp = (p - y) / (p (1 - p)) / N, zero where the clamp is active;
        # clamped entries are swapped for 0.5 first so 0 * inf never happens
        p = ops.add(ops.mul(p, ops.const(inside)), ops.const(0.5 * (1.0 - inside)))
        num = ops.add(p, ops.const(-y))
        den = ops.reciprocal(ops.mul(p, ops.one_minus(p)))
        local = ops.mul(ops.mul(num, den), ops.const(inside / y.size))
        return [ops.mul(ops.broadcast_to(g, pv.shape), local)]
    if op == "take":
        return [ops.scatter(g, node.meta["index"], node.parents[0].shape[0])]
    if op == "scatter":
        return [ops.take(g, node.meta["index"])]
    raise GraphError(f"no gradient rule for op {op!r}")


def grad(loss: Node, wrt: Sequence[Node], create_graph: bool = False) -> list:
    """Gradients of a scalar ``loss`` w.r.t. ``wrt``.

    With ``create_graph`` the results are nodes of the same graph and can be
    differentiated again; otherwise they are arrays. Nodes that the loss does
    not depend on get zeros.
    """
    graph = loss.graph
    if loss.shape != (1, 1):
        raise GraphError(f"loss must be scalar (1, 1), got {loss.shape}")
    ops = _GraphOps(graph) if create_graph else _NumpyOps()
    # Only nodes on a path loss <- ... <- wrt need a gradient.
    targets = {n.id for n in wrt}
    needed = _relevant(loss, targets)
    grads: dict[int, object] = {loss.id: ops.const(np.ones((1, 1)))}
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = grads.pop(node.id, None) if node.id not in targets else grads.get(node.id)
        if g is None or node.op == "input":
            continue
        ins = node.parents if create_graph else [p.value for p in node.parents]
        out = node if create_graph else node.value
        parent_grads = None
        for i, p in enumerate(node.parents):
            if p.id not in needed:
                continue
            if parent_grads is None:
                parent_grads = _vjp(ops, node, g, ins, out)
            pg = parent_grads[i]
            grads[p.id] = pg if p.id not in grads else ops.add(grads[p.id], pg)
    result = []
    for n in wrt:
        if n.id in grads:
            result.append(grads[n.id])
        else:
            result.append(ops.const(np.zeros(n.shape)))
    return result


def _relevant(loss: Node, targets: set[int]) -> set[int]:
    """Ids of nodes that are ancestors of the loss and descendants of a target."""
    graph = loss.graph
    reaches = set()
    for node in graph.nodes[: loss.id + 1]:
        if node.id in targets or any(p.id in reaches for p in node.parents):
            reaches.add(node.id)
    ancestors = {loss.id}
    for node in reversed(graph.nodes[: loss.id + 1]):
        if node.id in ancestors:
            ancestors.update(p.id for p in node.parents)
    return reaches & ancestors


def backward(loss: Node) -> dict[int, np.ndarray]:
    """GradientMap over every ``requires_grad`` node up to ``loss``."""
    nodes = [n for n in loss.graph.nodes[: loss.id + 1] if n.requires_grad]
    return {n.id: gval for n, gval in zip(nodes, grad(loss, nodes))}


def forward(graph: Graph, feeds: Mapping[str | Node, object], root: Node | None = None) -> np.ndarray:
    """Re-evaluate the tape with new input values and return ``root``'s value."""
    by_name = {n.name: n for n in graph.nodes if n.op == "input" and n.name}
    values: dict[int, np.ndarray] = {}
    for key, value in feeds.items():
        node = key if isinstance(key, Node) else by_name.get(key)
        if node is None or node.op != "input":
            raise MissingFeedError(f"feed {key!r} does not name an input node")
        arr = _as_matrix(value)
        if arr.shape != node.shape:
            raise ShapeError(f"feed for {node!r} has shape {arr.shape}")
        values[node.id] = arr
    for node in graph.nodes:
        if node.op == "input":
            if node.meta.get("placeholder") and node.id not in values:
                raise MissingFeedError(f"input {node!r} was not fed")
            node.value = values.get(node.id, node.value)
        else:
            node.value = _compute(node.op, [p.value for p in node.parents], node.meta)
    root = root if root is not None else graph.nodes[-1]
    return root.value


# ---------------------------------------------------------------------------
# Optimisers

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update, applied in place to ``params``.

    Parameters missing from ``grads`` are treated as having zero gradient.
    """
    for key, g in grads.items():
        if key not in params:
            raise KeyError(f"gradient for unknown parameter {key!r}")
        if g.shape != params[key].shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {key!r} shape {params[key].shape}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key, p in params.items():
        g = grads.get(key)
        if key not in state.m:
            state.m[key] = np.zeros_like(p)
            state.v[key] = np.zeros_like(p)
        m, v = state.m[key], state.v[key]
        if g is None:
            m *= state.beta1
            v *= state.beta2
        else:
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def sgd_step(tensor, grad_value, eta: float):
    """``tensor - eta * grad``; stays differentiable when given graph nodes."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    if isinstance(tensor, Node):
        g = grad_value if isinstance(grad_value, Node) else tensor.graph.const(grad_value)
        if g.shape != tensor.shape:
            raise ShapeError(f"sgd_step shapes differ: {tensor.shape} vs {g.shape}")
        if eta == 0.0:
            return tensor
        return tensor.graph.add(tensor, tensor.graph.scale(g, -eta))
    t = np.asarray(tensor, dtype=np.float64)
    g = np.asarray(grad_value, dtype=np.float64)
    if t.shape != g.shape:
        raise ShapeError(f"sgd_step shapes differ: {t.shape} vs {g.shape}")
    if eta == 0.0:
        return t.copy()
    return t - eta * g


def finite_difference(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function of one array."""
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn(x)
        x[i] = orig - h
        fm = fn(x)
        x[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out
