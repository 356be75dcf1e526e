"""Computation graphs over flat float64 vectors.

A :class:`Graph` is a topologically ordered list of nodes.  The same object is
evaluated (:func:`forward`), differentiated (:func:`backward`) and bounded by
the verifier, so every node kind has a forward rule, an adjoint rule and a
bound rule somewhere in the package.

Values are stored flat in row-major order; a node's ``shape`` is metadata used
for reshaping at the edges.  Batched evaluation uses a leading batch axis, so
internally every value has shape ``(batch, size)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from math import prod
from typing import Any, Mapping

import numpy as np

LINEAR_KINDS = frozenset(
    {"input", "constant", "affine", "neg", "add", "sub", "scalar_mul",
     "concat", "slice", "reshape"}
)
ACTIVATION_KINDS = frozenset({"relu", "leaky_relu", "tanh"})
KINDS = LINEAR_KINDS | ACTIVATION_KINDS | {"min2", "max2"}


class GraphError(ValueError):
    """Malformed graph or inputs that do not fit it."""


@dataclass(frozen=True)
class Node:
    kind: str
    parents: tuple[int, ...]
    shape: tuple[int, ...]
    params: Mapping[str, Any] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return prod(self.shape)


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)


class Graph:
    """Builder and container for a computation graph.

    Builder methods append a node and return its integer id.  Node ids are
    positions in :attr:`nodes`, so parents always precede children.

    >>> g = Graph()
    >>> x = g.input("x", 1)
    >>> g.output = g.affine(x, [[2.0]], [1.0])
    >>> g.evaluate({"x": [3.0]})
    array([7.])
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.inputs: dict[str, int] = {}
        self.output: int | None = None

    def __len__(self):
        return len(self.nodes)

    # -- builders ---------------------------------------------------------

    def _add(self, kind, parents, shape, **params) -> int:
        for p in parents:
            if not 0 <= p < len(self.nodes):
                raise GraphError(f"parent {p} does not precede new node")
        self.nodes.append(Node(kind, tuple(int(p) for p in parents), _as_shape(shape), params))
        return len(self.nodes) - 1

    def _size(self, i: int) -> int:
        return self.nodes[i].size

    def input(self, name: str, shape) -> int:
        if name in self.inputs:
            raise GraphError(f"duplicate input {name!r}")
        i = self._add("input", (), shape, name=name)
        self.inputs[name] = i
        return i

    def constant(self, value) -> int:
        value = np.asarray(value, dtype=float)
        return self._add("constant", (), value.shape or (1,), value=value.reshape(-1).copy())

    def affine(self, x: int, weight, bias=None) -> int:
        weight = np.atleast_2d(np.asarray(weight, dtype=float))
        if weight.shape[1] != self._size(x):
            raise GraphError(f"affine weight {weight.shape} does not fit input of size {self._size(x)}")
        bias = np.zeros(weight.shape[0]) if bias is None else np.asarray(bias, dtype=float).reshape(-1)
        if bias.shape != (weight.shape[0],):
            raise GraphError("affine bias length must equal weight rows")
        return self._add("affine", (x,), (weight.shape[0],), weight=weight.copy(), bias=bias.copy())

    def relu(self, x: int) -> int:
        return self._add("relu", (x,), self.nodes[x].shape)

    def leaky_relu(self, x: int, slope: float = 0.01) -> int:
        return self._add("leaky_relu", (x,), self.nodes[x].shape, slope=float(slope))

    def tanh(self, x: int) -> int:
        return self._add("tanh", (x,), self.nodes[x].shape)

    def neg(self, x: int) -> int:
        return self._add("neg", (x,), self.nodes[x].shape)

    def scalar_mul(self, x: int, c: float) -> int:
        return self._add("scalar_mul", (x,), self.nodes[x].shape, c=float(c))

    def _binary(self, kind, a, b) -> int:
        if self._size(a) != self._size(b):
            raise GraphError(f"{kind}: sizes {self._size(a)} and {self._size(b)} differ")
        return self._add(kind, (a, b), self.nodes[a].shape)

    def add(self, a: int, b: int) -> int:
        return self._binary("add", a, b)

    def sub(self, a: int, b: int) -> int:
        return self._binary("sub", a, b)

    def min2(self, a: int, b: int) -> int:
        return self._binary("min2", a, b)

    def max2(self, a: int, b: int) -> int:
        return self._binary("max2", a, b)

    def concat(self, parts, axis: int = 0) -> int:
        # flat row-major storage makes axis-0 concat a plain flat concat
        if axis != 0:
            raise GraphError("only axis-0 concatenation is supported")
        parts = list(parts)
        if not parts:
            raise GraphError("concat needs at least one part")
        tails = {self.nodes[p].shape[1:] for p in parts}
        if len(tails) == 1:
            tail = tails.pop()
            shape = (sum(self.nodes[p].shape[0] if self.nodes[p].shape else 1 for p in parts),) + tail
        else:
            shape = (sum(self._size(p) for p in parts),)
        return self._add("concat", parts, shape)

    def slice(self, x: int, index, shape=None) -> int:
        """Gather flat positions ``index`` of ``x`` (repeats allowed)."""
        index = np.asarray(index, dtype=np.int64).reshape(-1)
        if index.size and (index.min() < 0 or index.max() >= self._size(x)):
            raise GraphError("slice index out of range")
        return self._add("slice", (x,), shape if shape is not None else (index.size,), index=index)

    def reshape(self, x: int, shape) -> int:
        shape = _as_shape(shape)
        if prod(shape) != self._size(x):
            raise GraphError(f"cannot reshape size {self._size(x)} to {shape}")
        return self._add("reshape", (x,), shape)

    # -- convenience ------------------------------------------------------

    def evaluate(self, inputs: Mapping[str, Any]) -> np.ndarray:
        """Output value for one input binding (or a batch, with leading axis)."""
        values, batched = _forward(self, inputs)
        out = values[self._output_id()]
        if batched:
            return out.reshape((out.shape[0],) + self.nodes[self._output_id()].shape)
        return out[0].reshape(self.nodes[self._output_id()].shape)

    def _output_id(self) -> int:
        if self.output is None:
            raise GraphError("graph has no designated output")
        return self.output

    def output_node(self) -> Node:
        return self.nodes[self._output_id()]

    def has_kind(self, *kinds: str) -> bool:
        return any(n.kind in kinds for n in self.nodes)

    def consumers(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for i, n in enumerate(self.nodes):
            for p in n.parents:
                out[p].append(i)
        return out

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        nodes = []
        for n in self.nodes:
            params = {}
            for k, v in n.params.items():
                params[k] = v.tolist() if isinstance(v, np.ndarray) else v
            nodes.append({"kind": n.kind, "parents": list(n.parents),
                          "shape": list(n.shape), "params": params})
        return {"format": "certiplan.graph", "version": 1, "nodes": nodes,
                "inputs": dict(self.inputs), "output": self.output}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Graph":
        if d.get("format") != "certiplan.graph":
            raise GraphError("not a certiplan graph document")
        g = cls()
        for raw in d["nodes"]:
            kind = raw["kind"]
            if kind not in KINDS:
                raise GraphError(f"unknown node kind {kind!r}")
            params = dict(raw.get("params", {}))
            if kind == "affine":
                params["weight"] = np.asarray(params["weight"], dtype=float).reshape(-1, g._size(raw["parents"][0]))
                params["bias"] = np.asarray(params["bias"], dtype=float)
            elif kind == "constant":
                params["value"] = np.asarray(params["value"], dtype=float).reshape(-1)
            elif kind == "slice":
                params["index"] = np.asarray(params["index"], dtype=np.int64)
            g._add(kind, raw["parents"], raw["shape"], **params)
        g.inputs = {k: int(v) for k, v in d["inputs"].items()}
        g.output = d.get("output")
        validate(g)
        return g

    def dumps(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text: str) -> "Graph":
        return cls.from_dict(json.loads(text))


def validate(g: Graph) -> None:
    """Check ordering and edge shapes; raise :class:`GraphError` on failure."""
    for i, n in enumerate(g.nodes):
        if any(p >= i for p in n.parents):
            raise GraphError(f"node {i} has a parent that does not precede it")
        sizes = [g.nodes[p].size for p in n.parents]
        if n.kind == "affine":
            w = n.params["weight"]
            if w.shape != (n.size, sizes[0]):
                raise GraphError(f"node {i}: affine weight shape {w.shape}")
        elif n.kind in ("add", "sub", "min2", "max2"):
            if sizes[0] != sizes[1] or sizes[0] != n.size:
                raise GraphError(f"node {i}: operand sizes {sizes}")
        elif n.kind == "concat":
            if sum(sizes) != n.size:
                raise GraphError(f"node {i}: concat size mismatch")
        elif n.kind == "slice":
            if n.params["index"].size != n.size:
                raise GraphError(f"node {i}: slice size mismatch")
        elif n.kind in ACTIVATION_KINDS | {"neg", "scalar_mul", "reshape"}:
            if sizes[0] != n.size:
                raise GraphError(f"node {i}: size mismatch")
    for name, i in g.inputs.items():
        if g.nodes[i].kind != "input" or g.nodes[i].params["name"] != name:
            raise GraphError(f"input table entry {name!r} is inconsistent")
    if g.output is not None and not 0 <= g.output < len(g.nodes):
        raise GraphError("output id out of range")


# ---------------------------------------------------------------------------
# forward / backward


def _bind_inputs(g: Graph, inputs: Mapping[str, Any]):
    missing = set(g.inputs) - set(inputs)
    if missing:
        raise GraphError(f"unbound inputs: {sorted(missing)}")
    bound = {}
    batched = False
    for name, i in g.inputs.items():
        a = np.asarray(inputs[name], dtype=float)
        size = g.nodes[i].size
        shape = g.nodes[i].shape
        if a.shape in ((size,), shape) or (a.ndim == 0 and size == 1):
            a = a.reshape(1, size)
        elif a.shape[1:] in ((size,), shape):
            a = a.reshape(a.shape[0], size)
            batched = True
        else:
            raise GraphError(f"input {name!r}: shape {a.shape} does not fit {g.nodes[i].shape}")
        bound[i] = a
    sizes = {a.shape[0] for a in bound.values()}
    if len(sizes - {1}) > 1:
        raise GraphError("inputs disagree on batch size")
    batch = max(sizes) if sizes else 1
    for i, a in bound.items():
        if a.shape[0] != batch:
            bound[i] = np.repeat(a, batch, axis=0)
    return bound, batch, batched


def _forward(g: Graph, inputs: Mapping[str, Any]):
    bound, batch, batched = _bind_inputs(g, inputs)
    vals: list[np.ndarray] = []
    for i, n in enumerate(g.nodes):
        k = n.kind
        if k == "input":
            v = bound[i]
        else:
            xs = [vals[p] for p in n.parents]
            if k == "constant":
                v = np.broadcast_to(n.params["value"], (batch, n.size))
            elif k == "affine":
                v = xs[0] @ n.params["weight"].T + n.params["bias"]
            elif k == "relu":
                v = np.maximum(xs[0], 0.0)
            elif k == "leaky_relu":
                v = np.where(xs[0] > 0, xs[0], n.params["slope"] * xs[0])
            elif k == "tanh":
                v = np.tanh(xs[0])
            elif k == "neg":
                v = -xs[0]
            elif k == "scalar_mul":
                v = n.params["c"] * xs[0]
            elif k == "add":
                v = xs[0] + xs[1]
            elif k == "sub":
                v = xs[0] - xs[1]
            elif k == "min2":
                v = np.minimum(xs[0], xs[1])
            elif k == "max2":
                v = np.maximum(xs[0], xs[1])
            elif k == "concat":
                v = np.concatenate(xs, axis=1)
            elif k == "slice":
                v = xs[0][:, n.params["index"]]
            elif k == "reshape":
                v = xs[0]
            else:  # pragma: no cover - guarded by KINDS
                raise GraphError(f"unknown node kind {k!r}")
        vals.append(v)
    return vals, batched


def forward(g: Graph, inputs: Mapping[str, Any]) -> list[np.ndarray]:
    """Evaluate every node; returns per-node values of shape ``(batch, size)``."""
    return _forward(g, inputs)[0]


@dataclass
class GradientTape:
    """Result of one reverse pass.

    ``values`` and ``adjoints`` are per-node ``(batch, size)`` arrays (adjoint is
    ``None`` for nodes the output does not depend on).  ``inputs`` maps input
    names to gradients shaped like the bound input; ``params`` maps affine node
    ids to ``(dW, db)`` summed over the batch.
    """

    values: list[np.ndarray]
    adjoints: list[np.ndarray | None]
    inputs: dict[str, np.ndarray]
    params: dict[int, tuple[np.ndarray, np.ndarray]]


def backward(g: Graph, inputs: Mapping[str, Any], seed=None, wrt_params: bool = False) -> GradientTape:
    """Reverse-mode sweep from the output node.

    With ``seed=None`` the output must be scalar and the sweep computes its
    gradient (per batch row).  Otherwise ``seed`` is the output adjoint, shaped
    ``(batch, size)`` or ``(size,)``.

    Kinks follow a fixed convention: ``relu'(0) = 0`` and ``min2``/``max2`` route
    ties to the first parent.
    """
    vals, batched = _forward(g, inputs)
    out = g._output_id()
    batch = vals[0].shape[0] if vals else 1
    if seed is None:
        if g.nodes[out].size != 1:
            raise GraphError("backward without a seed needs a scalar output")
        seed = np.ones((batch, 1))
    seed = np.asarray(seed, dtype=float)
    seed = np.broadcast_to(seed.reshape(-1, g.nodes[out].size), (batch, g.nodes[out].size))
    adj: list[np.ndarray | None] = [None] * len(g.nodes)
    adj[out] = np.array(seed, dtype=float)
    params = {}

    def push(p, a):
        adj[p] = a if adj[p] is None else adj[p] + a

    for i in range(out, -1, -1):
        a = adj[i]
        if a is None:
            continue
        n = g.nodes[i]
        k = n.kind
        ps = n.parents
        if k in ("input", "constant"):
            continue
        if k == "affine":
            w = n.params["weight"]
            push(ps[0], a @ w)
            if wrt_params:
                params[i] = (a.T @ vals[ps[0]], a.sum(axis=0))
        elif k == "relu":
            push(ps[0], a * (vals[ps[0]] > 0))
        elif k == "leaky_relu":
            push(ps[0], a * np.where(vals[ps[0]] > 0, 1.0, n.params["slope"]))
        elif k == "tanh":
            push(ps[0], a * (1.0 - vals[i] ** 2))
        elif k == "neg":
            push(ps[0], -a)
        elif k == "scalar_mul":
            push(ps[0], n.params["c"] * a)
        elif k == "add":
            push(ps[0], a)
            push(ps[1], a)
        elif k == "sub":
            push(ps[0], a)
            push(ps[1], -a)
        elif k in ("min2", "max2"):
            x0, x1 = vals[ps[0]], vals[ps[1]]
            first = (x0 <= x1) if k == "min2" else (x0 >= x1)
            push(ps[0], a * first)
            push(ps[1], a * ~first)
        elif k == "concat":
            off = 0
            for p in ps:
                s = g.nodes[p].size
                push(p, a[:, off:off + s])
                off += s
        elif k == "slice":
            z = np.zeros((batch, g.nodes[ps[0]].size))
            np.add.at(z, (slice(None), n.params["index"]), a)
            push(ps[0], z)
        elif k == "reshape":
            push(ps[0], a)
    grads = {}
    for name, i in g.inputs.items():
        gi = adj[i] if adj[i] is not None else np.zeros((batch, g.nodes[i].size))
        grads[name] = gi.reshape((batch,) + g.nodes[i].shape) if batched else gi[0].reshape(g.nodes[i].shape)
    return GradientTape(vals, adj, grads, params)


def gradient(g: Graph, inputs: Mapping[str, Any], wrt: str) -> np.ndarray:
    """Gradient of the scalar output with respect to input ``wrt``."""
    return backward(g, inputs).inputs[wrt]


# ---------------------------------------------------------------------------
# graph transformations


def _copy_into(dst: Graph, src: Graph, remap: dict[int, int], skip_inputs=()) -> dict[int, int]:
    for i, n in enumerate(src.nodes):
        if i in remap:
            continue
        if n.kind == "input":
            name = n.params["name"]
            if name in skip_inputs:
                continue
            remap[i] = dst.input(name, n.shape)
            continue
        dst.nodes.append(Node(n.kind, tuple(remap[p] for p in n.parents), n.shape, n.params))
        remap[i] = len(dst.nodes) - 1
    return remap


def compose(g1: Graph, g2: Graph, input_name: str | None = None) -> Graph:
    """Graph computing ``g2(g1(.))``.

    ``g1``'s output feeds the input ``input_name`` of ``g2`` (the only input if
    omitted).  Other inputs of ``g2`` carry over by name; names shared with
    ``g1`` are bound to the same input node.
    """
    if input_name is None:
        if len(g2.inputs) != 1:
            raise GraphError("compose: g2 has several inputs; name the one to feed")
        input_name = next(iter(g2.inputs))
    if input_name not in g2.inputs:
        raise GraphError(f"compose: g2 has no input {input_name!r}")
    src = g1._output_id()
    if g1.nodes[src].size != g2.nodes[g2.inputs[input_name]].size:
        raise GraphError(
            f"compose: g1 output size {g1.nodes[src].size} != g2 input size "
            f"{g2.nodes[g2.inputs[input_name]].size}")
    out = Graph()
    m1 = _copy_into(out, g1, {})
    remap = {g2.inputs[input_name]: m1[src]}
    for name, i in g2.inputs.items():
        if name != input_name and name in out.inputs:
            if out.nodes[out.inputs[name]].size != g2.nodes[i].size:
                raise GraphError(f"compose: shared input {name!r} has mismatched sizes")
            remap[i] = out.inputs[name]
    m2 = _copy_into(out, g2, remap)
    out.output = m2[g2._output_id()]
    return out


def rewrite_minmax(g: Graph) -> Graph:
    """Replace min2/max2 by affine+ReLU forms.

    ``min(a, b) = b - relu(b - a)`` and ``max(a, b) = a + relu(b - a)``; the
    result is numerically identical up to rounding and contains only node
    kinds the linear-relaxation bounder handles.
    """
    out = Graph()
    remap: dict[int, int] = {}
    for i, n in enumerate(g.nodes):
        if n.kind == "input":
            remap[i] = out.input(n.params["name"], n.shape)
            continue
        ps = tuple(remap[p] for p in n.parents)
        if n.kind == "min2":
            a, b = ps
            remap[i] = out.sub(b, out.relu(out.sub(b, a)))
        elif n.kind == "max2":
            a, b = ps
            remap[i] = out.add(a, out.relu(out.sub(b, a)))
        else:
            out.nodes.append(Node(n.kind, ps, n.shape, n.params))
            remap[i] = len(out.nodes) - 1
    out.output = remap[g.output] if g.output is not None else None
    return out


def prune(g: Graph) -> Graph:
    """Drop nodes the output does not depend on (inputs are always kept)."""
    out_id = g._output_id()
    live = [False] * len(g.nodes)
    live[out_id] = True
    for i in range(out_id, -1, -1):
        if live[i]:
            for p in g.nodes[i].parents:
                live[p] = True
    out = Graph()
    remap: dict[int, int] = {}
    for i, n in enumerate(g.nodes):
        if n.kind == "input":
            remap[i] = out.input(n.params["name"], n.shape)
        elif live[i]:
            out.nodes.append(Node(n.kind, tuple(remap[p] for p in n.parents), n.shape, n.params))
            remap[i] = len(out.nodes) - 1
    out.output = remap[out_id]
    return out


def identity_graph(size: int, name: str = "x") -> Graph:
    g = Graph()
    x = g.input(name, size)
    g.output = g.reshape(x, (size,))
    return g
