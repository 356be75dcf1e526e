"""Sound output bounds of a computation graph over an input box.

Two bounders share one interface:

``ibp``
    interval arithmetic, node by node.
``crown``
    backward linear relaxation.  Linear coefficients are pushed from the output
    back to the inputs; each activation is replaced by a pair of linear
    bounding functions chosen from the pre-activation interval.  The final
    interval is intersected with the IBP one, so it is never looser.

Bounds are computed in plain float64 without outward rounding; callers compare
with a small slack (``SLACK``).
"""

from __future__ import annotations

import json
import weakref
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .graph import ACTIVATION_KINDS, Graph, GraphError, rewrite_minmax

SLACK = 1e-9

_REWRITES: "weakref.WeakKeyDictionary[Graph, Graph]" = weakref.WeakKeyDictionary()


def _relu_form(g: Graph) -> Graph:
    # graphs are not mutated after construction, so the rewrite can be memoised
    out = _REWRITES.get(g)
    if out is None:
        out = _REWRITES[g] = rewrite_minmax(g)
    return out


class UnsupportedNodeError(GraphError):
    pass


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``[lower, upper]`` (per-dimension)."""

    lower: np.ndarray
    upper: np.ndarray

    def __init__(self, lower, upper):
        lo = np.array(lower, dtype=float).reshape(-1)
        hi = np.array(upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ValueError("box bounds must have equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise ValueError("box bounds must be finite")
        if np.any(lo > hi):
            raise ValueError("box lower bound exceeds upper bound")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def around(cls, center, eps) -> "Box":
        """The eps-ball (in the max norm) around ``center``; ``eps`` may be per-dimension."""
        c = np.asarray(center, dtype=float).reshape(-1)
        e = np.broadcast_to(np.asarray(eps, dtype=float), c.shape)
        return cls(c - e, c + e)

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def radius(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def volume(self) -> float:
        return float(np.prod(self.upper - self.lower))

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return np.all((z >= self.lower) & (z <= self.upper), axis=-1)

    def sample(self, rng, n: int) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d) -> "Box":
        return cls(d["lower"], d["upper"])

    def __eq__(self, other):
        return (isinstance(other, Box) and np.array_equal(self.lower, other.lower)
                and np.array_equal(self.upper, other.upper))

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))


@dataclass
class IntervalBounds:
    lower: list[np.ndarray]
    upper: list[np.ndarray]

    def node(self, i):
        return self.lower[i], self.upper[i]


@dataclass
class LinearBounds:
    """``A_low @ z + b_low <= f(z) <= A_up @ z + b_up`` for ``z`` in the box."""

    A_low: np.ndarray
    b_low: np.ndarray
    A_up: np.ndarray
    b_up: np.ndarray

    def concretize(self, box: Box):
        c, r = box.center, box.radius
        lo = self.A_low @ c - np.abs(self.A_low) @ r + self.b_low
        hi = self.A_up @ c + np.abs(self.A_up) @ r + self.b_up
        return lo, hi


@dataclass(frozen=True)
class SatBounds:
    """Robustness interval and the Boolean satisfaction bounds it implies.

    ``bool_lower == 1`` certifies every point of the box; ``bool_upper == 0``
    proves every point violates.
    """

    rob_lower: float
    rob_upper: float

    @property
    def bool_lower(self) -> int:
        return int(self.rob_lower > 0)

    @property
    def bool_upper(self) -> int:
        return int(self.rob_upper > 0)

    @property
    def certified(self) -> bool:
        return self.bool_lower == 1

    def to_dict(self) -> dict:
        return {"rob_lower": self.rob_lower, "rob_upper": self.rob_upper,
                "bool_lower": self.bool_lower, "bool_upper": self.bool_upper}


# ---------------------------------------------------------------------------
# input intervals


def _input_intervals(g: Graph, box: Box | None, fixed: Mapping | None, free: str | None):
    fixed = dict(fixed or {})
    if free is None:
        unbound = [n for n in g.inputs if n not in fixed]
        if box is not None and len(unbound) != 1:
            raise GraphError(f"cannot tell which input the box ranges over: {unbound}")
        free = unbound[0] if unbound else None
    out = {}
    for name, i in g.inputs.items():
        size = g.nodes[i].size
        if name == free:
            if box is None or box.dim != size:
                raise GraphError(f"box dimension does not match input {name!r} of size {size}")
            out[i] = (box.lower.copy(), box.upper.copy())
        elif name in fixed:
            v = np.asarray(fixed[name], dtype=float).reshape(-1)
            if v.size != size:
                raise GraphError(f"fixed input {name!r} has size {v.size}, expected {size}")
            out[i] = (v, v.copy())
        else:
            raise GraphError(f"input {name!r} is neither the box variable nor fixed")
    return out, free


# ---------------------------------------------------------------------------
# interval bound propagation


def ibp(g: Graph, box: Box | None, fixed_inputs: Mapping | None = None,
        free: str | None = None) -> IntervalBounds:
    """Per-node intervals by interval arithmetic."""
    ins, _ = _input_intervals(g, box, fixed_inputs, free)
    lo: list[np.ndarray] = []
    hi: list[np.ndarray] = []
    for i, n in enumerate(g.nodes):
        k = n.kind
        ps = n.parents
        if k == "input":
            l, u = ins[i]
        elif k == "constant":
            l = u = n.params["value"]
        elif k == "affine":
            w, b = n.params["weight"], n.params["bias"]
            wp, wn = np.maximum(w, 0), np.minimum(w, 0)
            pl, pu = lo[ps[0]], hi[ps[0]]
            l = wp @ pl + wn @ pu + b
            u = wp @ pu + wn @ pl + b
        elif k == "relu":
            l, u = np.maximum(lo[ps[0]], 0), np.maximum(hi[ps[0]], 0)
        elif k == "leaky_relu":
            a = n.params["slope"]
            f = lambda x: np.where(x > 0, x, a * x)  # noqa: E731
            l, u = f(lo[ps[0]]), f(hi[ps[0]])
        elif k == "tanh":
            l, u = np.tanh(lo[ps[0]]), np.tanh(hi[ps[0]])
        elif k == "neg":
            l, u = -hi[ps[0]], -lo[ps[0]]
        elif k == "scalar_mul":
            c = n.params["c"]
            l, u = (c * lo[ps[0]], c * hi[ps[0]]) if c >= 0 else (c * hi[ps[0]], c * lo[ps[0]])
        elif k == "add":
            l, u = lo[ps[0]] + lo[ps[1]], hi[ps[0]] + hi[ps[1]]
        elif k == "sub":
            l, u = lo[ps[0]] - hi[ps[1]], hi[ps[0]] - lo[ps[1]]
        elif k == "min2":
            l, u = np.minimum(lo[ps[0]], lo[ps[1]]), np.minimum(hi[ps[0]], hi[ps[1]])
        elif k == "max2":
            l, u = np.maximum(lo[ps[0]], lo[ps[1]]), np.maximum(hi[ps[0]], hi[ps[1]])
        elif k == "concat":
            l = np.concatenate([lo[p] for p in ps])
            u = np.concatenate([hi[p] for p in ps])
        elif k == "slice":
            idx = n.params["index"]
            l, u = lo[ps[0]][idx], hi[ps[0]][idx]
        elif k == "reshape":
            l, u = lo[ps[0]], hi[ps[0]]
        else:
            raise UnsupportedNodeError(f"ibp: unsupported node kind {k!r}")
        lo.append(np.asarray(l, dtype=float))
        hi.append(np.asarray(u, dtype=float))
    return IntervalBounds(lo, hi)


# ---------------------------------------------------------------------------
# linear relaxations of activations


def relax(kind: str, l: np.ndarray, u: np.ndarray, slope: float = 0.0):
    """Linear bounds ``aL*x + bL <= act(x) <= aU*x + bU`` valid on ``[l, u]``."""
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    aL = np.zeros_like(l)
    bL = np.zeros_like(l)
    aU = np.zeros_like(l)
    bU = np.zeros_like(l)
    if kind in ("relu", "leaky_relu"):
        a = slope if kind == "leaky_relu" else 0.0
        act = u <= 0
        aL[act] = aU[act] = a
        on = l >= 0
        aL[on] = aU[on] = 1.0
        mid = ~(act | on)
        lm, um = l[mid], u[mid]
        chord = (um - a * lm) / (um - lm)
        aU[mid] = chord
        bU[mid] = um - chord * um
        # lower slope: identity if the positive side dominates, else the inactive slope
        aL[mid] = np.where(um >= -lm, 1.0, a)
        return aL, bL, aU, bU
    if kind == "tanh":
        th = np.tanh
        dth = lambda x: 1.0 - np.tanh(x) ** 2  # noqa: E731
        flat = (u - l) < 1e-12
        aL[flat] = aU[flat] = 0.0
        bL[flat] = th(l[flat])
        bU[flat] = th(u[flat])
        rest = ~flat
        lr, ur = l[rest], u[rest]
        chord = (th(ur) - th(lr)) / (ur - lr)
        chord_b = th(lr) - chord * lr
        m = 0.5 * (lr + ur)
        tan_a = dth(m)
        tan_b = th(m) - tan_a * m
        convex = ur <= 0
        concave = lr >= 0
        mixed = ~(convex | concave)
        sub_aL = np.where(convex, tan_a, chord)
        sub_bL = np.where(convex, tan_b, chord_b)
        sub_aU = np.where(convex, chord, tan_a)
        sub_bU = np.where(convex, chord_b, tan_b)
        if np.any(mixed):
            # parallel lines at the chord slope through the extreme offsets
            k = chord[mixed]
            lm, um = lr[mixed], ur[mixed]
            cands = [lm, um]
            x0 = np.arctanh(np.sqrt(np.clip(1.0 - k, 0.0, 1.0 - 1e-16)))
            for x in (x0, -x0):
                cands.append(np.clip(x, lm, um))
            offs = np.stack([th(c) - k * c for c in cands])
            sub_aL[mixed] = k
            sub_aU[mixed] = k
            sub_bL[mixed] = offs.min(axis=0)
            sub_bU[mixed] = offs.max(axis=0)
        aL[rest], bL[rest], aU[rest], bU[rest] = sub_aL, sub_bL, sub_aU, sub_bU
        return aL, bL, aU, bU
    raise UnsupportedNodeError(f"no relaxation for {kind!r}")


# ---------------------------------------------------------------------------
# backward linear relaxation


def _backsub(g: Graph, target: int, bounds: IntervalBounds, relax_cache: dict):
    """Linear bounds of node ``target`` in terms of every input node.

    Returns ``(coef_low, coef_up, bias_low, bias_up)`` where the coefficient
    dicts map input node ids to ``(m, size)`` matrices.
    """
    m = g.nodes[target].size
    AL: dict[int, np.ndarray] = {target: np.eye(m)}
    AU: dict[int, np.ndarray] = {target: np.eye(m)}
    bl = np.zeros(m)
    bu = np.zeros(m)
    inputs_l, inputs_u = {}, {}

    def push(d, p, a):
        if p in d:
            d[p] = d[p] + a
        else:
            d[p] = a

    for i in range(target, -1, -1):
        if i not in AL:
            continue
        al = AL.pop(i)
        au = AU.pop(i)
        n = g.nodes[i]
        k = n.kind
        ps = n.parents
        if k == "input":
            inputs_l[i], inputs_u[i] = al, au
        elif k == "constant":
            v = n.params["value"]
            bl += al @ v
            bu += au @ v
        elif k == "affine":
            w, b = n.params["weight"], n.params["bias"]
            push(AL, ps[0], al @ w)
            push(AU, ps[0], au @ w)
            bl += al @ b
            bu += au @ b
        elif k in ("neg", "scalar_mul"):
            c = -1.0 if k == "neg" else n.params["c"]
            push(AL, ps[0], c * al)
            push(AU, ps[0], c * au)
        elif k == "add":
            for p in ps:
                push(AL, p, al)
                push(AU, p, au)
        elif k == "sub":
            push(AL, ps[0], al)
            push(AU, ps[0], au)
            push(AL, ps[1], -al)
            push(AU, ps[1], -au)
        elif k == "concat":
            off = 0
            for p in ps:
                s = g.nodes[p].size
                push(AL, p, al[:, off:off + s])
                push(AU, p, au[:, off:off + s])
                off += s
        elif k == "slice":
            idx = n.params["index"]
            size = g.nodes[ps[0]].size
            zl = np.zeros((m, size))
            zu = np.zeros((m, size))
            np.add.at(zl, (slice(None), idx), al)
            np.add.at(zu, (slice(None), idx), au)
            push(AL, ps[0], zl)
            push(AU, ps[0], zu)
        elif k == "reshape":
            push(AL, ps[0], al)
            push(AU, ps[0], au)
        elif k in ACTIVATION_KINDS:
            if i not in relax_cache:
                l, u = bounds.node(ps[0])
                relax_cache[i] = relax(k, l, u, n.params.get("slope", 0.0))
            sL, oL, sU, oU = relax_cache[i]
            alp, aln = np.maximum(al, 0), np.minimum(al, 0)
            aup, aun = np.maximum(au, 0), np.minimum(au, 0)
            push(AL, ps[0], alp * sL + aln * sU)
            push(AU, ps[0], aup * sU + aun * sL)
            bl += alp @ oL + aln @ oU
            bu += aup @ oU + aun @ oL
        else:
            raise UnsupportedNodeError(
                f"crown: node kind {k!r} is not supported (rewrite min/max first)")
    return inputs_l, inputs_u, bl, bu


def _concretize(ins, coef_l, coef_u, bl, bu):
    lo = bl.copy()
    hi = bu.copy()
    for i, a in coef_l.items():
        l, u = ins[i]
        c, r = 0.5 * (l + u), 0.5 * (u - l)
        lo += a @ c - np.abs(a) @ r
    for i, a in coef_u.items():
        l, u = ins[i]
        c, r = 0.5 * (l + u), 0.5 * (u - l)
        hi += a @ c + np.abs(a) @ r
    return lo, hi


def crown_bounds(g: Graph, box: Box | None, fixed_inputs: Mapping | None = None,
                 free: str | None = None, intermediate: str = "crown") -> IntervalBounds:
    """Interval bounds for every node, tightened by backward relaxation where
    it matters (activation inputs and the output).

    ``intermediate`` selects how pre-activation intervals are obtained:
    ``"ibp"`` uses interval arithmetic only, ``"crown"`` additionally runs a
    backward pass for each activation input.
    """
    if intermediate not in ("ibp", "crown"):
        raise ValueError("intermediate must be 'ibp' or 'crown'")
    ins, _ = _input_intervals(g, box, fixed_inputs, free)
    bounds = ibp(g, box, fixed_inputs, free)
    relax_cache: dict = {}
    if intermediate == "crown":
        pre = sorted({g.nodes[i].parents[0] for i, n in enumerate(g.nodes) if n.kind in ACTIVATION_KINDS})
        for p in pre:
            if g.nodes[p].kind in ("input", "constant"):
                continue
            if np.all(bounds.upper[p] - bounds.lower[p] == 0):
                continue
            cl, cu, bl, bu = _backsub(g, p, bounds, relax_cache)
            lo, hi = _concretize(ins, cl, cu, bl, bu)
            bounds.lower[p] = np.maximum(bounds.lower[p], lo)
            bounds.upper[p] = np.minimum(bounds.upper[p], hi)
            # keep intervals well-formed when both sides agree up to rounding
            bad = bounds.lower[p] > bounds.upper[p]
            if np.any(bad):
                mid = 0.5 * (bounds.lower[p] + bounds.upper[p])
                bounds.lower[p] = np.where(bad, mid, bounds.lower[p])
                bounds.upper[p] = np.where(bad, mid, bounds.upper[p])
    out = g._output_id()
    if g.nodes[out].kind not in ("input", "constant"):
        cl, cu, bl, bu = _backsub(g, out, bounds, relax_cache)
        lo, hi = _concretize(ins, cl, cu, bl, bu)
        bounds.lower[out] = np.maximum(bounds.lower[out], lo)
        bounds.upper[out] = np.minimum(bounds.upper[out], hi)
    return bounds


def crown(g: Graph, box: Box, fixed_inputs: Mapping | None = None,
          intermediate: str = "crown") -> tuple[float, float]:
    """``(lower, upper)`` bounds of a scalar-output graph over ``box``.

    The graph may contain min2/max2 nodes; they are rewritten to ReLU form first.
    """
    if g.output_node().size != 1:
        raise GraphError("crown: output must be scalar")
    lo, hi = -np.inf, np.inf
    if g.has_kind("min2", "max2"):
        # interval arithmetic on the original min/max is tighter than on the rewrite
        direct = ibp(g, box, fixed_inputs)
        lo, hi = direct.lower[g.output][0], direct.upper[g.output][0]
        g = _relu_form(g)
    b = crown_bounds(g, box, fixed_inputs, intermediate=intermediate)
    out = g._output_id()
    return float(max(lo, b.lower[out][0])), float(min(hi, b.upper[out][0]))


def linear_bounds(g: Graph, box: Box, fixed_inputs: Mapping | None = None,
                  intermediate: str = "crown") -> LinearBounds:
    """Linear lower/upper bounding functions of the output over the box variable.

    Fixed inputs are folded into the offsets.
    """
    if g.has_kind("min2", "max2"):
        g = _relu_form(g)
    ins, free = _input_intervals(g, box, fixed_inputs, None)
    bounds = crown_bounds(g, box, fixed_inputs, intermediate=intermediate)
    cl, cu, bl, bu = _backsub(g, g._output_id(), bounds, {})
    free_id = g.inputs[free]
    m = g.output_node().size
    A_low = cl.pop(free_id, np.zeros((m, box.dim)))
    A_up = cu.pop(free_id, np.zeros((m, box.dim)))
    lo_rest, _ = _concretize(ins, cl, {}, bl, bu)
    _, hi_rest = _concretize(ins, {}, cu, bl, bu)
    return LinearBounds(A_low, lo_rest, A_up, hi_rest)


def verify_box(reward_graph: Graph, box: Box, y=None, method: str = "crown",
               condition_name: str = "y", intermediate: str = "crown") -> SatBounds:
    """Bound the robustness of a reward graph over a latent box.

    ``y`` (if the graph has a condition input) is held fixed as a point interval.
    """
    fixed = {condition_name: y} if y is not None and condition_name in reward_graph.inputs else {}
    if method == "crown":
        lo, hi = crown(reward_graph, box, fixed, intermediate=intermediate)
    elif method == "ibp":
        b = ibp(reward_graph, box, fixed)
        out = reward_graph._output_id()
        lo, hi = float(b.lower[out][0]), float(b.upper[out][0])
    else:
        raise ValueError(f"unknown method {method!r}")
    return SatBounds(lo, hi)


def load_box(path) -> Box:
    with open(path) as fh:
        return Box.from_dict(json.load(fh))
