"""Discrete-time Signal Temporal Logic.

Formulas are immutable trees.  Signals are ``(T, n)`` arrays sampled at unit
steps, and temporal intervals are integer step counts.  Three things can be
done with a formula:

* :func:`eval_boolean` / :func:`eval_robustness` monitor a concrete signal,
* :func:`lower_to_graph` turns the robustness at ``t = 0`` into a
  :class:`~certiplan.graph.Graph` over the flattened trajectory, so it can be
  differentiated and bounded like any network.

Atomic predicates are strict, ``g(s(t)) > 0``: a robustness of exactly zero is
reported as a violation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import reduce
from typing import Union

import numpy as np

from .graph import Graph


class HorizonError(ValueError):
    """The signal is too short for the formula's horizon."""


# ---------------------------------------------------------------------------
# predicate expressions g(s(t))


class Expr:
    def value(self, states: np.ndarray) -> np.ndarray:
        """Evaluate on ``states`` of shape ``(T, n)``; returns shape ``(T,)``."""
        raise NotImplementedError

    def max_dim(self) -> int:
        return -1


@dataclass(frozen=True)
class Const(Expr):
    c: float

    def value(self, states):
        return np.full(states.shape[0], float(self.c))


@dataclass(frozen=True)
class Component(Expr):
    dim: int

    def value(self, states):
        return states[:, self.dim].astype(float)

    def max_dim(self):
        return self.dim


@dataclass(frozen=True)
class Affine(Expr):
    coef: tuple[float, ...]
    offset: float = 0.0

    def __init__(self, coef, offset=0.0):
        object.__setattr__(self, "coef", tuple(float(c) for c in np.ravel(coef)))
        object.__setattr__(self, "offset", float(offset))

    def value(self, states):
        if states.shape[1] != len(self.coef):
            raise ValueError(f"affine predicate expects {len(self.coef)} dims, got {states.shape[1]}")
        return states @ np.asarray(self.coef) + self.offset

    def max_dim(self):
        return len(self.coef) - 1


@dataclass(frozen=True)
class Negate(Expr):
    arg: Expr

    def value(self, states):
        return -self.arg.value(states)

    def max_dim(self):
        return self.arg.max_dim()


@dataclass(frozen=True)
class Min2(Expr):
    a: Expr
    b: Expr

    def value(self, states):
        return np.minimum(self.a.value(states), self.b.value(states))

    def max_dim(self):
        return max(self.a.max_dim(), self.b.max_dim())


@dataclass(frozen=True)
class Max2(Expr):
    a: Expr
    b: Expr

    def value(self, states):
        return np.maximum(self.a.value(states), self.b.value(states))

    def max_dim(self):
        return max(self.a.max_dim(), self.b.max_dim())


@dataclass(frozen=True)
class Abs(Expr):
    arg: Expr

    def value(self, states):
        x = self.arg.value(states)
        return np.maximum(x, -x)

    def max_dim(self):
        return self.arg.max_dim()


@dataclass(frozen=True)
class InfNormDistance(Expr):
    """``max_i(|s_i - c_i| - l_i)``: positive iff ``s`` lies outside the box
    with centre ``c`` and half-extents ``l``."""

    center: tuple[float, ...]
    half_extent: tuple[float, ...]

    def __init__(self, center, half_extent):
        center = tuple(float(c) for c in np.ravel(center))
        half = np.broadcast_to(np.asarray(half_extent, dtype=float), (len(center),))
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_extent", tuple(float(h) for h in half))

    def value(self, states):
        c = np.asarray(self.center)
        h = np.asarray(self.half_extent)
        d = states[:, : len(c)] - c
        return np.max(np.maximum(d, -d) - h, axis=1)

    def max_dim(self):
        return len(self.center) - 1


# ---------------------------------------------------------------------------
# formulas


class Formula:
    pass


@dataclass(frozen=True)
class TrueF(Formula):
    pass


@dataclass(frozen=True)
class Atomic(Formula):
    expr: Expr


@dataclass(frozen=True)
class Not(Formula):
    arg: Formula


@dataclass(frozen=True)
class And(Formula):
    a: Formula
    b: Formula


@dataclass(frozen=True)
class Or(Formula):
    a: Formula
    b: Formula


def _check_interval(lo, hi):
    if not (isinstance(lo, (int, np.integer)) and isinstance(hi, (int, np.integer))):
        raise TypeError("interval bounds must be integers (time steps)")
    if not 0 <= lo <= hi:
        raise ValueError(f"invalid interval [{lo}, {hi}]")


@dataclass(frozen=True)
class Until(Formula):
    lo: int
    hi: int
    left: Formula
    right: Formula

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


@dataclass(frozen=True)
class Eventually(Formula):
    lo: int
    hi: int
    arg: Formula

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


@dataclass(frozen=True)
class Globally(Formula):
    lo: int
    hi: int
    arg: Formula

    def __post_init__(self):
        _check_interval(self.lo, self.hi)


FormulaLike = Union[Formula, Expr]


def conj(*fs: Formula) -> Formula:
    """Left-nested conjunction of one or more formulas."""
    if not fs:
        return TrueF()
    return reduce(And, fs)


def disj(*fs: Formula) -> Formula:
    if not fs:
        return Not(TrueF())
    return reduce(Or, fs)


def expand_derived(f: Formula) -> Formula:
    """Rewrite Or/Eventually/Globally into the core syntax (True, Not, And, Until)."""
    if isinstance(f, (TrueF, Atomic)):
        return f
    if isinstance(f, Not):
        return Not(expand_derived(f.arg))
    if isinstance(f, And):
        return And(expand_derived(f.a), expand_derived(f.b))
    if isinstance(f, Or):
        return Not(And(Not(expand_derived(f.a)), Not(expand_derived(f.b))))
    if isinstance(f, Until):
        return Until(f.lo, f.hi, expand_derived(f.left), expand_derived(f.right))
    if isinstance(f, Eventually):
        return Until(f.lo, f.hi, TrueF(), expand_derived(f.arg))
    if isinstance(f, Globally):
        return Not(Until(f.lo, f.hi, TrueF(), Not(expand_derived(f.arg))))
    raise TypeError(f"not a formula: {f!r}")


def horizon(f: Formula) -> int:
    if isinstance(f, (TrueF, Atomic)):
        return 0
    if isinstance(f, Not):
        return horizon(f.arg)
    if isinstance(f, (And, Or)):
        return max(horizon(f.a), horizon(f.b))
    if isinstance(f, Until):
        return f.hi + max(horizon(f.left), horizon(f.right))
    if isinstance(f, (Eventually, Globally)):
        return f.hi + horizon(f.arg)
    raise TypeError(f"not a formula: {f!r}")


def state_dim_needed(f: Formula) -> int:
    """Smallest state dimension the formula's predicates can index into."""
    if isinstance(f, TrueF):
        return 0
    if isinstance(f, Atomic):
        return f.expr.max_dim() + 1
    if isinstance(f, Not):
        return state_dim_needed(f.arg)
    if isinstance(f, (And, Or)):
        return max(state_dim_needed(f.a), state_dim_needed(f.b))
    if isinstance(f, Until):
        return max(state_dim_needed(f.left), state_dim_needed(f.right))
    return state_dim_needed(f.arg)


# ---------------------------------------------------------------------------
# monitors


def _as_signal(signal) -> np.ndarray:
    s = np.asarray(signal, dtype=float)
    if s.ndim == 1:
        s = s[:, None]
    if s.ndim != 2 or s.shape[0] < 1:
        raise ValueError("signal must have shape (T, n) with T >= 1")
    if not np.all(np.isfinite(s)):
        raise ValueError("signal entries must be finite")
    return s


def _windows(x: np.ndarray, lo: int, hi: int, length: int) -> np.ndarray:
    """Row t holds x[t+lo .. t+hi] for t < length."""
    idx = np.arange(length)[:, None] + np.arange(lo, hi + 1)[None, :]
    return x[idx]


def robustness_signal(f: Formula, signal) -> np.ndarray:
    """Robustness at every time step where the formula is defined.

    Returns an array of length ``T - horizon(f)``; ``True`` evaluates to ``+inf``.
    """
    s = _as_signal(signal)
    if horizon(f) >= s.shape[0]:
        raise HorizonError(f"signal of length {s.shape[0]} is too short for horizon {horizon(f)}")
    return _rob(f, s)


def _rob(f: Formula, s: np.ndarray) -> np.ndarray:
    T = s.shape[0]
    if isinstance(f, TrueF):
        return np.full(T, np.inf)
    if isinstance(f, Atomic):
        return f.expr.value(s)
    if isinstance(f, Not):
        return -_rob(f.arg, s)
    if isinstance(f, (And, Or)):
        a, b = _rob(f.a, s), _rob(f.b, s)
        n = min(a.size, b.size)
        op = np.minimum if isinstance(f, And) else np.maximum
        return op(a[:n], b[:n])
    if isinstance(f, (Eventually, Globally)):
        x = _rob(f.arg, s)
        n = x.size - f.hi
        w = _windows(x, f.lo, f.hi, n)
        return w.max(axis=1) if isinstance(f, Eventually) else w.min(axis=1)
    if isinstance(f, Until):
        r1, r2 = _rob(f.left, s), _rob(f.right, s)
        n = min(r1.size, r2.size) - f.hi
        # prefix[t, j] = min over t'' in [t, t+j] of r1
        prefix = np.minimum.accumulate(_windows(r1, 0, f.hi, n), axis=1)
        terms = np.minimum(_windows(r2, 0, f.hi, n), prefix)
        return terms[:, f.lo:].max(axis=1)
    raise TypeError(f"not a formula: {f!r}")


def boolean_signal(f: Formula, signal, half_open_until: bool = False) -> np.ndarray:
    """Boolean satisfaction at every defined time step.

    Until requires the left operand on the closed range ``[t, t']`` by default,
    matching the robustness semantics so that the robustness sign is sound.
    ``half_open_until=True`` uses ``[t, t')`` instead.
    """
    s = _as_signal(signal)
    if horizon(f) >= s.shape[0]:
        raise HorizonError(f"signal of length {s.shape[0]} is too short for horizon {horizon(f)}")
    return _sat(f, s, half_open_until)


def _sat(f: Formula, s: np.ndarray, half_open: bool) -> np.ndarray:
    T = s.shape[0]
    if isinstance(f, TrueF):
        return np.ones(T, dtype=bool)
    if isinstance(f, Atomic):
        return f.expr.value(s) > 0
    if isinstance(f, Not):
        return ~_sat(f.arg, s, half_open)
    if isinstance(f, (And, Or)):
        a, b = _sat(f.a, s, half_open), _sat(f.b, s, half_open)
        n = min(a.size, b.size)
        return (a[:n] & b[:n]) if isinstance(f, And) else (a[:n] | b[:n])
    if isinstance(f, (Eventually, Globally)):
        x = _sat(f.arg, s, half_open)
        w = _windows(x, f.lo, f.hi, x.size - f.hi)
        return w.any(axis=1) if isinstance(f, Eventually) else w.all(axis=1)
    if isinstance(f, Until):
        b1, b2 = _sat(f.left, s, half_open), _sat(f.right, s, half_open)
        n = min(b1.size, b2.size) - f.hi
        held = np.logical_and.accumulate(_windows(b1, 0, f.hi, n), axis=1)
        if half_open:
            # left must hold on [t, t'), which is empty for t' = t
            held = np.concatenate([np.ones((n, 1), dtype=bool), held[:, :-1]], axis=1)
        ok = _windows(b2, 0, f.hi, n) & held
        return ok[:, f.lo:].any(axis=1)
    raise TypeError(f"not a formula: {f!r}")


def _check_time(f, s, t):
    if t < 0 or t + horizon(f) >= s.shape[0]:
        raise HorizonError(
            f"time {t} plus horizon {horizon(f)} exceeds signal length {s.shape[0]}")


def eval_robustness(f: Formula, signal, t: int = 0) -> float:
    s = _as_signal(signal)
    _check_time(f, s, t)
    return float(_rob(f, s)[t])


def eval_boolean(f: Formula, signal, t: int = 0, half_open_until: bool = False) -> bool:
    s = _as_signal(signal)
    _check_time(f, s, t)
    return bool(_sat(f, s, half_open_until)[t])


def batch_robustness(f: Formula, trajectories) -> np.ndarray:
    """Robustness at ``t = 0`` for a batch of shape ``(B, T, n)``."""
    return np.array([eval_robustness(f, x) for x in np.asarray(trajectories, dtype=float)])


def batch_boolean(f: Formula, trajectories) -> np.ndarray:
    return np.array([eval_boolean(f, x) for x in np.asarray(trajectories, dtype=float)], dtype=bool)


# ---------------------------------------------------------------------------
# lowering to a computation graph

_POS, _NEG = float("inf"), float("-inf")


class _Lowering:
    def __init__(self, g: Graph, traj: int, length: int, n: int):
        self.g, self.traj, self.T, self.n = g, traj, length, n

    # values are either node ids (vectors over time) or +-inf sentinels

    def select(self, node, length):
        if isinstance(node, float) or self.g.nodes[node].size == length:
            return node
        return self.g.slice(node, np.arange(length))

    def size(self, node):
        return None if isinstance(node, float) else self.g.nodes[node].size

    def min2(self, a, b):
        if a == _POS or b == _NEG:
            return b
        if b == _POS or a == _NEG:
            return a
        return self.g.min2(a, b)

    def max2(self, a, b):
        if a == _NEG or b == _POS:
            return b
        if b == _NEG or a == _POS:
            return a
        return self.g.max2(a, b)

    def neg(self, a):
        if isinstance(a, float):
            return -a
        return self.g.neg(a)

    def tree(self, op, items):
        items = list(items)
        while len(items) > 1:
            nxt = [op(items[i], items[i + 1]) for i in range(0, len(items) - 1, 2)]
            if len(items) % 2:
                nxt.append(items[-1])
            items = nxt
        return items[0]

    def shift(self, node, offset, length):
        if isinstance(node, float):
            return node
        if offset == 0 and self.g.nodes[node].size == length:
            return node
        return self.g.slice(node, np.arange(length) + offset)

    def pick_matrix(self, coef, times):
        w = np.zeros((len(times), self.T * self.n))
        for r, t in enumerate(times):
            w[r, t * self.n:(t + 1) * self.n] = coef
        return w

    def expr(self, e: Expr, length: int):
        times = np.arange(length)
        g = self.g
        if isinstance(e, Const):
            return g.constant(np.full(length, float(e.c)))
        if isinstance(e, Component):
            coef = np.zeros(self.n)
            coef[e.dim] = 1.0
            return g.affine(self.traj, self.pick_matrix(coef, times), np.zeros(length))
        if isinstance(e, Affine):
            return g.affine(self.traj, self.pick_matrix(np.asarray(e.coef), times),
                            np.full(length, e.offset))
        if isinstance(e, Negate):
            return g.neg(self.expr(e.arg, length))
        if isinstance(e, Min2):
            return g.min2(self.expr(e.a, length), self.expr(e.b, length))
        if isinstance(e, Max2):
            return g.max2(self.expr(e.a, length), self.expr(e.b, length))
        if isinstance(e, Abs):
            x = self.expr(e.arg, length)
            return g.max2(x, g.neg(x))
        if isinstance(e, InfNormDistance):
            per_dim = []
            for i, (c, h) in enumerate(zip(e.center, e.half_extent)):
                coef = np.zeros(self.n)
                coef[i] = 1.0
                w = self.pick_matrix(coef, times)
                up = g.affine(self.traj, w, np.full(length, -c - h))
                down = g.affine(self.traj, -w, np.full(length, c - h))
                per_dim.append(g.max2(up, down))
            return self.tree(self.g.max2, per_dim)
        raise TypeError(f"not a predicate expression: {e!r}")

    def formula(self, f: Formula, length: int):
        """Node holding the robustness of ``f`` at times ``0 .. length-1``."""
        if isinstance(f, TrueF):
            return _POS
        if isinstance(f, Atomic):
            return self.expr(f.expr, length)
        if isinstance(f, Not):
            return self.neg(self.formula(f.arg, length))
        if isinstance(f, And):
            return self.min2(self.formula(f.a, length), self.formula(f.b, length))
        if isinstance(f, Or):
            return self.max2(self.formula(f.a, length), self.formula(f.b, length))
        if isinstance(f, (Eventually, Globally)):
            x = self.formula(f.arg, length + f.hi)
            op = self.max2 if isinstance(f, Eventually) else self.min2
            return self.tree(op, [self.shift(x, j, length) for j in range(f.lo, f.hi + 1)])
        if isinstance(f, Until):
            r1 = self.formula(f.left, length + f.hi)
            r2 = self.formula(f.right, length + f.hi)
            terms = []
            prefix = _POS
            for j in range(f.hi + 1):
                prefix = self.min2(prefix, self.shift(r1, j, length))
                if j >= f.lo:
                    terms.append(self.min2(self.shift(r2, j, length), prefix))
            return self.tree(self.max2, terms)
        raise TypeError(f"not a formula: {f!r}")


def lower_to_graph(f: Formula, trajectory_length: int, state_dim: int,
                   relu_form: bool = False, input_name: str = "x") -> Graph:
    """Graph mapping a flattened ``(trajectory_length, state_dim)`` trajectory
    to the robustness of ``f`` at time 0.

    Windowed min/max become balanced trees of binary ``min2``/``max2`` nodes.
    With ``relu_form=True`` those are rewritten into affine+ReLU form.
    """
    if trajectory_length <= horizon(f):
        raise HorizonError(
            f"trajectory length {trajectory_length} must exceed horizon {horizon(f)}")
    if state_dim_needed(f) > state_dim:
        raise ValueError(f"formula indexes state dim {state_dim_needed(f) - 1}, state_dim is {state_dim}")
    g = Graph()
    traj = g.input(input_name, (trajectory_length, state_dim))
    low = _Lowering(g, traj, trajectory_length, state_dim)
    out = low.formula(f, 1)
    if isinstance(out, float):
        out = g.constant([out])
    g.output = out
    if relu_form:
        from .graph import rewrite_minmax
        g = rewrite_minmax(g)
    return g


# ---------------------------------------------------------------------------
# JSON


def expr_to_dict(e: Expr) -> dict:
    if isinstance(e, Const):
        return {"op": "const", "value": e.c}
    if isinstance(e, Component):
        return {"op": "component", "dim": e.dim}
    if isinstance(e, Affine):
        return {"op": "affine", "coef": list(e.coef), "offset": e.offset}
    if isinstance(e, Negate):
        return {"op": "neg", "arg": expr_to_dict(e.arg)}
    if isinstance(e, Min2):
        return {"op": "min", "args": [expr_to_dict(e.a), expr_to_dict(e.b)]}
    if isinstance(e, Max2):
        return {"op": "max", "args": [expr_to_dict(e.a), expr_to_dict(e.b)]}
    if isinstance(e, Abs):
        return {"op": "abs", "arg": expr_to_dict(e.arg)}
    if isinstance(e, InfNormDistance):
        return {"op": "inf_norm", "center": list(e.center), "half_extent": list(e.half_extent)}
    raise TypeError(f"not a predicate expression: {e!r}")


def expr_from_dict(d: dict) -> Expr:
    op = d["op"]
    if op == "const":
        return Const(float(d["value"]))
    if op == "component":
        return Component(int(d["dim"]))
    if op == "affine":
        return Affine(d["coef"], d.get("offset", 0.0))
    if op == "neg":
        return Negate(expr_from_dict(d["arg"]))
    if op in ("min", "max"):
        a, b = (expr_from_dict(x) for x in d["args"])
        return Min2(a, b) if op == "min" else Max2(a, b)
    if op == "abs":
        return Abs(expr_from_dict(d["arg"]))
    if op == "inf_norm":
        return InfNormDistance(d["center"], d["half_extent"])
    raise ValueError(f"unknown expression op {op!r}")


def to_dict(f: Formula) -> dict:
    if isinstance(f, TrueF):
        return {"op": "true"}
    if isinstance(f, Atomic):
        return {"op": "atomic", "expr": expr_to_dict(f.expr)}
    if isinstance(f, Not):
        return {"op": "not", "arg": to_dict(f.arg)}
    if isinstance(f, (And, Or)):
        return {"op": "and" if isinstance(f, And) else "or", "args": [to_dict(f.a), to_dict(f.b)]}
    if isinstance(f, Until):
        return {"op": "until", "interval": [f.lo, f.hi], "args": [to_dict(f.left), to_dict(f.right)]}
    if isinstance(f, (Eventually, Globally)):
        return {"op": "eventually" if isinstance(f, Eventually) else "globally",
                "interval": [f.lo, f.hi], "arg": to_dict(f.arg)}
    raise TypeError(f"not a formula: {f!r}")


def from_dict(d: dict) -> Formula:
    op = d["op"]
    if op == "true":
        return TrueF()
    if op == "atomic":
        return Atomic(expr_from_dict(d["expr"]))
    if op == "not":
        return Not(from_dict(d["arg"]))
    if op in ("and", "or"):
        args = [from_dict(x) for x in d["args"]]
        return reduce(And if op == "and" else Or, args)
    if op == "until":
        lo, hi = (int(v) for v in d["interval"])
        a, b = (from_dict(x) for x in d["args"])
        return Until(lo, hi, a, b)
    if op in ("eventually", "globally"):
        lo, hi = (int(v) for v in d["interval"])
        cls = Eventually if op == "eventually" else Globally
        return cls(lo, hi, from_dict(d["arg"]))
    raise ValueError(f"unknown formula op {op!r}")


def dumps(f: Formula) -> str:
    return json.dumps({"format": "certiplan.stl", "version": 1, "formula": to_dict(f)})


def loads(text: str) -> Formula:
    d = json.loads(text)
    if "formula" in d:
        d = d["formula"]
    return from_dict(d)
