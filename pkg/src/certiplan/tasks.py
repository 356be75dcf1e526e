"""Planning environments, their STL requirements, and PRM training data.

Geometry that is not pinned down numerically (Crossroad corners, the Obstacles
layout, City buildings) uses plausible placeholder layouts; those values are
flagged with ``placeholder=True`` on the environment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import dijkstra
from scipy.spatial import cKDTree

from .stl import (Affine, Atomic, Eventually, Formula, Globally, InfNormDistance, conj,
                  eval_boolean)


class PlanningError(RuntimeError):
    """The roadmap does not connect start and goal; retry with a new sample."""


@dataclass(frozen=True)
class Obstacle:
    center: tuple[float, ...]
    half_extent: tuple[float, ...]

    @property
    def lower(self):
        return np.asarray(self.center) - np.asarray(self.half_extent)

    @property
    def upper(self):
        return np.asarray(self.center) + np.asarray(self.half_extent)


@dataclass
class Environment:
    name: str
    state_dim: int
    bounds: tuple[tuple[float, ...], tuple[float, ...]]
    obstacles: list[Obstacle]
    start_zone: tuple[tuple[float, ...], tuple[float, ...]]
    goal_zone: tuple[tuple[float, ...], tuple[float, ...]]
    horizons: dict[str, int]
    goal: tuple[tuple[float, ...], tuple[float, ...]] | None = None
    bounds_in_spec: bool = False
    dwell: int = 0
    cond_len: int = 1
    placeholder: bool = False
    canonical_start: tuple[float, ...] | None = None

    def horizon(self, variant: str) -> int:
        try:
            return self.horizons[variant]
        except KeyError:
            raise ValueError(f"environment {self.name!r} has no {variant!r} variant") from None

    def collision_free(self, points) -> np.ndarray:
        """Points strictly outside every obstacle and inside the workspace."""
        p = np.atleast_2d(np.asarray(points, dtype=float))
        lo, hi = np.asarray(self.bounds[0]), np.asarray(self.bounds[1])
        ok = np.all((p >= lo) & (p <= hi), axis=1)
        for o in self.obstacles:
            inside = np.all((p >= o.lower) & (p <= o.upper), axis=1)
            ok &= ~inside
        return ok

    def segments_free(self, a, b) -> np.ndarray:
        """Segment-vs-box test for many segments ``a[i] -> b[i]`` at once.

        Touching an obstacle face counts as a collision.
        """
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        d = b - a
        free = np.ones(a.shape[0], dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            for o in self.obstacles:
                t1 = (o.lower - a) * inv
                t2 = (o.upper - a) * inv
                tmin = np.where(d == 0, np.where((a >= o.lower) & (a <= o.upper), -np.inf, np.inf),
                                np.minimum(t1, t2))
                tmax = np.where(d == 0, np.where((a >= o.lower) & (a <= o.upper), np.inf, -np.inf),
                                np.maximum(t1, t2))
                enter = np.max(tmin, axis=1)
                leave = np.min(tmax, axis=1)
                hit = (enter <= leave) & (leave >= 0) & (enter <= 1)
                free &= ~hit
        return free

    def to_dict(self) -> dict:
        return {
            "name": self.name, "state_dim": self.state_dim,
            "bounds": [list(self.bounds[0]), list(self.bounds[1])],
            "obstacles": [{"center": list(o.center), "half_extent": list(o.half_extent)}
                          for o in self.obstacles],
            "start_zone": [list(self.start_zone[0]), list(self.start_zone[1])],
            "goal_zone": [list(self.goal_zone[0]), list(self.goal_zone[1])],
            "horizons": dict(self.horizons),
            "goal": None if self.goal is None else [list(self.goal[0]), list(self.goal[1])],
            "bounds_in_spec": self.bounds_in_spec, "dwell": self.dwell,
            "cond_len": self.cond_len, "placeholder": self.placeholder,
            "canonical_start": None if self.canonical_start is None else list(self.canonical_start),
        }

    @classmethod
    def from_dict(cls, d) -> "Environment":
        t = lambda v: tuple(float(x) for x in v)  # noqa: E731
        return cls(
            d["name"], int(d["state_dim"]), (t(d["bounds"][0]), t(d["bounds"][1])),
            [Obstacle(t(o["center"]), t(o["half_extent"])) for o in d["obstacles"]],
            (t(d["start_zone"][0]), t(d["start_zone"][1])),
            (t(d["goal_zone"][0]), t(d["goal_zone"][1])),
            {k: int(v) for k, v in d["horizons"].items()},
            None if d.get("goal") is None else (t(d["goal"][0]), t(d["goal"][1])),
            bool(d.get("bounds_in_spec", False)), int(d.get("dwell", 0)),
            int(d.get("cond_len", 1)), bool(d.get("placeholder", False)),
            None if d.get("canonical_start") is None else t(d["canonical_start"]),
        )


def _box(center, half):
    return Obstacle(tuple(float(c) for c in center), tuple(float(h) for h in half))


def builtin_environment(name: str) -> Environment:
    name = name.lower()
    if name == "umaze":
        return Environment(
            "umaze", 2, ((5.0, 5.0), (45.0, 45.0)), [_box((25, 15), (5, 15))],
            start_zone=((8.0, 8.0), (14.0, 14.0)), goal_zone=((36.0, 8.0), (42.0, 14.0)),
            horizons={"gan": 24, "diff": 17}, bounds_in_spec=True,
            canonical_start=(11.0, 11.0))
    if name == "crossroad":
        corners = [_box(c, (7.5, 7.5)) for c in ((7.5, 7.5), (42.5, 7.5), (7.5, 42.5), (42.5, 42.5))]
        return Environment(
            "crossroad", 2, ((0.0, 0.0), (50.0, 50.0)), corners,
            start_zone=((27.0, 1.0), (33.0, 4.0)), goal_zone=((1.0, 28.0), (5.0, 34.0)),
            horizons={"gan": 23, "diff": 16}, goal=((0.0, 27.0), (15.0, 35.0)), dwell=2,
            placeholder=True, canonical_start=(30.0, 2.5))
    if name == "obstacles":
        obs = [_box((15, 15), (4, 4)), _box((6, 22), (3, 3)), _box((22, 6), (3, 3)),
               _box((23, 23), (2, 2))]
        return Environment(
            "obstacles", 2, ((0.0, 0.0), (30.0, 30.0)), obs,
            start_zone=((2.0, 2.0), (2.0, 2.0)), goal_zone=((28.5, 28.5), (29.5, 29.5)),
            horizons={"gan": 15, "diff": 15}, goal=((28.0, 28.0), (30.0, 30.0)), dwell=0,
            placeholder=True, canonical_start=(2.0, 2.0))
    if name == "city":
        heights = [(15, 15, 15), (35, 15, 20), (15, 35, 12), (35, 35, 18), (25, 25, 22)]
        blds = [_box((x, y, h / 2), (5 if i < 4 else 3, 5 if i < 4 else 3, h / 2))
                for i, (x, y, h) in enumerate(heights)]
        return Environment(
            "city", 3, ((0.0, 0.0, 0.0), (50.0, 50.0, 25.0)), blds,
            start_zone=((2.0, 2.0, 2.0), (6.0, 6.0, 6.0)),
            goal_zone=((44.0, 44.0, 2.0), (48.0, 48.0, 6.0)),
            horizons={"gan": 30}, placeholder=True, canonical_start=(4.0, 4.0, 4.0))
    raise ValueError(f"unknown environment {name!r}")


ENVIRONMENTS = ("umaze", "crossroad", "obstacles", "city")


def box_membership(lower, upper) -> Formula:
    """``lower < s < upper`` as a conjunction of affine predicates."""
    n = len(lower)
    parts = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        parts.append(Atomic(Affine(e, -lower[i])))
        parts.append(Atomic(Affine(-e, upper[i])))
    return conj(*parts)


def build_spec(env: Environment, variant: str = "gan") -> Formula:
    """The environment's requirement over a trajectory of ``H + h`` states.

    Safety (obstacle avoidance, optional workspace bounds) must hold at every
    step.  A goal, if present, is reached within the horizon and held for
    ``env.dwell`` further steps.
    """
    H = env.horizon(variant)
    safe = [Atomic(InfNormDistance(o.center, o.half_extent)) for o in env.obstacles]
    if env.bounds_in_spec:
        safe.append(box_membership(*env.bounds))
    phi = Globally(0, H, conj(*safe))
    if env.goal is not None:
        if env.dwell > H:
            raise ValueError("dwell longer than the horizon")
        reach = Eventually(0, H - env.dwell, Globally(0, env.dwell, box_membership(*env.goal)))
        phi = conj(phi, reach)
    return phi


# ---------------------------------------------------------------------------
# probabilistic roadmap


def prm_generate(env: Environment, start, goal, n_nodes: int, k_neighbors: int, rng) -> np.ndarray:
    """Shortest roadmap path from ``start`` to ``goal`` as a waypoint array."""
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)
    if not env.collision_free(start)[0]:
        raise ValueError("start state is in collision")
    if not env.collision_free(goal)[0]:
        raise ValueError("goal state is in collision")
    lo, hi = np.asarray(env.bounds[0]), np.asarray(env.bounds[1])
    pts = [start, goal]
    have = 0
    while have < n_nodes:
        cand = rng.uniform(lo, hi, size=(2 * (n_nodes - have) + 8, env.state_dim))
        cand = cand[env.collision_free(cand)][: n_nodes - have]
        pts.extend(cand)
        have += len(cand)
    pts = np.asarray(pts)
    tree = cKDTree(pts)
    k = min(k_neighbors + 1, len(pts))
    _, nbr = tree.query(pts, k=k)
    i = np.repeat(np.arange(len(pts)), k - 1)
    j = nbr[:, 1:].reshape(-1)
    i = np.append(i, 0)
    j = np.append(j, 1)  # always try the direct start-goal edge
    keep = i != j
    i, j = i[keep], j[keep]
    free = env.segments_free(pts[i], pts[j])
    i, j = i[free], j[free]
    w = np.linalg.norm(pts[i] - pts[j], axis=1)
    adj = csr_matrix((np.concatenate([w, w]), (np.concatenate([i, j]), np.concatenate([j, i]))),
                     shape=(len(pts), len(pts)))
    dist, pred = dijkstra(adj, directed=False, indices=0, return_predecessors=True)
    if not np.isfinite(dist[1]):
        raise PlanningError("roadmap does not connect start and goal")
    path = [1]
    while path[-1] != 0:
        path.append(pred[path[-1]])
    return pts[path[::-1]]


def path_length(path) -> float:
    p = np.asarray(path, dtype=float)
    return float(np.sum(np.linalg.norm(np.diff(p, axis=0), axis=1)))


def resample_path(path, H: int) -> np.ndarray:
    """``H`` points spaced uniformly in arc length; endpoints kept exactly."""
    p = np.asarray(path, dtype=float)
    if p.shape[0] < 2:
        raise ValueError("need at least two waypoints")
    seg = np.linalg.norm(np.diff(p, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] <= 0:
        raise ValueError("path has zero length")
    s = np.linspace(0.0, cum[-1], H)
    out = np.stack([np.interp(s, cum, p[:, d]) for d in range(p.shape[1])], axis=1)
    out[0], out[-1] = p[0], p[-1]
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TrajectoryDataset:
    ys: np.ndarray   # (N, h, n) condition prefixes
    xs: np.ndarray   # (N, H, n) targets
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.xs.shape[0]

    def full(self) -> np.ndarray:
        return np.concatenate([self.ys, self.xs], axis=1)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            header = {"format": "certiplan.dataset", "version": 1, "count": len(self), **self.meta}
            fh.write(json.dumps(header) + "\n")
            for y, x in zip(self.ys, self.xs):
                fh.write(json.dumps({"y": y.tolist(), "x": x.tolist()}) + "\n")

    @classmethod
    def load(cls, path) -> "TrajectoryDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != "certiplan.dataset":
                raise ValueError("not a certiplan dataset")
            recs = [json.loads(line) for line in fh if line.strip()]
        meta = {k: v for k, v in header.items() if k not in ("format", "version", "count")}
        if len(recs) != header["count"]:
            raise ValueError(f"dataset header says {header['count']} records, found {len(recs)}")
        return cls(np.array([r["y"] for r in recs], dtype=float),
                   np.array([r["x"] for r in recs], dtype=float), meta)


def make_dataset(env: Environment, n: int, variant: str = "gan", seed: int = 0,
                 n_nodes: int = 300, k_neighbors: int = 10, budget_factor: int = 20,
                 formula: Formula | None = None) -> TrajectoryDataset:
    """``n`` PRM trajectories that satisfy the environment's requirement.

    Each record draws a start in the start zone and a goal in the goal zone,
    plans, and resamples to ``H + 1`` points: the first is the condition
    prefix, the rest the target.  Violating or failed plans are redrawn.
    """
    H = env.horizon(variant)
    phi = formula if formula is not None else build_spec(env, variant)
    lo_s, hi_s = (np.asarray(v) for v in env.start_zone)
    lo_g, hi_g = (np.asarray(v) for v in env.goal_zone)
    ys, xs = [], []
    tries = 0
    i = 0
    while len(xs) < n:
        if tries >= budget_factor * n:
            raise RuntimeError(f"dataset generation budget exhausted after {tries} plans")
        rng = np.random.default_rng([seed, i, tries])
        tries += 1
        start = rng.uniform(lo_s, hi_s)
        goal = rng.uniform(lo_g, hi_g)
        try:
            path = prm_generate(env, start, goal, n_nodes, k_neighbors, rng)
        except (PlanningError, ValueError):
            continue
        traj = resample_path(path, H + env.cond_len)
        if not eval_boolean(phi, traj):
            continue
        ys.append(traj[: env.cond_len])
        xs.append(traj[env.cond_len:])
        i += 1
    meta = {"env": env.name, "variant": variant, "seed": seed, "horizon": H,
            "cond_len": env.cond_len}
    return TrajectoryDataset(np.asarray(ys), np.asarray(xs), meta)
