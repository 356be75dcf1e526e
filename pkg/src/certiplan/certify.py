"""Search for certified latent boxes.

For each of ``L`` attempts: draw a start point from the latent prior, climb the
robustness by gradient ascent to a pivot, then grow a box around the pivot for
as long as the verifier certifies it and it stays disjoint from the boxes
already accepted.  The accepted boxes define the certified latent
distribution (see :mod:`certiplan.latent`).
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph, backward
from .latent import EmptyRegionError, TruncatedMixture, box_log_prob, boxes_disjoint, build_mixture
from .verify import Box, verify_box

log = logging.getLogger(__name__)


@dataclass
class PivotSearchConfig:
    step_size: float = 0.05      # gamma
    iterations: int = 100
    restarts: int = 20           # L

    def __post_init__(self):
        if self.step_size <= 0 or self.restarts < 1 or self.iterations < 0:
            raise ValueError("need step_size > 0, restarts >= 1, iterations >= 0")


@dataclass
class ExpansionConfig:
    eps0: float = 0.01
    delta: float = 0.005
    mode: str = "homogeneous"    # or "heterogeneous"
    alpha: float = 0.005
    max_steps: int = 10_000
    method: str = "crown"        # verifier: crown | ibp

    def __post_init__(self):
        if self.eps0 <= 0 or self.delta <= 0 or self.alpha <= 0:
            raise ValueError("eps0, delta and alpha must be positive")
        if self.mode not in ("homogeneous", "heterogeneous"):
            raise ValueError(f"unknown expansion mode {self.mode!r}")


@dataclass
class Region:
    box: Box
    pivot: np.ndarray
    rob_lower: float
    eps: np.ndarray
    log_prob: float = float("nan")

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(), "pivot": np.asarray(self.pivot).tolist(),
                "rob_lower": self.rob_lower, "eps": np.asarray(self.eps).tolist(),
                "log_prob": self.log_prob}

    @classmethod
    def from_dict(cls, d) -> "Region":
        return cls(Box.from_dict(d["box"]), np.asarray(d["pivot"], dtype=float),
                   float(d["rob_lower"]), np.asarray(d["eps"], dtype=float),
                   float(d.get("log_prob", float("nan"))))


@dataclass
class CertifiedLatent:
    regions: list[Region]
    condition: np.ndarray | None = None
    formula_id: str = ""
    generator_id: str = ""
    log_total: float = float("-inf")
    attempts: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not self.regions

    @property
    def boxes(self) -> list[Box]:
        return [r.box for r in self.regions]

    def fill_probabilities(self) -> None:
        for r in self.regions:
            r.log_prob = box_log_prob(r.box)
        if self.regions:
            lp = np.array([r.log_prob for r in self.regions])
            self.log_total = float(np.logaddexp.reduce(lp))
        else:
            self.log_total = float("-inf")

    def mixture(self) -> TruncatedMixture:
        if self.empty:
            raise EmptyRegionError()
        return build_mixture(self.boxes, [r.log_prob for r in self.regions])

    def to_dict(self) -> dict:
        return {"format": "certiplan.regions", "version": 1,
                "regions": [r.to_dict() for r in self.regions],
                "condition": None if self.condition is None else np.asarray(self.condition).tolist(),
                "formula_id": self.formula_id, "generator_id": self.generator_id,
                "log_total": self.log_total, "attempts": self.attempts, "meta": self.meta}

    @classmethod
    def from_dict(cls, d) -> "CertifiedLatent":
        if d.get("format") != "certiplan.regions":
            raise ValueError("not a certiplan regions document")
        cond = d.get("condition")
        return cls([Region.from_dict(r) for r in d["regions"]],
                   None if cond is None else np.asarray(cond, dtype=float),
                   d.get("formula_id", ""), d.get("generator_id", ""),
                   float(d.get("log_total", float("-inf"))), int(d.get("attempts", 0)),
                   d.get("meta", {}))


def _fixed(graph: Graph, y):
    return {"y": y} if "y" in graph.inputs and y is not None else {}


def reward_and_grad(graph: Graph, z, y=None) -> tuple[float, np.ndarray]:
    inputs = {"z": z, **_fixed(graph, y)}
    tape = backward(graph, inputs)
    return float(tape.values[graph.output][0, 0]), tape.inputs["z"].reshape(-1)


def pivot_search(reward_graph: Graph, z0, config: PivotSearchConfig, y=None) -> np.ndarray:
    """Gradient ascent on the reward; returns the best iterate seen."""
    z = np.array(z0, dtype=float).reshape(-1)
    best_z, best_r = z.copy(), -np.inf
    for _ in range(config.iterations + 1):
        r, grad = reward_and_grad(reward_graph, z, y)
        if r > best_r:
            best_r, best_z = r, z.copy()
        if not np.all(np.isfinite(grad)) or not np.any(grad):
            break
        z = z + config.step_size * grad
    return best_z


def _grid_eps(eps0, step, m):
    # snap to the decimal grid so repeated increments do not drift
    return np.round(eps0 + m * step, 12)


def expand_box(reward_graph: Graph, pivot, existing, config: ExpansionConfig, y=None,
               verify_graph: Graph | None = None) -> Region | None:
    """Grow a certified box around ``pivot``.

    Returns the last box that was both certified and disjoint from
    ``existing`` (a list of boxes), or ``None`` if the initial box fails.
    """
    z = np.asarray(pivot, dtype=float).reshape(-1)
    if not np.all(np.isfinite(z)):
        return None
    vg = verify_graph if verify_graph is not None else reward_graph
    existing = list(existing)

    def check(eps):
        box = Box.around(z, eps)
        if any(not boxes_disjoint(box, b) for b in existing):
            return box, None
        sb = verify_box(vg, box, y, method=config.method)
        return box, (sb if sb.certified else None)

    if config.mode == "homogeneous":
        step = np.full(z.size, config.delta)
    else:
        _, grad = reward_and_grad(reward_graph, z, y)
        norm = np.linalg.norm(grad)
        if norm == 0 or not np.isfinite(norm):
            step = np.full(z.size, config.alpha / np.sqrt(z.size))
        else:
            # magnitudes only: a negative component would shrink the box
            step = config.alpha * np.abs(grad) / norm
    eps0 = np.full(z.size, config.eps0)
    box, sb = check(eps0)
    if sb is None:
        return None
    best = Region(box, z, sb.rob_lower, eps0)
    for m in range(1, config.max_steps + 1):
        eps = _grid_eps(eps0, step, m)
        box, sb = check(eps)
        if sb is None:
            break
        best = Region(box, z, sb.rob_lower, eps)
    return best


def _candidate_rng(seed: int, i: int):
    return np.random.default_rng([seed, i])


def _attempt(reward_graph, verify_graph, i, k, y, pivot_cfg, exp_cfg, seed, existing):
    rng = _candidate_rng(seed, i)
    z0 = rng.standard_normal(k)
    pivot = pivot_search(reward_graph, z0, pivot_cfg, y)
    return expand_box(reward_graph, pivot, existing, exp_cfg, y, verify_graph=verify_graph)


def certify(reward_graph: Graph, y=None, pivot_cfg: PivotSearchConfig | None = None,
            expansion_cfg: ExpansionConfig | None = None, seed: int = 0,
            parallel: bool = False, threads: int | None = None,
            formula_id: str = "", generator_id: str = "") -> CertifiedLatent:
    """Collect up to ``pivot_cfg.restarts`` disjoint certified boxes.

    Sequential mode checks each new box against all boxes accepted so far.
    Parallel mode expands every candidate independently, then accepts them in
    order of decreasing volume, dropping any that overlaps an accepted box.
    """
    pivot_cfg = pivot_cfg or PivotSearchConfig()
    expansion_cfg = expansion_cfg or ExpansionConfig()
    k = reward_graph.nodes[reward_graph.inputs["z"]].size
    verify_graph = reward_graph
    y_arr = None if y is None else np.asarray(y, dtype=float)
    regions: list[Region] = []
    if not parallel:
        for i in range(pivot_cfg.restarts):
            reg = _attempt(reward_graph, verify_graph, i, k, y_arr, pivot_cfg, expansion_cfg,
                           seed, [r.box for r in regions])
            if reg is not None:
                regions.append(reg)
                log.debug("attempt %d accepted, eps=%s", i, reg.eps.max())
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cands = list(pool.map(
                lambda i: _attempt(reward_graph, verify_graph, i, k, y_arr, pivot_cfg,
                                   expansion_cfg, seed, []),
                range(pivot_cfg.restarts)))
        order = sorted((c for c in cands if c is not None), key=lambda r: -r.box.volume())
        for c in order:
            if all(boxes_disjoint(c.box, r.box) for r in regions):
                regions.append(c)
    out = CertifiedLatent(regions, y_arr, formula_id, generator_id, attempts=pivot_cfg.restarts)
    out.fill_probabilities()
    return out


def digest(obj) -> str:
    """Stable short hash of a JSON-serialisable object."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]
