"""Acceptance ratios, latent log-likelihoods and figure exports.

Satisfaction is always recomputed with the STL monitor on the generated
trajectory; verifier output is never reused here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .certify import CertifiedLatent, PivotSearchConfig, pivot_search, reward_and_grad
from .generators import Model, concat_condition
from .graph import Graph
from .latent import std_normal_logpdf
from .stl import Formula, batch_boolean, batch_robustness

DRAW_CAP = 10 ** 6
METHODS = ("original", "guidance", "certified", "original_sat")


@dataclass
class Acceptance:
    ratio: float
    drawn: int
    accepted: int
    truncated: bool = False

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "drawn": self.drawn, "accepted": self.accepted,
                "truncated": self.truncated}


def acceptance_ratio(sampler, formula: Formula, target_accepted: int, rng,
                     cap: int = DRAW_CAP, chunk: int = 1000) -> Acceptance:
    """Draw until ``target_accepted`` satisfying trajectories are seen.

    ``sampler(rng, m)`` returns ``m`` full trajectories ``(m, T, n)``.  Draws
    are consumed in order, so the count stops exactly at the target-th hit.
    When ``cap`` draws pass first, the ratio is ``accepted / cap`` and the
    result is flagged as truncated.
    """
    if target_accepted < 1:
        raise ValueError("target_accepted must be >= 1")
    drawn = accepted = 0
    while drawn < cap:
        m = min(chunk, cap - drawn)
        ok = batch_boolean(formula, sampler(rng, m))
        hits = np.flatnonzero(ok)
        need = target_accepted - accepted
        if hits.size >= need:
            drawn += int(hits[need - 1]) + 1
            return Acceptance(target_accepted / drawn, drawn, target_accepted)
        accepted += hits.size
        drawn += m
    return Acceptance(accepted / drawn, drawn, accepted, truncated=True)


@dataclass
class GuidanceResult:
    z0: np.ndarray
    z: np.ndarray
    r0: float
    r: float


def guidance_sample(reward_graph: Graph, pivot_cfg: PivotSearchConfig, rng, y=None) -> GuidanceResult:
    """One uncertified gradient-ascent run from a fresh standard-normal start."""
    k = reward_graph.nodes[reward_graph.inputs["z"]].size
    z0 = rng.standard_normal(k)
    z = pivot_search(reward_graph, z0, pivot_cfg, y)
    r0, _ = reward_and_grad(reward_graph, z0, y)
    r, _ = reward_and_grad(reward_graph, z, y)
    return GuidanceResult(z0, z, r0, r)


def loglik_summary(latents, count: int = 200) -> float:
    """Sum of standard-normal log densities over the first ``count`` latents."""
    z = np.atleast_2d(np.asarray(latents, dtype=float))
    if z.shape[0] < count:
        raise ValueError(f"need {count} latents, got {z.shape[0]}")
    return float(np.sum(std_normal_logpdf(z[:count])))


@dataclass
class MethodRun:
    method: str
    z: np.ndarray            # (N, k)
    traj: np.ndarray         # (N, T, n) full trajectories
    robustness: np.ndarray   # (N,)
    boolean: np.ndarray      # (N,)
    drawn: int
    accepted: int
    truncated: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.accepted > self.drawn:
            raise ValueError("accepted exceeds drawn")

    @property
    def logp(self) -> np.ndarray:
        return std_normal_logpdf(self.z)

    @property
    def ratio(self) -> float:
        return self.accepted / self.drawn if self.drawn else float("nan")

    def to_dict(self) -> dict:
        return {"method": self.method, "drawn": self.drawn, "accepted": self.accepted,
                "ratio": self.ratio, "truncated": self.truncated,
                "z": self.z.tolist(), "robustness": self.robustness.tolist(),
                "boolean": self.boolean.astype(int).tolist(), "meta": self.meta}


def _judge(formula, model, z, y):
    traj = concat_condition(y, model.generate(z, y))
    return traj, batch_robustness(formula, traj), batch_boolean(formula, traj)


def run_method(method: str, model: Model, formula: Formula, y, n: int, rng,
               reward: Graph | None = None, regions: CertifiedLatent | None = None,
               pivot_cfg: PivotSearchConfig | None = None, cap: int = DRAW_CAP,
               chunk: int = 1000) -> MethodRun:
    """Sample with one method until ``n`` satisfying trajectories (or the cap).

    Records every draw, so ``drawn`` and ``accepted`` give the acceptance
    ratio directly.  ``original_sat`` is ``original`` filtered to satisfying
    draws.
    """
    y = np.asarray(y, dtype=float)
    k = model.latent_dim
    zs, trs, rs, bs = [], [], [], []
    accepted = drawn = 0
    if method in ("original", "original_sat", "certified"):
        if method == "certified":
            if regions is None:
                raise ValueError("certified sampling needs a region set")
            mix = regions.mixture()
            draw = lambda m: mix.sample(rng, m)  # noqa: E731
        else:
            draw = lambda m: rng.standard_normal((m, k))  # noqa: E731
        while accepted < n and drawn < cap:
            z = draw(min(chunk, cap - drawn))
            traj, r, b = _judge(formula, model, z, y)
            hits = np.flatnonzero(b)
            need = n - accepted
            stop = int(hits[need - 1]) + 1 if hits.size >= need else z.shape[0]
            zs.append(z[:stop]), trs.append(traj[:stop]), rs.append(r[:stop]), bs.append(b[:stop])
            accepted += int(b[:stop].sum())
            drawn += stop
    elif method == "guidance":
        if reward is None:
            raise ValueError("guidance sampling needs the reward graph")
        cfg = pivot_cfg or PivotSearchConfig()
        while accepted < n and drawn < cap:
            res = guidance_sample(reward, cfg, rng, y)
            traj, r, b = _judge(formula, model, res.z[None], y)
            zs.append(res.z[None]), trs.append(traj), rs.append(r), bs.append(b)
            accepted += int(b[0])
            drawn += 1
    else:
        raise ValueError(f"unknown method {method!r}")
    run = MethodRun(method, np.concatenate(zs), np.concatenate(trs), np.concatenate(rs),
                    np.concatenate(bs), drawn, accepted, truncated=accepted < n)
    if method == "original_sat":
        keep = run.boolean
        run = MethodRun(method, run.z[keep], run.traj[keep], run.robustness[keep],
                        run.boolean[keep], drawn, accepted, run.truncated)
    return run


def loglik_of_run(run: MethodRun, count: int) -> float | None:
    """Table-style summed log-likelihood; guidance and certified count only
    accepted samples, original counts every draw."""
    z = run.z if run.method == "original" else run.z[run.boolean]
    if z.shape[0] < count:
        return None
    return loglik_summary(z, count)


# ---------------------------------------------------------------------------
# figure data

_COLORS = {"original": "#d62728", "guidance": "#ff7f0e", "certified": "#2ca02c",
           "original_sat": "#1f77b4", "data": "#1f77b4"}


def export_figure_data(runs, env, out_dir, stem: str = "trajectories") -> tuple[Path, Path]:
    """Write trajectories as CSV and an SVG overlay (first two state dims)."""
    runs = [runs] if isinstance(runs, MethodRun) else list(runs)
    if not runs or all(r.traj.shape[0] == 0 for r in runs):
        raise ValueError("nothing to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"{stem}.csv"
    svg_path = out / f"{stem}.svg"
    n = runs[0].traj.shape[2]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "trajectory", "t"] + [f"s{i}" for i in range(n)])
        for run in runs:
            for j, tr in enumerate(run.traj):
                for t, s in enumerate(tr):
                    w.writerow([run.method, j, t] + [repr(float(v)) for v in s])
    lo = np.asarray(env.bounds[0], dtype=float)[:2]
    hi = np.asarray(env.bounds[1], dtype=float)[:2]
    scale = 400.0 / float(np.max(hi - lo))
    W, H = (hi - lo) * scale

    def px(p):
        return (p[0] - lo[0]) * scale, H - (p[1] - lo[1]) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W:.1f}" height="{H:.1f}">',
             f'<rect x="0" y="0" width="{W:.1f}" height="{H:.1f}" fill="white" stroke="black"/>']
    for o in env.obstacles:
        ol, ou = o.lower[:2], o.upper[:2]
        x0, y1 = px(ol)
        x1, y0 = px(ou)
        parts.append(f'<rect class="obstacle" x="{x0:.3f}" y="{y0:.3f}" width="{x1 - x0:.3f}" '
                     f'height="{y1 - y0:.3f}" fill="#888888" data-lower="{ol[0]:g},{ol[1]:g}" '
                     f'data-upper="{ou[0]:g},{ou[1]:g}"/>')
    for run in runs:
        col = _COLORS.get(run.method, "#000000")
        for tr in run.traj:
            pts = " ".join("{:.3f},{:.3f}".format(*px(s)) for s in tr)
            parts.append(f'<polyline class="{run.method}" points="{pts}" fill="none" '
                         f'stroke="{col}" stroke-width="1" stroke-opacity="0.6"/>')
    parts.append("</svg>")
    svg_path.write_text("\n".join(parts) + "\n")
    return csv_path, svg_path
