import csv
import re

import numpy as np
import pytest

from certiplan.certify import ExpansionConfig, PivotSearchConfig, certify
from certiplan.evaluation import (DRAW_CAP, MethodRun, acceptance_ratio, export_figure_data,
                                  guidance_sample, loglik_of_run, loglik_summary, run_method)
from certiplan.generators import reward_graph
from certiplan.pipeline import identity_model
from certiplan.stl import Atomic, Component
from certiplan.tasks import builtin_environment

POS = Atomic(Component(0))


def identity_reward():
    return reward_graph(identity_model().graph(), POS, 0, 1, 1)


def _const_sampler(value):
    return lambda rng, m: np.full((m, 1, 1), value)


def test_never_satisfying_sampler_truncates():
    acc = acceptance_ratio(_const_sampler(-1.0), POS, 200, np.random.default_rng(0))
    assert acc.truncated and acc.drawn == DRAW_CAP and acc.accepted == 0
    assert acc.ratio <= 200 / 10 ** 6


def test_alternating_sampler_half():
    def alt(rng, m):
        # violate, satisfy, violate, ...; even chunks keep the phase across calls
        v = np.where(np.arange(m) % 2 == 0, -1.0, 1.0)
        return v.reshape(m, 1, 1)

    acc = acceptance_ratio(alt, POS, 200, np.random.default_rng(0), chunk=10)
    assert acc.ratio == 0.5 and acc.drawn == 400 and not acc.truncated


def test_acceptance_rejects_bad_target():
    with pytest.raises(ValueError):
        acceptance_ratio(_const_sampler(1.0), POS, 0, np.random.default_rng(0))


def test_certified_sampler_ratio_one():
    g = identity_reward()
    regions = certify(g, pivot_cfg=PivotSearchConfig(restarts=3))
    mix = regions.mixture()
    model = identity_model()
    acc = acceptance_ratio(lambda rng, m: model.generate(mix.sample(rng, m)).reshape(m, 1, 1), POS,
                           200, np.random.default_rng(1))
    assert acc.ratio == 1.0


def test_guidance_improves_and_toy_accepts():
    g = identity_reward()
    rng = np.random.default_rng(2)
    cfg = PivotSearchConfig(step_size=0.05, iterations=100)
    for _ in range(20):
        res = guidance_sample(g, cfg, rng)
        assert res.r >= res.r0
    run = run_method("guidance", identity_model(), POS, np.zeros((0, 1)), 50, np.random.default_rng(3),
                     reward=g, pivot_cfg=cfg)
    assert run.ratio == 1.0


def test_loglik_closed_form():
    z = np.zeros((200, 24))
    want = 200 * (-12 * np.log(2 * np.pi))
    assert loglik_summary(z) == pytest.approx(want, rel=1e-14)
    assert want == pytest.approx(-4410.9, abs=0.05)


def test_loglik_permutation_invariant_and_count():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(250, 5))
    assert loglik_summary(z) == pytest.approx(loglik_summary(z[rng.permutation(200)]), rel=1e-13)
    with pytest.raises(ValueError):
        loglik_summary(z[:100])


def test_run_methods_on_toy():
    model = identity_model()
    g = identity_reward()
    regions = certify(g, pivot_cfg=PivotSearchConfig(restarts=3),
                      expansion_cfg=ExpansionConfig(delta=0.05))
    y = np.zeros((0, 1))
    orig = run_method("original", model, POS, y, 100, np.random.default_rng(5))
    cert = run_method("certified", model, POS, y, 100, np.random.default_rng(5), regions=regions)
    sat = run_method("original_sat", model, POS, y, 100, np.random.default_rng(5))
    assert 0.3 < orig.ratio < 0.7
    assert cert.ratio == 1.0 and cert.drawn == 100
    assert np.all(sat.boolean) and sat.z.shape[0] == 100
    assert np.isfinite(loglik_of_run(cert, 100))
    assert loglik_of_run(orig, 10 ** 6) is None
    with pytest.raises(ValueError):
        run_method("certified", model, POS, y, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        run_method("magic", model, POS, y, 10, np.random.default_rng(0))


def _runs():
    rng = np.random.default_rng(6)
    runs = []
    for method, n in (("original", 3), ("certified", 2)):
        traj = rng.uniform(5, 45, size=(n, 25, 2))
        runs.append(MethodRun(method, rng.normal(size=(n, 4)), traj, np.zeros(n), np.ones(n, bool), n, n))
    return runs


def test_export_csv_rows(tmp_path):
    runs = _runs()
    csv_path, _ = export_figure_data(runs, builtin_environment("umaze"), tmp_path)
    with open(csv_path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["method", "trajectory", "t", "s0", "s1"]
    assert len(rows) - 1 == sum(r.traj.shape[0] * r.traj.shape[1] for r in runs)


def test_export_svg_polylines_and_obstacles(tmp_path):
    runs = _runs()
    env = builtin_environment("obstacles")
    _, svg_path = export_figure_data(runs, env, tmp_path, stem="fig")
    text = svg_path.read_text()
    assert text.count("<polyline") == 5
    rects = re.findall(r'class="obstacle"[^>]*data-lower="([^"]+)" data-upper="([^"]+)"', text)
    got = [(tuple(map(float, lo.split(","))), tuple(map(float, hi.split(",")))) for lo, hi in rects]
    want = [(tuple(o.lower), tuple(o.upper)) for o in env.obstacles]
    assert got == want


def test_export_refuses_empty(tmp_path):
    empty = MethodRun("original", np.zeros((0, 2)), np.zeros((0, 3, 2)), np.zeros(0), np.zeros(0, bool), 0, 0)
    with pytest.raises(ValueError):
        export_figure_data([empty], builtin_environment("umaze"), tmp_path)
