import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import ndtr

from certiplan.latent import (INF_SIGMA, EmptyRegionError, box_log_prob, build_mixture,
                              interval_log_mass, log_density, mixture_log_density, erf_box_mass,
                              sample, sample_truncated, std_normal_logpdf)
from certiplan.verify import Box


def quad_mass(l, u):
    pdf = lambda x: np.exp(-0.5 * x * x) / np.sqrt(2 * np.pi)  # noqa: E731
    # integrate from the side nearer zero to keep the quadrature well conditioned
    return integrate.quad(pdf, l, u, epsabs=0, epsrel=1e-13, limit=200)[0]


def test_full_box_has_unit_mass():
    assert abs(box_log_prob(Box([-INF_SIGMA] * 4, [INF_SIGMA] * 4))) < 1e-12


def test_half_line_is_half():
    assert np.exp(box_log_prob(Box([0.0], [INF_SIGMA]))) == pytest.approx(0.5, abs=1e-15)


def test_one_sigma_mass():
    p = np.exp(box_log_prob(Box([-1.0], [1.0])))
    assert abs(p - 0.6826894921) < 1e-9
    assert abs(p - quad_mass(-1.0, 1.0)) < 1e-12


def test_degenerate_box_has_no_mass():
    assert box_log_prob(Box([0.0, 1.0], [1.0, 1.0])) == -np.inf


def _grid():
    rng = np.random.default_rng(0)
    cases = [(-1, 1), (0, 38), (-38, 0), (5, 6), (-6, -5), (8, 9), (-9, -8), (10, 10.5), (-0.1, 0.1)]
    while len(cases) < 50:
        l = rng.uniform(-8, 8)
        cases.append((l, l + rng.exponential(1.0)))
    return cases


@pytest.mark.parametrize("l,u", _grid())
def test_mass_matches_quadrature(l, u):
    want = quad_mass(l, u)
    got = float(np.exp(interval_log_mass(np.array([l]), np.array([u]))[0]))
    assert got == pytest.approx(want, rel=1e-9, abs=1e-300)


def test_erf_form_equals_cdf_difference():
    ls, us = np.meshgrid(np.linspace(-6, 6, 41), np.linspace(-6, 6, 41))
    l, u = np.minimum(ls, us).ravel(), np.maximum(ls, us).ravel()
    assert np.max(np.abs(erf_box_mass(l, u) - (ndtr(u) - ndtr(l)))) < 1e-14


def test_single_region_weight():
    m = build_mixture([Box([0.0, -1.0], [1.0, 2.0])])
    assert m.weights.tolist() == [1.0]


def test_symmetric_weights():
    m = build_mixture([Box([-2.0], [-1.0]), Box([1.0], [2.0])])
    assert np.allclose(m.weights, [0.5, 0.5], rtol=0, atol=1e-15)


def test_adjacent_weight_ratio():
    # touching faces count as overlap, so nudge the second box off the first
    m = build_mixture([Box([0.0], [1.0]), Box([1.0 + 1e-15], [2.0])])
    ratio = m.weights[0] / m.weights[1]
    assert ratio == pytest.approx(quad_mass(0, 1) / quad_mass(1, 2), rel=1e-9)
    assert ratio == pytest.approx(0.3413447 / 0.1359051, rel=1e-6)


def test_empty_and_overlapping_rejected():
    with pytest.raises(EmptyRegionError, match="B = ∅"):
        build_mixture([])
    with pytest.raises(ValueError):
        build_mixture([Box([0.0], [1.0]), Box([1.0], [2.0])])


def test_half_normal_mean():
    rng = np.random.default_rng(0)
    m = build_mixture([Box([0.0], [INF_SIGMA])])
    z = sample(m, rng, 100_000)[:, 0]
    se = z.std(ddof=1) / np.sqrt(z.size)
    assert abs(z.mean() - np.sqrt(2 / np.pi)) < 3 * se


def test_no_escapes():
    rng = np.random.default_rng(1)
    boxes = [Box([-3.0, 0.5], [-2.0, 4.0]), Box([6.0, -1.0], [7.0, 1.0]), Box([-0.2, -9.0], [0.3, -8.5])]
    m = build_mixture(boxes)
    z = m.sample(rng, 100_000)
    assert np.all(m.region_of(z) >= 0)


def test_deep_tail_truncation_stays_inside():
    rng = np.random.default_rng(2)
    z = sample_truncated(np.array([12.0, -20.0]), np.array([12.5, -19.0]), rng, size=1000)
    assert np.all((z[:, 0] >= 12.0) & (z[:, 0] <= 12.5))
    assert np.all((z[:, 1] >= -20.0) & (z[:, 1] <= -19.0))
    assert np.all(np.isfinite(z))


def test_region_selection_frequency():
    rng = np.random.default_rng(3)
    m = build_mixture([Box([-2.0], [-1.0]), Box([1.0], [2.0])])
    n = 100_000
    frac = np.mean(m.region_of(m.sample(rng, n)) == 0)
    assert abs(frac - 0.5) < 3 * np.sqrt(0.25 / n)


def test_single_draw_shape():
    m = build_mixture([Box([0.0, 0.0], [1.0, 1.0])])
    assert sample(m, np.random.default_rng(0)).shape == (2,)


def test_log_density_outside_is_neg_inf():
    m = build_mixture([Box([0.0], [1.0])])
    assert log_density(m, np.array([1.5])) == -np.inf
    assert mixture_log_density(m, np.array([[-0.5]]))[0] == -np.inf


def test_full_box_density_is_standard_normal():
    m = build_mixture([Box([-INF_SIGMA], [INF_SIGMA])])
    z = np.linspace(-5, 5, 11)[:, None]
    assert np.allclose(log_density(m, z), stats.norm.logpdf(z[:, 0]), rtol=0, atol=1e-9)


def test_ratio_preserved_and_forms_agree():
    rng = np.random.default_rng(4)
    boxes = [Box([-2.0, -1.0, 0.0], [-1.0, 1.0, 2.0]), Box([0.5, -3.0, -1.0], [3.0, -1.5, 1.0])]
    m = build_mixture(boxes)
    z1, z2 = m.sample(rng, 1000), m.sample(rng, 1000)
    d = log_density(m, z1) - log_density(m, z2)
    assert np.max(np.abs(d - (std_normal_logpdf(z1) - std_normal_logpdf(z2)))) < 1e-12
    assert np.allclose(mixture_log_density(m, z1), log_density(m, z1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("boxes", [
    [Box([-1.5], [-0.5]), Box([0.0], [2.0])],
    [Box([-1.0, -1.0], [0.0, 1.0]), Box([0.5, -2.0], [1.5, 0.0])],
])
def test_density_normalised(boxes):
    rng = np.random.default_rng(5)
    m = build_mixture(boxes)
    lo = np.min([b.lower for b in boxes], axis=0)
    hi = np.max([b.upper for b in boxes], axis=0)
    n = 400_000
    u = rng.uniform(lo, hi, size=(n, lo.size))
    vals = np.exp(log_density(m, u)) * np.prod(hi - lo)
    se = vals.std(ddof=1) / np.sqrt(n)
    assert abs(vals.mean() - 1.0) < 4 * se


def test_samples_match_density_chi_square():
    rng = np.random.default_rng(6)
    m = build_mixture([Box([-1.5], [-0.5]), Box([0.0], [2.0])])
    n = 100_000
    z = m.sample(rng, n)[:, 0]
    edges = np.concatenate([np.linspace(-1.5, -0.5, 11), np.linspace(0.0, 2.0, 21)])
    counts = []
    expected = []
    for a, b in zip(edges[:-1], edges[1:]):
        if a == -0.5:  # the gap between the boxes
            continue
        counts.append(np.sum((z >= a) & (z < b)))
        expected.append(n * (ndtr(b) - ndtr(a)) / np.exp(m.log_total))
    counts, expected = np.array(counts), np.array(expected)
    assert counts.sum() == n - np.sum(z == 2.0)
    _, p = stats.chisquare(counts, expected * counts.sum() / expected.sum())
    assert p > 0.001
