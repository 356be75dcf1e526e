"""Standard normal truncated to a union of disjoint boxes.

The certified latent distribution is a mixture: one truncated standard normal
per box, weighted by the box's Gaussian mass.  All masses are kept in log
space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf, log_ndtr, logsumexp, ndtr, ndtri

from .verify import Box

# stands in for an infinite bound; the normal mass beyond it underflows
INF_SIGMA = 38.0
_LOG_2PI = np.log(2.0 * np.pi)


class EmptyRegionError(ValueError):
    """Raised when asked to build or sample a distribution over no boxes."""

    def __init__(self, msg="B = ∅, property unsatisfied or search failed"):
        super().__init__(msg)


def _log_diff_exp(a, b):
    """log(exp(a) - exp(b)) for a >= b."""
    with np.errstate(divide="ignore"):
        return a + np.log1p(-np.exp(b - a))


def interval_log_mass(lower, upper) -> np.ndarray:
    """``log(Phi(u) - Phi(l))`` per coordinate, stable in both tails."""
    l = np.asarray(lower, dtype=float)
    u = np.asarray(upper, dtype=float)
    # reflect intervals in the upper tail so both endpoints are <= 0-ish
    flip = l > 0
    lo = np.where(flip, -u, l)
    hi = np.where(flip, -l, u)
    with np.errstate(divide="ignore"):
        out = _log_diff_exp(log_ndtr(hi), log_ndtr(lo))
    return np.where(u > l, out, -np.inf)


def erf_box_mass(lower, upper) -> np.ndarray:
    """Per-coordinate mass as ``(erf(-l/sqrt2) - erf(-u/sqrt2)) / 2``.

    Note the sign: ``erf(-x)`` is decreasing, so this equals
    ``Phi(u) - Phi(l)``.  Kept for cross-checking, not for tail work.
    """
    l = np.asarray(lower, dtype=float)
    u = np.asarray(upper, dtype=float)
    return 0.5 * (erf(-l / np.sqrt(2.0)) - erf(-u / np.sqrt(2.0)))


def box_log_prob(box: Box) -> float:
    """Log of the standard-normal probability of ``box``; ``-inf`` if degenerate."""
    return float(np.sum(interval_log_mass(box.lower, box.upper)))


def std_normal_logpdf(z) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * _LOG_2PI


def boxes_disjoint(a: Box, b: Box) -> bool:
    """True iff some coordinate separates the boxes strictly; touching faces overlap."""
    if a.dim != b.dim:
        raise ValueError("boxes have different dimensions")
    return bool(np.any((a.upper < b.lower) | (b.upper < a.lower)))


@dataclass(frozen=True)
class TruncatedMixture:
    boxes: tuple[Box, ...]
    log_masses: np.ndarray     # log p(B_i)
    log_total: float           # log p(B)

    @property
    def dim(self) -> int:
        return self.boxes[0].dim

    @property
    def log_weights(self) -> np.ndarray:
        return self.log_masses - self.log_total

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def region_of(self, z) -> np.ndarray:
        """Index of the box holding each row of ``z`` (``-1`` if none)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        out = np.full(z.shape[0], -1)
        for i, b in enumerate(self.boxes):
            out[(out < 0) & b.contains(z)] = i
        return out

    def sample(self, rng, n: int | None = None) -> np.ndarray:
        return sample(self, rng, n)

    def log_density(self, z) -> np.ndarray | float:
        return log_density(self, z)


def build_mixture(boxes, log_masses=None) -> TruncatedMixture:
    """Mixture over disjoint boxes; masses are recomputed when not given."""
    boxes = tuple(boxes)
    if not boxes:
        raise EmptyRegionError()
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            if not boxes_disjoint(boxes[i], boxes[j]):
                raise ValueError(f"boxes {i} and {j} overlap")
    lm = np.array([box_log_prob(b) for b in boxes] if log_masses is None else log_masses, dtype=float)
    if np.all(np.isneginf(lm)):
        raise EmptyRegionError("all boxes have zero probability")
    return TruncatedMixture(boxes, lm, float(logsumexp(lm)))


def sample_truncated(lower, upper, rng, size=None) -> np.ndarray:
    """Inverse-CDF draws from the standard normal truncated to ``[lower, upper]``."""
    l = np.asarray(lower, dtype=float)
    u = np.asarray(upper, dtype=float)
    shape = l.shape if size is None else (size,) + l.shape
    U = rng.uniform(size=shape)
    # sample the lower tail of the reflected interval when it sits above zero
    flip = l > 0
    lo = np.where(flip, -u, l)
    hi = np.where(flip, -l, u)
    plo, phi = ndtr(lo), ndtr(hi)
    x = ndtri(plo + U * (phi - plo))
    x = np.where(flip, -x, x)
    return np.clip(x, l, u)


def sample(mixture: TruncatedMixture, rng, n: int | None = None) -> np.ndarray:
    """One latent vector (``n=None``) or an ``(n, k)`` batch."""
    m = 1 if n is None else n
    p = mixture.weights
    idx = rng.choice(len(mixture.boxes), size=m, p=p / p.sum())
    out = np.empty((m, mixture.dim))
    for i, b in enumerate(mixture.boxes):
        sel = idx == i
        if np.any(sel):
            out[sel] = sample_truncated(b.lower, b.upper, rng, size=int(sel.sum()))
    for i, b in enumerate(mixture.boxes):
        assert np.all(b.contains(out[idx == i])), "truncated sample escaped its box"
    return out[0] if n is None else out


def log_density(mixture: TruncatedMixture, z):
    """``log p(z) - log p(B)`` inside the union of boxes, ``-inf`` outside."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    z2 = np.atleast_2d(z)
    inside = mixture.region_of(z2) >= 0
    out = np.where(inside, std_normal_logpdf(z2) - mixture.log_total, -np.inf)
    return float(out[0]) if single else out


def mixture_log_density(mixture: TruncatedMixture, z):
    """The same density written as a weighted sum of per-box truncated normals."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    terms = []
    for b, lw, lm in zip(mixture.boxes, mixture.log_weights, mixture.log_masses):
        inside = b.contains(z)
        t = np.where(inside, lw + std_normal_logpdf(z) - lm, -np.inf)
        terms.append(t)
    return logsumexp(np.stack(terms), axis=0)
