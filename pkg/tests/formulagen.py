"""Random STL formulas and signals for property tests."""

import numpy as np

from certiplan.stl import (Abs, Affine, And, Atomic, Component, Const, Eventually, Globally,
                           InfNormDistance, Max2, Min2, Negate, Not, Or, TrueF, Until)


def random_expr(rng, n, depth=2):
    r = rng.random()
    if depth == 0 or r < 0.35:
        k = rng.integers(0, 3)
        if k == 0:
            return Component(int(rng.integers(0, n)))
        if k == 1:
            return Affine(rng.normal(size=n), rng.normal())
        return InfNormDistance(rng.normal(size=n), rng.uniform(0.1, 1.0, size=n))
    k = rng.integers(0, 5)
    if k == 0:
        return Negate(random_expr(rng, n, depth - 1))
    if k == 1:
        return Min2(random_expr(rng, n, depth - 1), random_expr(rng, n, depth - 1))
    if k == 2:
        return Max2(random_expr(rng, n, depth - 1), random_expr(rng, n, depth - 1))
    if k == 3:
        return Abs(random_expr(rng, n, depth - 1))
    return Affine(rng.normal(size=n), rng.normal()) if rng.random() < 0.5 else Const(float(rng.normal()))


def random_formula(rng, n, depth=3, true_ok=True):
    if depth == 0 or rng.random() < 0.25:
        if true_ok and rng.random() < 0.05:
            return TrueF()
        return Atomic(random_expr(rng, n))
    k = rng.integers(0, 7)
    sub = lambda: random_formula(rng, n, depth - 1, true_ok)  # noqa: E731
    lo = int(rng.integers(0, 3))
    hi = lo + int(rng.integers(0, 3))
    if k == 0:
        return Not(sub())
    if k == 1:
        return And(sub(), sub())
    if k == 2:
        return Or(sub(), sub())
    if k == 3:
        return Until(lo, hi, sub(), sub())
    if k == 4:
        return Eventually(lo, hi, sub())
    if k == 5:
        return Globally(lo, hi, sub())
    return Not(Not(sub()))


def random_signal(rng, length, n):
    return rng.normal(size=(length, n)) * 2.0
