"""Independent reference implementations used to check the spline algebra.

Everything here is written straight from the textbook definitions and
stays deliberately naive; nothing is shared with the package internals.
"""

import numpy as np
from scipy.integrate import quad


def naive_basis(knots, order, i, tau, end=None):
    """Cox-de Boor recursion exactly as defined (half-open intervals).

    ``end`` marks the right end of the domain where the convention is
    left-closed instead.
    """
    knots = np.asarray(knots, dtype=float)
    if order == 1:
        if knots[i] <= tau < knots[i + 1]:
            return 1.0
        if end is not None and tau == end and knots[i] < knots[i + 1] == end:
            return 1.0
        return 0.0
    left = 0.0
    den = knots[i + order - 1] - knots[i]
    if den > 0.0:
        left = (tau - knots[i]) / den * naive_basis(knots, order - 1, i, tau, end)
    right = 0.0
    den = knots[i + order] - knots[i + 1]
    if den > 0.0:
        right = (knots[i + order] - tau) / den * naive_basis(
            knots, order - 1, i + 1, tau, end
        )
    return left + right


def naive_basis_row(knots, order, tau, end=None):
    dim = len(knots) - order
    return np.array([naive_basis(knots, order, i, tau, end) for i in range(dim)])


def segment_polynomial(spline, lo, hi):
    """Recover the polynomial on one knot span by interpolation."""
    p = spline.layout.order
    # stay strictly inside the span so evaluation conventions cannot matter
    ts = np.linspace(lo + 1e-9 * (hi - lo), hi - 1e-9 * (hi - lo), p)
    vals = [spline.value(t) for t in ts]
    return np.polynomial.Polynomial.fit(ts, vals, p - 1)


def spline_quadrature(spline):
    """Adaptive quadrature of the spline, segment by segment."""
    total = 0.0
    bp = spline.layout.breakpoints
    for lo, hi in zip(bp, bp[1:]):
        val, _ = quad(spline.value, lo, hi, limit=200)
        total += val
    return total


def central_difference(fun, x, h=1e-6):
    return (fun(x + h) - fun(x - h)) / (2.0 * h)


def random_layout(rng, order=None, max_interior=3, end=None):
    """Random clamped layout for property tests."""
    p = int(order if order is not None else rng.integers(2, 7))
    n_int = int(rng.integers(0, max_interior + 1))
    end_val = float(end if end is not None else rng.uniform(0.4, 1.0))
    interior = np.sort(rng.uniform(0.05, 0.95, size=n_int)) * end_val
    while np.any(np.diff(np.concatenate([[0.0], interior, [end_val]])) < 0.02):
        interior = np.sort(rng.uniform(0.05, 0.95, size=n_int)) * end_val
    conts = rng.integers(1, p, size=n_int) if p > 1 else np.zeros(n_int, dtype=int)
    from splineplan.bspline import build_layout

    return build_layout([0.0, *interior, end_val], conts, p)


def random_spline(rng, layout, scale=2.0):
    from splineplan.bspline import Spline

    return Spline(layout, rng.normal(0.0, scale, size=layout.dim))
