"""Exact B-spline algebra on clamped knot vectors over normalized time.

Everything the planner needs from spline theory lives here: basis
construction and evaluation (Cox-de Boor), Greville sites and square
collocation systems, Boehm knot insertion, exact tail extraction,
derivative/integral transforms, and sum/product basis combination.

Conventions
-----------
* ``order`` p counts coefficients per polynomial segment (degree p - 1).
* A continuity index ``c`` at a breakpoint means the function and its
  first ``c - 1`` derivatives are continuous there (C^{c-1}); the knot
  multiplicity is ``p - c``.
* Basis evaluation is right-continuous at interior knots and left-closed
  at the right end of the domain.  Where a Greville site coincides with a
  knot of multiplicity ``p`` (a discontinuity), the square collocation
  system evaluates the first of the two coincident sites as a left limit
  so that the system stays unisolvent.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

try:
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    _HAVE_NUMBA = False

__all__ = [
    "LayoutError",
    "DomainError",
    "KnotLayout",
    "Spline",
    "build_layout",
    "eval_basis",
    "eval_basis_many",
    "eval_spline",
    "insert_knot",
    "extract_tail",
    "derivative_transform",
    "integral_functional",
    "combine_sum_layout",
    "combine_product_layout",
    "collocation_matrix",
    "greville_collocation",
    "solve_collocation",
    "hull_bounds",
]

_COINCIDENT_TOL = 1e-12


class LayoutError(ValueError):
    """Raised for invalid breakpoint/continuity/order combinations."""


class DomainError(ValueError):
    """Raised when an evaluation point lies outside the spline domain."""


class KnotLayout:
    """Clamped knot vector derived from breakpoints and continuities.

    Parameters
    ----------
    breakpoints : sequence of float
        Strictly increasing, first entry 0, last entry <= 1.
    continuities : sequence of int
        One entry per interior breakpoint, each in ``[0, order - 1]``.
    order : int
        Spline order (degree + 1), >= 1.
    """

    __slots__ = ("order", "breakpoints", "continuities", "knots", "dim", "_hash")

    def __init__(self, breakpoints, continuities, order):
        order = int(order)
        bp = tuple(float(b) for b in breakpoints)
        cont = tuple(int(c) for c in continuities)
        if order < 1:
            raise LayoutError(f"order must be >= 1, got {order}")
        if len(bp) < 2:
            raise LayoutError("need at least start and end breakpoints")
        if abs(bp[0]) > _COINCIDENT_TOL:
            raise LayoutError(f"first breakpoint must be 0, got {bp[0]}")
        bp = (0.0,) + bp[1:]
        # small slop so finite differencing at the horizon boundary stays legal
        if bp[-1] > 1.0 + 1e-6:
            raise LayoutError(f"last breakpoint must be <= 1, got {bp[-1]}")
        if any(b1 - b0 <= 0.0 for b0, b1 in zip(bp, bp[1:])):
            raise LayoutError(f"breakpoints must be strictly increasing: {bp}")
        if len(cont) != len(bp) - 2:
            raise LayoutError(
                f"expected {len(bp) - 2} continuities for {len(bp)} breakpoints, "
                f"got {len(cont)}"
            )
        if any(c < 0 or c > order - 1 for c in cont):
            raise LayoutError(f"continuities must lie in [0, {order - 1}]: {cont}")

        self.order = order
        self.breakpoints = bp
        self.continuities = cont

        knots = [bp[0]] * order
        for value, c in zip(bp[1:-1], cont):
            knots.extend([value] * (order - c))
        knots.extend([bp[-1]] * order)
        arr = np.array(knots)
        arr.flags.writeable = False
        self.knots = arr
        self.dim = len(knots) - order
        self._hash = hash((self.order, self.breakpoints, self.continuities))

    @property
    def interior(self):
        return self.breakpoints[1:-1]

    @property
    def domain_end(self):
        return self.breakpoints[-1]

    @property
    def intervals(self):
        return np.diff(self.breakpoints)

    @property
    def multiplicities(self):
        return tuple(self.order - c for c in self.continuities)

    def greville(self):
        """Greville sites xi_n = mean of the p-1 knots following knot n."""
        p = self.order
        if p < 2:
            raise LayoutError("Greville sites are undefined for order 1")
        t = self.knots
        window = np.lib.stride_tricks.sliding_window_view(t[1:-1], p - 1)
        return window[: self.dim].mean(axis=1)

    def __eq__(self, other):
        if not isinstance(other, KnotLayout):
            return NotImplemented
        return (
            self.order == other.order
            and self.breakpoints == other.breakpoints
            and self.continuities == other.continuities
        )

    def __hash__(self):
        return self._hash

    def __repr__(self):
        return (
            f"KnotLayout(order={self.order}, breakpoints={self.breakpoints}, "
            f"continuities={self.continuities})"
        )


def build_layout(breakpoints, continuities, order) -> KnotLayout:
    """Construct a :class:`KnotLayout`; see the class for preconditions."""
    return KnotLayout(breakpoints, continuities, order)


class Spline:
    """B-spline: a coefficient vector over a :class:`KnotLayout`."""

    __slots__ = ("layout", "coefficients")

    def __init__(self, layout: KnotLayout, coefficients):
        coef = np.asarray(coefficients, dtype=float)
        if coef.shape != (layout.dim,):
            raise LayoutError(
                f"coefficient count {coef.shape} does not match basis dimension "
                f"{layout.dim}"
            )
        coef = coef.copy()
        coef.flags.writeable = False
        self.layout = layout
        self.coefficients = coef

    def value(self, tau, from_left=False):
        return float(eval_basis(self.layout, tau, from_left) @ self.coefficients)

    def sample(self, taus):
        return eval_basis_many(self.layout, taus) @ self.coefficients

    def __repr__(self):
        return f"Spline(dim={self.layout.dim}, domain=[0, {self.layout.domain_end}])"


def _find_spans(layout: KnotLayout, taus, from_left):
    """Span index j with t_j <= tau < t_{j+1} (or the left-limit variant)."""
    t = layout.knots
    p = layout.order
    taus = np.asarray(taus, dtype=float)
    end = layout.domain_end
    # tolerance matches the construction slop on the final breakpoint
    if np.any(taus < -1e-6) or np.any(taus > end + 1e-6):
        bad = taus[(taus < -1e-6) | (taus > end + 1e-6)]
        raise DomainError(f"evaluation points outside [0, {end}]: {bad[:4]}")
    side = "left" if from_left else "right"
    spans = np.searchsorted(t, taus, side=side) - 1
    return np.clip(spans, p - 1, layout.dim - 1)


def _basis_rows(layout: KnotLayout, taus, spans):
    """Vectorized Cox-de Boor triangle; rows of nonzero basis values."""
    t = layout.knots
    p = layout.order
    m = len(taus)
    values = np.zeros((m, p))
    values[:, 0] = 1.0
    for r in range(1, p):
        saved = np.zeros(m)
        for i in range(r):
            left = t[spans - r + 1 + i]
            right = t[spans + 1 + i]
            term = values[:, i] / (right - left)
            values[:, i] = saved + (right - taus) * term
            saved = (taus - left) * term
        values[:, r] = saved
    return values


if _HAVE_NUMBA:

    @_njit(cache=True)
    def _basis_dense_kernel(knots, p, taus, spans, out):  # pragma: no cover
        values = np.zeros(p)
        for s in range(taus.shape[0]):
            j = spans[s]
            tau = taus[s]
            for i in range(p):
                values[i] = 0.0
            values[0] = 1.0
            for r in range(1, p):
                saved = 0.0
                for i in range(r):
                    left = knots[j - r + 1 + i]
                    right = knots[j + 1 + i]
                    term = values[i] / (right - left)
                    values[i] = saved + (right - tau) * term
                    saved = (tau - left) * term
                values[r] = saved
            for i in range(p):
                out[s, j - p + 1 + i] = values[i]


def eval_basis_many(layout: KnotLayout, taus, from_left=False):
    """Dense (len(taus), L) matrix of basis values."""
    taus = np.atleast_1d(np.asarray(taus, dtype=float))
    spans = _find_spans(layout, taus, from_left)
    p = layout.order
    out = np.zeros((len(taus), layout.dim))
    if _HAVE_NUMBA:
        _basis_dense_kernel(layout.knots, p, taus, spans, out)
        return out
    rows = _basis_rows(layout, taus, spans)
    cols = spans[:, None] - (p - 1) + np.arange(p)[None, :]
    np.put_along_axis(out, cols, rows, axis=1)
    return out


def eval_basis(layout: KnotLayout, tau, from_left=False):
    """All L basis values at a single point."""
    return eval_basis_many(layout, [tau], from_left)[0]


def eval_spline(spline: Spline, tau, from_left=False):
    """S(tau) = sum_l c_l B_l(tau)."""
    return spline.value(tau, from_left)


def _locate_breakpoint(layout: KnotLayout, tau):
    """Index into breakpoints if tau coincides with one, else None."""
    for idx, b in enumerate(layout.breakpoints):
        if abs(tau - b) <= _COINCIDENT_TOL:
            return idx
    return None


def insert_knot(spline: Spline, tau_star) -> Spline:
    """Boehm insertion of one knot at ``tau_star`` (value-preserving).

    ``tau_star`` must lie strictly inside the domain and the resulting
    multiplicity must not exceed the order.
    """
    layout = spline.layout
    p = layout.order
    tau_star = float(tau_star)
    if not (0.0 < tau_star < layout.domain_end):
        raise DomainError(
            f"insertion point {tau_star} not strictly inside (0, {layout.domain_end})"
        )

    bp_idx = _locate_breakpoint(layout, tau_star)
    if bp_idx is not None:
        tau_star = layout.breakpoints[bp_idx]
        c_old = layout.continuities[bp_idx - 1]
        if c_old == 0:
            raise LayoutError(
                f"knot multiplicity at {tau_star} would exceed the order {p}"
            )
        new_bp = layout.breakpoints
        new_cont = (
            layout.continuities[: bp_idx - 1]
            + (c_old - 1,)
            + layout.continuities[bp_idx:]
        )
    else:
        pos = int(np.searchsorted(layout.breakpoints, tau_star))
        new_bp = layout.breakpoints[:pos] + (tau_star,) + layout.breakpoints[pos:]
        new_cont = (
            layout.continuities[: pos - 1] + (p - 1,) + layout.continuities[pos - 1 :]
        )

    t = layout.knots
    span = int(np.searchsorted(t, tau_star, side="right") - 1)
    c = spline.coefficients
    new_c = np.empty(layout.dim + 1)
    new_c[: span - p + 2] = c[: span - p + 2]
    new_c[span + 1 :] = c[span:]
    for i in range(span - p + 2, span + 1):
        denom = t[i + p - 1] - t[i]
        alpha = (tau_star - t[i]) / denom
        new_c[i] = alpha * c[i] + (1.0 - alpha) * c[i - 1]

    new_layout = KnotLayout(new_bp, new_cont, p)
    return Spline(new_layout, new_c)


def extract_tail(spline: Spline, tau0) -> Spline:
    """Restrict to [tau0, end] and shift so the result starts at 0.

    The returned spline satisfies out(s) = in(s + tau0) exactly: the knot
    at ``tau0`` is raised to full multiplicity by insertion, the leading
    coefficients are dropped, and the knots are translated.
    """
    layout = spline.layout
    p = layout.order
    tau0 = float(tau0)
    if not (0.0 < tau0 < layout.domain_end):
        raise DomainError(
            f"tail start {tau0} not strictly inside (0, {layout.domain_end})"
        )
    bp_idx = _locate_breakpoint(layout, tau0)
    if bp_idx is not None:
        tau0 = layout.breakpoints[bp_idx]

    current = spline
    while True:
        idx = _locate_breakpoint(current.layout, tau0)
        mult = 0 if idx is None else p - current.layout.continuities[idx - 1]
        if mult >= p:
            break
        current = insert_knot(current, tau0)

    lay = current.layout
    keep = [b for b in lay.breakpoints if b > tau0 + _COINCIDENT_TOL]
    keep_cont = lay.continuities[len(lay.breakpoints) - 1 - len(keep) :]
    tail_bp = [0.0] + [b - tau0 for b in keep]
    tail_layout = KnotLayout(tail_bp, keep_cont, p)
    tail_coef = current.coefficients[current.layout.dim - tail_layout.dim :]
    return Spline(tail_layout, tail_coef)


@lru_cache(maxsize=512)
def derivative_transform(layout: KnotLayout):
    """Layout of the derivative spline and the coefficient map onto it.

    The target has order p - 1 with end multiplicities reduced by one and
    interior multiplicities unchanged (continuities reduced by one), so
    every interior continuity must be >= 1.
    """
    p = layout.order
    if p < 2:
        raise LayoutError("cannot differentiate an order-1 spline")
    if any(c == 0 for c in layout.continuities):
        raise LayoutError("cannot differentiate across a discontinuous breakpoint")
    target = KnotLayout(
        layout.breakpoints, tuple(c - 1 for c in layout.continuities), p - 1
    )
    t = layout.knots
    n = layout.dim
    matrix = np.zeros((n - 1, n))
    for i in range(n - 1):
        factor = (p - 1) / (t[i + p] - t[i + 1])
        matrix[i, i] = -factor
        matrix[i, i + 1] = factor
    matrix.flags.writeable = False
    return target, matrix


@lru_cache(maxsize=512)
def integral_functional(layout: KnotLayout):
    """Weights w with integral(S) over the domain = w @ coefficients."""
    t = layout.knots
    p = layout.order
    w = (t[p:] - t[:-p]) / p
    w = np.array(w)
    w.flags.writeable = False
    return w


def _merge_interiors(a: KnotLayout, b: KnotLayout):
    entries = [(v, c) for v, c in zip(a.interior, a.continuities)]
    entries += [(v, c) for v, c in zip(b.interior, b.continuities)]
    entries.sort(key=lambda e: e[0])
    for (v0, _), (v1, _) in zip(entries, entries[1:]):
        if v1 - v0 <= _COINCIDENT_TOL:
            raise LayoutError(
                f"coincident interior breakpoints {v0} from distinct layouts"
            )
    return entries


def combine_sum_layout(a: KnotLayout, b: KnotLayout) -> KnotLayout:
    """Layout representing sums of splines from ``a`` and ``b``.

    Orders must match and the interior breakpoints of distinct layouts
    must be pairwise distinct; identical layouts combine to themselves.
    """
    if a.order != b.order:
        raise LayoutError(f"order mismatch: {a.order} != {b.order}")
    if a == b:
        return a
    if abs(a.domain_end - b.domain_end) > _COINCIDENT_TOL:
        raise LayoutError(
            f"domain ends differ: {a.domain_end} != {b.domain_end}"
        )
    entries = _merge_interiors(a, b)
    bp = [0.0] + [v for v, _ in entries] + [a.domain_end]
    cont = [c for _, c in entries]
    return KnotLayout(bp, cont, a.order)


def combine_product_layout(a: KnotLayout, b: KnotLayout) -> KnotLayout:
    """Layout representing products of splines from ``a`` and ``b``.

    The order is p_a + p_b - 1.  A breakpoint unique to one operand keeps
    that operand's continuity index (the other factor is locally smooth);
    the self-product keeps all continuities.
    """
    order = a.order + b.order - 1
    if a == b:
        return KnotLayout(a.breakpoints, a.continuities, order)
    if abs(a.domain_end - b.domain_end) > _COINCIDENT_TOL:
        raise LayoutError(
            f"domain ends differ: {a.domain_end} != {b.domain_end}"
        )
    entries = _merge_interiors(a, b)
    bp = [0.0] + [v for v, _ in entries] + [a.domain_end]
    cont = [c for _, c in entries]
    return KnotLayout(bp, cont, order)


def collocation_matrix(layout: KnotLayout, sites, from_left=None):
    """Matrix with entry (r, l) = B_l(site_r).

    ``from_left`` may be a boolean mask selecting left-limit evaluation
    per site; by default all sites use the standard convention.
    """
    sites = np.atleast_1d(np.asarray(sites, dtype=float))
    if from_left is None:
        return eval_basis_many(layout, sites)
    from_left = np.asarray(from_left, dtype=bool)
    out = np.zeros((len(sites), layout.dim))
    if np.any(~from_left):
        out[~from_left] = eval_basis_many(layout, sites[~from_left])
    if np.any(from_left):
        out[from_left] = eval_basis_many(layout, sites[from_left], from_left=True)
    return out


@lru_cache(maxsize=512)
def greville_collocation(layout: KnotLayout):
    """Square unisolvent collocation system at the Greville sites.

    Returns ``(sites, sides, matrix)``.  ``sides[n]`` is True where site n
    must be evaluated as a left limit: that happens exactly when the basis
    function's support ends at the site (knot multiplicity equal to the
    order, and at the right end of the domain).
    """
    sites = layout.greville()
    t = layout.knots
    p = layout.order
    n = np.arange(layout.dim)
    sides = t[n + 1] == t[n + p]
    matrix = collocation_matrix(layout, sites, sides)
    sites.flags.writeable = False
    sides.flags.writeable = False
    matrix.flags.writeable = False
    return sites, sides, matrix


def solve_collocation(layout: KnotLayout, values) -> Spline:
    """Spline whose (side-aware) Greville values equal ``values``."""
    _, _, matrix = greville_collocation(layout)
    return Spline(layout, np.linalg.solve(matrix, np.asarray(values, dtype=float)))


def hull_bounds(spline: Spline):
    """(min, max) of the coefficients; bounds S on the whole domain."""
    c = spline.coefficients
    return float(c.min()), float(c.max())
