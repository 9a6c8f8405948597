"""Spline algebra tests: frozen examples plus randomized property checks."""

import numpy as np
import pytest

from splineplan.bspline import (
    DomainError,
    KnotLayout,
    LayoutError,
    Spline,
    build_layout,
    collocation_matrix,
    combine_product_layout,
    combine_sum_layout,
    derivative_transform,
    eval_basis,
    eval_basis_many,
    eval_spline,
    extract_tail,
    greville_collocation,
    hull_bounds,
    insert_knot,
    integral_functional,
    solve_collocation,
)

from oracles import (
    central_difference,
    naive_basis_row,
    random_layout,
    random_spline,
    segment_polynomial,
    spline_quadrature,
)


class TestBuildLayout:
    def test_no_interior(self):
        lay = build_layout([0.0, 1.0], [], 6)
        assert lay.dim == 6
        np.testing.assert_array_equal(lay.knots, [0.0] * 6 + [1.0] * 6)

    def test_interior_repetition(self):
        lay = build_layout([0.0, 0.4, 1.0], [3], 6)
        assert lay.dim == 9
        assert list(lay.knots).count(0.4) == 3  # p - c repetitions

    def test_continuity_out_of_range(self):
        with pytest.raises(LayoutError):
            build_layout([0.0, 0.5, 1.0], [6], 6)

    def test_non_increasing_breakpoints(self):
        with pytest.raises(LayoutError):
            build_layout([0.0, 0.6, 0.5, 1.0], [2, 2], 4)

    def test_bad_order(self):
        with pytest.raises(LayoutError):
            build_layout([0.0, 1.0], [], 0)

    def test_layout_invariants_random(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            lay = random_layout(rng)
            p = lay.order
            t = lay.knots
            assert np.all(np.diff(t) >= 0)
            np.testing.assert_array_equal(t[:p], 0.0)
            np.testing.assert_array_equal(t[-p:], lay.domain_end)
            assert lay.dim == p + sum(p - c for c in lay.continuities)


class TestGreville:
    def test_clamped_order6(self):
        lay = build_layout([0.0, 1.0], [], 6)
        np.testing.assert_allclose(lay.greville(), [0.0, 0.2, 0.4, 0.6, 0.8, 1.0])

    def test_order2(self):
        lay = build_layout([0.0, 0.5, 1.0], [1], 2)
        np.testing.assert_allclose(lay.greville(), [0.0, 0.5, 1.0])

    def test_interior_frozen_values(self):
        # direct evaluation of the averaging formula, computed independently
        lay = build_layout([0.0, 0.4, 1.0], [3], 6)
        xi = lay.greville()
        np.testing.assert_allclose(
            xi, [0.0, 0.08, 0.16, 0.24, 0.44, 0.64, 0.76, 0.88, 1.0], atol=1e-15
        )
        assert np.all(np.diff(xi) >= 0)

    def test_order1_unsupported(self):
        lay = build_layout([0.0, 0.5, 1.0], [0], 1)
        with pytest.raises(LayoutError):
            lay.greville()


class TestEvalBasis:
    def test_partition_of_unity_random(self):
        rng = np.random.default_rng(11)
        for _ in range(40):
            lay = random_layout(rng)
            taus = rng.uniform(0.0, lay.domain_end, size=25)
            vals = eval_basis_many(lay, taus)
            np.testing.assert_allclose(vals.sum(axis=1), 1.0, atol=1e-12)
            assert vals.min() >= -1e-14

    def test_piecewise_constant(self):
        lay = build_layout([0.0, 0.5, 1.0], [0], 1)
        np.testing.assert_allclose(eval_basis(lay, 0.25), [1.0, 0.0])
        np.testing.assert_allclose(eval_basis(lay, 0.75), [0.0, 1.0])

    def test_frozen_interior_knot_values(self):
        # against an independent Cox-de Boor oracle, evaluated at the knot
        lay = build_layout([0.0, 0.4, 1.0], [3], 6)
        got = eval_basis(lay, 0.4)
        np.testing.assert_allclose(
            got, [0.0, 0.0, 0.0, 0.36, 0.48, 0.16, 0.0, 0.0, 0.0], atol=1e-14
        )
        oracle = naive_basis_row(lay.knots, 6, 0.4, end=1.0)
        np.testing.assert_allclose(got, oracle, atol=1e-14)

    def test_matches_naive_oracle_random(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            lay = random_layout(rng)
            for tau in rng.uniform(0.0, lay.domain_end, size=5):
                oracle = naive_basis_row(lay.knots, lay.order, tau, lay.domain_end)
                np.testing.assert_allclose(eval_basis(lay, tau), oracle, atol=1e-12)

    def test_right_end_left_closed(self):
        lay = build_layout([0.0, 1.0], [], 4)
        vals = eval_basis(lay, 1.0)
        np.testing.assert_allclose(vals, [0.0, 0.0, 0.0, 1.0])

    def test_outside_domain(self):
        lay = build_layout([0.0, 0.8], [], 3)
        with pytest.raises(DomainError):
            eval_basis(lay, 0.9)


class TestEvalSpline:
    def test_constant(self):
        lay = build_layout([0.0, 0.3, 1.0], [2], 5)
        s = Spline(lay, np.full(lay.dim, 7.3))
        for tau in np.linspace(0, 1, 17):
            assert eval_spline(s, tau) == pytest.approx(7.3, abs=1e-12)

    def test_linear_precision(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            lay = random_layout(rng)
            s = Spline(lay, lay.greville())
            taus = rng.uniform(0, lay.domain_end, size=50)
            np.testing.assert_allclose(s.sample(taus), taus, atol=1e-12)

    def test_matches_segment_polynomial(self):
        rng = np.random.default_rng(7)
        lay = build_layout([0.0, 0.35, 0.7, 1.0], [3, 2], 6)
        s = random_spline(rng, lay)
        for lo, hi in zip(lay.breakpoints, lay.breakpoints[1:]):
            poly = segment_polynomial(s, lo, hi)
            taus = rng.uniform(lo, hi, size=300)
            np.testing.assert_allclose(s.sample(taus), poly(taus), atol=1e-9)


class TestInsertKnot:
    def test_invariance(self):
        rng = np.random.default_rng(13)
        lay = build_layout([0.0, 1.0], [], 6)
        s = random_spline(rng, lay)
        s2 = insert_knot(s, 0.5)
        taus = np.linspace(0, 1, 1000)
        np.testing.assert_allclose(s2.sample(taus), s.sample(taus), atol=1e-10)

    def test_double_insertion(self):
        rng = np.random.default_rng(17)
        lay = build_layout([0.0, 1.0], [], 6)
        s = random_spline(rng, lay)
        s2 = insert_knot(insert_knot(s, 0.5), 0.5)
        assert list(s2.layout.knots).count(0.5) == 2
        taus = np.linspace(0, 1, 1000)
        np.testing.assert_allclose(s2.sample(taus), s.sample(taus), atol=1e-10)

    def test_hull_tightens(self):
        rng = np.random.default_rng(19)
        lay = build_layout([0.0, 1.0], [], 5)
        s = random_spline(rng, lay)
        lo0, hi0 = hull_bounds(s)
        s2 = insert_knot(s, 0.37)
        lo1, hi1 = hull_bounds(s2)
        assert hi1 - lo1 <= hi0 - lo0 + 1e-12

    def test_boundary_rejected(self):
        lay = build_layout([0.0, 1.0], [], 4)
        s = Spline(lay, np.zeros(4))
        with pytest.raises(DomainError):
            insert_knot(s, 0.0)

    def test_multiplicity_overflow(self):
        lay = build_layout([0.0, 0.5, 1.0], [0], 3)
        s = Spline(lay, np.zeros(lay.dim))
        with pytest.raises(LayoutError):
            insert_knot(s, 0.5)


class TestExtractTail:
    def test_boundary_rejected(self):
        lay = build_layout([0.0, 1.0], [], 4)
        s = Spline(lay, np.arange(4.0))
        with pytest.raises(DomainError):
            extract_tail(s, 0.0)

    def test_pointwise_exactness(self):
        rng = np.random.default_rng(29)
        lay = build_layout([0.0, 0.45, 0.7, 1.0], [3, 3], 6)
        s = random_spline(rng, lay)
        tail = extract_tail(s, 0.3)
        sigmas = np.linspace(0, 0.7, 1000)
        np.testing.assert_allclose(
            tail.sample(sigmas), s.sample(sigmas + 0.3), atol=1e-10
        )

    def test_breakpoints_dropped(self):
        lay = build_layout([0.0, 0.2, 0.6, 1.0], [2, 2], 5)
        s = Spline(lay, np.ones(lay.dim))
        tail = extract_tail(s, 0.35)
        np.testing.assert_allclose(tail.layout.breakpoints, [0.0, 0.25, 0.65])

    def test_cut_exactly_on_breakpoint(self):
        rng = np.random.default_rng(31)
        lay = build_layout([0.0, 0.4, 1.0], [3], 6)
        s = random_spline(rng, lay)
        tail = extract_tail(s, 0.4)
        assert tail.layout.breakpoints == (0.0, 0.6)
        sigmas = np.linspace(0, 0.6, 500)
        np.testing.assert_allclose(
            tail.sample(sigmas), s.sample(sigmas + 0.4), atol=1e-10
        )

    def test_hull_never_widens(self):
        rng = np.random.default_rng(37)
        for _ in range(20):
            lay = random_layout(rng, order=6)
            s = random_spline(rng, lay)
            tail = extract_tail(s, 0.33 * lay.domain_end)
            lo0, hi0 = hull_bounds(s)
            lo1, hi1 = hull_bounds(tail)
            assert lo1 >= lo0 - 1e-12 and hi1 <= hi0 + 1e-12


class TestDerivative:
    def test_constant_spline(self):
        lay = build_layout([0.0, 0.5, 1.0], [3], 6)
        target, mat = derivative_transform(lay)
        np.testing.assert_allclose(mat @ np.full(lay.dim, 4.2), 0.0, atol=1e-12)
        assert target.order == 5

    def test_linear_precision_derivative(self):
        lay = build_layout([0.0, 0.4, 1.0], [3], 6)
        _, mat = derivative_transform(lay)
        np.testing.assert_allclose(mat @ lay.greville(), 1.0, atol=1e-12)

    def test_against_finite_differences(self):
        rng = np.random.default_rng(41)
        lay = build_layout([0.0, 0.3, 0.65, 1.0], [3, 3], 6)
        s = random_spline(rng, lay)
        target, mat = derivative_transform(lay)
        ds = Spline(target, mat @ s.coefficients)
        taus = rng.uniform(0.01, 0.99, size=500)
        for tau in taus:
            fd = central_difference(s.value, tau)
            assert abs(ds.value(tau) - fd) <= 1e-5 * (1 + abs(fd))

    def test_chain_to_acceleration(self):
        lay = build_layout([0.0, 0.5, 1.0], [3], 6)
        v_lay, _ = derivative_transform(lay)
        a_lay, _ = derivative_transform(v_lay)
        assert a_lay.order == 4
        assert a_lay.continuities == (1,)

    def test_order1_rejected(self):
        lay = build_layout([0.0, 1.0], [], 1)
        with pytest.raises(LayoutError):
            derivative_transform(lay)


class TestIntegral:
    def test_constant(self):
        lay = build_layout([0.0, 0.8], [], 4)
        w = integral_functional(lay)
        assert w @ np.full(lay.dim, 3.0) == pytest.approx(3.0 * 0.8, abs=1e-12)

    def test_linear_precision(self):
        lay = build_layout([0.0, 0.5, 1.0], [2], 5)
        w = integral_functional(lay)
        assert w @ lay.greville() == pytest.approx(0.5, abs=1e-12)

    def test_against_quadrature(self):
        rng = np.random.default_rng(43)
        for _ in range(10):
            lay = random_layout(rng)
            s = random_spline(rng, lay)
            w = integral_functional(lay)
            assert w @ s.coefficients == pytest.approx(
                spline_quadrature(s), abs=1e-9
            )


class TestCombine:
    def test_sum_union(self):
        a = build_layout([0.0, 0.3, 1.0], [3], 5)
        b = build_layout([0.0, 0.6, 1.0], [3], 5)
        ab = combine_sum_layout(a, b)
        assert ab.breakpoints == (0.0, 0.3, 0.6, 1.0)
        assert ab.continuities == (3, 3)

    def test_sum_identical(self):
        a = build_layout([0.0, 0.3, 1.0], [2], 5)
        assert combine_sum_layout(a, a) is a

    def test_sum_order_mismatch(self):
        a = build_layout([0.0, 1.0], [], 5)
        b = build_layout([0.0, 1.0], [], 6)
        with pytest.raises(LayoutError):
            combine_sum_layout(a, b)

    def test_sum_coincident_interior(self):
        a = build_layout([0.0, 0.5, 1.0], [2], 5)
        b = build_layout([0.0, 0.5, 1.0], [3], 5)
        with pytest.raises(LayoutError):
            combine_sum_layout(a, b)

    def test_sum_pointwise(self):
        rng = np.random.default_rng(47)
        a_lay = build_layout([0.0, 0.3, 1.0], [2], 5)
        b_lay = build_layout([0.0, 0.7, 1.0], [3], 5)
        sa = random_spline(rng, a_lay)
        sb = random_spline(rng, b_lay)
        ab_lay = combine_sum_layout(a_lay, b_lay)
        sites, sides, _ = greville_collocation(ab_lay)
        vals = [
            sa.value(x, from_left=s) + sb.value(x, from_left=s)
            for x, s in zip(sites, sides)
        ]
        s_ab = solve_collocation(ab_lay, vals)
        taus = rng.uniform(0, 1, size=1000)
        np.testing.assert_allclose(
            s_ab.sample(taus), sa.sample(taus) + sb.sample(taus), atol=1e-8
        )

    def test_product_jerk_self(self):
        # order-3 layout with a full-multiplicity interior knot (C^{-1})
        jerk = build_layout([0.0, 0.5, 1.0], [0], 3)
        sq = combine_product_layout(jerk, jerk)
        assert sq.order == 5
        assert sq.multiplicities == (5,)

    def test_product_constants(self):
        a = build_layout([0.0, 1.0], [], 3)
        ab = combine_product_layout(a, a)
        sites, sides, _ = greville_collocation(ab)
        s = solve_collocation(ab, np.full(len(sites), 6.0))
        for tau in np.linspace(0, 1, 9):
            assert s.value(tau) == pytest.approx(6.0, abs=1e-12)

    def test_product_pointwise(self):
        rng = np.random.default_rng(53)
        a_lay = build_layout([0.0, 0.4, 1.0], [2], 4)
        b_lay = build_layout([0.0, 0.6, 1.0], [1], 3)
        sa = random_spline(rng, a_lay)
        sb = random_spline(rng, b_lay)
        ab_lay = combine_product_layout(a_lay, b_lay)
        sites, sides, _ = greville_collocation(ab_lay)
        vals = [
            sa.value(x, from_left=s) * sb.value(x, from_left=s)
            for x, s in zip(sites, sides)
        ]
        s_ab = solve_collocation(ab_lay, vals)
        taus = rng.uniform(0, 1, size=1000)
        np.testing.assert_allclose(
            s_ab.sample(taus), sa.sample(taus) * sb.sample(taus), atol=1e-8
        )

    def test_product_discontinuous_self(self):
        # squared jerk stays representable across the C^{-1} breakpoint
        rng = np.random.default_rng(59)
        jerk_lay = build_layout([0.0, 0.5, 1.0], [0], 3)
        sj = random_spline(rng, jerk_lay)
        sq_lay = combine_product_layout(jerk_lay, jerk_lay)
        sites, sides, _ = greville_collocation(sq_lay)
        vals = [sj.value(x, from_left=s) ** 2 for x, s in zip(sites, sides)]
        s_sq = solve_collocation(sq_lay, vals)
        taus = rng.uniform(0, 1, size=1000)
        np.testing.assert_allclose(
            s_sq.sample(taus), sj.sample(taus) ** 2, atol=1e-8
        )


class TestCollocation:
    def test_order1_selection(self):
        lay = build_layout([0.0, 0.5, 1.0], [0], 1)
        mat = collocation_matrix(lay, [0.25, 0.75])
        np.testing.assert_allclose(mat, np.eye(2))

    def test_row_sums(self):
        lay = build_layout([0.0, 0.3, 1.0], [3], 6)
        sites, sides, mat = greville_collocation(lay)
        np.testing.assert_allclose(mat.sum(axis=1), 1.0, atol=1e-12)

    def test_solve_and_check(self):
        lay = build_layout([0.0, 0.45, 1.0], [3], 6)
        sites, sides, mat = greville_collocation(lay)
        assert np.isfinite(np.linalg.cond(mat))
        target = np.sin(3.0 * sites)
        s = solve_collocation(lay, target)
        got = np.array([s.value(x, from_left=side) for x, side in zip(sites, sides)])
        np.testing.assert_allclose(got, target, atol=1e-10)

    def test_unisolvence_random(self):
        rng = np.random.default_rng(61)
        for _ in range(25):
            lay = random_layout(rng)
            if lay.order < 2:
                continue
            sites, sides, mat = greville_collocation(lay)
            target = rng.normal(size=len(sites))
            coef = np.linalg.solve(mat, target)
            np.testing.assert_allclose(mat @ coef, target, atol=1e-10)

    def test_site_outside_domain(self):
        lay = build_layout([0.0, 0.9], [], 4)
        with pytest.raises(DomainError):
            collocation_matrix(lay, [0.95])


class TestHull:
    def test_constant(self):
        lay = build_layout([0.0, 1.0], [], 5)
        assert hull_bounds(Spline(lay, np.full(5, 1.5))) == (1.5, 1.5)

    def test_single_bump(self):
        lay = build_layout([0.0, 1.0], [], 5)
        s = Spline(lay, [0.0, 1.0, 0.0, 0.0, 0.0])
        lo, hi = hull_bounds(s)
        assert (lo, hi) == (0.0, 1.0)
        assert s.sample(np.linspace(0, 1, 200)).max() <= 1.0 + 1e-12

    def test_containment_random(self):
        rng = np.random.default_rng(67)
        for _ in range(30):
            lay = random_layout(rng)
            s = random_spline(rng, lay)
            lo, hi = hull_bounds(s)
            vals = s.sample(rng.uniform(0, lay.domain_end, size=1000))
            assert vals.min() >= lo - 1e-12
            assert vals.max() <= hi + 1e-12


def test_layout_hash_equality():
    a = build_layout([0.0, 0.4, 1.0], [3], 6)
    b = build_layout([0.0, 0.4, 1.0], [3], 6)
    assert a == b and hash(a) == hash(b)
    assert a != build_layout([0.0, 0.4, 1.0], [2], 6)
