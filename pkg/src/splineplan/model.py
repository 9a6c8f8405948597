"""Assembly of the trajectory nonlinear program.

The decision vector stacks every spline coefficient block (position,
velocity, acceleration, jerk, squared jerk per axis; per obstacle the
refitted prediction, position difference, squared difference and ellipse
splines; the heading bound splines) followed by the breakpoint intervals
and one slack variable that turns the horizon-sum inequality into an
equality plus a bound.

All dynamic quantities are stored as normalized-domain derivatives
(velocity x T, acceleration x T^2, jerk x T^3); positions stay in meters.
Coefficient residual Jacobians are analytic; derivatives with respect to
the breakpoint intervals use forward differences on the basis-dependent
quantities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .bspline import (
    DomainError,
    KnotLayout,
    LayoutError,
    Spline,
    build_layout,
    collocation_matrix,
    combine_product_layout,
    combine_sum_layout,
    derivative_transform,
    eval_basis_many,
    greville_collocation,
    integral_functional,
)

POSITION_ORDER = 6
POSITION_CONTINUITY = 3
KNOT_FD_STEP = 1e-7

AXES = ("x", "y")


class ScenarioError(ValueError):
    """Invalid or physically infeasible scenario data."""


class EvaluationError(RuntimeError):
    """The problem could not be evaluated at the given point."""


def ellipse_from_rectangle(length, width, heading_allowance):
    """Axis-aligned ellipse diameters covering a rectangle at any heading
    within the allowance: inflate the rectangle by the rotation, then pass
    the smallest matching-aspect ellipse through the inflated corners."""
    c, s = math.cos(heading_allowance), math.sin(heading_allowance)
    inflated_l = length * c + width * s
    inflated_w = length * s + width * c
    return math.sqrt(2.0) * inflated_l, math.sqrt(2.0) * inflated_w


@dataclass(frozen=True)
class ObstacleSpec:
    """Constant-velocity prediction plus the covering ellipse diameters."""

    ident: str
    position: tuple  # curvilinear (x, y) at t = 0, meters
    velocity: tuple  # (vx, vy), m/s
    diameters: tuple  # ellipse (ax, ay), meters

    def position_at(self, t):
        return (
            self.position[0] + self.velocity[0] * t,
            self.position[1] + self.velocity[1] * t,
        )


@dataclass(frozen=True)
class ScenarioParams:
    horizon: float  # T, trajectory time scale in seconds
    target_velocity: float  # v_T
    velocity_limit: float  # v-bar
    accel_limit_x: float
    accel_limit_y: float
    curvature_max: float
    lateral_max: float  # y_max used in the heading factor
    heading_limit: float  # theta-bar, radians
    ego_diameters: tuple
    obstacles: tuple = ()
    weight_time_x: float = 1.0
    weight_time_y: float = 1.0
    weight_jerk_x: float = 0.05
    weight_jerk_y: float = 0.05
    min_interval: float = 0.02  # delta_min, normalized time
    terminal_order: str = "lon"  # lambda
    prediction_span: float = 10.0

    def __post_init__(self):
        positive = {
            "horizon": self.horizon,
            "target_velocity": self.target_velocity,
            "velocity_limit": self.velocity_limit,
            "accel_limit_x": self.accel_limit_x,
            "accel_limit_y": self.accel_limit_y,
            "curvature_max": self.curvature_max,
            "lateral_max": self.lateral_max,
            "heading_limit": self.heading_limit,
        }
        for name, value in positive.items():
            if value <= 0.0:
                raise ScenarioError(f"{name} must be positive, got {value}")
        if not 0.0 < self.min_interval < 1.0:
            raise ScenarioError(f"min_interval must be in (0, 1): {self.min_interval}")
        if self.curvature_max * self.lateral_max >= 1.0:
            raise ScenarioError(
                "curvature_max * lateral_max must stay below 1 for the heading factor"
            )
        if self.terminal_order not in ("lon", "lat"):
            raise ScenarioError(f"terminal_order must be lon or lat: {self.terminal_order}")
        if min(self.ego_diameters) <= 0.0:
            raise ScenarioError("ego ellipse diameters must be positive")
        for ob in self.obstacles:
            if min(ob.diameters) <= 0.0:
                raise ScenarioError(f"obstacle {ob.ident}: diameters must be positive")
        if self.horizon > self.prediction_span + 1e-9:
            raise ScenarioError(
                "horizon exceeds the obstacle prediction span "
                f"({self.horizon} > {self.prediction_span})"
            )

    @property
    def heading_factor(self):
        """f = (1 - kappa_max * y_max) * tan(theta-bar)."""
        return (1.0 - self.curvature_max * self.lateral_max) * math.tan(
            self.heading_limit
        )

    @property
    def lateral_accel_margin(self):
        """a-bar_y - kappa_max * v-bar^2; must be positive for a non-empty box."""
        return self.accel_limit_y - self.curvature_max * self.velocity_limit**2


@dataclass(frozen=True)
class PhysicalState:
    """Curvilinear ego state in physical units."""

    px: float = 0.0
    vx: float = 0.0
    ax: float = 0.0
    py: float = 0.0
    vy: float = 0.0
    ay: float = 0.0

    def as_array(self):
        return np.array([self.px, self.vx, self.ax, self.py, self.vy, self.ay])


def normalize_state(state: PhysicalState, horizon):
    """[p, v*T, a*T^2] per axis, concatenated x then y."""
    t = horizon
    return np.array(
        [state.px, state.vx * t, state.ax * t * t, state.py, state.vy * t, state.ay * t * t]
    )


def denormalize_state(values, horizon):
    t = horizon
    v = np.asarray(values, dtype=float)
    return PhysicalState(
        px=v[0], vx=v[1] / t, ax=v[2] / (t * t), py=v[3], vy=v[4] / t, ay=v[5] / (t * t)
    )


@dataclass(frozen=True)
class CommonBreakpoints:
    """The shared breakpoint vector with axis tags and freeze flags.

    Interior values and the final breakpoint are current values in
    normalized time; the decision variables are the intervals between
    consecutive breakpoints (origin included).
    """

    interior: tuple
    axes: tuple
    frozen: tuple
    end: float
    end_frozen: bool = False

    def __post_init__(self):
        if not (len(self.interior) == len(self.axes) == len(self.frozen)):
            raise ScenarioError("interior/axes/frozen lengths differ")
        values = (0.0,) + self.interior + (self.end,)
        if any(b1 - b0 <= 0.0 for b0, b1 in zip(values, values[1:])):
            raise ScenarioError(f"breakpoints must be strictly increasing: {values}")
        if self.end > 1.0 + 1e-9:
            raise ScenarioError(f"final breakpoint must be <= 1: {self.end}")
        if any(a not in AXES for a in self.axes):
            raise ScenarioError(f"axis tags must be x or y: {self.axes}")

    @property
    def count(self):
        return len(self.interior)

    def intervals(self):
        return np.diff(np.array((0.0,) + self.interior + (self.end,)))

    def interval_frozen(self):
        return np.array(self.frozen + (self.end_frozen,), dtype=bool)

    def axis_values(self, axis):
        return tuple(v for v, a in zip(self.interior, self.axes) if a == axis)

    def axis_count(self, axis):
        return sum(1 for a in self.axes if a == axis)

    def axis_common_positions(self, axis):
        """1-based positions in the common vector of the given axis's interiors."""
        return tuple(i + 1 for i, a in enumerate(self.axes) if a == axis)

    def with_values(self, interior, end):
        return replace(self, interior=tuple(interior), end=float(end))


def terminal_index_sets(nu_x, nu_y, terminal_order):
    """Per-axis terminal breakpoint indices (into each axis's BP vector).

    Index 0 (the origin) is excluded: a terminal condition there would
    duplicate the initial-state equality.
    """
    if terminal_order == "lon":
        xs, ys = {nu_x, nu_x + 1}, {nu_y + 1}
    elif terminal_order == "lat":
        xs, ys = {nu_x + 1}, {nu_y, nu_y + 1}
    else:
        raise ScenarioError(f"unknown terminal order: {terminal_order}")
    return tuple(sorted(xs - {0})), tuple(sorted(ys - {0}))


def constant_velocity_spline(position, velocity, params: ScenarioParams, t_now=0.0):
    """Order-6 fit of a constant-velocity prediction over normalized time.

    The prediction is anchored at ``t_now`` and spans the planning horizon;
    linear precision makes the Greville-site values exact coefficients.
    """
    layout = build_layout([0.0, 1.0], [], POSITION_ORDER)
    sites = layout.greville()
    return Spline(layout, position + velocity * (t_now + sites * params.horizon))


def obstacle_splines_at(params: ScenarioParams, t_now=0.0):
    """Per-obstacle (x, y) prediction splines anchored at ``t_now``."""
    return tuple(
        (
            constant_velocity_spline(ob.position[0], ob.velocity[0], params, t_now),
            constant_velocity_spline(ob.position[1], ob.velocity[1], params, t_now),
        )
        for ob in params.obstacles
    )


# --------------------------------------------------------------------------
# Layout stacks (cached per breakpoint geometry)
# --------------------------------------------------------------------------


class _StackBasis:
    """Every layout, transform and collocation matrix for one knot geometry."""

    def __init__(self, x_interior, y_interior, end):
        self.layouts = {}
        self.transforms = {}
        for axis, interior in (("x", x_interior), ("y", y_interior)):
            pos = build_layout(
                [0.0, *interior, end], [POSITION_CONTINUITY] * len(interior), POSITION_ORDER
            )
            vel, t_pv = derivative_transform(pos)
            acc, t_va = derivative_transform(vel)
            jerk, t_aj = derivative_transform(acc)
            jerksq = combine_product_layout(jerk, jerk)
            diffsq = combine_product_layout(pos, pos)
            self.layouts[f"pos_{axis}"] = pos
            self.layouts[f"vel_{axis}"] = vel
            self.layouts[f"acc_{axis}"] = acc
            self.layouts[f"jerk_{axis}"] = jerk
            self.layouts[f"jerksq_{axis}"] = jerksq
            self.layouts[f"diffsq_{axis}"] = diffsq
            self.transforms[f"pv_{axis}"] = t_pv
            self.transforms[f"va_{axis}"] = t_va
            self.transforms[f"aj_{axis}"] = t_aj

        self.layouts["ellipse"] = combine_sum_layout(
            self.layouts["diffsq_x"], self.layouts["diffsq_y"]
        )
        self.layouts["heading"] = combine_sum_layout(
            self.layouts["vel_x"], self.layouts["vel_y"]
        )

        # square collocation systems (sites, sides, matrix)
        self.greville = {
            name: greville_collocation(self.layouts[name])
            for name in (
                "pos_x",
                "pos_y",
                "jerksq_x",
                "jerksq_y",
                "diffsq_x",
                "diffsq_y",
                "ellipse",
                "heading",
            )
        }

        # cross-evaluation matrices: source basis at target Greville sites
        self.cross = {}
        for axis in AXES:
            sq_sites, sq_sides, _ = self.greville[f"jerksq_{axis}"]
            self.cross[f"jerk_at_jerksq_{axis}"] = collocation_matrix(
                self.layouts[f"jerk_{axis}"], sq_sites, sq_sides
            )
            d_sites, d_sides, _ = self.greville[f"diffsq_{axis}"]
            self.cross[f"pos_at_diffsq_{axis}"] = collocation_matrix(
                self.layouts[f"pos_{axis}"], d_sites, d_sides
            )
            e_sites, e_sides, _ = self.greville["ellipse"]
            self.cross[f"diffsq_at_ellipse_{axis}"] = collocation_matrix(
                self.layouts[f"diffsq_{axis}"], e_sites, e_sides
            )
            h_sites, h_sides, _ = self.greville["heading"]
            self.cross[f"vel_at_heading_{axis}"] = collocation_matrix(
                self.layouts[f"vel_{axis}"], h_sites, h_sides
            )

        self.origin_rows = {}
        for axis in AXES:
            for kind in ("pos", "vel", "acc"):
                self.origin_rows[f"{kind}_{axis}"] = eval_basis_many(
                    self.layouts[f"{kind}_{axis}"], [0.0]
                )[0]

        self.jerksq_weights = {
            axis: integral_functional(self.layouts[f"jerksq_{axis}"]) for axis in AXES
        }


@lru_cache(maxsize=256)
def _stack_basis(x_interior, y_interior, end):
    return _StackBasis(x_interior, y_interior, end)


def stack_basis_for(interior, axes, end) -> _StackBasis:
    x_int = tuple(v for v, a in zip(interior, axes) if a == "x")
    y_int = tuple(v for v, a in zip(interior, axes) if a == "y")
    return _stack_basis(x_int, y_int, float(end))


# --------------------------------------------------------------------------
# Spline stack
# --------------------------------------------------------------------------

_EGO_KEYS = ("pos", "vel", "acc", "jerk", "jerksq")
_OBSTACLE_AXIS_KEYS = ("refit", "diff", "diffsq")


@dataclass
class SplineStack:
    """All splines of one solution: ego motion, obstacle chain, heading."""

    ego: dict  # key f"{kind}_{axis}" -> Spline
    obstacles: list  # per obstacle: dict with refit_x .. diffsq_y, ellipse
    heading_ub: Spline
    heading_lb: Spline

    def state_at(self, tau, horizon):
        """Physical ego state of the stored solution at normalized time tau."""
        values = []
        for axis in AXES:
            for kind in ("pos", "vel", "acc"):
                values.append(self.ego[f"{kind}_{axis}"].value(tau))
        return denormalize_state(values, horizon)

    def jerk_at(self, tau, horizon):
        return tuple(
            self.ego[f"jerk_{axis}"].value(tau) / horizon**3 for axis in AXES
        )


# --------------------------------------------------------------------------
# The nonlinear program
# --------------------------------------------------------------------------


@dataclass
class EvalResult:
    objective: float
    gradient: np.ndarray
    residuals: np.ndarray
    jacobian: np.ndarray


class NlpProblem:
    """Nonlinear program for one planning step.

    Decision vector: all spline coefficient blocks, the breakpoint
    intervals, and the horizon slack.  Equality residuals g(z) = 0 carry
    every coupling; inequalities are pure bounds on the vector.
    """

    def __init__(
        self,
        params: ScenarioParams,
        breakpoints: CommonBreakpoints,
        initial_state: PhysicalState,
        obstacle_splines,
        reached=frozenset(),
    ):
        if params.lateral_accel_margin <= 0.0:
            raise ScenarioError(
                "empty lateral acceleration box: accel_limit_y <= "
                "curvature_max * velocity_limit^2"
            )
        if len(obstacle_splines) != len(params.obstacles):
            raise ScenarioError(
                f"expected {len(params.obstacles)} obstacle spline pairs, "
                f"got {len(obstacle_splines)}"
            )
        self.params = params
        self.breakpoints = breakpoints
        self.initial_state = initial_state
        self.obstacle_splines = tuple(obstacle_splines)
        self.reached = frozenset(reached)

        self.nu_x = breakpoints.axis_count("x")
        self.nu_y = breakpoints.axis_count("y")
        self.n_obstacles = len(self.obstacle_splines)
        self.terminal_x, self.terminal_y = terminal_index_sets(
            self.nu_x, self.nu_y, params.terminal_order
        )
        self._axis_positions = {
            axis: breakpoints.axis_common_positions(axis) for axis in AXES
        }

        basis = stack_basis_for(breakpoints.interior, breakpoints.axes, breakpoints.end)
        self._reference_basis = basis

        self.var_slices = {}
        cursor = 0

        def add_var(name, size):
            nonlocal cursor
            self.var_slices[name] = slice(cursor, cursor + size)
            cursor += size

        for axis in AXES:
            for kind in _EGO_KEYS:
                add_var(f"{kind}_{axis}", basis.layouts[f"{kind}_{axis}"].dim)
        for m in range(self.n_obstacles):
            for kind in _OBSTACLE_AXIS_KEYS:
                for axis in AXES:
                    add_var(f"{kind}_{axis}_{m}", basis.layouts[f"{'pos' if kind != 'diffsq' else 'diffsq'}_{axis}"].dim)
            add_var(f"ellipse_{m}", basis.layouts["ellipse"].dim)
        add_var("head_ub", basis.layouts["heading"].dim)
        add_var("head_lb", basis.layouts["heading"].dim)
        self.n_intervals = breakpoints.count + 1
        add_var("intervals", self.n_intervals)
        add_var("slack", 1)
        self.n = cursor

        self.res_slices = {}
        cursor = 0

        def add_res(name, size):
            nonlocal cursor
            self.res_slices[name] = slice(cursor, cursor + size)
            cursor += size

        add_res("initial", 6)
        for axis in AXES:
            add_res(f"couple_pv_{axis}", basis.layouts[f"vel_{axis}"].dim)
            add_res(f"couple_va_{axis}", basis.layouts[f"acc_{axis}"].dim)
            add_res(f"couple_aj_{axis}", basis.layouts[f"jerk_{axis}"].dim)
            add_res(f"jerksq_{axis}", basis.layouts[f"jerksq_{axis}"].dim)
        for m in range(self.n_obstacles):
            for axis in AXES:
                add_res(f"refit_{axis}_{m}", basis.layouts[f"pos_{axis}"].dim)
                add_res(f"diff_{axis}_{m}", basis.layouts[f"pos_{axis}"].dim)
                add_res(f"square_{axis}_{m}", basis.layouts[f"diffsq_{axis}"].dim)
            add_res(f"ellipse_{m}", basis.layouts["ellipse"].dim)
        add_res("head_ub", basis.layouts["heading"].dim)
        add_res("head_lb", basis.layouts["heading"].dim)
        add_res("terminal_x", 2 * len(self.terminal_x))
        add_res("terminal_y", 3 * len(self.terminal_y))
        add_res("horizon", 1)
        self.m = cursor

        self._state_normalized = normalize_state(initial_state, params.horizon)
        self._build_bounds()
        self._build_scales()

    # -- bounds ------------------------------------------------------------

    def _build_bounds(self):
        p = self.params
        t = p.horizon
        lower = np.full(self.n, -np.inf)
        upper = np.full(self.n, np.inf)

        lower[self.var_slices["vel_x"]] = -np.inf
        upper[self.var_slices["vel_x"]] = p.velocity_limit * t
        ax_bound = p.accel_limit_x * t * t
        lower[self.var_slices["acc_x"]] = -ax_bound
        upper[self.var_slices["acc_x"]] = ax_bound
        ay_bound = p.lateral_accel_margin * t * t
        lower[self.var_slices["acc_y"]] = -ay_bound
        upper[self.var_slices["acc_y"]] = ay_bound
        for m in range(self.n_obstacles):
            lower[self.var_slices[f"ellipse_{m}"]] = 0.0
        lower[self.var_slices["head_ub"]] = 0.0
        lower[self.var_slices["head_lb"]] = 0.0

        iv = self.var_slices["intervals"]
        values = self.breakpoints.intervals()
        frozen = self.breakpoints.interval_frozen()
        lower[iv] = np.where(frozen, values, p.min_interval)
        upper[iv] = np.where(frozen, values, np.inf)
        lower[self.var_slices["slack"]] = 0.0
        self.lower = lower
        self.upper = upper

    def _build_scales(self):
        """Order-of-magnitude block scales so a generic solver sees O(1) data.

        Relative (ego minus obstacle) quantities are much smaller than
        absolute positions, hence the separate relative scales per axis.
        """
        p = self.params
        t = p.horizon
        pos = p.velocity_limit * t
        vel = p.velocity_limit * t
        acc = max(p.accel_limit_x * t * t / 3.0, 10.0)
        jerk = 4.0 * acc
        jerksq = jerk * jerk
        rel = {"x": max(10.0, 0.25 * pos), "y": max(3.0, 2.0 * p.lateral_max)}
        head = max(p.heading_factor * vel, 1.0)
        interval = 0.25

        var = np.ones(self.n)
        res = np.ones(self.m)

        def set_var(name, value):
            var[self.var_slices[name]] = value

        def set_res(name, value):
            res[self.res_slices[name]] = value

        for axis in AXES:
            set_var(f"pos_{axis}", pos)
            set_var(f"vel_{axis}", vel)
            set_var(f"acc_{axis}", acc)
            set_var(f"jerk_{axis}", jerk)
            set_var(f"jerksq_{axis}", jerksq)
            set_res(f"couple_pv_{axis}", vel)
            set_res(f"couple_va_{axis}", acc)
            set_res(f"couple_aj_{axis}", jerk)
            set_res(f"jerksq_{axis}", jerksq)
        for m in range(self.n_obstacles):
            dx = p.ego_diameters[0] + p.obstacles[m].diameters[0]
            dy = p.ego_diameters[1] + p.obstacles[m].diameters[1]
            ellipse = max(2.0, rel["x"] ** 2 / dx**2 + rel["y"] ** 2 / dy**2)
            for axis in AXES:
                set_var(f"refit_{axis}_{m}", pos)
                set_var(f"diff_{axis}_{m}", rel[axis])
                set_var(f"diffsq_{axis}_{m}", rel[axis] ** 2)
                set_res(f"refit_{axis}_{m}", pos)
                set_res(f"diff_{axis}_{m}", rel[axis])
                set_res(f"square_{axis}_{m}", rel[axis] ** 2)
            set_var(f"ellipse_{m}", ellipse)
            set_res(f"ellipse_{m}", ellipse)
        set_var("head_ub", head)
        set_var("head_lb", head)
        set_res("head_ub", head)
        set_res("head_lb", head)
        set_var("intervals", interval)
        set_var("slack", interval)
        res[self.res_slices["initial"]] = [pos, vel, acc, pos, vel, acc]
        block = self.res_slices["terminal_x"]
        res[block.start + 0 : block.stop : 2] = vel
        res[block.start + 1 : block.stop : 2] = acc
        block = self.res_slices["terminal_y"]
        res[block.start + 0 : block.stop : 3] = pos
        res[block.start + 1 : block.stop : 3] = vel
        res[block.start + 2 : block.stop : 3] = acc
        self.variable_scales = var
        self.residual_scales = res
        self._build_preconditioner()

    def _build_preconditioner(self):
        """Block preconditioner for the residuals: each Greville collocation
        block is premultiplied by the inverse of its square system (computed
        at the reference knots), which makes the assembled Jacobian
        block-triangular with identity diagonal blocks.  The preconditioner
        is a fixed nonsingular map, so the residual zero set is unchanged.
        """
        basis = self._reference_basis
        transform = np.diag(1.0 / self.residual_scales)

        def put(name, inverse):
            block = self.res_slices[name]
            transform[block, block] = inverse / self.residual_scales[block.start]

        inverses = {
            key: np.linalg.inv(basis.greville[key][2]) for key in basis.greville
        }
        for axis in AXES:
            put(f"jerksq_{axis}", inverses[f"jerksq_{axis}"])
        for m in range(self.n_obstacles):
            for axis in AXES:
                put(f"refit_{axis}_{m}", inverses[f"pos_{axis}"])
                put(f"diff_{axis}_{m}", inverses[f"pos_{axis}"])
                put(f"square_{axis}_{m}", inverses[f"diffsq_{axis}"])
            put(f"ellipse_{m}", inverses["ellipse"])
        put("head_ub", inverses["heading"])
        put("head_lb", inverses["heading"])
        self.residual_transform = transform

    # -- vector <-> stack ----------------------------------------------------

    def initial_vector(self, stack: SplineStack):
        """Pack a consistent stack into a decision vector."""
        z = np.zeros(self.n)
        for axis in AXES:
            for kind in _EGO_KEYS:
                z[self.var_slices[f"{kind}_{axis}"]] = stack.ego[
                    f"{kind}_{axis}"
                ].coefficients
        for m in range(self.n_obstacles):
            for kind in _OBSTACLE_AXIS_KEYS:
                for axis in AXES:
                    z[self.var_slices[f"{kind}_{axis}_{m}"]] = stack.obstacles[m][
                        f"{kind}_{axis}"
                    ].coefficients
            z[self.var_slices[f"ellipse_{m}"]] = stack.obstacles[m][
                "ellipse"
            ].coefficients
        z[self.var_slices["head_ub"]] = stack.heading_ub.coefficients
        z[self.var_slices["head_lb"]] = stack.heading_lb.coefficients
        intervals = self.breakpoints.intervals()
        z[self.var_slices["intervals"]] = intervals
        z[self.var_slices["slack"]] = max(0.0, 1.0 - intervals.sum())
        return z

    def stack_from(self, z):
        basis = self._basis_at(z)
        ego = {}
        for axis in AXES:
            for kind in _EGO_KEYS:
                name = f"{kind}_{axis}"
                ego[name] = Spline(basis.layouts[name], z[self.var_slices[name]])
        obstacles = []
        for m in range(self.n_obstacles):
            entry = {}
            for axis in AXES:
                entry[f"refit_{axis}"] = Spline(
                    basis.layouts[f"pos_{axis}"], z[self.var_slices[f"refit_{axis}_{m}"]]
                )
                entry[f"diff_{axis}"] = Spline(
                    basis.layouts[f"pos_{axis}"], z[self.var_slices[f"diff_{axis}_{m}"]]
                )
                entry[f"diffsq_{axis}"] = Spline(
                    basis.layouts[f"diffsq_{axis}"],
                    z[self.var_slices[f"diffsq_{axis}_{m}"]],
                )
            entry["ellipse"] = Spline(
                basis.layouts["ellipse"], z[self.var_slices[f"ellipse_{m}"]]
            )
            obstacles.append(entry)
        return SplineStack(
            ego=ego,
            obstacles=obstacles,
            heading_ub=Spline(basis.layouts["heading"], z[self.var_slices["head_ub"]]),
            heading_lb=Spline(basis.layouts["heading"], z[self.var_slices["head_lb"]]),
        )

    # -- evaluation ----------------------------------------------------------

    def _interval_values(self, z):
        return z[self.var_slices["intervals"]]

    def _basis_at(self, z):
        intervals = self._interval_values(z)
        if np.any(intervals <= 0.0):
            raise EvaluationError(f"non-positive breakpoint interval: {intervals}")
        cum = np.cumsum(intervals)
        if cum[-1] > 1.0 + 1e-6:
            raise EvaluationError(f"breakpoints exceed the unit horizon: {cum[-1]}")
        try:
            return stack_basis_for(tuple(cum[:-1]), self.breakpoints.axes, cum[-1])
        except Exception as exc:  # layout construction failure
            raise EvaluationError(str(exc)) from exc

    def _terminal_values(self, z, axis):
        intervals = self._interval_values(z)
        cum = np.cumsum(intervals)
        positions = self._axis_positions[axis] + (self.n_intervals,)
        indices = self.terminal_x if axis == "x" else self.terminal_y
        axis_count = self.nu_x if axis == "x" else self.nu_y
        values = []
        for u in indices:
            common_pos = positions[u - 1] if u <= axis_count else self.n_intervals
            values.append(cum[common_pos - 1])
        return values

    def _evaluate(self, z):
        """Objective, residual vector and the basis bundle at z's knots."""
        try:
            return self._evaluate_inner(z)
        except (DomainError, LayoutError) as exc:
            raise EvaluationError(str(exc)) from exc

    def _evaluate_inner(self, z):
        basis = self._basis_at(z)
        p = self.params
        t = p.horizon
        g = np.zeros(self.m)

        def blk(name):
            return z[self.var_slices[name]]

        # initial state
        s0 = self._state_normalized
        g[self.res_slices["initial"]] = [
            basis.origin_rows["pos_x"] @ blk("pos_x") - s0[0],
            basis.origin_rows["vel_x"] @ blk("vel_x") - s0[1],
            basis.origin_rows["acc_x"] @ blk("acc_x") - s0[2],
            basis.origin_rows["pos_y"] @ blk("pos_y") - s0[3],
            basis.origin_rows["vel_y"] @ blk("vel_y") - s0[4],
            basis.origin_rows["acc_y"] @ blk("acc_y") - s0[5],
        ]

        jerk_site_values = {}
        for axis in AXES:
            g[self.res_slices[f"couple_pv_{axis}"]] = (
                basis.transforms[f"pv_{axis}"] @ blk(f"pos_{axis}") - blk(f"vel_{axis}")
            )
            g[self.res_slices[f"couple_va_{axis}"]] = (
                basis.transforms[f"va_{axis}"] @ blk(f"vel_{axis}") - blk(f"acc_{axis}")
            )
            g[self.res_slices[f"couple_aj_{axis}"]] = (
                basis.transforms[f"aj_{axis}"] @ blk(f"acc_{axis}") - blk(f"jerk_{axis}")
            )
            jerk_vals = basis.cross[f"jerk_at_jerksq_{axis}"] @ blk(f"jerk_{axis}")
            jerk_site_values[axis] = jerk_vals
            g[self.res_slices[f"jerksq_{axis}"]] = (
                jerk_vals**2 - basis.greville[f"jerksq_{axis}"][2] @ blk(f"jerksq_{axis}")
            )

        diff_site_values = {}
        for m in range(self.n_obstacles):
            for axis_idx, axis in enumerate(AXES):
                sites, sides, c_pos = basis.greville[f"pos_{axis}"]
                obstacle = self.obstacle_splines[m][axis_idx]
                obstacle_vals = collocation_matrix(obstacle.layout, sites, sides) @ (
                    obstacle.coefficients
                )
                g[self.res_slices[f"refit_{axis}_{m}"]] = (
                    c_pos @ blk(f"refit_{axis}_{m}") - obstacle_vals
                )
                g[self.res_slices[f"diff_{axis}_{m}"]] = c_pos @ (
                    blk(f"pos_{axis}") - blk(f"refit_{axis}_{m}") - blk(f"diff_{axis}_{m}")
                )
                diff_vals = basis.cross[f"pos_at_diffsq_{axis}"] @ blk(f"diff_{axis}_{m}")
                diff_site_values[(m, axis)] = diff_vals
                g[self.res_slices[f"square_{axis}_{m}"]] = (
                    diff_vals**2
                    - basis.greville[f"diffsq_{axis}"][2] @ blk(f"diffsq_{axis}_{m}")
                )
            dx = self.params.ego_diameters[0] + self.params.obstacles[m].diameters[0]
            dy = self.params.ego_diameters[1] + self.params.obstacles[m].diameters[1]
            g[self.res_slices[f"ellipse_{m}"]] = (
                (basis.cross["diffsq_at_ellipse_x"] @ blk(f"diffsq_x_{m}")) / dx**2
                + (basis.cross["diffsq_at_ellipse_y"] @ blk(f"diffsq_y_{m}")) / dy**2
                - basis.greville["ellipse"][2] @ blk(f"ellipse_{m}")
                - 0.25
            )

        f = p.heading_factor
        vx_at_h = basis.cross["vel_at_heading_x"] @ blk("vel_x")
        vy_at_h = basis.cross["vel_at_heading_y"] @ blk("vel_y")
        c_head = basis.greville["heading"][2]
        g[self.res_slices["head_ub"]] = f * vx_at_h - vy_at_h - c_head @ blk("head_ub")
        g[self.res_slices["head_lb"]] = f * vx_at_h + vy_at_h - c_head @ blk("head_lb")

        terminal_rows = {}
        vt = p.target_velocity * t
        if self.terminal_x:
            values = self._terminal_values(z, "x")
            vel_rows = eval_basis_many(basis.layouts["vel_x"], values)
            acc_rows = eval_basis_many(basis.layouts["acc_x"], values)
            res = np.empty(2 * len(values))
            res[0::2] = vel_rows @ blk("vel_x") - vt
            res[1::2] = acc_rows @ blk("acc_x")
            g[self.res_slices["terminal_x"]] = res
            terminal_rows["x"] = (vel_rows, acc_rows)
        if self.terminal_y:
            values = self._terminal_values(z, "y")
            pos_rows = eval_basis_many(basis.layouts["pos_y"], values)
            vel_rows = eval_basis_many(basis.layouts["vel_y"], values)
            acc_rows = eval_basis_many(basis.layouts["acc_y"], values)
            res = np.empty(3 * len(values))
            res[0::3] = pos_rows @ blk("pos_y")
            res[1::3] = vel_rows @ blk("vel_y")
            res[2::3] = acc_rows @ blk("acc_y")
            g[self.res_slices["terminal_y"]] = res
            terminal_rows["y"] = (pos_rows, vel_rows, acc_rows)

        intervals = self._interval_values(z)
        g[self.res_slices["horizon"]] = intervals.sum() + z[self.var_slices["slack"]][0] - 1.0

        objective = self._objective_value(z, basis)
        return objective, g, basis, jerk_site_values, diff_site_values, terminal_rows

    def _objective_value(self, z, basis):
        p = self.params
        objective = 0.0
        for axis, weight in (("x", p.weight_time_x), ("y", p.weight_time_y)):
            if axis in self.reached:
                continue
            objective += weight * sum(self._terminal_values(z, axis))
        scale = p.horizon ** -5
        for axis, weight in (("x", p.weight_jerk_x), ("y", p.weight_jerk_y)):
            objective += (
                weight
                * scale
                * float(
                    basis.jerksq_weights[axis] @ z[self.var_slices[f"jerksq_{axis}"]]
                )
            )
        return objective

    def objective(self, z):
        return self._objective_value(z, self._basis_at(z))

    def residuals(self, z):
        return self._evaluate(z)[1]

    def eval_all(self, z) -> EvalResult:
        """Objective, gradient, residuals, and full Jacobian at z."""
        z = np.asarray(z, dtype=float)
        objective, g, basis, jerk_vals, diff_vals, terminal_rows = self._evaluate(z)
        jac = np.zeros((self.m, self.n))
        grad = np.zeros(self.n)
        p = self.params

        def vs(name):
            return self.var_slices[name]

        def rs(name):
            return self.res_slices[name]

        # objective gradient, coefficient part
        scale = p.horizon ** -5
        grad[vs("jerksq_x")] = p.weight_jerk_x * scale * basis.jerksq_weights["x"]
        grad[vs("jerksq_y")] = p.weight_jerk_y * scale * basis.jerksq_weights["y"]

        # initial block
        rows = rs("initial")
        jac[rows.start + 0, vs("pos_x")] = basis.origin_rows["pos_x"]
        jac[rows.start + 1, vs("vel_x")] = basis.origin_rows["vel_x"]
        jac[rows.start + 2, vs("acc_x")] = basis.origin_rows["acc_x"]
        jac[rows.start + 3, vs("pos_y")] = basis.origin_rows["pos_y"]
        jac[rows.start + 4, vs("vel_y")] = basis.origin_rows["vel_y"]
        jac[rows.start + 5, vs("acc_y")] = basis.origin_rows["acc_y"]

        for axis in AXES:
            t_pv = basis.transforms[f"pv_{axis}"]
            t_va = basis.transforms[f"va_{axis}"]
            t_aj = basis.transforms[f"aj_{axis}"]
            jac[rs(f"couple_pv_{axis}"), vs(f"pos_{axis}")] = t_pv
            jac[rs(f"couple_pv_{axis}"), vs(f"vel_{axis}")] = -np.eye(t_pv.shape[0])
            jac[rs(f"couple_va_{axis}"), vs(f"vel_{axis}")] = t_va
            jac[rs(f"couple_va_{axis}"), vs(f"acc_{axis}")] = -np.eye(t_va.shape[0])
            jac[rs(f"couple_aj_{axis}"), vs(f"acc_{axis}")] = t_aj
            jac[rs(f"couple_aj_{axis}"), vs(f"jerk_{axis}")] = -np.eye(t_aj.shape[0])
            jac[rs(f"jerksq_{axis}"), vs(f"jerk_{axis}")] = (
                2.0 * jerk_vals[axis][:, None] * basis.cross[f"jerk_at_jerksq_{axis}"]
            )
            jac[rs(f"jerksq_{axis}"), vs(f"jerksq_{axis}")] = -basis.greville[
                f"jerksq_{axis}"
            ][2]

        for m in range(self.n_obstacles):
            for axis in AXES:
                c_pos = basis.greville[f"pos_{axis}"][2]
                jac[rs(f"refit_{axis}_{m}"), vs(f"refit_{axis}_{m}")] = c_pos
                jac[rs(f"diff_{axis}_{m}"), vs(f"pos_{axis}")] = c_pos
                jac[rs(f"diff_{axis}_{m}"), vs(f"refit_{axis}_{m}")] = -c_pos
                jac[rs(f"diff_{axis}_{m}"), vs(f"diff_{axis}_{m}")] = -c_pos
                jac[rs(f"square_{axis}_{m}"), vs(f"diff_{axis}_{m}")] = (
                    2.0
                    * diff_vals[(m, axis)][:, None]
                    * basis.cross[f"pos_at_diffsq_{axis}"]
                )
                jac[rs(f"square_{axis}_{m}"), vs(f"diffsq_{axis}_{m}")] = (
                    -basis.greville[f"diffsq_{axis}"][2]
                )
            dx = p.ego_diameters[0] + p.obstacles[m].diameters[0]
            dy = p.ego_diameters[1] + p.obstacles[m].diameters[1]
            jac[rs(f"ellipse_{m}"), vs(f"diffsq_x_{m}")] = (
                basis.cross["diffsq_at_ellipse_x"] / dx**2
            )
            jac[rs(f"ellipse_{m}"), vs(f"diffsq_y_{m}")] = (
                basis.cross["diffsq_at_ellipse_y"] / dy**2
            )
            jac[rs(f"ellipse_{m}"), vs(f"ellipse_{m}")] = -basis.greville["ellipse"][2]

        f = p.heading_factor
        c_head = basis.greville["heading"][2]
        jac[rs("head_ub"), vs("vel_x")] = f * basis.cross["vel_at_heading_x"]
        jac[rs("head_ub"), vs("vel_y")] = -basis.cross["vel_at_heading_y"]
        jac[rs("head_ub"), vs("head_ub")] = -c_head
        jac[rs("head_lb"), vs("vel_x")] = f * basis.cross["vel_at_heading_x"]
        jac[rs("head_lb"), vs("vel_y")] = basis.cross["vel_at_heading_y"]
        jac[rs("head_lb"), vs("head_lb")] = -c_head

        if self.terminal_x:
            vel_rows, acc_rows = terminal_rows["x"]
            block = rs("terminal_x")
            jac[block.start + 0 : block.stop : 2, vs("vel_x")] = vel_rows
            jac[block.start + 1 : block.stop : 2, vs("acc_x")] = acc_rows
        if self.terminal_y:
            pos_rows, vel_rows, acc_rows = terminal_rows["y"]
            block = rs("terminal_y")
            jac[block.start + 0 : block.stop : 3, vs("pos_y")] = pos_rows
            jac[block.start + 1 : block.stop : 3, vs("vel_y")] = vel_rows
            jac[block.start + 2 : block.stop : 3, vs("acc_y")] = acc_rows

        # knot-direction derivatives by forward differences
        iv = vs("intervals")
        for gamma in range(self.n_intervals):
            zp = z.copy()
            zp[iv.start + gamma] += KNOT_FD_STEP
            obj_p, g_p = self._evaluate(zp)[:2]
            jac[:, iv.start + gamma] = (g_p - g) / KNOT_FD_STEP
            grad[iv.start + gamma] = (obj_p - objective) / KNOT_FD_STEP

        # the horizon row is exactly linear
        jac[rs("horizon"), :] = 0.0
        jac[rs("horizon"), iv] = 1.0
        jac[rs("horizon"), vs("slack")] = 1.0

        return EvalResult(objective, grad, g, jac)

    def jacobian_sparsity(self):
        """Structural nonzero mask; depends only on the block structure."""
        rng = np.random.default_rng(0)
        z = rng.uniform(0.5, 1.5, size=self.n)
        z[self.var_slices["intervals"]] = self.breakpoints.intervals()
        z[self.var_slices["slack"]] = max(0.0, 1.0 - self.breakpoints.intervals().sum())
        return np.abs(self.eval_all(z).jacobian) > 0.0

    def max_violations(self, z):
        """(max |g|, max bound violation) at z, in raw residual units."""
        g = self.residuals(z)
        bound = np.maximum(self.lower - z, z - self.upper)
        return float(np.abs(g).max()), float(max(bound.max(), 0.0))

    def scaled_violations(self, z):
        """Violations in the preconditioned metric.

        Residual blocks span several orders of magnitude (squared-jerk
        rows live on the square of the jerk scale), so feasibility checks
        compare the preconditioned residuals, whose tolerance carries the
        same meaning for every block.
        """
        g = self.residual_transform @ self.residuals(z)
        bound = np.maximum(self.lower - z, z - self.upper) / self.variable_scales
        return float(np.abs(g).max()), float(max(bound.max(), 0.0))

    def dimension_report(self):
        var = {k: s.stop - s.start for k, s in self.var_slices.items()}
        res = {k: s.stop - s.start for k, s in self.res_slices.items()}
        return {"variables": var, "residuals": res, "n": self.n, "m": self.m}


def build_problem(
    params, breakpoints, initial_state, obstacle_splines, reached=frozenset()
) -> NlpProblem:
    """Assemble the nonlinear program; see :class:`NlpProblem`."""
    return NlpProblem(params, breakpoints, initial_state, obstacle_splines, reached)


def complete_stack(params, breakpoints, pos_x, pos_y, obstacle_splines) -> SplineStack:
    """Derive every auxiliary spline from the two position splines.

    Velocity/acceleration/jerk come from the derivative transforms; the
    squared jerk, obstacle chain and heading splines are determined by
    Greville collocation, which makes their defining residuals vanish.
    """
    basis = stack_basis_for(breakpoints.interior, breakpoints.axes, breakpoints.end)
    ego = {}
    pos = {"x": np.asarray(pos_x, dtype=float), "y": np.asarray(pos_y, dtype=float)}
    site_values = {}
    for axis in AXES:
        c_pos = pos[axis]
        c_vel = basis.transforms[f"pv_{axis}"] @ c_pos
        c_acc = basis.transforms[f"va_{axis}"] @ c_vel
        c_jerk = basis.transforms[f"aj_{axis}"] @ c_acc
        jerk_vals = basis.cross[f"jerk_at_jerksq_{axis}"] @ c_jerk
        c_jerksq = np.linalg.solve(basis.greville[f"jerksq_{axis}"][2], jerk_vals**2)
        ego[f"pos_{axis}"] = Spline(basis.layouts[f"pos_{axis}"], c_pos)
        ego[f"vel_{axis}"] = Spline(basis.layouts[f"vel_{axis}"], c_vel)
        ego[f"acc_{axis}"] = Spline(basis.layouts[f"acc_{axis}"], c_acc)
        ego[f"jerk_{axis}"] = Spline(basis.layouts[f"jerk_{axis}"], c_jerk)
        ego[f"jerksq_{axis}"] = Spline(basis.layouts[f"jerksq_{axis}"], c_jerksq)

    obstacles = []
    for m, pair in enumerate(obstacle_splines):
        entry = {}
        diffsq_vals = {}
        for axis_idx, axis in enumerate(AXES):
            sites, sides, c_mat = basis.greville[f"pos_{axis}"]
            target = collocation_matrix(pair[axis_idx].layout, sites, sides) @ (
                pair[axis_idx].coefficients
            )
            c_refit = np.linalg.solve(c_mat, target)
            c_diff = pos[axis] - c_refit
            diff_vals = basis.cross[f"pos_at_diffsq_{axis}"] @ c_diff
            c_diffsq = np.linalg.solve(
                basis.greville[f"diffsq_{axis}"][2], diff_vals**2
            )
            entry[f"refit_{axis}"] = Spline(basis.layouts[f"pos_{axis}"], c_refit)
            entry[f"diff_{axis}"] = Spline(basis.layouts[f"pos_{axis}"], c_diff)
            entry[f"diffsq_{axis}"] = Spline(basis.layouts[f"diffsq_{axis}"], c_diffsq)
            diffsq_vals[axis] = basis.cross[f"diffsq_at_ellipse_{axis}"] @ c_diffsq
        dx = params.ego_diameters[0] + params.obstacles[m].diameters[0]
        dy = params.ego_diameters[1] + params.obstacles[m].diameters[1]
        target = diffsq_vals["x"] / dx**2 + diffsq_vals["y"] / dy**2 - 0.25
        c_ellipse = np.linalg.solve(basis.greville["ellipse"][2], target)
        entry["ellipse"] = Spline(basis.layouts["ellipse"], c_ellipse)
        obstacles.append(entry)

    f = params.heading_factor
    vx_at_h = basis.cross["vel_at_heading_x"] @ ego["vel_x"].coefficients
    vy_at_h = basis.cross["vel_at_heading_y"] @ ego["vel_y"].coefficients
    c_head = basis.greville["heading"][2]
    c_ub = np.linalg.solve(c_head, f * vx_at_h - vy_at_h)
    c_lb = np.linalg.solve(c_head, f * vx_at_h + vy_at_h)
    return SplineStack(
        ego=ego,
        obstacles=obstacles,
        heading_ub=Spline(basis.layouts["heading"], c_ub),
        heading_lb=Spline(basis.layouts["heading"], c_lb),
    )


def evaluate_objective(params, breakpoints, stack: SplineStack, reached=frozenset()):
    """Objective of a stored solution, without building a problem."""
    cum = np.cumsum(breakpoints.intervals())
    objective = 0.0
    tx, ty = terminal_index_sets(
        breakpoints.axis_count("x"), breakpoints.axis_count("y"), params.terminal_order
    )
    for axis, weight, indices in (
        ("x", params.weight_time_x, tx),
        ("y", params.weight_time_y, ty),
    ):
        if axis in reached:
            continue
        positions = breakpoints.axis_common_positions(axis)
        count = breakpoints.axis_count(axis)
        for u in indices:
            common_pos = positions[u - 1] if u <= count else breakpoints.count + 1
            objective += weight * cum[common_pos - 1]
    scale = params.horizon ** -5
    for axis, weight in (("x", params.weight_jerk_x), ("y", params.weight_jerk_y)):
        spline = stack.ego[f"jerksq_{axis}"]
        w = integral_functional(spline.layout)
        objective += weight * scale * float(w @ spline.coefficients)
    return objective
