"""Shrinking-horizon orchestration of the trajectory optimizer.

Each simulation step solves the program warm-started from the exact tail
of the previous solution.  Because tail extraction is pointwise exact and
knot insertion only forms convex combinations of coefficients, the
shifted solution satisfies every constraint of the shrunk problem, which
is what makes the loop recursively feasible: a failed solve simply keeps
the shifted trajectory.

Breakpoints follow a freeze-then-remove life cycle: an interval that the
time shift pushes below the minimum width is locked (equal bounds) so the
reproduction guarantee survives, and a locked breakpoint is dropped once
it crosses the origin, where tail extraction removes it exactly.  When
every interval is locked the planner stops optimizing and follows the
stored remainder into the terminal manifold.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.polynomial import Polynomial

from .bspline import extract_tail, solve_collocation
from .model import (
    AXES,
    CommonBreakpoints,
    PhysicalState,
    ScenarioError,
    ScenarioParams,
    SplineStack,
    build_problem,
    complete_stack,
    evaluate_objective,
    normalize_state,
    obstacle_splines_at,
    stack_basis_for,
    terminal_index_sets,
)
from .solver import SolverConfig, SolverResult, solve, warm_solve

__all__ = [
    "PlannerSettings",
    "PlannerState",
    "StepRecord",
    "SimulationLog",
    "initial_guess",
    "advance",
    "plan_step",
    "run_closed_loop",
    "continuous_time_violation",
]


@dataclass(frozen=True)
class PlannerSettings:
    nu_x: int = 1
    nu_y: int = 1
    dt: float = 0.1
    guess_horizon_lon: float = 7.0  # seconds to the velocity manifold in the guess
    guess_horizon_lat: float = 9.0  # seconds to the lane-center manifold
    manifold_tol: float = 1e-6
    # the preconditioned-residual floor sits near 1e-8 and the knot-direction
    # finite differences limit multiplier precision, hence these defaults
    solver: SolverConfig = field(
        default_factory=lambda: SolverConfig(feas_tol=2e-8, kkt_tol=5e-5)
    )


@dataclass
class PlannerState:
    params: ScenarioParams
    settings: PlannerSettings
    stack: SplineStack
    breakpoints: CommonBreakpoints
    sim_time: float = 0.0
    mode: str = "optimizing"  # optimizing | follow-remaining
    reached: frozenset = frozenset()
    prev_result: SolverResult | None = None

    @property
    def remaining(self):
        return self.breakpoints.end


@dataclass
class StepRecord:
    time: float
    state: PhysicalState
    objective: float
    status: str
    active_inequality: bool
    warm_violation: float
    breakpoints: tuple
    frozen: tuple
    end: float
    end_frozen: bool
    reached: tuple
    solve_time: float
    iterations: int
    plan: SplineStack
    notes: str = ""


@dataclass
class SimulationLog:
    params: ScenarioParams
    settings: PlannerSettings
    records: list

    def times(self):
        return np.array([r.time for r in self.records])

    def objectives(self):
        return np.array([r.objective for r in self.records])


# --------------------------------------------------------------------------
# Initial guess
# --------------------------------------------------------------------------


def _quintic_boundary(p0, v0, a0, pT, vT, aT, duration):
    """The unique quintic matching full state boundary conditions."""
    d = duration
    rows = np.zeros((6, 6))
    rows[0, 0] = 1.0
    rows[1, 1] = 1.0
    rows[2, 2] = 2.0
    rows[3] = [d**i for i in range(6)]
    rows[4] = [i * d ** (i - 1) if i >= 1 else 0.0 for i in range(6)]
    rows[5] = [i * (i - 1) * d ** (i - 2) if i >= 2 else 0.0 for i in range(6)]
    coef = np.linalg.solve(rows, [p0, v0, a0, pT, vT, aT])
    return Polynomial(coef)


def _quintic_min_jerk_velocity(p0, v0, a0, vT, aT, duration):
    """Quintic meeting (p,v,a) at 0 and (v,a) at the end, minimum squared jerk.

    The free end position is fixed by minimizing the integral of the
    squared third derivative over the segment.
    """
    d = duration
    # jerk = 6 c3 + 24 c4 t + 60 c5 t^2; Gram matrix of the jerk basis
    basis = [Polynomial([6.0]), Polynomial([0.0, 24.0]), Polynomial([0.0, 0.0, 60.0])]
    gram = np.array(
        [[(bi * bj).integ()(d) for bj in basis] for bi in basis]
    )
    # velocity and acceleration end conditions, linear in (c3, c4, c5)
    a_eq = np.array(
        [
            [3 * d**2, 4 * d**3, 5 * d**4],
            [6 * d, 12 * d**2, 20 * d**3],
        ]
    )
    b_eq = np.array([vT - (v0 + a0 * d), aT - a0])
    kkt = np.zeros((5, 5))
    kkt[:3, :3] = 2.0 * gram
    kkt[:3, 3:] = a_eq.T
    kkt[3:, :3] = a_eq
    sol = np.linalg.solve(kkt, np.concatenate([np.zeros(3), b_eq]))
    return Polynomial([p0, v0, 0.5 * a0, *sol[:3]])


def _piecewise_lon(poly, join, velocity_after):
    """Quintic followed by constant-velocity extension past the join time."""
    end_pos = poly(join)

    def fun(t):
        t = np.asarray(t, dtype=float)
        return np.where(t <= join, poly(np.minimum(t, join)),
                        end_pos + velocity_after * (t - join))

    return fun


def initial_guess(params: ScenarioParams, state: PhysicalState,
                  settings: PlannerSettings) -> PlannerState:
    """Two degree-five polynomials with equidistant breakpoints along them.

    The direction reached first gets its manifold entry at its second-last
    breakpoint, so that breakpoint sits exactly at the polynomial's end;
    all other interior breakpoints are spread evenly.
    """
    t = params.horizon
    lam = params.terminal_order
    t_first = settings.guess_horizon_lon if lam == "lon" else settings.guess_horizon_lat
    t_second = settings.guess_horizon_lat if lam == "lon" else settings.guess_horizon_lon
    if t_first > t_second:
        raise ScenarioError(
            f"the {lam}-first ordering needs its horizon ({t_first}s) within the "
            f"other direction's ({t_second}s)"
        )
    if t_second > t:
        raise ScenarioError(f"guess horizon {t_second}s exceeds the trajectory scale {t}s")
    nu_first = settings.nu_x if lam == "lon" else settings.nu_y
    nu_second = settings.nu_y if lam == "lon" else settings.nu_x
    if nu_first < 1:
        raise ScenarioError(
            f"terminal order {lam} needs at least one interior breakpoint in that direction"
        )

    end = t_second / t
    first_bps = [j * (t_first / t) / nu_first for j in range(1, nu_first + 1)]
    second_bps = [j * end / (nu_second + 1) for j in range(1, nu_second + 1)]

    first_axis = "x" if lam == "lon" else "y"
    tagged = [(v, first_axis) for v in first_bps]
    tagged += [(v, "y" if first_axis == "x" else "x") for v in second_bps]
    tagged.sort(key=lambda e: e[0])
    values = [v for v, _ in tagged]
    if any(b - a < 1e-9 for a, b in zip(values, values[1:])):
        raise ScenarioError(
            f"initial breakpoints coincide across directions: {values}; "
            "adjust the guess horizons or breakpoint counts"
        )
    spacing = np.diff([0.0, *values, end])
    if np.any(spacing < params.min_interval - 1e-12):
        raise ScenarioError(
            f"initial breakpoint spacing {spacing.min():.4f} below the minimum "
            f"interval {params.min_interval}"
        )
    breakpoints = CommonBreakpoints(
        interior=tuple(values),
        axes=tuple(a for _, a in tagged),
        frozen=(False,) * len(values),
        end=end,
    )

    lon_poly = _quintic_min_jerk_velocity(
        state.px, state.vx, state.ax, params.target_velocity, 0.0,
        settings.guess_horizon_lon,
    )
    lat_poly = _quintic_boundary(
        state.py, state.vy, state.ay, 0.0, 0.0, 0.0, settings.guess_horizon_lat
    )
    lon_fun = _piecewise_lon(lon_poly, settings.guess_horizon_lon, params.target_velocity)
    lat_fun = _piecewise_lon(lat_poly, settings.guess_horizon_lat, 0.0)

    basis = stack_basis_for(breakpoints.interior, breakpoints.axes, breakpoints.end)
    coefficients = {}
    for axis, fun in (("x", lon_fun), ("y", lat_fun)):
        layout = basis.layouts[f"pos_{axis}"]
        sites = layout.greville()
        coefficients[axis] = solve_collocation(layout, fun(sites * t)).coefficients

    obstacles = obstacle_splines_at(params, 0.0)
    stack = complete_stack(
        params, breakpoints, coefficients["x"], coefficients["y"], obstacles
    )
    reached = _detect_reached(params, stack, frozenset(), settings.manifold_tol)
    return PlannerState(
        params=params,
        settings=settings,
        stack=stack,
        breakpoints=breakpoints,
        reached=reached,
    )


# --------------------------------------------------------------------------
# Stepping
# --------------------------------------------------------------------------


def _detect_reached(params, stack: SplineStack, current, tol):
    """Terminal-style residuals of the stored solution at the origin."""
    t = params.horizon
    reached = set(current)
    if "x" not in reached:
        if (
            abs(stack.ego["vel_x"].value(0.0) - params.target_velocity * t) <= tol
            and abs(stack.ego["acc_x"].value(0.0)) <= tol
        ):
            reached.add("x")
    if "y" not in reached:
        if (
            abs(stack.ego["pos_y"].value(0.0)) <= tol
            and abs(stack.ego["vel_y"].value(0.0)) <= tol
            and abs(stack.ego["acc_y"].value(0.0)) <= tol
        ):
            reached.add("y")
    return frozenset(reached)


def _extract_stack(stack: SplineStack, tau0) -> SplineStack:
    ego = {name: extract_tail(s, tau0) for name, s in stack.ego.items()}
    obstacles = [
        {name: extract_tail(s, tau0) for name, s in entry.items()}
        for entry in stack.obstacles
    ]
    return SplineStack(
        ego=ego,
        obstacles=obstacles,
        heading_ub=extract_tail(stack.heading_ub, tau0),
        heading_lb=extract_tail(stack.heading_lb, tau0),
    )


def advance(state: PlannerState, dt=None) -> PlannerState:
    """Shift the horizon by one control step.

    The realized state is the stored solution evaluated at the shift
    (exact realization); every spline is replaced by its extracted tail,
    breakpoints move with the frame, and the freeze/removal rules keep the
    shifted solution representable in the shrunk problem.
    """
    dt = state.settings.dt if dt is None else dt
    params = state.params
    tau0 = dt / params.horizon
    if tau0 <= 0.0:
        return state
    bps = state.breakpoints
    if tau0 >= bps.end - 1e-12:
        raise ScenarioError(
            f"cannot advance {dt}s: only {bps.end * params.horizon:.3f}s of "
            "trajectory remain"
        )

    stack = _extract_stack(state.stack, tau0)

    interior, axes, frozen = [], [], []
    for value, axis, frz in zip(bps.interior, bps.axes, bps.frozen):
        shifted = value - tau0
        if shifted > 1e-12:
            interior.append(shifted)
            axes.append(axis)
            frozen.append(frz)
    end = bps.end - tau0

    # freeze breakpoints whose interval to the previous one got too small
    previous = 0.0
    min_iv = params.min_interval
    for idx, value in enumerate(interior):
        if not frozen[idx] and value - previous < min_iv - 1e-12:
            frozen[idx] = True
        previous = value
    end_frozen = bps.end_frozen
    if not end_frozen and end - previous < min_iv - 1e-12:
        end_frozen = True

    new_bps = CommonBreakpoints(
        interior=tuple(interior),
        axes=tuple(axes),
        frozen=tuple(frozen),
        end=end,
        end_frozen=end_frozen,
    )
    reached = _detect_reached(params, stack, state.reached, state.settings.manifold_tol)
    mode = "follow-remaining" if all(frozen) and end_frozen else state.mode
    prev = state.prev_result if len(interior) == len(bps.interior) else None
    return replace(
        state,
        stack=stack,
        breakpoints=new_bps,
        sim_time=state.sim_time + dt,
        reached=reached,
        mode=mode,
        prev_result=prev,
    )


def _active_inequality(problem, z, tol=1e-7):
    adjustable = problem.lower < problem.upper
    lo = np.isfinite(problem.lower) & adjustable
    hi = np.isfinite(problem.upper) & adjustable
    return bool(
        np.any(z[lo] - problem.lower[lo] <= tol)
        or np.any(problem.upper[hi] - z[hi] <= tol)
    )


def plan_step(state: PlannerState) -> tuple[PlannerState, StepRecord]:
    """Solve the current problem (or follow the stored remainder).

    A solver failure or a non-improving solution keeps the shifted
    previous trajectory, which is feasible by construction.
    """
    params = state.params
    settings = state.settings
    bps = state.breakpoints
    realized = state.stack.state_at(0.0, params.horizon)

    notes = []
    terminal_x, terminal_y = terminal_index_sets(
        bps.axis_count("x"), bps.axis_count("y"), params.terminal_order
    )
    if "x" not in state.reached and any(
        u <= bps.axis_count("x")
        and bps.frozen[bps.axis_common_positions("x")[u - 1] - 1]
        for u in terminal_x
    ):
        notes.append("terminal x breakpoint frozen before manifold reached")
    if "y" not in state.reached and any(
        u <= bps.axis_count("y")
        and bps.frozen[bps.axis_common_positions("y")[u - 1] - 1]
        for u in terminal_y
    ):
        notes.append("terminal y breakpoint frozen before manifold reached")

    if state.mode == "follow-remaining":
        objective = evaluate_objective(params, bps, state.stack, state.reached)
        record = StepRecord(
            time=state.sim_time,
            state=realized,
            objective=objective,
            status="follow",
            active_inequality=False,
            warm_violation=0.0,
            breakpoints=bps.interior,
            frozen=bps.frozen,
            end=bps.end,
            end_frozen=bps.end_frozen,
            reached=tuple(sorted(state.reached)),
            solve_time=0.0,
            iterations=0,
            plan=state.stack,
            notes="; ".join(notes),
        )
        return state, record

    obstacles = obstacle_splines_at(params, state.sim_time)
    problem = build_problem(params, bps, realized, obstacles, state.reached)
    z_warm = problem.initial_vector(state.stack)
    eq_viol, bound_viol = problem.scaled_violations(z_warm)
    warm_objective = problem.objective(z_warm)

    started = time.perf_counter()
    seed = state.prev_result
    if seed is not None and len(seed.z) == problem.n:
        result = warm_solve(problem, replace(seed, z=z_warm), settings.solver)
    else:
        result = solve(problem, z_warm, settings.solver)
    wall = time.perf_counter() - started

    feas = settings.solver.feas_tol
    solved_ok = (
        result.status in ("converged", "max-iterations")
        and result.max_equality_violation <= feas
        and result.max_inequality_violation <= 1e-9
    )
    # keep the shifted trajectory unless the solver genuinely improved on
    # it: re-solves of an already optimal tail would otherwise wander
    # within solver precision and break time consistency
    accept = solved_ok and result.objective < warm_objective - 1e-7
    warm_ok = max(eq_viol, bound_viol) <= max(feas, 1e-6)
    if accept:
        new_stack = problem.stack_from(result.z)
        intervals = result.z[problem.var_slices["intervals"]]
        cum = np.cumsum(intervals)
        new_bps = bps.with_values(tuple(cum[:-1]), cum[-1])
        z_report = result.z
        objective = result.objective
        status = result.status
    elif solved_ok or warm_ok:
        new_stack = state.stack
        new_bps = bps
        z_report = z_warm
        objective = warm_objective
        status = "tail-kept" if solved_ok else f"fallback({result.status})"
    else:
        # no feasible reference at all (can only happen on the first step)
        new_stack = problem.stack_from(result.z)
        intervals = result.z[problem.var_slices["intervals"]]
        cum = np.cumsum(intervals)
        new_bps = bps.with_values(tuple(cum[:-1]), cum[-1])
        z_report = result.z
        objective = result.objective
        status = f"unconverged({result.status})"

    record = StepRecord(
        time=state.sim_time,
        state=realized,
        objective=objective,
        status=status,
        active_inequality=_active_inequality(problem, z_report),
        warm_violation=max(eq_viol, bound_viol),
        breakpoints=new_bps.interior,
        frozen=new_bps.frozen,
        end=new_bps.end,
        end_frozen=new_bps.end_frozen,
        reached=tuple(sorted(state.reached)),
        solve_time=wall,
        iterations=result.iterations,
        plan=new_stack,
        notes="; ".join(notes),
    )
    new_state = replace(
        state,
        stack=new_stack,
        breakpoints=new_bps,
        prev_result=result if accept else state.prev_result,
    )
    return new_state, record


def run_closed_loop(params: ScenarioParams, state0: PhysicalState,
                    settings: PlannerSettings, steps) -> SimulationLog:
    """Iterate plan/advance with exact realization for ``steps`` steps.

    Stops early once the remaining trajectory is exhausted (both terminal
    manifolds reached and no room left to advance).
    """
    state = initial_guess(params, state0, settings)
    records = []
    tau0 = settings.dt / params.horizon
    for k in range(steps):
        state, record = plan_step(state)
        records.append(record)
        if k + 1 >= steps:
            break
        if state.breakpoints.end <= tau0 + 1e-9:
            break
        state = advance(state)
    return SimulationLog(params=params, settings=settings, records=records)


# --------------------------------------------------------------------------
# Continuous-time feasibility sampling
# --------------------------------------------------------------------------


def continuous_time_violation(params: ScenarioParams, stack: SplineStack,
                              end, t_now=0.0, samples=10_000):
    """Worst violation of the collision and heading constraints on a grid.

    Obstacle positions come from the constant-velocity predictions in
    physical time, so this checks the actual ellipse condition, not its
    spline surrogate.  Returns max(0, violation).
    """
    taus = np.linspace(0.0, end, samples)
    t_phys = t_now + taus * params.horizon
    worst = 0.0
    px = stack.ego["pos_x"].sample(taus)
    py = stack.ego["pos_y"].sample(taus)
    for ob in params.obstacles:
        ox = ob.position[0] + ob.velocity[0] * t_phys
        oy = ob.position[1] + ob.velocity[1] * t_phys
        dx = params.ego_diameters[0] + ob.diameters[0]
        dy = params.ego_diameters[1] + ob.diameters[1]
        value = (px - ox) ** 2 / dx**2 + (py - oy) ** 2 / dy**2 - 0.25
        worst = max(worst, float(np.maximum(-value, 0.0).max()))
    vx = stack.ego["vel_x"].sample(taus)
    vy = stack.ego["vel_y"].sample(taus)
    f = params.heading_factor
    worst = max(worst, float(np.maximum(-(f * vx - vy), 0.0).max()))
    worst = max(worst, float(np.maximum(-(f * vx + vy), 0.0).max()))
    return worst
