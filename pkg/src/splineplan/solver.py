"""Bundled SQP solver for equality-constrained problems with bounds.

The method is sequential quadratic programming with a damped-BFGS
Lagrangian Hessian.  Each subproblem

    min 1/2 d'Hd + grad'd   s.t.  Jg d = -g,  lb - z <= d <= ub - z

is solved by a primal active-set method on the bounds with a regularized
KKT system.  Equality rows are handled elastically: a row whose
multiplier exceeds the current l1 penalty is relaxed into the objective,
which keeps every subproblem feasible and reproduces the exact step when
the penalty is large enough.  A line search on the l1 merit function
(objective plus penalty times constraint and bound violation) globalizes
the iteration; the penalty only ever grows.

The solver is deterministic: identical inputs produce identical iterate
sequences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .model import EvalResult, EvaluationError

__all__ = [
    "SolverConfig",
    "SolverResult",
    "FunctionProblem",
    "solve",
    "warm_solve",
]


@dataclass
class SolverConfig:
    kkt_tol: float = 1e-6
    feas_tol: float = 1e-6
    max_iterations: int = 500
    penalty_init: float = 10.0
    penalty_growth: float = 2.0
    penalty_margin: float = 0.01
    hessian_reg: float = 1e-8
    stall_limit: int = 20  # iterations with merit decrease < 1e-12
    log: object = None  # optional text stream for iteration lines
    verbose: bool = False


@dataclass
class SolverResult:
    status: str  # converged | max-iterations | infeasible-detected | evaluation-error
    z: np.ndarray
    objective: float
    max_equality_violation: float
    max_inequality_violation: float
    iterations: int
    wall_time: float
    multipliers: np.ndarray | None = None
    multipliers_scaled: np.ndarray | None = None
    bound_multipliers: np.ndarray | None = None
    active_lower: np.ndarray | None = None
    active_upper: np.ndarray | None = None
    hessian: np.ndarray | None = None  # scaled-space quasi-Newton state

    @property
    def converged(self):
        return self.status == "converged"


class FunctionProblem:
    """Adapter exposing plain callables through the problem interface.

    Useful for small test problems: ``fun`` and ``jac`` may be None for
    unconstrained-but-bounded problems.
    """

    def __init__(self, objective, gradient, residual=None, jacobian=None, lower=None, upper=None, n=None):
        self._objective = objective
        self._gradient = gradient
        self._residual = residual
        self._jacobian = jacobian
        if n is None:
            n = len(lower) if lower is not None else len(upper)
        self.n = n
        self.lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
        self.upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)

    def eval_all(self, z):
        if self._residual is None:
            g = np.zeros(0)
            jac = np.zeros((0, self.n))
        else:
            g = np.atleast_1d(np.asarray(self._residual(z), dtype=float))
            jac = np.atleast_2d(np.asarray(self._jacobian(z), dtype=float))
        return EvalResult(
            float(self._objective(z)),
            np.asarray(self._gradient(z), dtype=float),
            g,
            jac,
        )


# --------------------------------------------------------------------------
# Elastic active-set QP on bounds
# --------------------------------------------------------------------------


@dataclass
class _QpState:
    active_lower: np.ndarray
    active_upper: np.ndarray
    sigma: np.ndarray | None = None  # elastic row states


class _QpWorkspace:
    """Bordered solves against one factorized base KKT system.

    The base couples every variable with every equality row.  Pinning a
    variable to a bound or fixing a relaxed row's multiplier both amount
    to bordering the base with unit columns, so each working-set change
    costs one small dense solve against a submatrix of the base inverse
    instead of a fresh factorization.
    """

    def __init__(self, H, A, reg=0.0):
        n = H.shape[0]
        m = A.shape[0]
        self.n, self.m = n, m
        eps = 1e-11 * (1.0 + np.abs(A).max(initial=0.0))
        size = n + m
        base = np.zeros((size, size))
        base[:n, :n] = H
        if reg:
            base[:n, :n] += reg * np.eye(n)
        base[:n, n:] = A.T
        base[n:, :n] = A
        base[n:, n:] = -eps * np.eye(m)
        self.base = base
        # invert blockwise through the Schur complement of the (PD) Hessian
        try:
            floor = 1e-10 * max(1.0, float(np.trace(base[:n, :n])) / max(n, 1))
            base[:n, :n] += floor * np.eye(n)
            h_inv = np.linalg.inv(base[:n, :n])
            y = h_inv @ A.T
            schur = A @ y
            schur[np.diag_indices(m)] += eps
            schur_inv = np.linalg.inv(schur)
            ys = y @ schur_inv
            inverse = np.empty((size, size))
            inverse[:n, :n] = h_inv - ys @ y.T
            inverse[:n, n:] = ys
            inverse[n:, :n] = ys.T
            inverse[n:, n:] = -schur_inv
            self.inverse = inverse
        except np.linalg.LinAlgError:
            base[:n, :n] += 1e-8 * np.eye(n)
            base[n:, n:] -= 1e-8 * np.eye(m)
            self.inverse = np.linalg.inv(base)
        self._rhs = None
        self._u0 = None

    def set_rhs(self, c, b):
        self._rhs = np.concatenate([-c, b])
        self._u0 = self.inverse @ self._rhs
        # one refinement pass against the exact base
        resid = self._rhs - self.base @ self._u0
        self._u0 += self.inverse @ resid

    def solve(self, pins, beta):
        """Solution of the base system with ``u[pins] = beta`` enforced."""
        if not len(pins):
            return self._u0.copy(), np.zeros(0)
        pins = np.asarray(pins, dtype=int)
        schur = self.inverse[np.ix_(pins, pins)]
        rhs = self._u0[pins] - beta
        try:
            pi = np.linalg.solve(schur, rhs)
        except np.linalg.LinAlgError:
            pi = np.linalg.lstsq(schur, rhs, rcond=None)[0]
        u = self._u0 - self.inverse[:, pins] @ pi
        u[pins] = beta
        return u, pi


def _solve_qp(H, c, A, b, lo, hi, weights, warm: _QpState | None, reg_floor,
              workspace: _QpWorkspace | None = None):
    """Minimize 1/2 d'Hd + c'd + sum_i w_i |A d - b|_i over the box [lo, hi].

    Primal active set on the bounds; rows start enforced (A d = b) and are
    relaxed one by one when their multiplier exceeds the row's penalty
    weight.  Returns the point, row multipliers, the stationarity vector,
    the final working sets, and a success flag.
    """
    n = len(c)
    m = len(b)
    fixed = lo == hi
    if workspace is None:
        workspace = _QpWorkspace(H, A, reg_floor)
    workspace.set_rhs(c, b)

    # rows always start enforced: a relaxed row has no pivot rule that can
    # re-enforce it once the penalties grow, so its state must not persist
    sigma = np.zeros(m, dtype=np.int8)
    if warm is not None and len(warm.active_lower) == n:
        active_lo = warm.active_lower & np.isfinite(lo)
        active_hi = warm.active_upper & np.isfinite(hi) & ~active_lo
    else:
        # prime the working set with the bounds the all-free step crosses;
        # the dual checks release any wrong guesses
        trial = workspace.solve([], np.zeros(0))[0][:n]
        active_lo = np.isfinite(lo) & (trial <= lo)
        active_hi = np.isfinite(hi) & (trial >= hi)
    active_lo |= fixed
    active_lo &= np.isfinite(lo)
    active_hi &= ~fixed & ~active_lo

    d = np.clip(np.zeros(n), lo, hi)
    d[active_lo] = lo[active_lo]
    d[active_hi] = hi[active_hi]

    scale = 1.0 + np.abs(c).max(initial=0.0) + weights.max(initial=0.0)
    dual_tol = 1e-9 * scale
    max_pivots = 3 * (n + m) + 60

    for pivot_count in range(max_pivots):
        _solve_qp.last_pivots = pivot_count + 1
        pins = []
        beta = []
        bound_pin_of = {}
        for i in np.flatnonzero(active_lo):
            bound_pin_of[i] = len(pins)
            pins.append(i)
            beta.append(lo[i])
        for i in np.flatnonzero(active_hi):
            bound_pin_of[i] = len(pins)
            pins.append(i)
            beta.append(hi[i])
        relaxed_idx = np.flatnonzero(sigma != 0)
        for j in relaxed_idx:
            pins.append(n + j)
            beta.append(weights[j] * sigma[j])

        u, pi = workspace.solve(pins, np.asarray(beta))
        d_target = u[:n]
        lam_full = u[n:]

        delta = d_target - d
        alpha = 1.0
        blocker = None  # ("lo"|"hi", var index) or ("row", row index)
        moving = np.flatnonzero(~(active_lo | active_hi) & (np.abs(delta) > 1e-14))
        for i in moving:
            if delta[i] > 0 and np.isfinite(hi[i]):
                a = (hi[i] - d[i]) / delta[i]
                if a < alpha - 1e-14:
                    alpha, blocker = a, ("hi", i)
            elif delta[i] < 0 and np.isfinite(lo[i]):
                a = (lo[i] - d[i]) / delta[i]
                if a < alpha - 1e-14:
                    alpha, blocker = a, ("lo", i)
        if len(relaxed_idx):
            r_now = A[relaxed_idx] @ d - b[relaxed_idx]
            r_step = A[relaxed_idx] @ delta
            for k, j in enumerate(relaxed_idx):
                target = r_now[k] + r_step[k]
                if sigma[j] * target < -1e-14 and abs(r_step[k]) > 1e-16:
                    a = -r_now[k] / r_step[k]
                    if -1e-14 < a < alpha - 1e-14:
                        alpha, blocker = a, ("row", j)

        alpha = max(alpha, 0.0)
        d = d + alpha * delta
        if blocker is not None:
            kind, i = blocker
            if kind == "hi":
                active_hi[i] = True
                d[i] = hi[i]
            elif kind == "lo":
                active_lo[i] = True
                d[i] = lo[i]
            else:
                sigma[i] = 0
            continue

        # full step taken: check duals
        d = d_target.copy()
        d[active_lo] = lo[active_lo]
        d[active_hi] = hi[active_hi]
        stationarity = H @ d + c + A.T @ lam_full

        worst = None
        worst_val = dual_tol
        for i in np.flatnonzero(active_lo & ~fixed):
            v = pi[bound_pin_of[i]]  # pin multiplier must stay <= 0 at a lower bound
            if v > worst_val:
                worst_val, worst = v, ("lo", i)
        for i in np.flatnonzero(active_hi):
            v = -pi[bound_pin_of[i]]  # and >= 0 at an upper bound
            if v > worst_val:
                worst_val, worst = v, ("hi", i)
        rows = sigma == 0
        for i in np.flatnonzero(rows):
            v = abs(lam_full[i]) - weights[i]
            if v > worst_val:
                worst_val, worst = v, ("row", i)

        if worst is None:
            state = _QpState(active_lo.copy(), active_hi.copy(), sigma.copy())
            return d, lam_full, stationarity, state, True

        kind, i = worst
        if kind == "lo":
            active_lo[i] = False
        elif kind == "hi":
            active_hi[i] = False
        else:
            sigma[i] = np.int8(np.sign(lam_full[i]))

    state = _QpState(active_lo.copy(), active_hi.copy(), sigma.copy())
    stationarity = H @ d + c + A.T @ lam_full
    return d, lam_full, stationarity, state, False


# --------------------------------------------------------------------------
# Damped BFGS
# --------------------------------------------------------------------------


def _damped_bfgs_update(H, s, y):
    if not (np.isfinite(s).all() and np.isfinite(y).all()):
        return H
    if np.abs(s).max(initial=0.0) > 1e4 or np.abs(y).max(initial=0.0) > 1e8:
        return H  # a wild step would only corrupt the curvature estimate
    sts = s @ s
    if sts <= 1e-32:
        return H
    Hs = H @ s
    sHs = float(s @ Hs)
    sty = float(s @ y)
    if sHs <= 0.0:
        return H
    # Powell damping keeps the update positive definite
    if sty < 0.2 * sHs:
        theta = 0.8 * sHs / (sHs - sty)
        y = theta * y + (1.0 - theta) * Hs
        sty = float(s @ y)
    if sty <= 1e-14 * sHs:
        return H
    H = H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sty
    return 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# SQP driver
# --------------------------------------------------------------------------


def _violation(lo, hi, z):
    return np.maximum(np.maximum(lo - z, z - hi), 0.0)


def solve(problem, z0, config: SolverConfig | None = None,
          multipliers=None, qp_state=None, initial_hessian=None) -> SolverResult:
    """Solve the problem from ``z0``; see the module docstring for the method.

    If the problem exposes ``variable_scales`` and a ``residual_transform``
    (or diagonal ``residual_scales``), the iteration runs on the transformed
    system; the reported iterate and the multipliers are mapped back so the
    first-order conditions hold for the problem as evaluated.
    """
    cfg = config or SolverConfig()
    start = time.perf_counter()
    lo_u = np.asarray(problem.lower, dtype=float)
    hi_u = np.asarray(problem.upper, dtype=float)
    n = len(lo_u)
    z_u = np.asarray(z0, dtype=float).copy()
    if len(z_u) != n:
        raise ValueError(f"dimension mismatch: z0 has {len(z_u)}, bounds have {n}")
    dv = np.asarray(getattr(problem, "variable_scales", np.ones(n)), dtype=float)
    pre = getattr(problem, "residual_transform", None)
    dr_attr = getattr(problem, "residual_scales", None)

    lo = lo_u / dv
    hi = hi_u / dv
    z = z_u / dv
    # fixed variables must sit exactly on their value
    fixed = lo_u == hi_u
    z[fixed] = lo[fixed]

    def eval_scaled(z_s):
        raw = problem.eval_all(z_s * dv)
        if not len(raw.residuals):
            return raw, EvalResult(raw.objective, raw.gradient * dv,
                                   raw.residuals, raw.jacobian)
        if pre is not None:
            res = pre @ raw.residuals
            jac = (pre @ raw.jacobian) * dv[None, :]
        elif dr_attr is not None:
            dr = np.asarray(dr_attr, dtype=float)
            res = raw.residuals / dr
            jac = raw.jacobian * dv[None, :] / dr[:, None]
        else:
            res = raw.residuals
            jac = raw.jacobian * dv[None, :]
        return raw, EvalResult(raw.objective, raw.gradient * dv, res, jac)

    def unscale_multipliers(lam_s):
        if lam_s is None or not len(lam_s):
            return lam_s
        if pre is not None:
            return pre.T @ lam_s
        if dr_attr is not None:
            return lam_s / np.asarray(dr_attr, dtype=float)
        return lam_s

    rho = None  # per-row l1 penalties (Powell update)
    if multipliers is not None and len(multipliers):
        rho = np.abs(np.asarray(multipliers, dtype=float)) * 1.05 + cfg.penalty_margin
        rho = np.maximum(rho, cfg.penalty_init)
    rho_box = np.full(n, cfg.penalty_init)
    trust = 0.5  # move limit on the scaled step, adapted by step quality
    if initial_hessian is not None and initial_hessian.shape == (n, n):
        H = initial_hessian.copy()
        scaled_h = True
    else:
        H = np.eye(n)
        scaled_h = False
    stall = 0
    lam = None
    nu = None
    status = "max-iterations"
    iterations = 0

    def finish(status, ev=None):
        feas = float(np.abs(ev.residuals).max()) if ev is not None and len(ev.residuals) else 0.0
        z_out = z * dv
        z_out[fixed] = lo_u[fixed]
        ineq = float(_violation(lo_u, hi_u, z_out).max(initial=0.0))
        return SolverResult(
            status=status,
            z=z_out,
            objective=ev.objective if ev is not None else np.nan,
            max_equality_violation=feas,
            max_inequality_violation=ineq,
            iterations=iterations,
            wall_time=time.perf_counter() - start,
            multipliers=unscale_multipliers(lam),
            multipliers_scaled=lam,
            bound_multipliers=nu / dv if nu is not None else None,
            active_lower=qp_state.active_lower if qp_state is not None else None,
            active_upper=qp_state.active_upper if qp_state is not None else None,
            hessian=H,
        )

    try:
        raw_ev, ev = eval_scaled(z)
    except EvaluationError:
        iterations = 0
        return finish("evaluation-error")

    for iterations in range(1, cfg.max_iterations + 1):
        g = ev.residuals
        box = _violation(lo, hi, z)
        feas = float(np.abs(g).max()) if len(g) else 0.0
        boxv = float(box.max(initial=0.0))

        # per-row penalties follow the multipliers (Powell's update); rows
        # that hit their elastic cap get their penalty raised and the
        # subproblem is re-solved, so relaxation only ever absorbs genuinely
        # inconsistent linearizations
        if rho is None:
            rho = np.full(len(g), cfg.penalty_init)
        workspace = _QpWorkspace(H, ev.jacobian)
        lo_step = np.maximum(lo - z, -trust)
        hi_step = np.minimum(hi - z, trust)
        fixed_step = lo == hi
        lo_step[fixed_step] = (lo - z)[fixed_step]
        hi_step[fixed_step] = lo_step[fixed_step]
        bad = lo_step > hi_step
        lo_step[bad] = (lo - z)[bad]
        hi_step[bad] = np.maximum((lo - z)[bad], np.minimum((hi - z)[bad], trust))
        for _ in range(10):
            d, lam, stat_vec, qp_state, qp_ok = _solve_qp(
                H, ev.gradient, ev.jacobian, -g, lo_step, hi_step, rho, qp_state,
                cfg.hessian_reg, workspace=workspace,
            )
            if not len(lam) or feas <= cfg.feas_tol:
                # a relaxed row at a feasible point is a degenerate multiplier,
                # not an infeasibility; growing the penalty would chase it
                break
            capped = np.abs(lam) >= rho * (1.0 - 1e-9)
            if not qp_ok or not np.any(capped):
                break
            rho[capped] = np.maximum(
                rho[capped], cfg.penalty_growth * (np.abs(lam[capped]) + cfg.penalty_margin)
            )
        insane = (
            not np.isfinite(d).all()
            or float(np.abs(d).max(initial=0.0)) > 1e6
            or (len(lam) and float(np.abs(lam).max(initial=0.0)) > 1e8)
        )
        if insane:
            # a degenerate quasi-Newton matrix poisons the base system;
            # rebuild both from scratch
            H = np.eye(n)
            scaled_h = False
            workspace = _QpWorkspace(H, ev.jacobian)
            d, lam, stat_vec, qp_state, qp_ok = _solve_qp(
                H, ev.gradient, ev.jacobian, -g, lo_step, hi_step, rho, qp_state,
                cfg.hessian_reg, workspace=workspace,
            )
        if len(lam):
            # Powell's update keeps each penalty just above its multiplier
            lam_need = np.abs(lam) * 1.05 + cfg.penalty_margin
            rho = np.minimum(np.maximum(lam_need, 0.5 * (rho + lam_need)), 1e7)
        nu_need = np.abs(stat_vec) * 1.05 + cfg.penalty_margin
        rho_box = np.minimum(np.maximum(nu_need, 0.5 * (rho_box + nu_need)), 1e7)

        # first-order conditions of the NLP at z itself (drop the model term H d)
        nlp_stat = ev.gradient + (ev.jacobian.T @ lam if len(lam) else 0.0)
        nu = nlp_stat
        at_lo = (z - lo) <= 1e-9 * (1.0 + np.abs(z))
        at_hi = (hi - z) <= 1e-9 * (1.0 + np.abs(z))
        free_mask = ~(at_lo | at_hi)
        kkt_res = max(
            float(np.abs(nlp_stat[free_mask]).max(initial=0.0)),
            float((-nlp_stat[at_lo & ~fixed]).max(initial=0.0)),
            float(nlp_stat[at_hi & ~fixed].max(initial=0.0)),
        )
        if cfg.log is not None or cfg.verbose:
            line = (
                f"iter {iterations:3d} obj {ev.objective: .8e} viol {max(feas, boxv):.3e} "
                f"step {float(np.abs(d).max(initial=0.0)):.3e} rho {rho.max(initial=0.0):.1e} "
                f"kkt {kkt_res:.3e}\n"
            )
            if cfg.log is not None:
                cfg.log.write(line)
            if cfg.verbose:
                print(line, end="")

        if feas <= cfg.feas_tol and boxv <= cfg.feas_tol and kkt_res <= cfg.kkt_tol:
            status = "converged"
            break

        quad = float(ev.gradient @ d + 0.5 * d @ (H @ d))

        def merit(objective, res, violation):
            total = objective
            if len(res):
                total += float(rho @ np.abs(res))
            return total + float(rho_box @ violation)

        def predicted():
            gain = -quad
            if len(g):
                gain += float(rho @ (np.abs(g) - np.abs(g + ev.jacobian @ d)))
            gain += float(rho_box @ (box - _violation(lo, hi, z + d)))
            return gain

        # the penalties must make the step a descent direction for the merit
        pred = predicted()
        for _ in range(6):
            if pred > 1e-16 or (not len(g) and box.max(initial=0.0) == 0.0):
                break
            rho = rho * 2.0
            rho_box = rho_box * 2.0
            pred = predicted()
        if (
            feas <= cfg.feas_tol
            and boxv <= cfg.feas_tol
            and pred <= 1e-12 * (1.0 + abs(ev.objective))
        ):
            # feasible and the subproblem predicts nothing to gain: the
            # remaining KKT gap is below what the model can resolve
            status = "max-iterations"
            break
        merit0 = merit(ev.objective, g, box)
        pred = max(pred, 1e-16)

        alpha = 1.0
        accepted = False
        soc_available = len(g) > 0
        for _ in range(40):
            z_try = z + alpha * d
            try:
                raw_cand, cand = eval_scaled(z_try)
            except EvaluationError:
                alpha *= 0.5
                continue
            merit_try = merit(cand.objective, cand.residuals, _violation(lo, hi, z_try))
            if merit_try <= merit0 - 1e-4 * alpha * pred:
                accepted = True
                break
            if soc_available and alpha == 1.0:
                # second-order correction: re-enforce the constraints at the
                # trial point through the same working set (Maratos remedy)
                soc_available = False
                pins, beta = [], []
                for i in np.flatnonzero(qp_state.active_lower | qp_state.active_upper):
                    pins.append(i)
                    beta.append(0.0)
                for j in np.flatnonzero(qp_state.sigma != 0):
                    pins.append(len(d) + j)
                    beta.append(rho[j] * qp_state.sigma[j])
                workspace.set_rhs(np.zeros(len(d)), -cand.residuals)
                correction = workspace.solve(pins, np.asarray(beta))[0][: len(d)]
                z_soc = z + d + correction
                if np.all(z_soc >= lo - 1e-12) and np.all(z_soc <= hi + 1e-12):
                    try:
                        raw_soc, cand_soc = eval_scaled(z_soc)
                    except EvaluationError:
                        alpha *= 0.5
                        continue
                    merit_soc = merit(
                        cand_soc.objective, cand_soc.residuals, _violation(lo, hi, z_soc)
                    )
                    if merit_soc <= merit0 - 1e-4 * pred:
                        z_try = z_soc
                        raw_cand, cand = raw_soc, cand_soc
                        merit_try = merit_soc
                        d = d + correction
                        accepted = True
                        break
            alpha *= 0.5

        if not accepted:
            stall += 1
            trust = max(trust * 0.25, 1e-3)
            if (
                feas <= cfg.feas_tol
                and boxv <= cfg.feas_tol
                and stall >= 5
                and kkt_res <= 10.0 * cfg.kkt_tol
            ):
                # feasible, repeatedly rejected, and within a whisker of
                # first-order optimality: remaining gain is model noise
                status = "max-iterations"
                break
            if stall >= cfg.stall_limit:
                status = "max-iterations" if feas <= cfg.feas_tol else "infeasible-detected"
                break
            if stall in (1, 3):
                # a poor quasi-Newton model is the usual culprit: reset it
                H = np.eye(n)
                scaled_h = False
            continue

        decrease = merit0 - merit_try
        stall = stall + 1 if decrease < 1e-12 else 0
        if stall >= cfg.stall_limit:
            z = z_try
            raw_ev, ev = raw_cand, cand
            status = "max-iterations" if feas <= cfg.feas_tol else "infeasible-detected"
            break

        if alpha == 1.0:
            trust = min(trust * 1.5, 4.0)
        elif alpha < 0.25:
            trust = max(trust * 0.5, 1e-3)

        s = alpha * d
        y = (cand.gradient + cand.jacobian.T @ lam) - (
            ev.gradient + ev.jacobian.T @ lam
        )
        if not scaled_h:
            sty = float(s @ y)
            sts = float(s @ s)
            if sty > 1e-12 and sts > 1e-12:
                H = np.eye(n) * (sty / sts)
                scaled_h = True
        H = _damped_bfgs_update(H, s, y)

        z = z_try
        raw_ev, ev = raw_cand, cand

    return finish(status, ev)


def warm_solve(problem, previous: SolverResult, config: SolverConfig | None = None) -> SolverResult:
    """Re-solve starting from a previous result.

    The previous solution seeds the iterate; multipliers and active sets
    are reused when the dimensions still match, otherwise they start from
    zero.
    """
    if len(previous.z) != len(problem.lower):
        raise ValueError(
            f"warm start dimension mismatch: previous {len(previous.z)}, "
            f"problem {len(problem.lower)}"
        )
    multipliers = previous.multipliers_scaled
    state = None
    if (
        previous.active_lower is not None
        and len(previous.active_lower) == len(problem.lower)
    ):
        state = _QpState(previous.active_lower.copy(), previous.active_upper.copy())
    if multipliers is not None and hasattr(problem, "m") and len(multipliers) != problem.m:
        multipliers = None
    return solve(problem, previous.z, config, multipliers=multipliers, qp_state=state,
                 initial_hessian=previous.hessian)
