"""Branch tracing in eps and R, fold detection, and exact nonlocal branches.

eps-branches use Keller pseudo-arclength continuation with a bordered
corrector (two banded solves per Newton iteration), which rounds saddle-node
folds instead of stalling on them.  R-branches use natural continuation with
the pure-scaling predictor F -> s^{-m} F mapped index-to-index onto the
rescaled grid, which is exactly the domain-compression scaling of the
two-term equations and an excellent predictor for the rest.

No automatic branch switching happens at bifurcation points: past a fold the
trace stays on the connected curve, and stops once the parameter returns to
its starting level on the other sheet.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from patcon.classify import critical_value
from patcon.discretize import DiffOperator, Grid, build_operator, eigen_smallest
from patcon.model import Family, Problem, Profile
from patcon.solver import (
    NoConvergence,
    SingularJacobian,
    _jacobian_band,
    _solve_newton_system,
    newton_solve,
    stationary_residual,
)


class StartNotConverged(ValueError):
    """The starting profile does not solve the problem at its parameter."""


@dataclass(frozen=True)
class StepControl:
    """Arclength / parameter step controller settings."""

    ds_init: float = 0.02
    ds_min: float = 1e-5
    ds_max: float = 0.1
    grow: float = 1.3
    grow_after: int = 3
    shrink: float = 0.5
    max_steps: int = 40000
    corrector_tol: float = 1e-8
    corrector_max_iter: int = 12
    ds_near_fold: float = 0.02
    fold_tangent_threshold: float = 0.3
    stop_sup_below: float | None = None
    stop_sup_above: float | None = None

    def __post_init__(self) -> None:
        if not (0 < self.ds_min <= self.ds_init <= self.ds_max):
            raise ValueError("need 0 < ds_min <= ds_init <= ds_max")


@dataclass(frozen=True)
class BranchRecord:
    param: float
    sup_norm: float
    c_F: float
    profile: Profile


@dataclass(frozen=True)
class FoldRecord:
    param_star: float
    sup_norm_star: float
    direction_change: str  # "max" (param turns back down) or "min"


@dataclass
class Branch:
    """Ordered continuation records with fold annotations.

    ``status`` explains why the trace stopped: "target_reached",
    "step_floor", "returned_to_start_level", "amplitude_floor",
    "amplitude_cap", or "max_steps".
    """

    records: list[BranchRecord]
    param_kind: str
    folds: list[FoldRecord] = field(default_factory=list)
    status: str = ""

    @property
    def params(self) -> np.ndarray:
        return np.array([r.param for r in self.records])

    @property
    def sup_norms(self) -> np.ndarray:
        return np.array([r.sup_norm for r in self.records])

    def to_csv(self, path) -> None:
        fold_params = [f.param_star for f in self.folds]
        flag = np.zeros(len(self.records), dtype=int)
        for fp in fold_params:
            flag[int(np.argmin(np.abs(self.params - fp)))] = 1
        with open(path, "w", newline="") as fh:
            fh.write("param,sup_norm,c_F,fold_flag\n")
            for rec, fl in zip(self.records, flag):
                fh.write(f"{rec.param!r},{rec.sup_norm!r},{rec.c_F!r},{fl}\n")


def _record(problem: Problem, profile: Profile, param: float) -> BranchRecord:
    try:
        c = critical_value(profile, problem)
    except ValueError:
        c = np.nan
    return BranchRecord(param=param, sup_norm=profile.sup_norm, c_F=c, profile=profile)


def _problem_at(problem: Problem, param_kind: str, value: float) -> Problem:
    return problem.with_eps(value) if param_kind == "eps" else problem.with_R(value)


def continue_branch(
    problem: Problem,
    start: Profile,
    param_kind: str,
    param_target: float,
    ctrl: StepControl | None = None,
) -> Branch:
    """Trace the solution branch through ``start`` toward ``param_target``.

    The start profile is first polished at its own parameter; failure to
    converge raises StartNotConverged.  The branch stops at the target, at a
    corrector failure after the step-size floor (partial branch, status
    "step_floor"), when the parameter returns to its starting level after
    rounding a fold, or at the amplitude guards in ``ctrl``.
    """
    if param_kind not in ("eps", "R"):
        raise ValueError(f"param_kind must be 'eps' or 'R', got {param_kind}")
    if ctrl is None:
        ctrl = StepControl()

    param0 = problem.eps if param_kind == "eps" else problem.R
    prob0 = _problem_at(problem, param_kind, param0)
    try:
        polished = newton_solve(prob0, start, tol=ctrl.corrector_tol)
    except (NoConvergence, SingularJacobian) as exc:
        raise StartNotConverged(
            f"start profile does not solve the problem at {param_kind}={param0}"
        ) from exc

    if param_kind == "eps":
        branch = _continue_eps(problem, polished, param0, param_target, ctrl)
    else:
        branch = _continue_R(problem, polished, param0, param_target, ctrl)
    branch.folds = detect_folds(branch)
    return branch


def _continue_eps(
    problem: Problem, start: Profile, p0: float, target: float, ctrl: StepControl
) -> Branch:
    grid = start.grid
    op = build_operator(grid, problem.m)
    h = grid.h
    direction = 1.0 if target >= p0 else -1.0

    def res(F: np.ndarray, p: float) -> np.ndarray:
        return stationary_residual(problem.with_eps(p), op, F)

    def res_p(F: np.ndarray, p: float) -> np.ndarray:
        dp = 1e-6 * max(1.0, abs(p))
        try:
            r_lo, p_lo = res(F, p - dp), p - dp
        except ValueError:  # family restricts eps to a half line
            r_lo, p_lo = res(F, p), p
        return (res(F, p + dp) - r_lo) / (p + dp - p_lo)

    F = start.values.copy()
    p = p0
    records = [_record(problem.with_eps(p), start, p)]

    # initial tangent from dF/dp
    try:
        b = _solve_newton_system(problem.with_eps(p), op, F, -res_p(F, p))
    except SingularJacobian:
        b = np.zeros_like(F)
    tF, tp = b, 1.0
    nrm = np.sqrt(h * float(np.dot(tF, tF)) + tp * tp)
    tF, tp = tF / nrm, tp / nrm
    if tp * direction < 0:
        tF, tp = -tF, -tp

    ds = ctrl.ds_init
    streak = 0
    fold_crossed = False
    status = "max_steps"
    span = max(abs(target - p0), 1e-3)
    floor_steps = 0  # consecutive accepted steps at floor-level arclength

    def try_land(value: float, allowed_drift: float) -> Profile | None:
        prob_t = problem.with_eps(value)
        try:
            prof_t = newton_solve(
                prob_t, Profile(grid, F, np.inf, value, problem.R), tol=ctrl.corrector_tol
            )
        except (NoConvergence, SingularJacobian):
            return None
        # accept only a landing on the same sheet: the correction must stay
        # comparable to the step, else Newton jumped branches
        if float(np.max(np.abs(prof_t.values - F))) > allowed_drift:
            return None
        return prof_t

    for _ in range(ctrl.max_steps):
        ds_eff = min(ds, ctrl.ds_near_fold) if abs(tp) < ctrl.fold_tangent_threshold else ds

        # land exactly on the target (or, past a fold, back on the start
        # level) when the predictor would cross it
        if fold_crossed:
            target_eff, dir_eff, end_status = p0, -direction, "returned_to_start_level"
        else:
            target_eff, dir_eff, end_status = target, direction, "target_reached"
        p_pred = p + ds_eff * tp
        crossing = (p_pred - target_eff) * dir_eff >= 0 and (p - target_eff) * dir_eff < 0
        # proximity landing, scaled by the tangent's parameter component so a
        # birth point (param progress stalling, amplitude shrinking) is never
        # "landed" onto a foreign sheet
        near = abs(p - target_eff) <= 2.0 * ds_eff * max(abs(tp), 1e-8) and (
            (p - target_eff) * dir_eff < 0 or fold_crossed
        )
        if crossing or near:
            allowed = 10.0 * ds_eff + 2.0 * abs(p - target_eff) * _dfdp_scale(tF, tp, h)
            prof_t = try_land(target_eff, allowed)
            if prof_t is not None:
                records.append(_record(problem.with_eps(target_eff), prof_t, target_eff))
                status = end_status
                break

        F_new, p_new, ok = _bordered_corrector(
            problem, op, h, F, p, tF, tp, ds_eff, ctrl, res, res_p
        )
        if not ok:
            ds *= ctrl.shrink
            streak = 0
            if ds < ctrl.ds_min:
                # last resort before reporting a stalled trace: when the
                # stall happens within sight of the effective target, a
                # direct solve there ends the branch cleanly
                if abs(p - target_eff) <= 0.02 * span:
                    prof_t = try_land(
                        target_eff, 0.25 * (1.0 + float(np.max(np.abs(F))))
                    )
                    if prof_t is not None:
                        records.append(
                            _record(problem.with_eps(target_eff), prof_t, target_eff)
                        )
                        status = end_status
                        break
                status = "step_floor"
                break
            continue

        prob_new = problem.with_eps(p_new)
        rn = float(np.max(np.abs(res(F_new, p_new))))
        prof = Profile(grid, F_new, rn, p_new, problem.R)
        records.append(_record(prob_new, prof, p_new))

        dF, dp = F_new - F, p_new - p
        nrm = np.sqrt(h * float(np.dot(dF, dF)) + dp * dp)
        tF_new, tp_new = dF / nrm, dp / nrm
        if tp_new * tp < 0:
            fold_crossed = True
        tF, tp = tF_new, tp_new
        F, p = F_new, p_new

        streak += 1
        if streak >= ctrl.grow_after:
            ds = min(ds * ctrl.grow, ctrl.ds_max)
            streak = 0

        sup = prof.sup_norm
        if ctrl.stop_sup_below is not None and sup < ctrl.stop_sup_below:
            status = "amplitude_floor"
            break
        if ctrl.stop_sup_above is not None and sup > ctrl.stop_sup_above:
            status = "amplitude_cap"
            break
        if fold_crossed and (p - p0) * direction <= 0:
            status = "returned_to_start_level"
            break

    return Branch(records=records, param_kind="eps", status=status)


def _dfdp_scale(tF: np.ndarray, tp: float, h: float) -> float:
    """Magnitude of dF/dp (max norm) estimated from the unit tangent."""
    if abs(tp) < 1e-12:
        return np.inf
    return float(np.max(np.abs(tF))) / abs(tp)


def _bordered_corrector(problem, op, h, F, p, tF, tp, ds, ctrl, res, res_p):
    """One Keller corrector step: Newton on (residual, arclength constraint).

    The bordered system is solved by block elimination, two banded solves
    per iteration: with a = J^{-1}(-r) and b = J^{-1}(-R_p), the update is
    dp = -(constraint + <tF, a>_h) / (tp + <tF, b>_h), dF = a + dp * b.
    """
    Fc = F + ds * tF
    pc = p + ds * tp
    for _ in range(ctrl.corrector_max_iter):
        try:
            r = res(Fc, pc)
        except ValueError:  # wandered outside the family's eps domain
            return F, p, False
        constraint = h * float(np.dot(tF, Fc - F)) + tp * (pc - p) - ds
        if (
            float(np.max(np.abs(r))) <= ctrl.corrector_tol
            and abs(constraint) <= 1e-10 * max(1.0, abs(pc))
        ):
            return Fc, pc, True
        try:
            prob_c = problem.with_eps(pc)
            a = _solve_newton_system(prob_c, op, Fc, -r)
            b = _solve_newton_system(prob_c, op, Fc, -res_p(Fc, pc))
        except (SingularJacobian, ValueError):
            return F, p, False
        denom = tp + h * float(np.dot(tF, b))
        if denom == 0.0 or not np.isfinite(denom):
            return F, p, False
        dp = (-constraint - h * float(np.dot(tF, a))) / denom
        dF = a + dp * b
        if not np.all(np.isfinite(dF)) or not np.isfinite(dp):
            return F, p, False
        Fc = Fc + dF
        pc = pc + dp
        if float(np.max(np.abs(dF))) > 1e6 * (1.0 + float(np.max(np.abs(F)))):
            return F, p, False
    return F, p, False


def _continue_R(
    problem: Problem, start: Profile, r0: float, target: float, ctrl: StepControl
) -> Branch:
    N = start.grid.N
    m = problem.m
    direction = 1.0 if target >= r0 else -1.0

    F = start.values.copy()
    r = r0
    records = [_record(problem.with_R(r), start, r)]
    dr = ctrl.ds_init * max(1.0, abs(r0))
    dr = min(dr, ctrl.ds_max)
    streak = 0
    status = "max_steps"

    for _ in range(ctrl.max_steps):
        if (r - target) * direction >= 0:
            status = "target_reached"
            break
        r_new = r + direction * dr
        if (r_new - target) * direction > 0:
            r_new = target
        s = r_new / r
        grid_new = Grid(R=r_new, N=N)
        F_pred = F * s**(-m)
        prob_new = problem.with_R(r_new)
        try:
            prof = newton_solve(
                prob_new,
                Profile(grid_new, F_pred, np.inf, problem.eps, r_new),
                tol=ctrl.corrector_tol,
            )
        except (NoConvergence, SingularJacobian):
            dr *= ctrl.shrink
            streak = 0
            if dr < ctrl.ds_min:
                status = "step_floor"
                break
            continue
        records.append(_record(prob_new, prof, r_new))
        F, r = prof.values.copy(), r_new
        streak += 1
        if streak >= ctrl.grow_after:
            dr = min(dr * ctrl.grow, ctrl.ds_max)
            streak = 0
        sup = prof.sup_norm
        if ctrl.stop_sup_above is not None and sup > ctrl.stop_sup_above:
            status = "amplitude_cap"
            break
        if ctrl.stop_sup_below is not None and sup < ctrl.stop_sup_below:
            status = "amplitude_floor"
            break

    if status == "max_steps" and (r - target) * direction >= 0:
        status = "target_reached"
    return Branch(records=records, param_kind="R", status=status)


def detect_folds(branch: Branch, merge_tol: float = 1e-3) -> list[FoldRecord]:
    """Sign changes of dparam/ds along the branch, refined to |dparam| < 1e-4.

    The refinement runs secant iteration on the tangent of a local cubic fit
    of param against arclength, falling back to the quadratic vertex.
    Detections closer than ``merge_tol`` in the parameter collapse into one
    record (step-floor stalls can dither the tangent without an actual fold).
    """
    records = branch.records
    if len(records) < 3:
        return []
    params = branch.params
    sups = branch.sup_norms
    # arclength from scalar data; profiles contribute through the sup norm
    ds = np.sqrt(np.diff(params) ** 2 + np.diff(sups) ** 2)
    s = np.concatenate(([0.0], np.cumsum(ds)))
    dp = np.diff(params)
    folds: list[FoldRecord] = []
    for k in range(len(dp) - 1):
        if dp[k] == 0.0 or dp[k + 1] == 0.0:
            continue
        if dp[k] * dp[k + 1] < 0:
            lo = max(0, k - 1)
            hi = min(len(params), k + 4)
            p_star, sup_star, opens_down = _refine_fold(
                s[lo:hi], params[lo:hi], sups[lo:hi]
            )
            fold = FoldRecord(
                param_star=p_star,
                sup_norm_star=sup_star,
                direction_change="max" if opens_down else "min",
            )
            if folds and abs(folds[-1].param_star - p_star) < merge_tol:
                continue
            folds.append(fold)
    return folds


def _refine_fold(s, p, sup) -> tuple[float, float, bool]:
    s = s - s[0]
    deg = min(3, len(s) - 1)
    coeffs = np.polyfit(s, p, deg)
    dcoeffs = np.polyder(coeffs)
    # secant iteration for the root of dp/ds, seeded by the quadratic vertex
    c2 = np.polyfit(s, p, 2)
    s_star = -c2[1] / (2.0 * c2[0]) if c2[0] != 0 else 0.5 * (s[0] + s[-1])
    s_a, s_b = s_star - 0.1 * (s[-1] - s[0]), s_star
    for _ in range(60):
        fa, fb = np.polyval(dcoeffs, s_a), np.polyval(dcoeffs, s_b)
        if fb == fa:
            break
        s_next = s_b - fb * (s_b - s_a) / (fb - fa)
        if abs(np.polyval(coeffs, s_next) - np.polyval(coeffs, s_b)) < 1e-4:
            s_b = s_next
            break
        s_a, s_b = s_b, s_next
    s_star = float(np.clip(s_b, s[0], s[-1]))
    p_star = float(np.polyval(coeffs, s_star))
    sup_star = float(np.polyval(np.polyfit(s, sup, min(2, len(s) - 1)), s_star))
    opens_down = bool(c2[0] < 0)
    return p_star, sup_star, opens_down


def bifurcation_points(problem: Problem, k: int, N: int = 1601) -> list[float]:
    """Predicted bifurcation parameters eps_l from the operator spectrum.

    LinearizedHomotopy bifurcates at eps_l = 1 - lambda_l, the analytic
    family at eps_l = -lambda_l, with lambda_l the eigenvalues of the SPD
    clamped operator.  Values come back in spectral order l = 0..k-1.
    """
    if problem.family not in (Family.LINEARIZED_HOMOTOPY, Family.ANALYTIC_FAST_DIFFUSION):
        raise ValueError(f"unsupported family {problem.family.value} for bifurcation points")
    grid = Grid(R=problem.R, N=N)
    pairs = eigen_smallest(build_operator(grid, problem.m), k)
    if problem.family is Family.LINEARIZED_HOMOTOPY:
        return [1.0 - lam for lam, _ in pairs]
    return [-lam for lam, _ in pairs]


def nonlocal_branch(problem: Problem, l: int, eps: float, N: int = 801) -> Profile:
    """Exact discrete branch profile sqrt(lambda_l + eps) * psi_l.

    The returned profile's residual in the discrete nonlocal equation is
    checked against 1e-8 * (1 + sup_norm); eps + lambda_l < 0 means the
    branch is not born yet and raises.
    """
    if problem.family is not Family.NONLOCAL:
        raise ValueError("nonlocal_branch requires the Nonlocal family")
    grid = Grid(R=problem.R, N=N)
    op = build_operator(grid, problem.m)
    lam, psi = eigen_smallest(op, l + 1)[l]
    if eps + lam < 0:
        raise ValueError(f"branch not born yet: eps + lambda_{l} = {eps + lam} < 0")
    amp = np.sqrt(max(eps + lam, 0.0))
    values = amp * psi
    prob = replace(problem, eps=eps)
    res = stationary_residual(prob, op, values)
    rn = float(np.max(np.abs(res)))
    profile = Profile(grid, values, rn, eps, problem.R)
    bound = 1e-8 * (1.0 + profile.sup_norm)
    if rn > bound:
        raise RuntimeError(f"nonlocal branch residual {rn} exceeds {bound}")
    return profile
