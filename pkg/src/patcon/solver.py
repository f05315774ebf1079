"""Stationary profile production: templates, damped Newton, fibering roots.

Templates are smooth step-like initial guesses taking the equilibrium values
+1, -1 and 0 on prescribed intervals.  The Newton solver works on the banded
residual (-1)^{m+1} D^{2m} F + g_eps(F) with Armijo backtracking on the max
norm; the Nonlocal family gets a dedicated residual with a rank-one Jacobian
update solved by the Sherman-Morrison formula.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
from scipy.optimize import brentq

from patcon.discretize import DiffOperator, Grid, build_operator
from patcon.model import Family, Problem, Profile, g_eval

ARMIJO_DECREASE = 1e-4
ARMIJO_MIN_STEP = 2.0 ** -20
JACOBIAN_SHIFT = 1e-10


class NoConvergence(RuntimeError):
    """Newton ran out of iterations or backtracking steps.

    Carries the best iterate seen so far in ``best`` and its residual norm.
    """

    def __init__(self, message: str, best: Profile):
        super().__init__(message)
        self.best = best
        self.residual_norm = best.residual_norm


class SingularJacobian(RuntimeError):
    """Banded factorization failed even after a diagonal shift.

    Near folds this is the expected signal for the continuation module.
    """


@dataclass(frozen=True)
class TemplateSpec:
    """Step-like template: plateaus (level, start, end) plus smoothing width.

    Levels must be +1, -1 or 0; intervals must be disjoint, ordered, and
    leave room for the transition bands (gap >= 2 * smoothing_width between
    plateaus and between the outermost plateaus and the boundary).
    """

    plateaus: tuple[tuple[float, float, float], ...]
    smoothing_width: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(
            self,
            "plateaus",
            tuple((float(l), float(a), float(b)) for (l, a, b) in self.plateaus),
        )
        if self.smoothing_width <= 0:
            raise ValueError("smoothing_width must be positive")
        for level, a, b in self.plateaus:
            if level not in (-1.0, 0.0, 1.0):
                raise ValueError(f"plateau level must be -1, 0 or +1, got {level}")
            if b <= a:
                raise ValueError(f"plateau ({level}, {a}, {b}) has nonpositive length")

    def validate_for(self, R: float) -> None:
        w = self.smoothing_width
        prev_end = None
        for level, a, b in self.plateaus:
            if prev_end is not None:
                if a < prev_end:
                    raise ValueError("plateaus overlap or are out of order")
                if a - prev_end < 2 * w:
                    raise ValueError(
                        f"transition bands wider than gap: gap {a - prev_end} < {2 * w}"
                    )
            prev_end = b
        if self.plateaus:
            if self.plateaus[0][1] - 2 * w < -R or self.plateaus[-1][2] + 2 * w > R:
                raise ValueError("plateaus leave no room to vanish near +-R")


def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def template_profile(spec: TemplateSpec, grid: Grid) -> Profile:
    """C^1 profile equal to each plateau level away from the cubic-blend bands."""
    spec.validate_for(grid.R)
    y = grid.nodes
    w = spec.smoothing_width
    F = np.zeros_like(y)
    for level, a, b in spec.plateaus:
        if level == 0.0:
            continue
        F += level * (_smoothstep((y - (a - w)) / w) - _smoothstep((y - b) / w))
    return Profile(grid=grid, values=F, residual_norm=np.inf, eps=np.nan, R=grid.R)


def stationary_residual(problem: Problem, op: DiffOperator, values: np.ndarray) -> np.ndarray:
    """Residual (-1)^{m+1} D^{2m} F + g_eps(F) at the interior nodes."""
    if problem.family is Family.NONLOCAL:
        return _nonlocal_residual(problem, op, values)
    g, _ = g_eval(problem, values)
    return -op.apply(values) + g


def _nonlocal_residual(problem: Problem, op: DiffOperator, values: np.ndarray) -> np.ndarray:
    mass = op.grid.h * float(np.dot(values, values))
    return -op.apply(values) - problem.eps * values + mass * values


def _jacobian_band(problem: Problem, op: DiffOperator, values: np.ndarray) -> np.ndarray:
    """Banded Jacobian -(operator band) + diag(dg) in solve_banded layout."""
    band = -op.band_lower_full()
    if problem.family is Family.NONLOCAL:
        mass = op.grid.h * float(np.dot(values, values))
        band[op.m, :] += mass - problem.eps
    else:
        _, dg = g_eval(problem, values)
        band[op.m, :] += dg
    return band


def _solve_newton_system(
    problem: Problem, op: DiffOperator, values: np.ndarray, rhs: np.ndarray
) -> np.ndarray:
    """Solve J d = rhs, retrying once with a tiny diagonal shift."""
    m = op.m
    band = _jacobian_band(problem, op, values)
    for shift in (0.0, JACOBIAN_SHIFT):
        band_try = band if shift == 0.0 else band.copy()
        if shift:
            band_try[m, :] += shift
        try:
            if problem.family is Family.NONLOCAL:
                return _solve_rank_one(band_try, m, values, op.grid.h, rhs)
            return sla.solve_banded((m, m), band_try, rhs)
        except sla.LinAlgError:
            continue
    raise SingularJacobian("banded Jacobian factorization failed")


def _solve_rank_one(band: np.ndarray, m: int, values: np.ndarray, h: float, rhs) -> np.ndarray:
    """Sherman-Morrison solve for (B + u v^T) d = rhs with banded B.

    The Nonlocal Jacobian is B + 2h F F^T where B collects the banded part.
    ``rhs`` may be a vector or a matrix of columns.
    """
    u = 2.0 * h * values
    stacked = np.column_stack((rhs, u))
    sol = sla.solve_banded((m, m), band, stacked)
    if rhs.ndim == 1:
        x, bu = sol[:, 0], sol[:, 1]
        denom = 1.0 + float(np.dot(values, bu))
        return x - bu * (float(np.dot(values, x)) / denom)
    x, bu = sol[:, :-1], sol[:, -1]
    denom = 1.0 + float(np.dot(values, bu))
    return x - np.outer(bu, values @ x) / denom


def newton_solve(
    problem: Problem,
    init: Profile,
    tol: float = 1e-10,
    max_iter: int = 60,
) -> Profile:
    """Damped Newton iteration on the stationary residual.

    Returns a Profile whose recomputed max-norm residual is at most ``tol``.
    Raises NoConvergence (carrying the best iterate) when the iteration or
    line-search budget is exhausted, and SingularJacobian when the banded
    factorization fails even after a diagonal shift.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    if abs(init.grid.R - problem.R) > 1e-12 * max(1.0, abs(problem.R)):
        raise ValueError(f"init grid R={init.grid.R} does not match problem R={problem.R}")
    op = build_operator(init.grid, problem.m)
    F = init.values.copy()
    res = stationary_residual(problem, op, F)
    rnorm = float(np.max(np.abs(res)))
    best = (F.copy(), rnorm)

    for _ in range(max_iter):
        if rnorm <= tol:
            return Profile(init.grid, F, rnorm, problem.eps, problem.R)
        d = _solve_newton_system(problem, op, F, -res)
        lam = 1.0
        while True:
            F_new = F + lam * d
            res_new = stationary_residual(problem, op, F_new)
            rnorm_new = float(np.max(np.abs(res_new)))
            if rnorm_new <= (1.0 - ARMIJO_DECREASE * lam) * rnorm:
                break
            lam *= 0.5
            if lam < ARMIJO_MIN_STEP:
                best_prof = Profile(init.grid, best[0], best[1], problem.eps, problem.R)
                raise NoConvergence("line search stalled", best_prof)
        F, res, rnorm = F_new, res_new, rnorm_new
        if rnorm < best[1]:
            best = (F.copy(), rnorm)

    if rnorm <= tol:
        return Profile(init.grid, F, rnorm, problem.eps, problem.R)
    best_prof = Profile(init.grid, best[0], best[1], problem.eps, problem.R)
    raise NoConvergence(f"no convergence in {max_iter} iterations", best_prof)


def h0_norm(op: DiffOperator, values: np.ndarray) -> float:
    """Positive quadratic form H_0(v) = int |D~^m v|^2 + int v^2 (trapezoid)."""
    h = op.grid.h
    return op.quadratic_form(values) + h * float(np.dot(values, values))


def normalize_h0(op: DiffOperator, values: np.ndarray) -> np.ndarray:
    """Rescale values onto the H_0 = 1 sphere."""
    return values / np.sqrt(h0_norm(op, values))


@dataclass(frozen=True)
class FiberingRoots:
    """Real roots of the scalar fibering equation; missing branches are None."""

    r_minus: float | None
    r_zero: float | None
    r_plus: float | None

    def present(self) -> tuple[bool, bool, bool]:
        return (self.r_minus is not None, self.r_zero is not None, self.r_plus is not None)


def fibering_roots(
    h_profile: Profile,
    v_profile: Profile,
    problem: Problem,
    scan_points: int = 4001,
) -> FiberingRoots:
    """Roots of the scalar radius equation of the Cartesian fibering.

    The scalar function is r - int |h + r v|^{beta-2} (h + r v) v + L0(h) v
    with L0(h)v = -int D~^m h . D~^m v + int h v.  For h = 0 the nonzero
    roots have the closed form +-(int |v|^beta)^{1/(2-beta)}.
    """
    if problem.n <= 0:
        raise ValueError("fibering needs n > 0 so beta lies in (1, 2)")
    if h_profile.grid != v_profile.grid:
        raise ValueError("h and v must share a grid")
    grid = v_profile.grid
    op = build_operator(grid, problem.m)
    v = v_profile.values
    hv = h_profile.values
    norm = h0_norm(op, v)
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"v must satisfy H_0(v) = 1, got {norm}")

    beta = problem.beta
    h = grid.h
    l0v = -h * float(np.dot(op.apply(hv), v)) + h * float(np.dot(hv, v))

    def fun(r: float) -> float:
        s = hv + r * v
        nonlin = h * float(np.dot(np.sign(s) * np.abs(s) ** (beta - 1.0), v))
        return r - nonlin + l0v

    v_beta = h * float(np.sum(np.abs(v) ** beta))
    r_scale = v_beta ** (1.0 / (2.0 - beta)) if v_beta > 0 else 1.0
    r_max = 4.0 * max(r_scale, np.max(np.abs(hv)) + 1.0)
    roots: list[float] = []
    for _ in range(4):
        grid_r = np.linspace(-r_max, r_max, scan_points)
        vals = np.array([fun(r) for r in grid_r])
        sign = np.sign(vals)
        idx = np.nonzero(sign[:-1] * sign[1:] < 0)[0]
        roots = []
        for i in idx:
            roots.append(float(brentq(fun, grid_r[i], grid_r[i + 1], xtol=1e-13)))
        for i in np.nonzero(vals == 0.0)[0]:
            roots.append(float(grid_r[i]))
        if roots and vals[0] < 0 < vals[-1]:
            break
        r_max *= 4.0
    else:
        raise ValueError("root scan range exhausted")
    roots = sorted(set(round(r, 12) for r in roots))

    r_zero = min(roots, key=abs)
    r_minus = min(roots)
    r_plus = max(roots)
    return FiberingRoots(
        r_minus=r_minus if (r_minus < 0 and r_minus != r_zero) else None,
        r_zero=r_zero,
        r_plus=r_plus if (r_plus > 0 and r_plus != r_zero) else None,
    )
