"""Method-of-lines integration of the degenerate parabolic evolution problem.

The equation is d/dt psi(v) = (-1)^{m+1} D^{2m} v +/- v on (-R, R) with
clamped ends and psi(v) = |v|^{-n/(n+1)} v, the sign of the linear term
following the problem's zeroth_sign (minus for the extinction regime
n in (-1, 0), plus for the blow-up regime n > 0).  Time stepping is a
linearized implicit Euler scheme: psi'_delta(v^k) acts as a lumped mass
matrix and the stiff linear part is implicit, with step-doubling error
control.  Energy functionals

    Phi(t) = 1/2 int |v|^{(n+2)/(n+1)},   E(t) = -int |D~^m v|^2 +/- int v^2

are sampled at every accepted step; their identity Phi' = ((n+2)/2) E holds
semi-discretely, so the recorded defect measures only time-stepping and
regularization error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from patcon.discretize import DiffOperator, build_operator
from patcon.model import Problem, Profile, ZerothSign


class StepSizeCollapse(RuntimeError):
    """Adaptive time step fell below dt_min."""


@dataclass(frozen=True)
class EvolutionConfig:
    dt_init: float = 1e-4
    dt_min: float = 1e-9
    dt_max: float = 1e-2
    delta: float | None = None  # psi regularization; default 1e-8 * sup(v0)
    scheme: str = "implicit_euler_linearized"
    rtol: float = 1e-5
    atol: float = 1e-10
    blowup_cap: float = 1e3  # stop when sup exceeds cap * initial sup
    snapshot_count: int = 200

    def __post_init__(self) -> None:
        if not (0 < self.dt_min <= self.dt_init <= self.dt_max):
            raise ValueError("need 0 < dt_min <= dt_init <= dt_max")
        if self.delta is not None and self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.scheme != "implicit_euler_linearized":
            raise ValueError(f"unknown scheme {self.scheme}")


@dataclass
class EnergyTrace:
    """Time series of Phi, E, numerical dPhi/dt and the theorem's bound."""

    times: np.ndarray
    phi: np.ndarray
    energy: np.ndarray
    phi_rate: np.ndarray
    bound: np.ndarray
    stop_reason: str = ""

    def to_csv(self, path) -> None:
        violation = self.phi - self.bound
        with open(path, "w", newline="") as fh:
            fh.write("t,phi,energy,phi_rate,bound,violation\n")
            for row in zip(self.times, self.phi, self.energy, self.phi_rate, self.bound, violation):
                fh.write(",".join(repr(float(x)) for x in row) + "\n")


@dataclass(frozen=True)
class BoundReport:
    """Outcome of checking a trace against the extinction/blow-up theorem."""

    mode: str
    T: float
    hypotheses_met: bool
    max_bound_violation: float
    max_identity_error: float
    max_concavity_violation: float
    checked_until: float


def _sign_value(problem: Problem) -> float:
    return 1.0 if problem.zeroth_sign is ZerothSign.PLUS else -1.0


def energy_pair(v: Profile | np.ndarray, problem: Problem, op: DiffOperator | None = None):
    """Trapezoid quadrature of (Phi, E) for a profile on a valid grid."""
    if isinstance(v, Profile):
        values = v.values
        if op is None:
            op = build_operator(v.grid, problem.m)
    else:
        if op is None:
            raise ValueError("need an operator when passing raw values")
        values = np.asarray(v, dtype=float)
    h = op.grid.h
    p = (problem.n + 2.0) / (problem.n + 1.0)
    phi = 0.5 * h * float(np.sum(np.abs(values) ** p))
    energy = -op.quadratic_form(values) + _sign_value(problem) * h * float(
        np.dot(values, values)
    )
    return phi, energy


def _psi_prime(values: np.ndarray, n: float, delta: float) -> np.ndarray:
    return (delta * delta + values * values) ** (-n / (2.0 * (n + 1.0))) / (n + 1.0)


def integrate(
    problem: Problem,
    v0: Profile,
    t_end: float,
    cfg: EvolutionConfig | None = None,
) -> tuple[list[tuple[float, Profile]], EnergyTrace]:
    """Integrate the evolution problem from v0 up to t_end.

    Returns evenly thinned (t, profile) snapshots and the EnergyTrace
    sampled at every accepted step.  Blow-up runs stop normally when the
    sup norm exceeds cfg.blowup_cap times its initial value; extinction
    runs may stop early once the solution is numerically zero.
    """
    if cfg is None:
        cfg = EvolutionConfig()
    op = build_operator(v0.grid, problem.m)
    h = v0.grid.h
    n = problem.n
    sup0 = v0.sup_norm
    delta = cfg.delta if cfg.delta is not None else max(1e-8 * sup0, 1e-300)
    sign = _sign_value(problem)
    m = problem.m

    # banded matrix of the linear RHS operator L = -A +/- I (solve layout)
    L_band = -op.band_lower_full()
    L_band[m, :] += sign

    def step(values: np.ndarray, dt: float) -> np.ndarray:
        mass = _psi_prime(values, n, delta)
        band = -dt * L_band
        band[m, :] += mass
        return sla.solve_banded((m, m), band, mass * values)

    # T and the comparison bound from the initial data, when defined
    phi0, e0 = energy_pair(v0.values, problem, op)
    T = (2.0 / n) * phi0 / e0 if e0 != 0 else np.inf
    exponent = (n + 2.0) / n

    def bound_at(t: float) -> float:
        if T <= 0 or not np.isfinite(T):
            return np.nan
        base = 1.0 - t / T
        if base <= 0:
            return np.nan if exponent > 0 else 0.0
        return phi0 * base ** (-exponent)

    v = v0.values.copy()
    t = 0.0
    dt = cfg.dt_init
    times = [0.0]
    phis = [phi0]
    energies = [e0]
    bounds = [bound_at(0.0)]
    snapshots: list[tuple[float, Profile]] = [(0.0, v0)]
    snap_every = max(1, int(np.ceil(t_end / max(cfg.dt_max, 1e-300) / cfg.snapshot_count)))
    accepted = 0
    stop_reason = "t_end"
    fixed_dt = cfg.dt_min == cfg.dt_max

    while t < t_end - 1e-14 * max(1.0, t_end):
        dt = min(dt, t_end - t)
        v_full = step(v, dt)
        if fixed_dt:
            v_new, err = v_full, 0.0
        else:
            v_half = step(step(v, 0.5 * dt), 0.5 * dt)
            scale = cfg.atol + cfg.rtol * float(np.max(np.abs(v_half)))
            err = float(np.max(np.abs(v_full - v_half))) / scale
            v_new = v_half
        if err <= 1.0:
            t += dt
            v = v_new
            accepted += 1
            phi, energy = energy_pair(v, problem, op)
            times.append(t)
            phis.append(phi)
            energies.append(energy)
            bounds.append(bound_at(t))
            if accepted % snap_every == 0:
                snapshots.append((t, Profile(v0.grid, v.copy(), np.nan, problem.eps, problem.R)))
            if not fixed_dt:
                factor = 0.9 / np.sqrt(max(err, 1e-10))
                dt = float(np.clip(dt * np.clip(factor, 0.3, 2.0), cfg.dt_min, cfg.dt_max))
            sup = float(np.max(np.abs(v)))
            if n > 0 and sup > cfg.blowup_cap * max(sup0, 1e-300):
                stop_reason = "blowup_cap"
                break
            if n < 0 and sup < 1e-13 * max(sup0, 1e-300):
                stop_reason = "extinct"
                break
        else:
            dt *= 0.5
            if dt < cfg.dt_min:
                raise StepSizeCollapse(f"dt fell below {cfg.dt_min} at t={t}")

    if snapshots[-1][0] != t:
        snapshots.append((t, Profile(v0.grid, v.copy(), np.nan, problem.eps, problem.R)))

    times_arr = np.array(times)
    phi_arr = np.array(phis)
    rate = np.gradient(phi_arr, times_arr) if len(times) > 2 else np.zeros_like(phi_arr)
    trace = EnergyTrace(
        times=times_arr,
        phi=phi_arr,
        energy=np.array(energies),
        phi_rate=rate,
        bound=np.array(bounds),
        stop_reason=stop_reason,
    )
    return snapshots, trace


def bound_check(trace: EnergyTrace, n: float, mode: str) -> BoundReport:
    """Compare a trace against the extinction or blow-up theorem.

    T is computed from the trace's own initial data as (2/n) Phi(0)/E(0).
    The bound comparison runs over t <= min(t_end, 0.99 T); the identity
    check compares the numerical dPhi/dt with ((n+2)/2) E everywhere, and
    the concavity surrogate checks Phi' <= C1 Phi^{k_n} along extinction.
    A nonpositive T means the theorem's hypotheses are unmet; that is
    reported, not failed.
    """
    if mode not in ("extinction", "blowup"):
        raise ValueError(f"mode must be 'extinction' or 'blowup', got {mode}")
    if trace.times.size == 0:
        raise ValueError("empty trace")
    phi0 = trace.phi[0]
    e0 = trace.energy[0]
    T = (2.0 / n) * phi0 / e0 if e0 != 0 else np.inf

    ident = trace.phi_rate - ((n + 2.0) / 2.0) * trace.energy
    # one-sided end differences are first order; drop them from the max
    core = slice(1, -1) if trace.times.size > 4 else slice(None)
    max_ident = float(np.max(np.abs(ident[core])))

    if T <= 0 or not np.isfinite(T):
        return BoundReport(
            mode=mode,
            T=T,
            hypotheses_met=False,
            max_bound_violation=np.nan,
            max_identity_error=max_ident,
            max_concavity_violation=np.nan,
            checked_until=float(trace.times[-1]),
        )

    t_max = min(trace.times[-1], 0.99 * T)
    sel = trace.times <= t_max
    exponent = (n + 2.0) / n
    base = 1.0 - trace.times[sel] / T
    bound = phi0 * base ** (-exponent)
    if mode == "extinction":
        violation = trace.phi[sel] - bound
    else:
        violation = bound - trace.phi[sel]
    max_violation = float(np.max(violation)) if violation.size else np.nan

    k_n = 2.0 * (n + 1.0) / (n + 2.0)
    if mode == "extinction":
        c1 = ((n + 2.0) / 2.0) * e0 / phi0**k_n
        conc = trace.phi_rate[core] - c1 * trace.phi[core] ** k_n
        max_conc = float(np.max(conc)) if conc.size else np.nan
    else:
        max_conc = np.nan

    return BoundReport(
        mode=mode,
        T=T,
        hypotheses_met=True,
        max_bound_violation=max_violation,
        max_identity_error=max_ident,
        max_concavity_violation=max_conc,
        checked_until=float(t_max),
    )
