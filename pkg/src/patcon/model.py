"""Equation families, parameters, and the shared zeroth-order nonlinearity.

Every stationary problem handled by this package is normalized as

    (-1)^{m+1} F^{(2m)} + g_eps(F) = 0   on (-R, R),

with clamped Dirichlet conditions F = F' = ... = F^{(m-1)} = 0 at both ends.
Sign bookkeeping between the different published forms of these equations is
centralized here: every family stores its zeroth-order term so that the above
residual convention holds.  The six families are

* ``RegularizedNonLipschitz`` -- homotopy between the non-Lipschitz
  absorption equation (eps = 0) and the cubic equation (eps = 1):
  ``g = (1-eps)*(F - |eps^2+F^2|^{-n/(2(n+1))} F) + eps*F^3``.
* ``Cubic`` -- ``g = F^3``.
* ``AnalyticFastDiffusion`` -- ``g = F^3 - eps*F``, i.e. the equation
  ``F^{(2m)} + eps*F - F^3 = 0`` whose branches bifurcate from the trivial
  state at ``eps = -lambda_l``.
* ``LinearizedHomotopy`` -- like the regularized family but with the extra
  amplitude factor ``|F|^eps`` so eps = 1 leaves the bare linear operator:
  ``g = (1-eps)*(F - |eps^2+F^2|^{-n/(2(n+1))} |F|^eps F)``.
* ``Nonlocal`` -- ``F^{(2m)} = -eps*F + (int F^2) F``; needs the whole
  profile, so it is rejected here and handled by the continuation module.
* ``QuadraticForced`` -- ``F^{(2m)} = eps*(1 + F^2)`` (m = 2 benchmark with
  a saddle-node diagram); not odd-symmetric.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from patcon.discretize import Grid

# Floor used inside |eps^2 + F^2| when eps == 0 so Jacobians stay finite at
# F = 0.  The homotopy itself justifies evaluating the eps = 0 member through
# its regularized form.
REG_FLOOR = 1e-12


class Family(str, Enum):
    REGULARIZED_NON_LIPSCHITZ = "RegularizedNonLipschitz"
    CUBIC = "Cubic"
    ANALYTIC_FAST_DIFFUSION = "AnalyticFastDiffusion"
    LINEARIZED_HOMOTOPY = "LinearizedHomotopy"
    NONLOCAL = "Nonlocal"
    QUADRATIC_FORCED = "QuadraticForced"


class ZerothSign(str, Enum):
    PLUS = "plus"
    MINUS = "minus"


#: Families whose eps is a homotopy weight and must stay nonnegative.
_EPS_NONNEGATIVE = frozenset(
    {
        Family.REGULARIZED_NON_LIPSCHITZ,
        Family.LINEARIZED_HOMOTOPY,
        Family.QUADRATIC_FORCED,
    }
)

_PROBLEM_KEYS = ("family", "m", "n", "eps", "R", "zeroth_sign", "forcing")


@dataclass(frozen=True)
class Problem:
    """Immutable description of one stationary or evolution equation.

    ``m`` is half the ODE order, ``n`` the exponent (n > 0 for blow-up
    families, n in (-1, 0) for fast diffusion), ``eps`` the homotopy
    parameter, ``R`` the domain half-length.  ``zeroth_sign`` is the sign of
    the linear term in the parabolic evolution equation (the stationary
    families carry their own fixed signs); it defaults to ``minus`` for
    n < 0 (extinction) and ``plus`` otherwise (blow-up).  ``forcing``
    optionally rescales the eps multiplier of the QuadraticForced family.
    """

    family: Family
    m: int
    n: float
    eps: float
    R: float
    zeroth_sign: ZerothSign | None = None
    forcing: float | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.family, Family):
            object.__setattr__(self, "family", Family(self.family))
        if self.m < 1 or int(self.m) != self.m:
            raise ValueError(f"m must be a positive integer, got {self.m}")
        if self.R <= 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if self.n == 0:
            raise ValueError("n must be nonzero")
        if self.n <= -1:
            raise ValueError(f"n must exceed -1, got {self.n}")
        if self.family in _EPS_NONNEGATIVE and self.eps < 0:
            raise ValueError(f"{self.family.value} requires eps >= 0, got {self.eps}")
        if self.zeroth_sign is None:
            sign = ZerothSign.MINUS if self.n < 0 else ZerothSign.PLUS
            object.__setattr__(self, "zeroth_sign", sign)
        elif not isinstance(self.zeroth_sign, ZerothSign):
            object.__setattr__(self, "zeroth_sign", ZerothSign(self.zeroth_sign))

    @property
    def beta(self) -> float:
        """Fibering exponent beta = (n+2)/(n+1), in (1, 2) for n > 0."""
        return (self.n + 2.0) / (self.n + 1.0)

    def with_eps(self, eps: float) -> "Problem":
        return replace(self, eps=eps)

    def with_R(self, R: float) -> "Problem":
        return replace(self, R=R)

    def to_json(self) -> str:
        obj = {
            "family": self.family.value,
            "m": self.m,
            "n": self.n,
            "eps": self.eps,
            "R": self.R,
            "zeroth_sign": self.zeroth_sign.value,
            "forcing": self.forcing,
        }
        return json.dumps(obj, sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "Problem":
        unknown = set(obj) - set(_PROBLEM_KEYS)
        if unknown:
            raise ValueError(f"unknown Problem keys: {sorted(unknown)}")
        missing = {"family", "m", "n", "eps", "R"} - set(obj)
        if missing:
            raise ValueError(f"missing Problem keys: {sorted(missing)}")
        return cls(
            family=Family(obj["family"]),
            m=int(obj["m"]),
            n=float(obj["n"]),
            eps=float(obj["eps"]),
            R=float(obj["R"]),
            zeroth_sign=(
                ZerothSign(obj["zeroth_sign"]) if obj.get("zeroth_sign") is not None else None
            ),
            forcing=(float(obj["forcing"]) if obj.get("forcing") is not None else None),
        )

    @classmethod
    def from_json(cls, text: str) -> "Problem":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Profile:
    """Grid samples of a candidate solution plus solve metadata.

    ``values`` holds the interior node values; the clamped ends carry exact
    zeros and are not stored.  ``residual_norm`` is the max norm of the
    stationary residual reported by the producer.
    """

    grid: "Grid"
    values: np.ndarray
    residual_norm: float
    eps: float
    R: float

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape != (self.grid.N,):
            raise ValueError(
                f"values length {values.shape} does not match grid N={self.grid.N}"
            )

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def with_values(self, values: np.ndarray, residual_norm: float) -> "Profile":
        return replace(self, values=np.asarray(values, dtype=float), residual_norm=residual_norm)

    def padded(self) -> tuple[np.ndarray, np.ndarray]:
        """Nodes and values including the clamped boundary points."""
        g = self.grid
        y = np.concatenate(([-g.R], g.nodes, [g.R]))
        v = np.concatenate(([0.0], self.values, [0.0]))
        return y, v

    def to_csv(self, path) -> None:
        y, v = self.padded()
        with open(path, "w", newline="") as fh:
            fh.write("y,F\n")
            for yi, vi in zip(y, v):
                fh.write(f"{yi!r},{vi!r}\n")


@dataclass(frozen=True)
class MultiIndex:
    """Crossing multiindex sigma of a pattern.

    ``groups`` are the signed entries: each is +/-(2k) counting transversal
    crossings of the equilibrium sign*1 within one hump group.  ``gaps`` are
    the unsigned counts of transversal zero crossings between consecutive
    groups, so ``len(gaps) == len(groups) - 1``.
    """

    groups: tuple[int, ...]
    gaps: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        groups = tuple(int(g) for g in self.groups)
        gaps = tuple(int(z) for z in self.gaps)
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "gaps", gaps)
        if not groups:
            raise ValueError("multiindex needs at least one signed entry")
        if any(g == 0 or g % 2 != 0 for g in groups):
            raise ValueError(f"signed entries must be even and nonzero: {groups}")
        if any(z < 0 for z in gaps):
            raise ValueError(f"zero-crossing counts must be nonnegative: {gaps}")
        if len(gaps) != len(groups) - 1:
            raise ValueError("entries must alternate signed, unsigned, ..., signed")

    def negated(self) -> "MultiIndex":
        return MultiIndex(tuple(-g for g in self.groups), self.gaps)

    def render(self) -> str:
        parts: list[str] = []
        for i, g in enumerate(self.groups):
            parts.append(f"{g:+d}")
            if i < len(self.gaps):
                parts.append(str(self.gaps[i]))
        return "{" + ",".join(parts) + "}"

    def to_dict(self) -> dict:
        return {"groups": list(self.groups), "gaps": list(self.gaps), "sigma": self.render()}

    @classmethod
    def from_dict(cls, obj: dict) -> "MultiIndex":
        return cls(tuple(obj["groups"]), tuple(obj.get("gaps", ())))

    def __str__(self) -> str:  # pragma: no cover - convenience
        return self.render()


def _regularized_base(eps: float, F: np.ndarray) -> np.ndarray:
    reg = max(eps, REG_FLOOR)
    return reg * reg + F * F


def g_eval(problem: Problem, F):
    """Zeroth-order term g_eps(F) of the stationary residual and dg/dF.

    Works elementwise on scalars or arrays.  The Nonlocal family is rejected
    because its zeroth-order term needs the whole profile (see the
    continuation module).
    """
    if problem.family is Family.NONLOCAL:
        raise ValueError("Nonlocal family has no pointwise g; use nonlocal residuals")
    if problem.family in _EPS_NONNEGATIVE and problem.eps < 0:
        raise ValueError("eps must be nonnegative for this family")
    if problem.n <= -1:
        raise ValueError("n must exceed -1")

    scalar = np.isscalar(F)
    F = np.asarray(F, dtype=float)
    eps = problem.eps
    n = problem.n

    if problem.family is Family.CUBIC:
        g = F**3
        dg = 3.0 * F * F
    elif problem.family is Family.ANALYTIC_FAST_DIFFUSION:
        g = F**3 - eps * F
        dg = 3.0 * F * F - eps
    elif problem.family is Family.QUADRATIC_FORCED:
        amp = eps * (problem.forcing if problem.forcing is not None else 1.0)
        g = amp * (1.0 + F * F)
        dg = 2.0 * amp * F
    elif problem.family is Family.REGULARIZED_NON_LIPSCHITZ:
        q = n / (2.0 * (n + 1.0))
        base = _regularized_base(eps, F)
        pw = base**(-q)
        g = (1.0 - eps) * (F - pw * F) + eps * F**3
        dg = (1.0 - eps) * (1.0 - pw * (1.0 - 2.0 * q * F * F / base)) + 3.0 * eps * F * F
    elif problem.family is Family.LINEARIZED_HOMOTOPY:
        q = n / (2.0 * (n + 1.0))
        base = _regularized_base(eps, F)
        pw = base**(-q)
        absF = np.abs(F)
        amp = absF**eps
        g = (1.0 - eps) * (F - pw * amp * F)
        dg = (1.0 - eps) * (1.0 - pw * amp * (1.0 + eps - 2.0 * q * F * F / base))
    else:  # pragma: no cover - exhaustive enum
        raise ValueError(f"unhandled family {problem.family}")

    if scalar:
        return float(g), float(dg)
    return g, dg
