"""Uniform grids and the banded discretization of (-1)^m D^{2m} with clamped ends.

The operator acts on interior node values of a uniform grid over (-R, R).
Boundary conditions F = F' = ... = F^{(m-1)} = 0 are imposed by eliminating
m-1 ghost nodes per end through the reflection F(-jh) = (-1)^m F(jh), which
is exact to O(h^{m+1}) for clamped functions and keeps the matrix symmetric
positive definite.  Interior rows carry the standard second-order central
stencil (the autocorrelation of m-th forward differences), e.g. (-1, 2, -1)/h^2
for m = 1 and (1, -4, 6, -4, 1)/h^4 for m = 2.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import comb

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp


@dataclass(frozen=True)
class Grid:
    """Uniform interior nodes -R + i*h, i = 1..N, with h = 2R/(N+1)."""

    R: float
    N: int

    def __post_init__(self) -> None:
        if self.R <= 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if self.N < 5:
            raise ValueError(f"need at least 5 interior nodes, got {self.N}")

    @property
    def h(self) -> float:
        return 2.0 * self.R / (self.N + 1)

    @property
    def nodes(self) -> np.ndarray:
        return -self.R + self.h * np.arange(1, self.N + 1)


@dataclass(frozen=True)
class DiffOperator:
    """Symmetric positive definite band matrix for (-1)^m D^{2m}.

    ``band_upper`` stores the upper band in LAPACK symmetric-banded layout
    (shape (m+1, N), row u holds diagonal m-u), suitable for
    ``scipy.linalg.solveh_banded`` and ``eig_banded``.  ``matrix`` is a CSR
    copy for fast matvecs.  Instances are immutable; factorizations are
    per-call and never shared.
    """

    grid: Grid
    m: int
    band_upper: np.ndarray
    matrix: sp.csr_matrix

    @property
    def order(self) -> int:
        return 2 * self.m

    @property
    def bandwidth(self) -> int:
        return self.m

    def apply(self, values: np.ndarray) -> np.ndarray:
        return self.matrix.dot(values)

    def quadratic_form(self, values: np.ndarray) -> float:
        """Trapezoid approximation of the energy integral int |D~^m F|^2."""
        return float(self.grid.h * np.dot(values, self.matrix.dot(values)))

    def rounding_floor(self, amplitude: float = 1.0) -> float:
        """Smallest meaningful residual max norm at the given profile amplitude.

        The stencil cancellation noise is eps_mach * sum|stencil| / h^{2m}
        times the local amplitude; residual tolerances below this floor are
        unattainable in float64.
        """
        weight = float(np.sum(np.abs(central_stencil(self.m)))) / self.grid.h ** (2 * self.m)
        return np.finfo(float).eps * weight * abs(amplitude)

    def band_lower_full(self) -> np.ndarray:
        """Full (2m+1, N) band in solve_banded layout (diagonals m..-m)."""
        m, N = self.m, self.grid.N
        full = np.zeros((2 * m + 1, N))
        full[:m + 1] = self.band_upper
        for k in range(1, m + 1):
            # subdiagonal k mirrors superdiagonal k (symmetric matrix)
            full[m + k, : N - k] = self.band_upper[m - k, k:]
        return full


def central_stencil(m: int) -> np.ndarray:
    """Coefficients of the 2m+1 point central stencil of (-1)^m D^{2m} * h^{2m}."""
    c = np.array([(-1) ** k * comb(m, k) for k in range(m + 1)], dtype=float)
    return np.convolve(c, c[::-1])


def build_operator(grid: Grid, m: int) -> DiffOperator:
    """Second-order band matrix for (-1)^m D^{2m} with clamped closure."""
    if m < 1 or int(m) != m:
        raise ValueError(f"m must be a positive integer, got {m}")
    N = grid.N
    if N < 4 * m + 1:
        raise ValueError(f"grid too coarse: need N >= {4 * m + 1}, got {N}")
    h = grid.h
    t = central_stencil(m) / h ** (2 * m)  # index k = offset + m, |offset| <= m
    sign = (-1) ** m

    band = np.zeros((m + 1, N))
    for u in range(m + 1):  # row u of the upper band holds diagonal m - u
        off = m - u
        band[u, off:] = t[m + off]
    # ghost reflection F(-j h) = (-1)^m F(j h): rows i, cols c with i + c <= m
    # (1-based) pick up an extra (-1)^m * t_{i+c}; mirrored at the right end.
    for i in range(1, m):
        for c in range(1, m - i + 1):
            if c < i:
                continue  # handled once per (i, c) pair via symmetry below
            extra = sign * t[m + i + c]
            # band_upper layout: element (row r, col col) with col >= r sits at
            # band[m - (col - r), col] (0-based rows/cols).
            r0, c0 = i - 1, c - 1
            lo, hi = min(r0, c0), max(r0, c0)
            band[m - (hi - lo), hi] += extra
            # mirrored boundary rows
            rl, cl = N - 1 - lo, N - 1 - hi
            band[m - (rl - cl), rl] += extra

    mat = _band_to_csr(band, m, N)
    return DiffOperator(grid=grid, m=m, band_upper=band, matrix=mat)


def _band_to_csr(band_upper: np.ndarray, m: int, N: int) -> sp.csr_matrix:
    diags = []
    offsets = []
    for u in range(m + 1):
        off = m - u
        diags.append(band_upper[u, off:])
        offsets.append(off)
        if off > 0:
            diags.append(band_upper[u, off:])
            offsets.append(-off)
    return sp.diags(diags, offsets, shape=(N, N), format="csr")


def eigen_smallest(op: DiffOperator, k: int) -> list[tuple[float, np.ndarray]]:
    """The k smallest eigenpairs with trapezoid-orthonormal eigenvectors.

    Eigenvalues come back increasing; each eigenvector is normalized so that
    h * sum(psi_i^2) = 1 and sign-fixed so the first extremum is positive.
    """
    N = op.grid.N
    if not 1 <= k <= N:
        raise ValueError(f"k must be in 1..{N}, got {k}")
    try:
        vals, vecs = sla.eig_banded(
            op.band_upper, lower=False, select="i", select_range=(0, k - 1)
        )
    except sla.LinAlgError as exc:  # pragma: no cover - LAPACK failure is rare
        raise RuntimeError("banded eigensolver failed to converge") from exc
    h = op.grid.h
    out = []
    for j in range(k):
        psi = vecs[:, j] / np.sqrt(h)
        out.append((float(vals[j]), _fix_sign(psi)))
    return out


def _fix_sign(psi: np.ndarray) -> np.ndarray:
    """Flip sign so the first lobe of psi peaks positive."""
    tol = 1e-8 * np.max(np.abs(psi))
    signs = np.sign(psi)
    signs[np.abs(psi) < tol] = 0.0
    first = 0
    lobe_end = len(psi)
    seen = 0.0
    for i, s in enumerate(signs):
        if s != 0.0 and seen == 0.0:
            seen = s
        elif s != 0.0 and s != seen:
            lobe_end = i
            break
    lobe = psi[first:lobe_end]
    peak = lobe[np.argmax(np.abs(lobe))] if lobe.size else psi[np.argmax(np.abs(psi))]
    return -psi if peak < 0 else psi


def sign_changes(values: np.ndarray, threshold: float = 0.0) -> int:
    """Number of sign changes of a sampled function, ignoring |v| <= threshold."""
    v = values[np.abs(values) > threshold]
    if v.size < 2:
        return 0
    s = np.sign(v)
    return int(np.sum(s[1:] != s[:-1]))
