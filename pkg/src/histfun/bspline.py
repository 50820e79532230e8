"""Clamped B-spline bases on equally spaced knots.

A basis on ``[0, T]`` with ``M`` subintervals and degree ``d`` has ``M + d``
functions. Boundary knots are repeated ``d + 1`` times so the basis spans all
degree-``d`` splines with simple interior knots.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss

__all__ = [
    "BSplineBasis",
    "SplineFunction",
    "make_basis",
    "eval_basis",
    "basis_matrix",
    "eval_spline",
    "penalty_gram",
]


@dataclass(frozen=True)
class BSplineBasis:
    """Degree-``degree`` B-spline basis on ``M`` equal subintervals of ``[start, end]``."""

    domain_end: float
    M: int
    degree: int
    domain_start: float = 0.0
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        knots = np.linspace(self.domain_start, self.domain_end, self.M + 1)
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def n_basis(self) -> int:
        return self.M + self.degree

    @property
    def T(self) -> float:
        return self.domain_end

    @cached_property
    def extended_knots(self) -> np.ndarray:
        d = self.degree
        ext = np.concatenate(
            [np.full(d, self.domain_start), self.knots, np.full(d, self.domain_end)]
        )
        ext.setflags(write=False)
        return ext

    def contains(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        return (t >= self.domain_start) & (t <= self.domain_end)


@dataclass(frozen=True)
class SplineFunction:
    basis: BSplineBasis
    coefficients: np.ndarray

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float)
        if coef.shape != (self.basis.n_basis,):
            raise ValueError(
                f"expected {self.basis.n_basis} coefficients, got shape {coef.shape}"
            )
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)

    def __call__(self, t, m: int = 0):
        values = basis_matrix(self.basis, t, m) @ self.coefficients
        return float(values[0]) if np.ndim(t) == 0 else values


def make_basis(T: float, M: int, d: int = 3) -> BSplineBasis:
    """Build a clamped basis with ``M + 1`` equally spaced knots on ``[0, T]``.

    Examples
    --------
    >>> make_basis(1.0, 10, 3).n_basis
    13
    """
    if not np.isfinite(T) or T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if int(M) != M or M < 1:
        raise ValueError(f"M must be a positive integer, got {M}")
    if int(d) != d or d < 0:
        raise ValueError(f"degree must be a non-negative integer, got {d}")
    return BSplineBasis(domain_end=float(T), M=int(M), degree=int(d))


def _check_order(basis: BSplineBasis, m: int) -> None:
    if int(m) != m or m < 0 or m > basis.degree:
        raise ValueError(
            f"derivative order must be in [0, {basis.degree}], got {m}"
        )


def _degree_zero(basis: BSplineBasis, t: np.ndarray) -> np.ndarray:
    # Indicators of [ext_i, ext_{i+1}); the last non-empty interval is closed on the right.
    ext = basis.extended_knots
    left, right = ext[:-1], ext[1:]
    t = t[:, None]
    N = ((t >= left) & (t < right)).astype(float)
    last = basis.degree + basis.M - 1
    N[:, last] = np.where((t[:, 0] >= left[last]) & (t[:, 0] <= right[last]), 1.0, 0.0)
    return N


def _safe_ratio(num: float, den: np.ndarray) -> np.ndarray:
    out = np.zeros_like(den)
    nz = den > 0
    out[nz] = num / den[nz]
    return out


def basis_matrix(basis: BSplineBasis, t, m: int = 0) -> np.ndarray:
    """Evaluate the ``m``-th derivatives of all basis functions at ``t``.

    Uses the Cox-de Boor recursion up to degree ``d - m`` and then the
    derivative recursion for the remaining ``m`` degrees.

    Parameters
    ----------
    basis : BSplineBasis
    t : float or array_like
        Evaluation points inside ``[0, T]``.
    m : int
        Derivative order, ``0 <= m <= d``.

    Returns
    -------
    ndarray of shape ``(len(t), n_basis)``
    """
    _check_order(basis, m)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if t.ndim != 1:
        raise ValueError("t must be a scalar or 1-d array")
    if not np.all(basis.contains(t)):
        bad = t[~basis.contains(t)]
        raise ValueError(
            f"evaluation points outside [{basis.domain_start}, {basis.domain_end}]: {bad[:5]}"
        )
    ext = basis.extended_knots
    d = basis.degree
    N = _degree_zero(basis, t)
    for p in range(1, d - m + 1):
        n_p = len(ext) - p - 1
        den_l = ext[p : p + n_p] - ext[:n_p]
        den_r = ext[p + 1 : p + 1 + n_p] - ext[1 : 1 + n_p]
        wl = np.divide(t[:, None] - ext[:n_p], den_l, out=np.zeros((len(t), n_p)), where=den_l > 0)
        wr = np.divide(
            ext[p + 1 : p + 1 + n_p] - t[:, None], den_r,
            out=np.zeros((len(t), n_p)), where=den_r > 0,
        )
        N = wl * N[:, :n_p] + wr * N[:, 1 : n_p + 1]
    for p in range(d - m + 1, d + 1):
        n_p = len(ext) - p - 1
        a = _safe_ratio(p, ext[p : p + n_p] - ext[:n_p])
        b = _safe_ratio(p, ext[p + 1 : p + 1 + n_p] - ext[1 : 1 + n_p])
        N = a * N[:, :n_p] - b * N[:, 1 : n_p + 1]
    return N


def eval_basis(basis: BSplineBasis, t: float, m: int = 0) -> np.ndarray:
    """Vector ``(B_1^(m)(t), ..., B_{M+d}^(m)(t))`` at a single point."""
    if np.ndim(t) != 0:
        raise ValueError("eval_basis takes a scalar t; use basis_matrix for arrays")
    return basis_matrix(basis, t, m)[0]


def eval_spline(f: SplineFunction, t):
    return f(t)


def penalty_gram(basis: BSplineBasis, m: int = 2) -> np.ndarray:
    """Gram matrix ``v_ij = integral of B_i^(m) B_j^(m)`` over the domain.

    Gauss-Legendre with ``d - m + 1`` nodes per knot interval integrates the
    degree ``2(d - m)`` integrand exactly.
    """
    _check_order(basis, m)
    n_nodes = basis.degree - m + 1
    x, w = leggauss(n_nodes)
    a, b = basis.knots[:-1], basis.knots[1:]
    half = 0.5 * (b - a)
    pts = (0.5 * (a + b))[:, None] + half[:, None] * x[None, :]
    wts = half[:, None] * w[None, :]
    D = basis_matrix(basis, pts.ravel(), m)
    V = D.T @ (wts.ravel()[:, None] * D)
    return 0.5 * (V + V.T)
