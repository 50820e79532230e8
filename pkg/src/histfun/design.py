"""Functional data containers and the matrices the estimator consumes."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bspline import BSplineBasis, basis_matrix, penalty_gram

__all__ = [
    "FunctionalDataset",
    "DesignSystem",
    "center",
    "trapezoid_weights",
    "quadrature_weights",
    "predictor_inner_products",
    "penalty_root",
    "build_design",
]


@dataclass(frozen=True)
class FunctionalDataset:
    """Curves sampled on a shared grid together with scalar responses.

    Attributes
    ----------
    grid : ndarray, shape (G,)
        Strictly increasing sample times, ``grid[0] = 0`` and ``grid[-1] = T``.
    curves : ndarray, shape (n, G)
        ``curves[i, g]`` is the i-th predictor curve at ``grid[g]``.
    responses : ndarray, shape (n,)
    centered : bool
    """

    grid: np.ndarray
    curves: np.ndarray
    responses: np.ndarray
    centered: bool = False

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        curves = np.asarray(self.curves, dtype=float)
        y = np.asarray(self.responses, dtype=float)
        if grid.ndim != 1 or grid.size < 2:
            raise ValueError("grid must be a 1-d array with at least 2 points")
        if np.any(np.diff(grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if grid[0] != 0.0:
            raise ValueError(f"grid must start at 0, got {grid[0]}")
        if curves.ndim != 2 or curves.shape[1] != grid.size:
            raise ValueError(
                f"curves must have shape (n, {grid.size}), got {curves.shape}"
            )
        if y.shape != (curves.shape[0],):
            raise ValueError(
                f"expected {curves.shape[0]} responses, got shape {y.shape}"
            )
        for name, arr in (("grid", grid), ("curves", curves), ("responses", y)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.curves.shape[0]

    @property
    def T(self) -> float:
        return float(self.grid[-1])


@dataclass(frozen=True)
class DesignSystem:
    """``U`` (n x K inner products), roughness Gram ``V`` and its symmetric root ``W``."""

    U: np.ndarray
    V: np.ndarray
    W: np.ndarray
    basis: BSplineBasis
    m: int = 2

    @property
    def n(self) -> int:
        return self.U.shape[0]


def center(data: FunctionalDataset) -> FunctionalDataset:
    if data.n < 2:
        raise ValueError(f"centering needs at least 2 curves, got {data.n}")
    curves = data.curves - data.curves.mean(axis=0)
    y = data.responses - data.responses.mean()
    return replace(data, curves=curves, responses=y, centered=True)


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Weights ``w`` with ``w @ f(grid)`` equal to the composite trapezoid rule."""
    h = np.diff(grid)
    w = np.zeros_like(grid, dtype=float)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


def quadrature_weights(grid: np.ndarray, basis: BSplineBasis) -> np.ndarray:
    """``G x n_basis`` matrix ``K`` with ``U = X @ K``.

    Each curve is taken as the piecewise-linear interpolant of its samples and
    integrated against every basis function exactly, by Gauss-Legendre on the
    pieces cut out by the grid and the knots. Sampling the basis at the grid
    points alone would lose accuracy wherever the grid is coarse relative to
    the knots, and is exact for neither constants nor piecewise-constant bases.
    """
    grid = np.asarray(grid, dtype=float)
    lo, hi = basis.domain_start, basis.domain_end
    breaks = np.union1d(np.clip(grid, lo, hi), basis.knots)
    a, b = breaks[:-1], breaks[1:]
    keep = b - a > 1e-14 * max(1.0, hi - lo)
    a, b = a[keep], b[keep]
    # linear times degree-d piece: degree d+1, exact with ceil((d+2)/2) nodes
    x, w = np.polynomial.legendre.leggauss((basis.degree + 3) // 2)
    half = 0.5 * (b - a)
    nodes = ((a + b)[:, None] * 0.5 + half[:, None] * x[None, :]).ravel()
    wts = (half[:, None] * w[None, :]).ravel()
    cell = np.clip(np.searchsorted(grid, nodes, side="right") - 1, 0, grid.size - 2)
    frac = (nodes - grid[cell]) / (grid[cell + 1] - grid[cell])
    WB = wts[:, None] * basis_matrix(basis, np.clip(nodes, lo, hi))
    K = np.zeros((grid.size, basis.n_basis))
    np.add.at(K, cell, (1 - frac)[:, None] * WB)
    np.add.at(K, cell + 1, frac[:, None] * WB)
    return K


def predictor_inner_products(data: FunctionalDataset, basis: BSplineBasis) -> np.ndarray:
    """``u_ij = integral of X_i B_j`` with ``X_i`` linearly interpolated between samples."""
    grid = data.grid
    if grid.size < 2:
        raise ValueError("need at least two grid points")
    if not (np.isclose(grid[0], basis.domain_start) and np.isclose(grid[-1], basis.domain_end)):
        raise ValueError(
            f"data grid spans [{grid[0]}, {grid[-1]}] but basis domain is "
            f"[{basis.domain_start}, {basis.domain_end}]"
        )
    return data.curves @ quadrature_weights(grid, basis)


def penalty_root(V: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Symmetric PSD ``W`` with ``W @ W = V`` via the eigendecomposition.

    Unpivoted Cholesky fails here because ``V`` is singular whenever the
    derivative order is positive.
    """
    V = np.asarray(V, dtype=float)
    if V.ndim != 2 or V.shape[0] != V.shape[1]:
        raise ValueError(f"V must be square, got shape {V.shape}")
    # tolerances scale with max|V|; roughness Grams reach ~1e6 for fine knots
    scale = max(1.0, float(np.max(np.abs(V)))) if V.size else 1.0
    asym = np.max(np.abs(V - V.T)) if V.size else 0.0
    if asym > tol * scale:
        raise ValueError(f"V is not symmetric (max asymmetry {asym:.3e})")
    evals, Q = np.linalg.eigh(0.5 * (V + V.T))
    if evals.size and evals.min() < -1e-8 * scale:
        raise ValueError(f"V is not positive semidefinite (eigenvalue {evals.min():.3e})")
    W = (Q * np.sqrt(np.clip(evals, 0.0, None))) @ Q.T
    return 0.5 * (W + W.T)


def build_design(data: FunctionalDataset, basis: BSplineBasis, m: int = 2) -> DesignSystem:
    V = penalty_gram(basis, m)
    return DesignSystem(
        U=predictor_inner_products(data, basis), V=V, W=penalty_root(V), basis=basis, m=m
    )
