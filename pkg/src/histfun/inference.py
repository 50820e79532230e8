"""Residual-bootstrap pointwise pivotal confidence bands for the slope."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .bspline import basis_matrix
from .design import DesignSystem, FunctionalDataset, build_design
from .estimator import NGBFit, fit_ngb

__all__ = ["BootstrapBand", "bootstrap_band", "order_statistic", "pivotal_band"]

log = logging.getLogger(__name__)

MAX_FAILURE_RATE = 0.05


@dataclass
class BootstrapBand:
    grid: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    B: int
    point_estimate: np.ndarray
    failures: int = 0

    def to_dict(self) -> dict:
        return {
            "grid": self.grid.tolist(),
            "lower": self.lower.tolist(),
            "upper": self.upper.tolist(),
            "point_estimate": self.point_estimate.tolist(),
            "level": self.level,
            "B": self.B,
            "failures": self.failures,
        }


def order_statistic(samples: np.ndarray, q: float) -> np.ndarray:
    """Column-wise ``ceil(q B)``-th smallest value (1-based) of a ``B x G`` array."""
    samples = np.asarray(samples, dtype=float)
    B = samples.shape[0]
    if B < 1:
        raise ValueError("need at least one sample")
    if not 0.0 < q < 1.0:
        raise ValueError(f"q must lie in (0, 1), got {q}")
    # q*B like 0.025*200 must give 5, not 6 from a stray ulp
    k = min(B, max(1, math.ceil(q * B - 1e-9)))
    return np.sort(samples, axis=0)[k - 1]


def pivotal_band(point: np.ndarray, replicates: np.ndarray, alpha: float):
    """``(2 f - Q_{1-a/2}, 2 f - Q_{a/2})`` from replicate curves stacked by row."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    point = np.asarray(point, dtype=float)
    lo_q = order_statistic(replicates, alpha / 2)
    hi_q = order_statistic(replicates, 1 - alpha / 2)
    return 2 * point - hi_q, 2 * point - lo_q


def bootstrap_band(
    data: FunctionalDataset,
    fit: NGBFit,
    B: int = 1000,
    alpha: float = 0.05,
    grid: np.ndarray | None = None,
    seed: int = 0,
    ds: DesignSystem | None = None,
    refit: Callable[[np.ndarray], np.ndarray] | None = None,
) -> BootstrapBand:
    """Pointwise pivotal band from residual-resampled refits.

    Residuals ``e = Y - U b_hat`` are drawn with replacement, ``Y* = U b_hat + e*``
    is refitted at the fit's own ``(kappa, lambda)``, and the refitted slopes
    on ``grid`` feed :func:`pivotal_band`. Replicate ``r`` draws from
    ``default_rng([seed, r])``.

    ``refit`` maps a response vector to coefficients and replaces the
    estimator; it exists for fixtures that pin the replicate fits.
    """
    if B < 100:
        raise ValueError(f"B must be at least 100, got {B}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    basis = fit.beta_hat.basis
    if ds is None:
        ds = build_design(data, basis, fit.config.m)
    Y = np.asarray(data.responses, dtype=float)
    if ds.U.shape != (Y.shape[0], fit.b_hat.shape[0]):
        raise ValueError("fit does not match the dataset's design")
    grid = np.linspace(0.0, basis.T, 201) if grid is None else np.asarray(grid, dtype=float)
    if np.any(grid < basis.domain_start) or np.any(grid > basis.T):
        raise ValueError(f"grid must lie within [0, {basis.T}]")

    fitted = ds.U @ fit.b_hat
    resid = Y - fitted
    n = Y.shape[0]

    if refit is None:
        # same arithmetic as the original fit, so a replicate response equal to
        # the original one reproduces b_hat bit for bit
        def refit(y):
            return fit_ngb(ds, y, fit.config).b_hat

    Bg = basis_matrix(basis, grid)
    curves = []
    failures = 0
    for r in range(B):
        rng = np.random.default_rng([seed, r])
        y_star = fitted + resid[rng.integers(0, n, n)]
        try:
            curves.append(Bg @ refit(y_star))
        except (np.linalg.LinAlgError, RuntimeError) as exc:
            log.debug("bootstrap replicate %d failed: %s", r, exc)
            failures += 1
    if not curves:
        raise RuntimeError(f"all {B} bootstrap refits failed")
    if failures > MAX_FAILURE_RATE * B:
        log.warning("%d of %d bootstrap refits failed; band uses the %d successes",
                    failures, B, len(curves))
    point = Bg @ fit.b_hat
    lower, upper = pivotal_band(point, np.vstack(curves), alpha)
    return BootstrapBand(grid=grid, lower=lower, upper=upper, level=1 - alpha, B=B,
                         point_estimate=point, failures=failures)
