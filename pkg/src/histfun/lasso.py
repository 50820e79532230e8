"""Weighted-l1 least squares by cyclic coordinate descent.

Solves ``min_b ||y - X b||^2 + sum_k w_k |b_k|`` where a weight of ``+inf``
pins the coordinate at zero. The solver works on the Gram form
``Q = X'X, c = X'y`` so callers that already hold ``Q`` (the estimator does)
skip the data matrix entirely.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "LassoProblem",
    "LassoConvergenceError",
    "solve_weighted_lasso",
    "solve_weighted_lasso_gram",
    "kkt_violation",
    "lasso_objective",
]


class LassoConvergenceError(RuntimeError):
    def __init__(self, passes: int, kkt: float):
        super().__init__(
            f"coordinate descent did not converge in {passes} passes "
            f"(final KKT violation {kkt:.3e})"
        )
        self.passes = passes
        self.kkt = kkt


@dataclass
class LassoProblem:
    """``min ||target - design @ b||^2 + sum(penalty_weights * |b|)``."""

    design: np.ndarray
    target: np.ndarray
    penalty_weights: np.ndarray
    tolerance: float = 1e-8
    max_passes: int = 100_000

    def __post_init__(self):
        self.design = np.asarray(self.design, dtype=float)
        self.target = np.asarray(self.target, dtype=float)
        self.penalty_weights = np.asarray(self.penalty_weights, dtype=float)
        r, q = self.design.shape
        if self.target.shape != (r,):
            raise ValueError(f"target must have length {r}, got {self.target.shape}")
        if self.penalty_weights.shape != (q,):
            raise ValueError(
                f"penalty_weights must have length {q}, got {self.penalty_weights.shape}"
            )
        if np.any(np.isnan(self.penalty_weights)) or np.any(self.penalty_weights < 0):
            raise ValueError("penalty weights must be non-negative")
        # an all-zero unpenalised column leaves its coefficient unidentified
        empty = ~np.any(self.design != 0, axis=0) & (self.penalty_weights == 0)
        if np.any(empty):
            raise ValueError(f"design columns {np.flatnonzero(empty).tolist()} are all zero "
                             "with zero penalty weight")


@numba.njit(cache=True)
def _gram_objective(Q, c, w, b):
    val = 0.0
    for k in range(b.shape[0]):
        if b[k] != 0.0:
            val += w[k] * abs(b[k]) - 2.0 * c[k] * b[k]
    return val + b @ (Q @ b)


@numba.njit(cache=True)
def _face_step(Q, c, w, b, grad):
    """Exact minimiser over the current sign face, clipped at the first sign change.

    Returns True if the full Newton step was taken. The objective is convex on
    the segment, so a clipped step still never increases it.
    """
    idx = np.flatnonzero(b)
    if idx.size == 0:
        return False
    s = np.sign(b[idx])
    QA = np.empty((idx.size, idx.size))
    rhs = np.empty(idx.size)
    for i in range(idx.size):
        rhs[i] = c[idx[i]] - 0.5 * w[idx[i]] * s[i]
        for j in range(idx.size):
            QA[i, j] = Q[idx[i], idx[j]]
    try:
        L = np.linalg.cholesky(QA)
    except Exception:  # noqa: BLE001 - singular face, leave it to coordinate descent
        return False
    z = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    step = 1.0
    hit = -1
    for i in range(idx.size):
        if z[i] * s[i] <= 0.0:
            t = b[idx[i]] / (b[idx[i]] - z[i])
            if t < step:
                step = t
                hit = i
    trial = b.copy()
    for i in range(idx.size):
        trial[idx[i]] = b[idx[i]] + step * (z[i] - b[idx[i]])
    if hit >= 0:
        trial[idx[hit]] = 0.0
    for i in range(idx.size):
        # roundoff must not flip a sign that the clipped step preserved
        if trial[idx[i]] * s[i] < 0.0:
            trial[idx[i]] = 0.0
    if _gram_objective(Q, c, w, trial) > _gram_objective(Q, c, w, b):
        return False
    b[:] = trial
    grad[:] = c - Q @ b
    return hit < 0


@numba.njit(cache=True)
def _cd_gram(Q, c, w, b, max_passes, step_tol, kkt_tol):
    q = c.shape[0]
    # grad = c - Q b, so the smooth part's derivative in b_k is -2 grad_k
    grad = c - Q @ b
    active = np.empty(q, dtype=np.bool_)
    for k in range(q):
        active[k] = np.isfinite(w[k])
        if not active[k] and b[k] != 0.0:
            grad += Q[:, k] * b[k]
            b[k] = 0.0
    passes = 0
    kkt = np.inf
    while passes < max_passes:
        passes += 1
        max_step = 0.0
        for k in range(q):
            if not active[k]:
                continue
            qkk = Q[k, k]
            old = b[k]
            if qkk <= 0.0:
                new = 0.0
            else:
                rho = grad[k] + qkk * old
                half = 0.5 * w[k]
                if rho > half:
                    new = (rho - half) / qkk
                elif rho < -half:
                    new = (rho + half) / qkk
                else:
                    new = 0.0
            delta = new - old
            if delta != 0.0:
                b[k] = new
                for j in range(q):
                    grad[j] -= Q[j, k] * delta
                scale = abs(new) if abs(new) > 1.0 else 1.0
                if abs(delta) / scale > max_step:
                    max_step = abs(delta) / scale
        if passes % 5 == 0 or max_step <= step_tol:
            # refresh the running gradient to stop drift before judging KKT
            grad = c - Q @ b
            kkt = _kkt(grad, w, b, active)
            if kkt <= kkt_tol:
                break
            if _face_step(Q, c, w, b, grad):
                kkt = _kkt(grad, w, b, active)
                if kkt <= kkt_tol:
                    break
            elif max_step <= step_tol:
                break
    return passes, kkt


@numba.njit(cache=True)
def _kkt(grad, w, b, active):
    worst = 0.0
    for k in range(b.shape[0]):
        if not active[k]:
            continue
        g2 = 2.0 * grad[k]
        if b[k] > 0.0:
            v = abs(g2 - w[k])
        elif b[k] < 0.0:
            v = abs(g2 + w[k])
        else:
            v = abs(g2) - w[k]
        if v > worst:
            worst = v
    return worst


def kkt_violation(Q, c, w, b) -> float:
    """Largest violation of the lasso optimality conditions in Gram form."""
    Q = np.asarray(Q, dtype=float)
    b = np.asarray(b, dtype=float)
    w = np.asarray(w, dtype=float)
    grad = np.asarray(c, dtype=float) - Q @ b
    return float(_kkt(grad, w, b, np.isfinite(w)))


def lasso_objective(design, target, weights, b) -> float:
    resid = np.asarray(target) - np.asarray(design) @ b
    w = np.asarray(weights, dtype=float)
    nz = b != 0
    return float(resid @ resid + np.sum(w[nz] * np.abs(b[nz])))


def solve_weighted_lasso_gram(
    Q: np.ndarray,
    c: np.ndarray,
    weights: np.ndarray,
    b0: np.ndarray | None = None,
    tolerance: float = 1e-8,
    max_passes: int = 100_000,
    step_tol: float = 1e-10,
) -> np.ndarray:
    """Coordinate descent on ``b'Qb - 2c'b + sum w_k |b_k|``.

    Starting from ``b0`` (zeros by default) every coordinate step is an exact
    one-dimensional minimisation, so the objective never rises above its
    value at the start point. Frozen coordinates (``w_k = inf``) are returned
    as exact zeros.

    Raises
    ------
    LassoConvergenceError
        If neither the step nor the KKT criterion is met within ``max_passes``.
    """
    Q = np.ascontiguousarray(Q, dtype=float)
    c = np.ascontiguousarray(c, dtype=float)
    w = np.ascontiguousarray(weights, dtype=float)
    b = np.zeros(c.shape[0]) if b0 is None else np.array(b0, dtype=float)
    passes, kkt = _cd_gram(Q, c, w, b, int(max_passes), float(step_tol), float(tolerance))
    # gradient roundoff grows with |Q||b|; an absolute 1e-8 is below resolution for large Grams
    scale = max(1.0, float(np.max(np.abs(c), initial=0.0)),
                float(np.max(np.abs(Q), initial=0.0) * np.max(np.abs(b), initial=0.0)))
    if kkt > tolerance * scale:
        raise LassoConvergenceError(passes, kkt)
    return b


def solve_weighted_lasso(p: LassoProblem) -> np.ndarray:
    X = p.design
    return solve_weighted_lasso_gram(
        X.T @ X, X.T @ p.target, p.penalty_weights,
        tolerance=p.tolerance, max_passes=p.max_passes,
    )
