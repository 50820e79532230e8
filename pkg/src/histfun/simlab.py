"""Monte Carlo scenarios for the historical functional linear model.

Three slope functions share the true cutoff 0.5: a step, a half sine wave
and a raised cosine. Predictor curves are random cubic splines on a fine
knot grid, so they are much rougher than the slope.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import simpson

from .bspline import SplineFunction, basis_matrix, make_basis
from .design import (
    FunctionalDataset,
    build_design,
    center,
    predictor_inner_products,
    trapezoid_weights,
)
from .estimator import (
    NGBConfig,
    tune_fit,
    tune_smoothing_spline,
)

__all__ = [
    "Scenario",
    "SCENARIOS",
    "StudyConfig",
    "ReplicateRecord",
    "SimulationReport",
    "scenario_beta",
    "simulate_dataset",
    "spline_span_fixture",
    "application_dataset",
    "mise",
    "run_replicate",
    "run_study",
    "thread_count",
]

log = logging.getLogger(__name__)

GRID_POINTS = 201
SIGNAL_POINTS = 2001
MISE_POINTS = 2001


def _step(t):
    return np.ones_like(t)


def _half_sine(t):
    return np.sin(2 * np.pi * t)


def _raised_cosine(t):
    return np.cos(2 * np.pi * t) + 1


@dataclass(frozen=True)
class Scenario:
    id: str
    shape: Callable[[np.ndarray], np.ndarray] = field(repr=False)
    delta0: float = 0.5

    def beta(self, t):
        t = np.asarray(t, dtype=float)
        out = np.where((t >= 0) & (t < self.delta0), self.shape(t), 0.0)
        return float(out) if out.ndim == 0 else out


SCENARIOS = {
    "I": Scenario("I", _step),
    "II": Scenario("II", _half_sine),
    "III": Scenario("III", _raised_cosine),
}


def _scenario(scenario) -> Scenario:
    if isinstance(scenario, Scenario):
        return scenario
    try:
        return SCENARIOS[str(scenario)]
    except KeyError:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {sorted(SCENARIOS)}") from None


def scenario_beta(id, t):
    sc = _scenario(id)
    t_arr = np.asarray(t, dtype=float)
    if np.any((t_arr < 0) | (t_arr > 1)):
        raise ValueError("t must lie in [0, 1]")
    return sc.beta(t)


def simulate_dataset(scenario, n: int, seed, n_knots: int = 64,
                     random_knots: bool = False, snr: float = 2.0,
                     return_signal: bool = False):
    """Draw ``n`` curves and responses for one scenario.

    Curves are ``X_i = sum_j a_ij B_j`` with ``a_ij ~ N(0, 1)`` over cubic
    B-splines on ``n_knots`` equally spaced knots, sampled on a 201-point grid.
    Noise variance is ``var(signal) / snr``. The returned dataset is centered.
    With ``return_signal`` the uncentered signals and the noise variance are
    returned as well.
    """
    if n < 2:
        raise ValueError(f"n must be at least 2, got {n}")
    sc = _scenario(scenario)
    rng = np.random.default_rng(seed)
    if random_knots:
        n_knots = int(rng.integers(50, 101))
    xbasis = make_basis(1.0, n_knots - 1, 3)
    a = rng.standard_normal((n, xbasis.n_basis))

    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    curves = a @ basis_matrix(xbasis, grid).T

    # signal on the support only, with the smooth piece of beta, so the jump at delta0 costs nothing
    fine = np.linspace(0.0, sc.delta0, SIGNAL_POINTS)
    integrand_w = trapezoid_weights(fine) * sc.shape(fine)
    signal = a @ (basis_matrix(xbasis, fine).T @ integrand_w)

    sigma2 = float(np.var(signal)) / snr
    y = signal + math.sqrt(sigma2) * rng.standard_normal(n)
    data = center(FunctionalDataset(grid=grid, curves=curves, responses=y))
    return (data, signal, sigma2) if return_signal else data


def spline_span_fixture(n: int = 500, seed=0, M: int = 50, degree: int = 3,
                        cutoff: float = 0.5, n_knots: int = 64):
    """Noiseless data whose slope lies in the estimation spline space.

    The slope has coefficients ``1 + 0.5 sin(k / 3)`` on every basis function
    supported inside ``[0, cutoff]`` and zero elsewhere, so it vanishes exactly
    past ``cutoff``. Responses equal ``U b`` with no noise.

    Returns ``(data, b_true, basis)``.
    """
    basis = make_basis(1.0, M, degree)
    # B_k (0-based) is supported on [t_{k-d}, t_{k+1}]
    last = int(np.searchsorted(basis.knots, cutoff + 1e-12)) - 2
    if last < 0:
        raise ValueError(f"cutoff {cutoff} is below the first knot interval")
    b_true = np.zeros(basis.n_basis)
    k = np.arange(last + 1)
    b_true[: last + 1] = 1 + 0.5 * np.sin(k / 3)
    rng = np.random.default_rng(seed)
    xbasis = make_basis(1.0, n_knots - 1, 3)
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    curves = rng.standard_normal((n, xbasis.n_basis)) @ basis_matrix(xbasis, grid).T
    raw = FunctionalDataset(grid=grid, curves=curves, responses=np.zeros(n))
    U = predictor_inner_products(raw, basis)
    data = center(FunctionalDataset(grid=grid, curves=curves, responses=U @ b_true))
    return data, b_true, basis


def _application_beta(t, cutoff):
    return np.where(t < cutoff, (1 + np.cos(np.pi * t / cutoff)) / cutoff, 0.0)


def application_dataset(seed: int = 2024, n: int = 108, T: float = 60.0,
                        n_points: int = 61, cutoff: float = 20.0, snr: float = 2.0):
    """Synthetic stand-in for an emissions-style study.

    ``n`` curves on a one-second grid over ``[0, T]`` (cubic splines with a
    knot every 3 time units and standard normal coefficients), a raised-cosine
    slope that vanishes smoothly at ``cutoff``, and noise at variance ratio
    ``snr``. Returns ``(grid, curves, responses)`` uncentered, as they would be
    read from disk.
    """
    rng = np.random.default_rng(seed)
    xbasis = make_basis(T, int(round(T / 3)), 3)
    a = rng.standard_normal((n, xbasis.n_basis))
    grid = np.linspace(0.0, T, n_points)
    curves = a @ basis_matrix(xbasis, grid).T
    fine = np.linspace(0.0, cutoff, SIGNAL_POINTS)
    signal = a @ (basis_matrix(xbasis, fine).T @ (trapezoid_weights(fine) * _application_beta(fine, cutoff)))
    y = signal + math.sqrt(np.var(signal) / snr) * rng.standard_normal(n)
    return grid, curves, y


def mise(beta_hat: SplineFunction, scenario) -> float:
    """Integrated squared error on [0, 1] by composite Simpson on 2001 points."""
    sc = _scenario(scenario)
    t = np.linspace(0.0, 1.0, MISE_POINTS)
    diff = beta_hat(t) - sc.beta(t)
    return float(simpson(diff**2, x=t))


@dataclass(frozen=True)
class StudyConfig:
    M: int = 50
    degree: int = 3
    gamma: float = 0.5
    m: int = 2
    weight_mode: str = "adaptive"
    kappa_grid: tuple | None = None
    lambda_grid: tuple | None = None
    n_knots: int = 64
    random_knots: bool = False
    snr: float = 2.0


@dataclass
class ReplicateRecord:
    replicate: int
    delta_hat: float
    mise: float
    kappa: float
    lam: float
    df: float
    mise_ss: float
    kappa_ss: float
    error: str | None = None


@dataclass
class SimulationReport:
    scenario: str
    n: int
    R: int
    seed: int
    delta_mean: float
    delta_sd: float
    mise_mean: float
    mise_sd: float
    mise_ss_mean: float
    mise_ss_sd: float
    failures: int
    snr_definition: str
    config: dict
    records: list
    runtime_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        _atomic_write(path, json.dumps(self.to_dict(), indent=2))

    def write_csv(self, path) -> None:
        names = [f for f in ReplicateRecord.__dataclass_fields__]
        tmp = f"{path}.tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=names)
            writer.writeheader()
            for rec in self.records:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in rec.items()})
        os.replace(tmp, path)


def _atomic_write(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _mean_sd(values) -> tuple[float, float]:
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    return float(np.mean(x)), sd


def run_replicate(scenario, n: int, seed: int, replicate: int, cfg: StudyConfig) -> ReplicateRecord:
    data = simulate_dataset(
        scenario, n, np.random.SeedSequence([seed, replicate]),
        n_knots=cfg.n_knots, random_knots=cfg.random_knots, snr=cfg.snr,
    )
    basis = make_basis(1.0, cfg.M, cfg.degree)
    ds = build_design(data, basis, cfg.m)
    base = NGBConfig(gamma=cfg.gamma, m=cfg.m, weight_mode=cfg.weight_mode)
    try:
        fit = tune_fit(ds, data.responses, cfg.kappa_grid, cfg.lambda_grid, base)
        ss = tune_smoothing_spline(ds, data.responses, cfg.kappa_grid, base)
    except Exception as exc:  # noqa: BLE001 - a failed replicate is recorded, not fatal
        log.warning("replicate %d failed: %s", replicate, exc)
        nan = math.nan
        return ReplicateRecord(replicate, nan, nan, nan, nan, nan, nan, nan, error=str(exc))
    return ReplicateRecord(
        replicate=replicate,
        delta_hat=fit.delta_hat,
        mise=mise(fit.beta_hat, scenario),
        kappa=fit.kappa,
        lam=fit.lam,
        df=fit.df,
        mise_ss=mise(ss.beta_hat, scenario),
        kappa_ss=ss.kappa,
    )


def thread_count() -> int:
    env = os.environ.get("HISTFUN_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _run_one(args):
    return run_replicate(*args)


def aggregate(scenario: str, n: int, seed: int, cfg: StudyConfig,
              records: list[ReplicateRecord], runtime_s: float = 0.0) -> SimulationReport:
    records = sorted(records, key=lambda r: r.replicate)
    ok = [r for r in records if r.error is None]
    delta_mean, delta_sd = _mean_sd([r.delta_hat for r in ok])
    mise_mean, mise_sd = _mean_sd([r.mise for r in ok])
    ss_mean, ss_sd = _mean_sd([r.mise_ss for r in ok])
    config = asdict(cfg)
    for key in ("kappa_grid", "lambda_grid"):
        config[key] = None if config[key] is None else list(config[key])
    return SimulationReport(
        scenario=scenario, n=n, R=len(records), seed=seed,
        delta_mean=delta_mean, delta_sd=delta_sd,
        mise_mean=mise_mean, mise_sd=mise_sd,
        mise_ss_mean=ss_mean, mise_ss_sd=ss_sd,
        failures=len(records) - len(ok),
        snr_definition=f"var(signal)/sigma^2 = {cfg.snr:g}",
        config=config,
        records=[asdict(r) for r in records],
        runtime_s=runtime_s,
    )


def run_study(scenario, n: int, R: int, seed: int = 0, cfg: StudyConfig | None = None,
              workers: int | None = None) -> SimulationReport:
    """Replicate ``simulate -> tune -> score`` ``R`` times.

    Replicate ``r`` draws from ``SeedSequence([seed, r])`` so serial and
    parallel runs produce the same report.
    """
    if R < 1:
        raise ValueError(f"R must be at least 1, got {R}")
    sc = _scenario(scenario)
    cfg = cfg or StudyConfig()
    workers = workers or thread_count()
    jobs = [(sc.id, n, seed, r, cfg) for r in range(R)]
    start = time.perf_counter()
    if workers > 1 and R > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_one, jobs, chunksize=max(1, R // (4 * workers))))
    else:
        records = [_run_one(job) for job in jobs]
    return aggregate(sc.id, n, seed, cfg, records, time.perf_counter() - start)
