"""Command-line interface: ``histfun fit | simulate | bootstrap | basis-dump``.

Exit codes: 0 success, 2 invalid input or usage, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .bspline import SplineFunction, basis_matrix, make_basis, penalty_gram
from .design import FunctionalDataset, build_design, center, penalty_root
from .estimator import NGBConfig, NGBFit, fit_ngb, tune_fit
from .inference import bootstrap_band
from .simlab import StudyConfig, run_study, thread_count

__all__ = [
    "DataFormatError",
    "FitReport",
    "ingest_dataset",
    "read_csv_matrix",
    "fit_report",
    "write_report",
    "read_report",
    "load_schema",
    "main",
]

log = logging.getLogger(__name__)

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3
BETA_GRID_POINTS = 201
DEFAULT_M = 50


class DataFormatError(ValueError):
    """Malformed input file; the message names the offending row and column."""


def _parse_cell(text: str, path, row: int, col: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"{path}: row {row}, column {col}: non-numeric cell {text!r}") from None
    if not math.isfinite(value):
        raise DataFormatError(f"{path}: row {row}, column {col}: non-finite value {text!r}")
    return value


def read_csv_matrix(path) -> np.ndarray:
    """Rectangular numeric CSV; rows and columns in errors are 1-based."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        for i, raw in enumerate(csv.reader(fh), start=1):
            if not raw or all(not cell.strip() for cell in raw):
                continue
            if width is None:
                width = len(raw)
            elif len(raw) != width:
                raise DataFormatError(
                    f"{path}: row {i} has {len(raw)} cells, expected {width} (ragged row)"
                )
            rows.append([_parse_cell(cell.strip(), path, i, j) for j, cell in enumerate(raw, start=1)])
    if not rows:
        raise DataFormatError(f"{path}: no data")
    return np.array(rows, dtype=float)


def ingest_dataset(curves_path, responses_path, T: float | None = None) -> FunctionalDataset:
    """Read a wide curves CSV and a one-column responses CSV, then center.

    The first row of the curves file is the time grid and every later row is
    one curve. The grid is mapped affinely onto ``[0, T]`` (``T`` defaults to
    the grid's own span).
    """
    M = read_csv_matrix(curves_path)
    if M.shape[0] < 2:
        raise DataFormatError(f"{curves_path}: need a grid row and at least one curve")
    grid, curves = M[0], M[1:]
    if grid.size < 2:
        raise DataFormatError(f"{curves_path}: grid row needs at least two time points")
    steps = np.diff(grid)
    if np.any(steps <= 0):
        col = int(np.flatnonzero(steps <= 0)[0]) + 2
        raise DataFormatError(f"{curves_path}: row 1, column {col}: time grid is not increasing")
    span = grid[-1] - grid[0]
    T = span if T is None else float(T)
    if not T > 0:
        raise DataFormatError(f"T must be positive, got {T}")
    grid = (grid - grid[0]) * (T / span)
    grid[-1] = T

    R = read_csv_matrix(responses_path)
    if R.shape[1] != 1:
        raise DataFormatError(f"{responses_path}: expected one column, found {R.shape[1]}")
    y = R[:, 0]
    if y.size != curves.shape[0]:
        raise DataFormatError(
            f"{responses_path}: {y.size} responses but {curves_path} has {curves.shape[0]} curves"
        )
    return center(FunctionalDataset(grid=grid, curves=curves, responses=y))


@dataclass
class FitReport:
    delta_hat: float
    J0: int
    kappa: float
    lambda_: float
    gamma: float
    m: int
    M: int
    d: int
    T: float
    n: int
    bic: float
    df: float
    weight_mode: str
    coefficients: list
    knots: list
    beta_grid: list
    runtime_ms: float
    seed: int | None = None
    converged: bool = True
    outer_iters: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["lambda"] = out.pop("lambda_")
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        d = dict(d)
        d["lambda_"] = d.pop("lambda")
        return cls(**d)

    def config(self) -> NGBConfig:
        return NGBConfig(gamma=self.gamma, m=self.m, kappa=self.kappa, lam=self.lambda_,
                         weight_mode=self.weight_mode)

    def spline(self) -> SplineFunction:
        return SplineFunction(make_basis(self.T, self.M, self.d), np.asarray(self.coefficients))


def fit_report(fit: NGBFit, n: int, runtime_ms: float, seed: int | None = None) -> FitReport:
    basis = fit.beta_hat.basis
    t = np.linspace(0.0, basis.T, BETA_GRID_POINTS)
    values = fit.beta_hat(t)
    return FitReport(
        delta_hat=fit.delta_hat, J0=fit.J0, kappa=fit.kappa, lambda_=fit.lam,
        gamma=fit.config.gamma, m=fit.config.m, M=basis.M, d=basis.degree, T=basis.T, n=n,
        bic=fit.bic, df=fit.df, weight_mode=fit.config.weight_mode,
        coefficients=[float(x) for x in fit.b_hat],
        knots=[float(x) for x in basis.knots],
        beta_grid=[[float(a), float(b)] for a, b in zip(t, values)],
        runtime_ms=runtime_ms, seed=seed, converged=fit.converged, outer_iters=fit.outer_iters,
    )


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _json_text(obj) -> str:
    # json writes floats with repr, the shortest string that reads back bit for bit
    return json.dumps(obj, indent=2, allow_nan=True) + "\n"


def write_report(report: FitReport, path) -> None:
    _atomic_write_text(path, _json_text(report.to_dict()))


def read_report(path) -> FitReport:
    with open(path) as fh:
        return FitReport.from_dict(json.load(fh))


def write_beta_csv(report: FitReport, path) -> None:
    lines = ["t,beta"] + [f"{t!r},{b!r}" for t, b in report.beta_grid]
    _atomic_write_text(path, "\n".join(lines) + "\n")


def load_schema(name: str) -> dict:
    """JSON schema shipped with the package, e.g. ``"fit_report"``."""
    text = resources.files("histfun").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def _float_list(text: str) -> tuple:
    try:
        values = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("grid must not be empty")
    return values


def _cmd_fit(args) -> int:
    start = time.perf_counter()
    data = ingest_dataset(args.curves, args.responses, args.T)
    basis = make_basis(data.T, args.M, args.degree)
    ds = build_design(data, basis, args.m)
    config = NGBConfig(gamma=args.gamma, m=args.m, weight_mode=args.weight_mode)
    fit = tune_fit(ds, data.responses, args.kappa_grid, args.lambda_grid, config)
    runtime = (time.perf_counter() - start) * 1e3
    report = fit_report(fit, data.n, runtime, args.seed)
    write_report(report, args.out)
    if args.beta_csv:
        write_beta_csv(report, args.beta_csv)
    print(f"delta_hat={report.delta_hat!r} J0={report.J0} kappa={report.kappa:.4g} "
          f"lambda={report.lambda_:.4g} runtime_ms={runtime:.0f}")
    return EXIT_OK


def _cmd_simulate(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = StudyConfig(M=args.M, random_knots=args.random_knots)
    report = run_study(args.scenario, args.n, args.reps, seed=args.seed, cfg=cfg,
                       workers=args.workers or thread_count())
    stem = out / f"simulation_{args.scenario}_n{args.n}"
    report.write_json(f"{stem}.json")
    report.write_csv(f"{stem}.csv")
    print(f"delta_mean={report.delta_mean:.4f} delta_sd={report.delta_sd:.4f} "
          f"mise_mean={report.mise_mean:.5f} mise_ss_mean={report.mise_ss_mean:.5f} "
          f"failures={report.failures}")
    return EXIT_OK


def _cmd_bootstrap(args) -> int:
    report = read_report(args.fit)
    data = ingest_dataset(args.curves, args.responses, report.T)
    basis = make_basis(report.T, report.M, report.d)
    ds = build_design(data, basis, report.m)
    fit = fit_ngb(ds, data.responses, report.config())
    if not np.allclose(fit.b_hat, report.coefficients, rtol=1e-6, atol=1e-10):
        raise ValueError("the fit report does not reproduce on these data files")
    grid = np.linspace(0.0, report.T, args.points)
    band = bootstrap_band(data, fit, B=args.B, alpha=1 - args.level, grid=grid, seed=args.seed,
                          ds=ds)
    _atomic_write_text(args.out, _json_text({**band.to_dict(), "seed": args.seed}))
    print(f"B={band.B} level={band.level:g} failures={band.failures} "
          f"max_width={float(np.max(band.upper - band.lower)):.4g}")
    return EXIT_OK


def _cmd_basis_dump(args) -> int:
    basis = make_basis(args.T, args.M, args.degree)
    V = penalty_gram(basis, args.m)
    t = np.linspace(0.0, args.T, args.points)
    payload = {
        "T": args.T, "M": args.M, "degree": args.degree, "m": args.m,
        "knots": basis.knots.tolist(),
        "grid": t.tolist(),
        "basis": basis_matrix(basis, t).tolist(),
        "V": V.tolist(),
        "W": penalty_root(V).tolist(),
    }
    _atomic_write_text(args.out, _json_text(payload))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="histfun", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="tune and fit on wide-CSV data")
    f.add_argument("--curves", required=True)
    f.add_argument("--responses", required=True)
    f.add_argument("--T", type=float, default=None, help="domain length (default: grid span)")
    f.add_argument("--M", type=int, default=DEFAULT_M)
    f.add_argument("--degree", type=int, default=3)
    f.add_argument("--gamma", type=float, default=0.5)
    f.add_argument("--m", type=int, default=2)
    f.add_argument("--kappa-grid", type=_float_list, default=None)
    f.add_argument("--lambda-grid", type=_float_list, default=None)
    f.add_argument("--weight-mode", choices=["adaptive", "plain"], default="adaptive")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.add_argument("--beta-csv", default=None, help="also write beta on the report grid as CSV")
    f.set_defaults(func=_cmd_fit)

    s = sub.add_parser("simulate", help="Monte Carlo study for one scenario")
    s.add_argument("--scenario", choices=["I", "II", "III"], required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--reps", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--M", type=int, default=DEFAULT_M)
    s.add_argument("--random-knots", action="store_true")
    s.add_argument("--workers", type=int, default=None, help="default: HISTFUN_THREADS or CPU count")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=_cmd_simulate)

    b = sub.add_parser("bootstrap", help="pivotal bootstrap band around a saved fit")
    b.add_argument("--fit", required=True, help="report written by 'fit'")
    b.add_argument("--curves", required=True)
    b.add_argument("--responses", required=True)
    b.add_argument("--B", type=int, default=1000)
    b.add_argument("--level", type=float, default=0.95)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--points", type=int, default=BETA_GRID_POINTS)
    b.add_argument("--out", required=True)
    b.set_defaults(func=_cmd_bootstrap)

    d = sub.add_parser("basis-dump", help="write knots, basis values and penalty matrices")
    d.add_argument("--T", type=float, default=1.0)
    d.add_argument("--M", type=int, default=10)
    d.add_argument("--degree", type=int, default=3)
    d.add_argument("--m", type=int, default=2)
    d.add_argument("--points", type=int, default=101)
    d.add_argument("--out", required=True)
    d.set_defaults(func=_cmd_basis_dump)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (np.linalg.LinAlgError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
