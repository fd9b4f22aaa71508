"""Command-line entry point: ``spatarch {simulate,estimate,mc,report}``.

Exit codes: 0 success, 1 I/O error, 2 invalid input or configuration,
3 invalid model (admissibility, stationarity), 4 estimation failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import math
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .dgp import simulate, spectral_radius
from .exceptions import (
    BoundarySolutionError,
    CollinearityError,
    ConfigError,
    DegenerateInstrumentsError,
    DegenerateObservationError,
    EmptyReportError,
    EstimationFailure,
    InvalidDimensionError,
    InvalidWeightsError,
    NonRealSpectrumError,
    ParameterSpaceError,
    SingularInformationError,
    StationarityError,
    UnsupportedSplitError,
)
from .gmm import estimate_gmm
from .mc import (
    McReport,
    emit_plots,
    emit_tables,
    read_raw_cells,
    run_experiment,
    write_raw_cells,
)
from .panel import log_square, read_panel_csv, write_panel_csv
from .qml import estimate_qml, jackknife_bias_correct
from .weights import build_lattice_queen, read_weights_csv

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_IO", "EXIT_INPUT", "EXIT_MODEL", "EXIT_ESTIMATION"]

EXIT_OK, EXIT_IO, EXIT_INPUT, EXIT_MODEL, EXIT_ESTIMATION = 0, 1, 2, 3, 4

METHODS = {"gmm": "gmm", "qml-transformed": "qml_transformed", "qml-direct": "qml_direct"}

DGP_EXAMPLE = """\
[dgp]
model = M1
side = 7
T = 10
seed = 1
replication = 0
"""

_INPUT_ERRORS = (ConfigError, EmptyReportError, InvalidDimensionError, InvalidWeightsError, DegenerateObservationError,
                 UnsupportedSplitError, ValueError)
_MODEL_ERRORS = (ParameterSpaceError, StationarityError, NonRealSpectrumError)
_ESTIMATION_ERRORS = (BoundarySolutionError, EstimationFailure, SingularInformationError,
                      CollinearityError, DegenerateInstrumentsError, np.linalg.LinAlgError)


def _err(msg: str) -> None:
    print(f"spatarch: error: {msg}", file=sys.stderr)


def _run_guarded(fn, args) -> int:
    try:
        return fn(args)
    except _MODEL_ERRORS as exc:
        _err(f"invalid model: {exc}")
        return EXIT_MODEL
    except _ESTIMATION_ERRORS as exc:
        _err(f"estimation failed ({type(exc).__name__}): {exc}")
        return EXIT_ESTIMATION
    except _INPUT_ERRORS as exc:
        _err(str(exc))
        return EXIT_INPUT
    except OSError as exc:
        name = f" {exc.filename}" if getattr(exc, "filename", None) else ""
        _err(f"I/O error{name}: {exc.strerror or exc}")
        return EXIT_IO


# -- simulate ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    dgp, rep = cfgmod.load_dgp_config(args.config)
    if args.seed is not None:
        dgp = dgp.with_(seed=args.seed)
    panel, eff = simulate(dgp, rep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_panel_csv(panel, out / "panel.csv")
    with open(out / "effects.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i_or_t", "kind", "value"])
        w.writerows((i + 1, "mu", f"{v:.17g}") for i, v in enumerate(eff.mu))
        w.writerows((t + 1, "alpha", f"{v:.17g}") for t, v in enumerate(eff.alpha))
    r = spectral_radius(dgp.W, dgp.rho0, dgp.gamma0, dgp.delta0)
    print(f"spectral radius of the lag operator: {r:.6f}")
    print(f"wrote {out / 'panel.csv'} and {out / 'effects.csv'} (n={dgp.n}, T={dgp.T})")
    return EXIT_OK


# -- estimate ------------------------------------------------------------------

def parse_weights_spec(spec: str):
    """``lattice:<side>`` or a path to an n x n CSV."""
    if spec.startswith("lattice:"):
        try:
            side = int(spec.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad lattice spec {spec!r}; expected lattice:<side>") from None
        return build_lattice_queen(side)
    p = Path(spec)
    if not p.exists():
        raise ConfigError(f"weights file not found: {spec}")
    return read_weights_csv(p)


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.10g}"


def _result_row(method, names, est, se, loglik, converged, bias_corrected, j_stat):
    header = ["method", *names, *[f"se_{p}" for p in names], "loglik", "converged", "bias_corrected", "j_stat"]
    row = [method, *[_fmt(est[p]) for p in names], *[_fmt(se.get(p)) for p in names],
           _fmt(loglik), str(bool(converged)).lower(), str(bool(bias_corrected)).lower(), _fmt(j_stat)]
    return header, row


def cmd_estimate(args) -> int:
    method = METHODS.get(args.method.replace("_", "-"))
    if method is None:
        raise ConfigError(f"unknown method {args.method!r}; expected one of {sorted(METHODS)}")
    W = parse_weights_spec(args.weights)
    panel = read_panel_csv(args.panel)
    data = log_square(panel)
    k = data.k
    names = ["rho", "gamma", "delta", *[f"beta{j}" for j in range(k)], "sigma2"]
    if method == "gmm":
        r = estimate_gmm(data, W, instruments=args.instruments)
        est = {**r.theta_hat.as_dict(), "sigma2": r.sigma2_hat}
        se = dict(zip(["rho", "gamma", "delta", *[f"beta{j}" for j in range(k)]], map(float, r.std_errors)))
        header, row = _result_row("gmm", names, est, se, None, r.converged, False, r.J_stat)
        converged = r.converged
        diag = f"iterations={r.iterations} J={r.J_stat:.4g} df={r.df}"
    else:
        approach = method.split("_", 1)[1]
        kw = {"form": args.form} if approach == "transformed" else {"time_effects": not args.no_time_effects}
        r = estimate_qml(data, W, approach, **kw)
        if args.jackknife:
            r = jackknife_bias_correct(r, data, W, **kw)
        est = r.theta_hat.as_dict()
        se = dict(zip(r.theta_hat.names(), map(float, r.std_errors)))
        header, row = _result_row(method, names, est, se, r.loglik, r.converged, r.bias_corrected, None)
        converged = r.converged
        diag = f"profile derivative={r.rho_grid_diag.get('profile_derivative', float('nan')):.3g}"
    if not converged:
        _err(f"{method} did not converge ({diag})")
        return EXIT_ESTIMATION
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerow(row)
    print(f"{method}  n={data.n} T={data.T}  {diag}")
    print(f"{'parameter':>10} {'estimate':>12} {'std.err':>12}")
    for p in names:
        s = se.get(p)
        print(f"{p:>10} {est[p]:12.6f} {'' if s is None or math.isnan(s) else f'{s:12.6f}':>12}")
    return EXIT_OK


# -- mc --------------------------------------------------------------------------

def _write_run_extras(report: McReport, run_dir: Path) -> None:
    with open(run_dir / "seeds.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "n", "T", "base_seed", "cell_key"])
        for s in report.seeds:
            w.writerow([s["model"], s["n"], s["T"], s["base_seed"], s["cell_key"]])
    with open(run_dir / "failures.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "n", "T", "estimator", "replication", "reason"])
        for (m, n, T, e), fails in report.failures.items():
            for r, why in fails:
                w.writerow([m, n, T, e, r, why])


def cmd_mc(args) -> int:
    if args.quick and args.config:
        raise ConfigError("--quick and --config are mutually exclusive")
    cfg = cfgmod.load_mc_config(args.config) if args.config else (
        cfgmod.quick_config() if args.quick else cfgmod.McConfig())
    if args.seed is not None:
        cfg = cfgmod.McConfig(**{**cfg.__dict__, "base_seed": args.seed})
    cfg.validate_models()
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
    run_dir = Path(args.out) / f"{stamp}_{cfg.digest()}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.ini").write_text(cfgmod.dump_mc_config(cfg))
    t0 = time.perf_counter()

    def checkpoint(rep):
        write_raw_cells(rep, run_dir / "raw_cells.csv")

    report = run_experiment(cfg, workers=args.workers, keep_raw=False, on_cell=checkpoint)
    if report.is_empty():
        _err("interrupted before any cell finished")
        return EXIT_ESTIMATION
    emit_tables(report, run_dir)
    emit_plots(report, run_dir)
    _write_run_extras(report, run_dir)
    wall = time.perf_counter() - t0
    print(f"run directory: {run_dir}")
    print(f"{'model':>6} {'n':>4} {'T':>4} {'estimator':>16} {'failed':>7}")
    for (m, n, T, e), fails in report.failures.items():
        print(f"{m:>6} {n:>4} {T:>4} {e:>16} {len(fails):>7}")
    print(f"wall time: {wall:.1f} s")
    for k in report.flagged:
        print(f"warning: more than 5% failed replications in {k}", file=sys.stderr)
    if report.interrupted:
        _err("interrupted; partial results written")
        return EXIT_ESTIMATION
    if report.errors:
        _err(f"every replication failed in {len(report.errors)} cell(s): {report.errors}")
        return EXIT_ESTIMATION
    return EXIT_OK


# -- report ----------------------------------------------------------------------

def _load_reference(name: str) -> tuple[Path | None, str, list[list[str]]]:
    p = Path(name)
    if not p.exists():
        res = resources.files("spatarch") / "data" / p.name
        if not res.is_file():
            raise ConfigError(f"reference table not found: {name}")
        text = res.read_text()
    else:
        text = p.read_text()
    metric = None
    rows = []
    for line in text.splitlines():
        if line.startswith("#"):
            if "metric=" in line:
                metric = line.split("metric=", 1)[1].strip()
            continue
        if line.strip():
            rows.append(next(csv.reader([line])))
    if metric is None:
        metric = {"paper_table1.csv": "bias", "paper_table2.csv": "rmse", "paper_table3.csv": "mae"}.get(p.name)
    if metric not in ("bias", "rmse", "mae"):
        raise ConfigError(f"{name}: cannot tell which metric it holds (add a '# metric=' line)")
    if not rows or rows[0][:3] != ["parameter", "model", "method"]:
        raise ConfigError(f"{name}: missing parameter,model,method header")
    return p, metric, rows


def compare_to_reference(report: McReport, ref_name: str, out_path: Path) -> int:
    _, metric, rows = _load_reference(ref_name)
    header, body = rows[0], rows[1:]
    cols = header[3:]
    n_cmp = 0
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["parameter", "model", "method", "cell", "metric", "reference", "value", "abs_diff"])
        for r in body:
            p, m, e = r[:3]
            for col, ref in zip(cols, r[3:]):
                n, T = (int(x[1:]) for x in col.split("_"))
                c = report.cells.get((m, n, T, e, p))
                if c is None or not ref.strip():
                    continue
                val = getattr(c, metric)
                w.writerow([p, m, e, col, metric, ref, f"{val:.6f}", f"{abs(val - float(ref)):.6f}"])
                n_cmp += 1
    return n_cmp


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    raw = run_dir / "raw_cells.csv"
    if not raw.is_file():
        raise ConfigError(f"missing {raw}")
    report = read_raw_cells(raw)
    out = Path(args.out) if args.out else run_dir
    # raw_cells.csv is rewritten from the parsed values; repr floats round-trip exactly
    emit_tables(report, out)
    emit_plots(report, out)
    print(f"tables and plots written to {out}")
    if args.compare:
        target = out / f"compare_{Path(args.compare).stem}.csv"
        n = compare_to_reference(report, args.compare, target)
        print(f"{n} cells compared against {args.compare}: {target}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="spatarch",
        description="Simulate, estimate and benchmark log-squared spatiotemporal ARCH panels.",
        epilog="Exit codes: 0 ok, 1 I/O error, 2 input/config error, 3 invalid model, 4 estimation failure. "
        "SPATARCH_THREADS overrides --workers.",
    )
    sub = p.add_subparsers(dest="command", required=True, metavar="{simulate,estimate,mc,report}")

    fmt = argparse.RawDescriptionHelpFormatter
    s = sub.add_parser("simulate", help="simulate one panel from a [dgp] config", formatter_class=fmt,
                       epilog="Config file schema (keys of the [dgp] section; 'side' or 'weights' = CSV path; "
                       "any of rho0, gamma0, delta0, beta0, use_time_effects, sigma_mu, sigma_alpha, burn_in "
                       "override the model):\n\n" + DGP_EXAMPLE)
    s.add_argument("--config", required=True, help="INI file with a [dgp] section")
    s.add_argument("--out", required=True, help="output directory for panel.csv and effects.csv")
    s.add_argument("--seed", type=int, help="override the seed in the config")
    s.set_defaults(func=cmd_simulate)

    e = sub.add_parser("estimate", help="estimate one panel CSV")
    e.add_argument("panel", help="panel CSV (i,t,y,x1..xk long format)")
    e.add_argument("--weights", required=True, help="lattice:<side> or path to an n x n weights CSV")
    e.add_argument("--method", required=True, choices=sorted(METHODS), help="estimator")
    e.add_argument("--out", help="write the result row to this CSV")
    e.add_argument("--form", default="exact", choices=["exact", "flipped", "uncorrected"],
                   help="likelihood form of qml-transformed (default exact)")
    e.add_argument("--no-time-effects", action="store_true", help="qml-direct: unit effects only")
    e.add_argument("--instruments", default="backward", choices=["backward", "levels", "rotated"],
                   help="gmm: lagged-outcome instruments (backward deviations by default)")
    e.add_argument("--jackknife", action="store_true", help="qml: half-panel jackknife bias correction")
    e.set_defaults(func=cmd_estimate)

    m = sub.add_parser("mc", help="run the Monte Carlo study", formatter_class=fmt,
                       epilog="Config file schema (all keys optional; without [model.*] sections the "
                       "benchmark designs M1, M2, M3 are used):\n\n" + cfgmod.EXAMPLE_CONFIG)
    m.add_argument("--config", help="INI file with [experiment] and [model.<name>] sections")
    m.add_argument("--out", default="runs", help="parent directory of the run directory (default ./runs)")
    m.add_argument("--seed", type=int, help="override base_seed")
    m.add_argument("--workers", type=int, help="worker processes (default: logical cores)")
    m.add_argument("--quick", action="store_true", help="100 replications of M1, n=25, T in {5, 10}")
    m.set_defaults(func=cmd_mc)

    r = sub.add_parser("report", help="rebuild tables and plots from raw_cells.csv")
    r.add_argument("run_dir", help="run directory containing raw_cells.csv")
    r.add_argument("--out", help="output directory (default: the run directory)")
    r.add_argument("--compare", help="reference table CSV, e.g. paper_table1.csv (shipped with the package)")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return _run_guarded(args.func, args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
