"""Monte Carlo harness: simulate, estimate with every method, aggregate.

Each replication is one self-contained task (simulate once, run every
requested estimator on that same panel) keyed by ``(cell_key, replication)``,
so results do not depend on scheduling or on the worker count.
"""

from __future__ import annotations

import csv
import math
import os
import time
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .config import ESTIMATORS, McConfig
from .dgp import DgpConfig, simulate
from .exceptions import EmptyReportError, SpatArchError
from .gmm import estimate_gmm
from .panel import StarPanel, build_projectors, log_square
from .qml import estimate_qml

__all__ = [
    "Cell",
    "Metrics",
    "CellMetrics",
    "McReport",
    "REPORTED_PARAMS",
    "TABLE_COLUMNS",
    "cell_key",
    "compute_metrics",
    "estimate_replication",
    "run_experiment",
    "emit_tables",
    "emit_plots",
    "write_raw_cells",
    "read_raw_cells",
]

REPORTED_PARAMS = ("rho", "gamma", "delta", "beta0", "beta1")
TABLE_SIDES = (5, 7, 9)
TABLE_T = (5, 10, 20)
TABLE_COLUMNS = tuple(f"n{s * s}_T{T}" for s in TABLE_SIDES for T in TABLE_T)
FAILURE_WARN = 0.05
RAW_HEADER = ("model", "n", "T", "estimator", "parameter", "true_value",
              "bias", "rmse", "mae", "n_converged", "n_failed")


@dataclass(frozen=True)
class Cell:
    model: str
    side: int
    T: int

    @property
    def n(self) -> int:
        return self.side * self.side

    @property
    def label(self) -> str:
        return f"n{self.n}_T{self.T}"


def cell_key(model: str, side: int, T: int) -> int:
    """Stable RNG key of a cell, independent of which other cells are run."""
    return zlib.crc32(f"{model}:{side}:{T}".encode())


@dataclass(frozen=True)
class Metrics:
    bias: float
    rmse: float
    mae: float


@dataclass(frozen=True)
class CellMetrics:
    true_value: float
    bias: float
    rmse: float
    mae: float
    n_converged: int
    n_failed: int


def _as_mapping(est) -> dict:
    if isinstance(est, dict):
        return est
    if hasattr(est, "as_dict"):
        return est.as_dict()
    raise TypeError(f"cannot read parameters from {type(est).__name__}")


def compute_metrics(estimates, truth) -> dict[str, Metrics]:
    """Bias, RMSE and MAE per parameter.

    ``estimates`` is a non-empty sequence of parameter objects (anything
    with ``as_dict``) or dicts; parameters missing from ``truth`` are
    ignored.
    """
    ests = [_as_mapping(e) for e in estimates]
    if not ests:
        raise ValueError("compute_metrics needs at least one estimate")
    truth = _as_mapping(truth)
    out = {}
    for p, v0 in truth.items():
        if not all(p in e for e in ests):
            continue
        err = np.array([e[p] for e in ests], dtype=float) - v0
        out[p] = Metrics(float(err.mean()), float(np.sqrt(np.mean(err**2))), float(np.mean(np.abs(err))))
    return out


@dataclass
class McReport:
    """Aggregated study results.

    ``cells`` maps ``(model, n, T, estimator, parameter)`` to
    :class:`CellMetrics`. ``raw`` (optional) maps ``(model, n, T,
    estimator)`` to a (replications x parameters) array with NaN rows for
    failed replications.
    """

    cells: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)
    param_names: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    flagged: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    failures: dict = field(default_factory=dict)
    wall_time: float = 0.0
    interrupted: bool = False

    @property
    def estimators(self) -> list[str]:
        seen = {k[3] for k in self.cells}
        return [e for e in ESTIMATORS if e in seen]

    @property
    def models(self) -> list[str]:
        out = []
        for k in self.cells:
            if k[0] not in out:
                out.append(k[0])
        return out

    def get(self, model, n, T, estimator, parameter) -> CellMetrics:
        return self.cells[(model, n, T, estimator, parameter)]

    def is_empty(self) -> bool:
        return not self.cells


# -- one replication -----------------------------------------------------------

def _truth(cfg: DgpConfig, estimator: str) -> dict:
    t = dict(cfg.theta0)
    if estimator == "gmm":
        t.pop("sigma2")
    return t


def _run_estimator(name: str, data: StarPanel, dgp: DgpConfig, mc: McConfig, proj):
    W = dgp.W
    if name == "qml_transformed":
        r = estimate_qml(data, W, "transformed", form=mc.transformed_form, variance=False)
        return r.theta_hat.as_dict(), r.converged
    if name == "qml_direct":
        te = {"auto": dgp.use_time_effects, "always": True, "never": False}[mc.direct_time_effects]
        r = estimate_qml(data, W, "direct", time_effects=te, variance=False)
        return r.theta_hat.as_dict(), r.converged
    if name == "gmm":
        r = estimate_gmm(data, W, proj, instruments=mc.gmm_instruments)
        d = r.theta_hat.as_dict()
        d["sigma2"] = r.sigma2_hat
        return d, r.converged
    raise ValueError(f"unknown estimator {name!r}")


def estimate_replication(dgp: DgpConfig, replication: int, key: int, mc: McConfig):
    """Simulate one panel and apply every estimator of ``mc`` to it.

    Returns ``(digest, {estimator: (params or None, status)})`` where status
    is ``"ok"``, ``"not_converged"`` or an exception summary.
    """
    panel, _ = simulate(dgp, replication, key)
    digest = panel.digest()
    data = log_square(panel)
    proj = build_projectors(dgp.n, dgp.T)
    out = {}
    for name in mc.estimators:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                params, conv = _run_estimator(name, data, dgp, mc, proj)
            out[name] = (params, "ok" if conv else "not_converged")
        except (SpatArchError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out[name] = (None, f"{type(exc).__name__}: {exc}")
        if panel.digest() != digest:  # pragma: no cover - arrays are read-only
            raise RuntimeError("panel modified by an estimator")
    return digest, out


def _task(args):
    spec, cell, key, reps, mc = args
    dgp = spec.dgp(cell.side, cell.T, mc.base_seed)
    return [estimate_replication(dgp, r, key, mc) for r in reps]


def _resolve_workers(requested: int | None) -> int:
    env = os.environ.get("SPATARCH_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    if requested:
        return max(1, int(requested))
    return os.cpu_count() or 1


def run_experiment(cfg: McConfig, *, workers: int | None = None, keep_raw: bool = True,
                   progress=None, on_cell=None, chunk: int = 50) -> McReport:
    """Run every ``(model, side, T)`` cell of ``cfg``.

    Metrics use converged replications only; failures (exceptions and
    non-converged fits) are counted. A cell with more than 5% failures is
    flagged and a cell where every replication failed is listed in
    ``report.errors`` with NaN metrics.

    ``on_cell(report)`` is called after each completed cell. On
    KeyboardInterrupt the cells finished so far are returned with
    ``report.interrupted`` set.
    """
    cfg.validate_models()
    t0 = time.perf_counter()
    nworkers = _resolve_workers(workers if workers is not None else cfg.parallel_workers)
    specs = {m.name: m for m in cfg.models}
    cells = [Cell(m.name, s, T) for m in cfg.models for s in cfg.lattice_sides for T in cfg.T_values]
    R = cfg.replications
    tasks = []
    for c in cells:
        key = cell_key(c.model, c.side, c.T)
        for a in range(0, R, chunk):
            tasks.append((specs[c.model], c, key, range(a, min(a + chunk, R)), cfg))

    report = McReport()
    ex = ProcessPoolExecutor(max_workers=nworkers) if nworkers > 1 and len(tasks) > 1 else None
    results = ex.map(_task, tasks) if ex is not None else map(_task, tasks)
    results = _iter_progress(results, progress, len(tasks))
    pos = 0
    try:
        for c in cells:
            reps = []
            while pos < len(tasks) and tasks[pos][1] == c:
                reps.extend(next(results))
                pos += 1
            _aggregate(report, c, specs[c.model].dgp(c.side, c.T, cfg.base_seed), reps, cfg, keep_raw)
            if on_cell is not None:
                on_cell(report)
    except KeyboardInterrupt:
        report.interrupted = True
        if ex is not None:
            ex.shutdown(wait=False, cancel_futures=True)
            ex = None
    finally:
        if ex is not None:
            ex.shutdown()
    report.wall_time = time.perf_counter() - t0
    return report


def _aggregate(report: McReport, c: Cell, dgp: DgpConfig, reps, cfg: McConfig, keep_raw: bool) -> None:
    R = len(reps)
    key = cell_key(c.model, c.side, c.T)
    report.seeds.append({"model": c.model, "n": c.n, "T": c.T, "base_seed": cfg.base_seed, "cell_key": key})
    for est in cfg.estimators:
        truth = _truth(dgp, est)
        names = list(truth)
        arr = np.full((R, len(names)), np.nan)
        status = []
        for r, (_, by_est) in enumerate(reps):
            params, st = by_est[est]
            status.append(st)
            if st == "ok":
                arr[r] = [params[p] for p in names]
        ok = np.array([s == "ok" for s in status])
        n_ok, n_fail = int(ok.sum()), int(R - ok.sum())
        k4 = (c.model, c.n, c.T, est)
        report.failures[k4] = [(r, s) for r, s in enumerate(status) if s != "ok"]
        if keep_raw:
            report.raw[k4] = arr
            report.param_names[k4] = names
        if n_fail > FAILURE_WARN * R:
            report.flagged.append(k4)
        if n_ok == 0:
            report.errors.append(k4)
            met = {p: Metrics(math.nan, math.nan, math.nan) for p in names}
        else:
            met = compute_metrics([dict(zip(names, arr[r])) for r in np.flatnonzero(ok)], truth)
        for p in names:
            m = met[p]
            report.cells[(*k4, p)] = CellMetrics(truth[p], m.bias, m.rmse, m.mae, n_ok, n_fail)


def _iter_progress(it, progress, total):
    for i, x in enumerate(it, 1):
        if progress is not None:
            progress(i, total)
        yield x


# -- raw cells I/O -------------------------------------------------------------

def write_raw_cells(report: McReport, path: str | Path) -> Path:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RAW_HEADER)
            for (model, n, T, est, p), m in report.cells.items():
                w.writerow([model, n, T, est, p, repr(m.true_value), repr(m.bias), repr(m.rmse),
                            repr(m.mae), m.n_converged, m.n_failed])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc
    return path


def read_raw_cells(path: str | Path) -> McReport:
    """Load a report written by :func:`write_raw_cells`.

    Raises ValueError naming the offending line for malformed input.
    """
    path = Path(path)
    report = McReport()
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        header = next(rows, None)
        if header is None or tuple(header) != RAW_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(RAW_HEADER)}")
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(RAW_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(RAW_HEADER)} fields, got {len(row)}")
            try:
                model, n, T, est, p = row[0], int(row[1]), int(row[2]), row[3], row[4]
                vals = [float(v) for v in row[5:9]]
                n_ok, n_fail = int(row[9]), int(row[10])
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if est not in ESTIMATORS:
                raise ValueError(f"{path}:{lineno}: unknown estimator {est!r}")
            report.cells[(model, n, T, est, p)] = CellMetrics(*vals, n_ok, n_fail)
    if report.is_empty():
        raise ValueError(f"{path}: no cells")
    return report


# -- tables ----------------------------------------------------------------------

def _fmt3(v: float) -> str:
    return "" if not np.isfinite(v) else f"{v:.3f}"


def emit_tables(report: McReport, out_dir: str | Path, layout: str = "wide") -> list[Path]:
    """Write ``bias.csv``, ``rmse.csv``, ``mae.csv`` and ``raw_cells.csv``.

    The ``wide`` layout has rows (parameter, model, method) and one column
    per (n, T) pair; cells that were not run are left empty.
    """
    if layout != "wide":
        raise ValueError(f"unknown layout {layout!r}")
    if report.is_empty():
        raise EmptyReportError("report has no cells")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    models, ests = report.models, report.estimators
    for metric in ("bias", "rmse", "mae"):
        path = out_dir / f"{metric}.csv"
        try:
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["parameter", "model", "method", *TABLE_COLUMNS])
                for p in REPORTED_PARAMS:
                    for m in models:
                        for e in ests:
                            vals = []
                            for s in TABLE_SIDES:
                                for T in TABLE_T:
                                    c = report.cells.get((m, s * s, T, e, p))
                                    vals.append("" if c is None else _fmt3(getattr(c, metric)))
                            w.writerow([p, m, e, *vals])
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror}") from exc
        written.append(path)
    written.append(write_raw_cells(report, out_dir / "raw_cells.csv"))
    return written


# -- plots -----------------------------------------------------------------------

_COLORS = {"gmm": "#1b9e77", "qml_transformed": "#d95f02", "qml_direct": "#7570b3"}
_LABELS = {"rho": "rho", "gamma": "gamma", "delta": "delta", "beta0": "beta0", "beta1": "beta1"}


def _svg_panel(x0, y0, w, h, series, title, xlabels):
    """Line chart of ``series`` ({name: [values]}) in the box (x0, y0, w, h)."""
    vals = [v for s in series.values() for v in s if np.isfinite(v)]
    lo, hi = (min(vals), max(vals)) if vals else (0.0, 1.0)
    lo, hi = min(lo, 0.0), max(hi, 0.0)
    if hi - lo < 1e-12:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    m = len(xlabels)

    def X(i):
        return x0 + 40 + (w - 50) * (i + 0.5) / m

    def Y(v):
        return y0 + 20 + (h - 60) * (hi - v) / (hi - lo)

    out = [f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#ccc"/>',
           f'<text x="{x0 + w / 2:.1f}" y="{y0 + 14}" text-anchor="middle" font-size="12">{escape(title)}</text>']
    for v in (lo + pad, 0.5 * (lo + hi), hi - pad):
        out.append(f'<text x="{x0 + 36}" y="{Y(v) + 4:.1f}" text-anchor="end" font-size="9">{v:.3f}</text>')
    if lo < 0 < hi:
        out.append(f'<line x1="{x0 + 40}" x2="{x0 + w - 10}" y1="{Y(0):.1f}" y2="{Y(0):.1f}" stroke="#999" stroke-dasharray="3,3"/>')
    for i, lab in enumerate(xlabels):
        out.append(f'<text x="{X(i):.1f}" y="{y0 + h - 24}" text-anchor="middle" font-size="8">{escape(lab)}</text>')
    for name, s in series.items():
        pts = [(X(i), Y(v)) for i, v in enumerate(s) if np.isfinite(v)]
        if not pts:
            continue
        col = _COLORS.get(name, "#000")
        path = " ".join(f"{a:.1f},{b:.1f}" for a, b in pts)
        out.append(f'<polyline points="{path}" fill="none" stroke="{col}" stroke-width="1.5"/>')
        out += [f'<circle cx="{a:.1f}" cy="{b:.1f}" r="2" fill="{col}"/>' for a, b in pts]
    return out


def emit_plots(report: McReport, out_dir: str | Path) -> list[Path]:
    """One SVG per reported parameter: RMSE (top row) and bias (bottom row), one column per model."""
    if report.is_empty():
        raise EmptyReportError("report has no cells; nothing to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    models, ests = report.models, report.estimators
    grid = sorted({(k[1], k[2]) for k in report.cells})
    xlabels = [f"n{n}_T{T}" for n, T in grid]
    pw, ph = 380, 220
    W, H = pw * len(models), 2 * ph + 30
    written = []
    for p in REPORTED_PARAMS:
        if not any(k[4] == p for k in report.cells):
            continue
        body = []
        for j, m in enumerate(models):
            for row, metric in enumerate(("rmse", "bias")):
                series = {}
                for e in ests:
                    series[e] = [
                        getattr(report.cells[(m, n, T, e, p)], metric) if (m, n, T, e, p) in report.cells else math.nan
                        for n, T in grid
                    ]
                body += _svg_panel(j * pw, row * ph, pw, ph, series, f"{m}: {metric.upper()} of {_LABELS[p]}", xlabels)
        for i, e in enumerate(ests):
            x = 10 + 160 * i
            body.append(f'<line x1="{x}" x2="{x + 20}" y1="{H - 12}" y2="{H - 12}" stroke="{_COLORS[e]}" stroke-width="2"/>')
            body.append(f'<text x="{x + 25}" y="{H - 8}" font-size="11">{escape(e)}</text>')
        svg = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
               '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]
        path = out_dir / f"{p}.svg"
        try:
            path.write_text("\n".join(svg) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write {path}: {exc.strerror}") from exc
        written.append(path)
    return written
