"""Panel containers, the log-squared transform and the projection operators.

Unit indices ``i`` run from 1 to n and time indices ``t`` from 0 to T, with
``t = 0`` holding the observed initial vector Y0. Arrays are stored as
``(n, T)`` (and ``(n, T, k)`` for regressors), one column per period.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DegenerateObservationError, InvalidDimensionError

__all__ = [
    "Panel",
    "StarPanel",
    "Projector",
    "log_square",
    "helmert_basis",
    "build_projectors",
    "time_demean",
    "cross_demean",
    "apply_FT",
    "apply_FT_transpose",
    "write_panel_csv",
    "read_panel_csv",
]


def _frozen(a, ndim, name):
    a = np.array(a, dtype=float)
    if a.ndim != ndim:
        raise InvalidDimensionError(f"{name} must be {ndim}-D, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Panel:
    """Observed outcomes ``Y`` (n x T), initial outcomes ``Y0`` and regressors ``X``."""

    Y0: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        Y0 = _frozen(self.Y0, 1, "Y0")
        Y = _frozen(self.Y, 2, "Y")
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        X = _frozen(X, 3, "X")
        n, T = Y.shape
        if Y0.shape != (n,) or X.shape[:2] != (n, T):
            raise InvalidDimensionError(
                f"inconsistent shapes Y0{Y0.shape} Y{Y.shape} X{X.shape}"
            )
        object.__setattr__(self, "Y0", Y0)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "X", X)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @property
    def k(self) -> int:
        return self.X.shape[2]

    def digest(self) -> str:
        """SHA-256 of the raw array bytes; identifies a panel across estimators."""
        import hashlib

        h = hashlib.sha256()
        for a in (self.Y0, self.Y, self.X):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass(frozen=True, eq=False)
class StarPanel:
    """Log-squared outcomes ``Ystar = log Y**2`` with regressors carried through."""

    Ystar0: np.ndarray
    Ystar: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "Ystar0", _frozen(self.Ystar0, 1, "Ystar0"))
        object.__setattr__(self, "Ystar", _frozen(self.Ystar, 2, "Ystar"))
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 2:
            X = X[:, :, None]
        object.__setattr__(self, "X", _frozen(X, 3, "X"))
        n, T = self.Ystar.shape
        if self.Ystar0.shape != (n,) or self.X.shape[:2] != (n, T):
            raise InvalidDimensionError("inconsistent StarPanel shapes")

    @property
    def n(self) -> int:
        return self.Ystar.shape[0]

    @property
    def T(self) -> int:
        return self.Ystar.shape[1]

    @property
    def k(self) -> int:
        return self.X.shape[2]

    @property
    def lagged(self) -> np.ndarray:
        """``(Ystar_0, ..., Ystar_{T-1})`` as an n x T matrix."""
        return np.column_stack([self.Ystar0, self.Ystar[:, :-1]])

    def subpanel(self, start: int, stop: int) -> "StarPanel":
        """Periods ``start+1 .. stop`` (1-based), with period ``start`` as the initial value."""
        if not 0 <= start < stop <= self.T:
            raise InvalidDimensionError(f"bad period range ({start}, {stop}]")
        full = np.column_stack([self.Ystar0, self.Ystar])
        return StarPanel(full[:, start], full[:, start + 1 : stop + 1], self.X[:, start:stop])


@dataclass(frozen=True, eq=False)
class Projector:
    """Centering projector ``Jn`` and orthonormal bases ``Fn`` (n x n-1), ``FT`` (T x T-1)."""

    Jn: np.ndarray
    Fn: np.ndarray
    FT: np.ndarray

    @property
    def n(self) -> int:
        return self.Fn.shape[0]

    @property
    def T(self) -> int:
        return self.FT.shape[0]


def log_square(panel: Panel) -> StarPanel:
    """Elementwise ``log(Y**2)``; a zero outcome raises with its (i, t) position."""
    full = np.column_stack([panel.Y0, panel.Y])
    zeros = np.argwhere(full == 0)
    if zeros.size:
        i, t = zeros[0]
        raise DegenerateObservationError(int(i) + 1, int(t))
    star = np.log(np.square(full))
    return StarPanel(star[:, 0], star[:, 1:], panel.X)


def helmert_basis(m: int) -> np.ndarray:
    """Orthonormal m x (m-1) basis of the complement of the ones vector.

    Column j is the forward-orthogonal-deviation contrast: weight
    ``c_j`` on row j and ``-c_j / (m - j - 1)`` on every later row, with
    ``c_j = sqrt((m - j - 1) / (m - j))``.
    """
    if m < 2:
        raise InvalidDimensionError(f"need dimension >= 2, got {m}")
    F = np.zeros((m, m - 1))
    for j in range(m - 1):
        rest = m - j - 1
        c = np.sqrt(rest / (rest + 1.0))
        F[j, j] = c
        F[j + 1 :, j] = -c / rest
    return F


def build_projectors(n: int, T: int) -> Projector:
    if n < 2 or T < 2:
        raise InvalidDimensionError(f"projectors need n >= 2 and T >= 2, got n={n}, T={T}")
    Jn = np.eye(n) - np.full((n, n), 1.0 / n)
    out = Projector(Jn, helmert_basis(n), helmert_basis(T))
    for a in (out.Jn, out.Fn, out.FT):
        a.setflags(write=False)
    return out


def time_demean(V: np.ndarray) -> np.ndarray:
    """Remove each unit's mean over the last axis of time (axis 1)."""
    V = np.asarray(V, dtype=float)
    if V.shape[1] < 2:
        raise InvalidDimensionError("time demeaning needs T >= 2")
    return V - V.mean(axis=1, keepdims=True)


def cross_demean(V: np.ndarray) -> np.ndarray:
    """Apply ``Jn`` to every period: subtract the cross-sectional mean (axis 0)."""
    V = np.asarray(V, dtype=float)
    return V - V.mean(axis=0, keepdims=True)


def apply_FT(V: np.ndarray, proj: Projector | np.ndarray) -> np.ndarray:
    """Right-multiply the time axis by ``FT``: (n, T[, k]) -> (n, T-1[, k])."""
    FT = proj.FT if isinstance(proj, Projector) else np.asarray(proj)
    V = np.asarray(V, dtype=float)
    if V.shape[1] != FT.shape[0]:
        raise InvalidDimensionError(f"time dimension {V.shape[1]} != FT rows {FT.shape[0]}")
    if V.ndim == 2:
        return V @ FT
    return np.einsum("ntk,ts->nsk", V, FT)


def apply_FT_transpose(V: np.ndarray, proj: Projector | np.ndarray) -> np.ndarray:
    """Map (n, T-1) back to (n, T) with ``FT'``; composing with apply_FT gives J_T."""
    FT = proj.FT if isinstance(proj, Projector) else np.asarray(proj)
    return np.asarray(V, dtype=float) @ FT.T


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    """Long format ``i,t,y,x1..xk``; rows with ``t = 0`` carry Y0 and empty x fields."""
    k = panel.k
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "t", "y"] + [f"x{j + 1}" for j in range(k)])
        for i in range(panel.n):
            w.writerow([i + 1, 0, f"{panel.Y0[i]:.17g}"] + [""] * k)
            for t in range(panel.T):
                w.writerow(
                    [i + 1, t + 1, f"{panel.Y[i, t]:.17g}"]
                    + [f"{x:.17g}" for x in panel.X[i, t]]
                )


def read_panel_csv(path: str | Path) -> Panel:
    """Inverse of :func:`write_panel_csv`. Requires a balanced panel."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["i", "t", "y"]:
        raise ValueError(f"{path}: header must start with i,t,y")
    k = len(rows[0]) - 3
    body = rows[1:]
    try:
        recs = [(int(r[0]), int(r[1]), float(r[2]), r[3:]) for r in body]
    except (ValueError, IndexError) as exc:
        raise ValueError(f"{path}: malformed row: {exc}") from exc
    n = max(r[0] for r in recs)
    T = max(r[1] for r in recs)
    if len(recs) != n * (T + 1):
        raise ValueError(f"{path}: unbalanced panel ({len(recs)} rows for n={n}, T={T})")
    Y0 = np.full(n, np.nan)
    Y = np.full((n, T), np.nan)
    X = np.full((n, T, k), np.nan)
    for i, t, y, xs in recs:
        if t == 0:
            Y0[i - 1] = y
        else:
            Y[i - 1, t - 1] = y
            X[i - 1, t - 1] = [float(x) for x in xs]
    if np.isnan(Y0).any() or np.isnan(Y).any() or np.isnan(X).any():
        raise ValueError(f"{path}: missing (i, t) cells")
    return Panel(Y0, Y, X)
