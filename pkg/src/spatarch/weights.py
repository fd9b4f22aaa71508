"""Spatial weight matrices: construction, normalization and log-determinants.

Storage is dense. The lattices used in the simulation study have at most
81 nodes, so an eigendecomposition at construction time is cheap and makes
every later ``log|I - rho W|`` evaluation an O(n) sum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import (
    InvalidDimensionError,
    InvalidWeightsError,
    NonRealSpectrumError,
    ParameterSpaceError,
)

__all__ = [
    "WeightMatrix",
    "IsolatedNodeWarning",
    "build_lattice_queen",
    "queen_adjacency",
    "row_normalize",
    "spectrum",
    "log_det_spatial",
    "log_det_lu",
    "admissible_interval",
    "read_weights_csv",
    "write_weights_csv",
]

RHO_BOUND = 0.995
_IMAG_TOL = 1e-8
_ROW_SUM_TOL = 1e-12


class IsolatedNodeWarning(UserWarning):
    """Raised through :mod:`warnings` when a row of W has no neighbours."""


def _real_spectrum(values: np.ndarray) -> np.ndarray:
    try:
        eig = np.linalg.eigvals(values)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - LAPACK failure
        raise ArithmeticError(f"eigendecomposition failed: {exc}") from exc
    if np.max(np.abs(eig.imag), initial=0.0) > _IMAG_TOL:
        raise NonRealSpectrumError(
            f"max |imag| = {np.max(np.abs(eig.imag)):.3g} exceeds {_IMAG_TOL}"
        )
    return np.sort(eig.real)


@dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Dense n x n spatial weights with a cached real spectrum.

    The spectrum is computed once in ``__post_init__``; if the matrix has a
    genuinely complex spectrum the cache stays ``None`` and log-determinants
    fall back to LU factorization.
    """

    values: np.ndarray
    row_normalized: bool = False
    spectrum: np.ndarray | None = field(default=None, repr=False)
    isolated: tuple[int, ...] = ()

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1] or v.shape[0] < 1:
            raise InvalidDimensionError(f"weights must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InvalidWeightsError("weights contain non-finite entries")
        if np.any(v < 0):
            raise InvalidWeightsError("weights must be non-negative")
        if np.any(np.diag(v) != 0):
            raise InvalidWeightsError("weights must have a zero diagonal")
        rs = v.sum(axis=1)
        isolated = tuple(int(i) for i in np.flatnonzero(rs == 0))
        if self.row_normalized:
            nz = rs > 0
            if np.any(np.abs(rs[nz] - 1.0) > _ROW_SUM_TOL):
                raise InvalidWeightsError("row_normalized=True but rows do not sum to 1")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "isolated", isolated)
        if isolated:
            warnings.warn(
                f"{len(isolated)} isolated node(s) without neighbours: {isolated[:10]}",
                IsolatedNodeWarning,
                stacklevel=3,
            )
        if self.spectrum is None:
            try:
                spec = _real_spectrum(v)
            except NonRealSpectrumError:
                spec = None
        else:
            spec = np.sort(np.asarray(self.spectrum, dtype=float))
        if spec is not None:
            spec.setflags(write=False)
        object.__setattr__(self, "spectrum", spec)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def rho_interval(self) -> tuple[float, float]:
        return admissible_interval(self)

    def __matmul__(self, other):
        return self.values @ other

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


def queen_adjacency(side: int) -> np.ndarray:
    """Binary queen-contiguity adjacency on a ``side x side`` lattice.

    Cells are numbered row-major, ``index = r * side + c``.
    """
    if int(side) != side or side < 2:
        raise InvalidDimensionError(f"lattice side must be an integer >= 2, got {side}")
    side = int(side)
    r, c = np.divmod(np.arange(side * side), side)
    cheb = np.maximum(np.abs(r[:, None] - r[None, :]), np.abs(c[:, None] - c[None, :]))
    return (cheb == 1).astype(float)


def build_lattice_queen(side: int) -> WeightMatrix:
    """Row-normalized queen-contiguity weights on a regular square lattice."""
    return row_normalize(WeightMatrix(queen_adjacency(side)))


def row_normalize(W: WeightMatrix | np.ndarray) -> WeightMatrix:
    """Divide each non-empty row by its sum.

    All-zero rows are left unchanged and reported via ``IsolatedNodeWarning``.
    """
    v = np.asarray(W.values if isinstance(W, WeightMatrix) else W, dtype=float)
    if np.any(v < 0):
        raise InvalidWeightsError("cannot row-normalize negative weights")
    rs = v.sum(axis=1, keepdims=True)
    out = np.divide(v, rs, out=np.zeros_like(v), where=rs > 0)
    return WeightMatrix(out, row_normalized=True)


def spectrum(W: WeightMatrix) -> np.ndarray:
    """Ascending real eigenvalues of W.

    Raises
    ------
    NonRealSpectrumError
        If the spectrum has imaginary parts above 1e-8.
    """
    if W.spectrum is not None:
        return W.spectrum
    return _real_spectrum(W.values)


def admissible_interval(W: WeightMatrix) -> tuple[float, float]:
    """Open interval of rho keeping ``I - rho W`` in the positive-determinant region.

    Computed as ``(1/lambda_min, 1/lambda_max)`` and clipped to
    ``(-0.995, 0.995)``.
    """
    lo, hi = -RHO_BOUND, RHO_BOUND
    if W.spectrum is not None:
        lmin, lmax = W.spectrum[0], W.spectrum[-1]
        if lmin < 0:
            lo = max(lo, 1.0 / lmin)
        if lmax > 0:
            hi = min(hi, 1.0 / lmax)
    return lo, hi


def log_det_spatial(W: WeightMatrix, rho: float) -> float:
    """Return ``ln|I - rho W|``.

    Uses the cached spectrum when available, otherwise an LU factorization.
    """
    if rho == 0:
        return 0.0
    if W.spectrum is not None:
        terms = 1.0 - rho * W.spectrum
        if np.any(terms <= 0):
            raise ParameterSpaceError(f"rho={rho} outside the admissible region of W")
        return float(np.sum(np.log(terms)))
    return log_det_lu(W, rho)


def log_det_lu(W: WeightMatrix, rho: float) -> float:
    """``ln|I - rho W|`` via LU; errors if the determinant is not positive."""
    sign, logdet = np.linalg.slogdet(np.eye(W.n) - rho * W.values)
    if sign <= 0:
        raise ParameterSpaceError(f"rho={rho} outside the admissible region of W")
    return float(logdet)


def read_weights_csv(path: str | Path, row_normalized: bool | None = None) -> WeightMatrix:
    """Load an n x n comma-separated grid (no header).

    When ``row_normalized`` is None the flag is inferred from the row sums.
    """
    v = np.loadtxt(path, delimiter=",", ndmin=2)
    if row_normalized is None:
        rs = v.sum(axis=1)
        row_normalized = bool(np.all(np.abs(rs[rs > 0] - 1.0) <= _ROW_SUM_TOL))
    return WeightMatrix(v, row_normalized=row_normalized)


def write_weights_csv(W: WeightMatrix, path: str | Path) -> None:
    np.savetxt(path, W.values, delimiter=",", fmt="%.17g")
