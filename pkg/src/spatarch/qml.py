"""Quasi-maximum likelihood estimation with fixed effects.

Two approaches are available:

``transformed``
    Time effects are removed with the centering projector Jn (requires a
    row-normalized W); unit effects are concentrated out by time demeaning.
    The Gaussian quasi-likelihood has ``(n - 1) T`` effective observations.
``direct``
    Unit effects (and, optionally, time effects) are estimated jointly and
    concentrated out, leaving ``nT`` observations and no Jacobian correction.

In both cases ``eta = (gamma, delta, beta)`` and ``sigma2`` are concentrated
analytically, so only ``rho`` is searched numerically. Parameter vectors are
ordered ``(gamma, delta, beta..., rho, sigma2)`` throughout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .exceptions import (
    BoundarySolutionError,
    CollinearityError,
    EstimationFailure,
    InvalidWeightsError,
    ParameterSpaceError,
    SingularInformationError,
    UnsupportedSplitError,
)
from .panel import StarPanel, cross_demean, time_demean
from .weights import WeightMatrix, admissible_interval, log_det_spatial

__all__ = [
    "ParamVector",
    "QmlResult",
    "QmlProblem",
    "concentrated_loglik_transformed",
    "concentrated_loglik_direct",
    "estimate_qml",
    "sandwich_variance",
    "jackknife_bias_correct",
    "jackknife_combine",
    "numerical_hessian",
]

APPROACHES = ("transformed", "direct")
# Forms of the transformation-approach likelihood:
#   "exact"        ln|I_{n-1} - rho M*| = ln|I_n - rho M| - ln(1 - rho), X time-demeaned
#   "flipped"      +ln(1 - rho) correction, X time-demeaned
#   "uncorrected"  no ln(1 - rho) correction, X centered across units only
FORMS = ("exact", "flipped", "uncorrected")
N_GRID = 40


@dataclass(frozen=True)
class ParamVector:
    gamma: float
    delta: float
    beta: tuple[float, ...]
    rho: float
    sigma2: float

    @property
    def k(self) -> int:
        return len(self.beta)

    @property
    def eta(self) -> np.ndarray:
        return np.array([self.gamma, self.delta, *self.beta])

    def as_array(self) -> np.ndarray:
        """``(gamma, delta, beta..., rho, sigma2)``."""
        return np.array([self.gamma, self.delta, *self.beta, self.rho, self.sigma2])

    @classmethod
    def from_array(cls, a) -> "ParamVector":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), float(a[1]), tuple(float(b) for b in a[2:-2]), float(a[-2]), float(a[-1]))

    def names(self) -> list[str]:
        return param_names(self.k)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names(), self.as_array()))


def param_names(k: int) -> list[str]:
    return ["gamma", "delta", *[f"beta{j}" for j in range(k)], "rho", "sigma2"]


@dataclass(frozen=True, eq=False)
class QmlResult:
    theta_hat: ParamVector
    variance: np.ndarray
    std_errors: np.ndarray
    loglik: float
    approach: str
    converged: bool
    rho_grid_diag: dict = field(default_factory=dict, repr=False)
    bias_corrected: bool = False

    @property
    def method(self) -> str:
        return f"qml_{self.approach}"


class QmlProblem:
    """Precomputed within-transformed arrays for one panel and one approach.

    Parameters
    ----------
    data
        Log-squared panel.
    W
        Spatial weights.
    approach
        ``"transformed"`` or ``"direct"``.
    time_effects
        Direct approach only: also concentrate out time effects (two-way
        demeaning). The transformed approach always removes them.
    form
        Transformed approach only; one of ``"exact"``, ``"flipped"`` or
        ``"uncorrected"`` (see ``FORMS`` in the module source).
    """

    def __init__(
        self,
        data: StarPanel,
        W: WeightMatrix,
        approach: str = "transformed",
        *,
        time_effects: bool = True,
        form: str = "exact",
    ):
        if approach not in APPROACHES:
            raise ValueError(f"approach must be one of {APPROACHES}, got {approach!r}")
        if form not in FORMS:
            raise ValueError(f"form must be one of {FORMS}, got {form!r}")
        if data.n != W.n:
            raise ValueError(f"panel has n={data.n} but W is {W.n} x {W.n}")
        if data.T < 2:
            raise ValueError("QML needs T >= 2")
        if approach == "transformed" and not W.row_normalized:
            raise InvalidWeightsError("the transformation approach requires row-normalized W")
        self.data, self.W, self.approach = data, W, approach
        self.form = form if approach == "transformed" else "exact"
        self.time_effects = True if approach == "transformed" else bool(time_effects)
        n, T, k = data.n, data.T, data.k
        self.n, self.T, self.k = n, T, k
        self.n_eff = (n - 1) * T if approach == "transformed" else n * T
        self.units = n - 1 if approach == "transformed" else n

        Wv = W.values
        y = time_demean(data.Ystar)
        lag = time_demean(data.lagged)
        if self.form == "uncorrected":
            X = np.array(data.X)
        else:
            X = data.X - data.X.mean(axis=1, keepdims=True)
        Wy, Wlag = Wv @ y, Wv @ lag
        if self.time_effects:
            y, Wy, lag, Wlag = (cross_demean(a) for a in (y, Wy, lag, Wlag))
            X = X - X.mean(axis=0, keepdims=True)
        # (n, T) per period blocks, flattened column-major by time
        self.y = y
        self.Wy = Wy
        self.Z = np.concatenate([lag[:, :, None], Wlag[:, :, None], X], axis=2)  # n, T, k+2

        Z2 = self.Z.transpose(1, 0, 2).reshape(n * T, k + 2)
        y0 = y.T.reshape(-1)
        y1 = Wy.T.reshape(-1)
        A = Z2.T @ Z2
        if np.linalg.cond(A) > 1e12:
            raise CollinearityError("within-transformed regressors are (near) collinear")
        self._A = A
        self._b0, self._b1 = Z2.T @ y0, Z2.T @ y1
        coef = np.linalg.solve(A, np.column_stack([self._b0, self._b1]))
        r0 = y0 - Z2 @ coef[:, 0]
        r1 = y1 - Z2 @ coef[:, 1]
        self._c00, self._c01, self._c11 = r0 @ r0, r0 @ r1, r1 @ r1
        self._coef = coef
        self.rho_bounds = admissible_interval(W)

    # -- Jacobian term ---------------------------------------------------
    def log_jacobian(self, rho: float) -> float:
        """Per-period log-Jacobian: ``ln|I - rho W|`` plus the approach's correction."""
        lo, hi = self.rho_bounds
        if not lo < rho < hi:
            raise ParameterSpaceError(f"rho={rho} outside ({lo:.4g}, {hi:.4g})")
        val = log_det_spatial(self.W, rho)
        if self.approach == "transformed":
            val += {"exact": -1.0, "flipped": 1.0, "uncorrected": 0.0}[self.form] * math.log(1.0 - rho)
        return val

    def d_log_jacobian(self, rho: float) -> float:
        lam = self.W.spectrum
        if lam is None:
            G = self.W.values @ np.linalg.inv(np.eye(self.n) - rho * self.W.values)
            val = -np.trace(G)
        else:
            val = -float(np.sum(lam / (1.0 - rho * lam)))
        if self.approach == "transformed":
            val -= {"exact": -1.0, "flipped": 1.0, "uncorrected": 0.0}[self.form] / (1.0 - rho)
        return val

    # -- concentrated quantities -----------------------------------------
    def eta_hat(self, rho: float) -> np.ndarray:
        return self._coef[:, 0] - rho * self._coef[:, 1]

    def ssr(self, rho: float) -> float:
        return max(self._c00 - 2.0 * rho * self._c01 + rho * rho * self._c11, 0.0)

    def sigma2_hat(self, rho: float) -> float:
        return self.ssr(rho) / self.n_eff

    def profile(self, rho: float) -> float:
        """Concentrated log-likelihood in rho alone."""
        s2 = max(self.sigma2_hat(rho), 1e-300)  # exact fits stay finite
        ne = self.n_eff
        return -0.5 * ne * (math.log(2 * math.pi) + math.log(s2) + 1.0) + self.T * self.log_jacobian(rho)

    def profile_derivative(self, rho: float) -> float:
        """Analytic ``d profile / d rho``; the SSR is quadratic in rho."""
        ssr = max(self.ssr(rho), 1e-300)
        dssr = 2.0 * (rho * self._c11 - self._c01)
        return -0.5 * self.n_eff * dssr / ssr + self.T * self.d_log_jacobian(rho)

    # -- full (unconcentrated in eta, sigma2) likelihood --------------------
    def residuals(self, theta) -> np.ndarray:
        """n x T residual matrix at ``theta = (gamma, delta, beta..., rho, sigma2)``."""
        theta = np.asarray(theta, dtype=float)
        eta, rho = theta[:-2], theta[-2]
        return self.y - rho * self.Wy - self.Z @ eta

    def loglik_periods(self, theta) -> np.ndarray:
        """Per-period log-likelihood contributions (length T)."""
        theta = np.asarray(theta, dtype=float)
        rho, s2 = theta[-2], theta[-1]
        if s2 <= 0:
            raise ParameterSpaceError("sigma2 must be positive")
        e = self.residuals(theta)
        return (
            -0.5 * self.units * math.log(2 * math.pi * s2)
            + self.log_jacobian(rho)
            - 0.5 * np.sum(e * e, axis=0) / s2
        )

    def loglik(self, theta) -> float:
        return float(np.sum(self.loglik_periods(theta)))

    def scores(self, theta) -> np.ndarray:
        """Analytic per-period scores, shape (T, k + 4)."""
        theta = np.asarray(theta, dtype=float)
        rho, s2 = theta[-2], theta[-1]
        e = self.residuals(theta)
        s_eta = np.einsum("ntj,nt->tj", self.Z, e) / s2
        s_rho = self.d_log_jacobian(rho) + np.sum(self.Wy * e, axis=0) / s2
        s_s2 = -0.5 * self.units / s2 + 0.5 * np.sum(e * e, axis=0) / s2**2
        return np.column_stack([s_eta, s_rho, s_s2])

    def theta_at(self, rho: float) -> np.ndarray:
        return np.concatenate([self.eta_hat(rho), [rho, self.sigma2_hat(rho)]])


def concentrated_loglik_transformed(rho: float, data: StarPanel, W: WeightMatrix, *, form: str = "exact") -> float:
    """Profile log-likelihood of the transformation approach at ``rho``."""
    return QmlProblem(data, W, "transformed", form=form).profile(rho)


def concentrated_loglik_direct(rho: float, data: StarPanel, W: WeightMatrix, *, time_effects: bool = True) -> float:
    """Profile log-likelihood of the direct approach at ``rho``."""
    return QmlProblem(data, W, "direct", time_effects=time_effects).profile(rho)


def _maximize_profile(prob: QmlProblem):
    lo, hi = prob.rho_bounds
    grid = np.linspace(lo, hi, N_GRID + 2)[1:-1]
    vals = np.array([prob.profile(r) for r in grid])
    best = np.flatnonzero(vals == vals.max())
    i = int(best[np.argmin(np.abs(grid[best]))])
    inner = vals[1:-1]
    peaks = int(np.sum((inner > vals[:-2]) & (inner > vals[2:])))
    peaks += int(vals[0] > vals[1]) + int(vals[-1] > vals[-2])
    a = grid[i - 1] if i > 0 else lo
    b = grid[i + 1] if i < N_GRID - 1 else hi
    res = minimize_scalar(lambda r: -prob.profile(r), bounds=(a, b), method="bounded",
                          options={"xatol": 1e-10, "maxiter": 500})
    rho = float(res.x)
    if vals[i] > -res.fun:  # pragma: no cover - Brent never worse than its bracket start
        rho = float(grid[i])
    # polish on the score: value-based search only resolves rho to about sqrt(eps)
    da, db = prob.profile_derivative(a), prob.profile_derivative(b)
    if da > 0 > db:
        r2 = brentq(prob.profile_derivative, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        if prob.profile(r2) >= prob.profile(rho) - 1e-9 * abs(prob.profile(rho)):
            rho = float(r2)
    diag = {"grid": grid, "values": vals, "n_peaks": peaks, "multi_peak": peaks > 1,
            "bracket": (a, b), "nfev": int(res.nfev) + N_GRID}
    return rho, diag


def estimate_qml(
    data: StarPanel,
    W: WeightMatrix,
    approach: str = "transformed",
    *,
    time_effects: bool = True,
    form: str = "exact",
    variance: bool = True,
    deriv_tol: float = 1e-6,
) -> QmlResult:
    """Maximize the concentrated quasi-likelihood.

    A 40-point grid over the admissible rho interval seeds a bounded Brent
    search inside the bracketing grid cells. Raises
    :class:`BoundarySolutionError` when the maximum sits on the edge of the
    parameter space.
    """
    prob = QmlProblem(data, W, approach, time_effects=time_effects, form=form)
    rho, diag = _maximize_profile(prob)
    lo, hi = prob.rho_bounds
    edge = 1e-6 * (hi - lo)
    if rho - lo < edge or hi - rho < edge:
        raise BoundarySolutionError(f"profile likelihood maximized at the boundary rho={rho:.6f}")
    dprof = prob.profile_derivative(rho)
    diag["profile_derivative"] = dprof
    converged = bool(np.isfinite(dprof) and abs(dprof) / prob.n_eff < deriv_tol)
    theta = prob.theta_at(rho)
    k4 = len(theta)
    if variance:
        try:
            V = sandwich_variance(prob, theta)
        except SingularInformationError:
            V = np.full((k4, k4), np.nan)
    else:
        V = np.full((k4, k4), np.nan)
    se = np.sqrt(np.clip(np.diag(V), 0, None)) if np.all(np.isfinite(V)) else np.full(k4, np.nan)
    return QmlResult(
        theta_hat=ParamVector.from_array(theta),
        variance=V,
        std_errors=se,
        loglik=prob.profile(rho),
        approach=approach,
        converged=converged,
        rho_grid_diag=diag,
    )


def hessian_steps(theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    h = np.maximum(1e-5, 1e-4 * np.abs(theta))
    # keep sigma2 +/- h positive
    h[-1] = min(h[-1], 0.5 * abs(theta[-1]))
    return h


def numerical_hessian(f, theta, h=None) -> np.ndarray:
    """Central second differences of a scalar function."""
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    h = hessian_steps(theta) if h is None else np.broadcast_to(np.asarray(h, float), (p,))
    H = np.empty((p, p))
    f0 = f(theta)
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = h[i]
        H[i, i] = (f(theta + ei) - 2 * f0 + f(theta - ei)) / h[i] ** 2
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = h[j]
            H[i, j] = H[j, i] = (
                f(theta + ei + ej) - f(theta + ei - ej) - f(theta - ei + ej) + f(theta - ei - ej)
            ) / (4 * h[i] * h[j])
    return H


def sandwich_variance(prob: QmlProblem, theta) -> np.ndarray:
    """Sandwich covariance ``Sigma^-1 (Sigma + Omega) Sigma^-1`` scaled to the sample.

    ``Sigma`` is the negative finite-difference Hessian per effective
    observation and ``Sigma + Omega`` the outer product of the per-period
    scores per effective observation.
    """
    theta = np.asarray(theta, dtype=float)
    ne = prob.n_eff
    H = numerical_hessian(prob.loglik, theta)
    info = -H / ne
    try:
        if not np.all(np.isfinite(info)) or np.linalg.cond(info) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned information")
        info_inv = np.linalg.inv(info)
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError(str(exc)) from exc
    s = prob.scores(theta)
    opg = s.T @ s / ne
    V = info_inv @ opg @ info_inv / ne
    return 0.5 * (V + V.T)


def jackknife_combine(full, first, second) -> np.ndarray:
    """Half-panel jackknife ``2 * full - (first + second) / 2``."""
    return 2.0 * np.asarray(full, float) - 0.5 * (np.asarray(first, float) + np.asarray(second, float))


def jackknife_bias_correct(result: QmlResult, data: StarPanel, W: WeightMatrix, **kw) -> QmlResult:
    """Half-panel jackknife correction of a QML estimate.

    The panel is split into periods ``1..T/2`` and ``T/2+1..T``, the second
    half using period ``T/2`` as its initial value. Extra keyword arguments
    are forwarded to :func:`estimate_qml` for the half panels. The variance
    of the full-panel estimate is kept.
    """
    T = data.T
    if T % 2 or T < 6:
        raise UnsupportedSplitError(f"half-panel jackknife needs an even T >= 6, got T={T}")
    h = T // 2
    halves = []
    for part, (a, b) in (("first", (0, h)), ("second", (h, T))):
        try:
            r = estimate_qml(data.subpanel(a, b), W, result.approach, variance=False, **kw)
        except (BoundarySolutionError, CollinearityError, EstimationFailure) as exc:
            raise type(exc)(f"{part} half-panel: {exc}") from exc
        halves.append(r)
    theta = jackknife_combine(result.theta_hat.as_array(), *(r.theta_hat.as_array() for r in halves))
    return replace(
        result,
        theta_hat=ParamVector.from_array(theta),
        converged=result.converged and all(r.converged for r in halves),
        bias_corrected=True,
    )
