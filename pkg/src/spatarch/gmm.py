"""GMM estimation with linear and quadratic moments after two annihilating transforms.

The time dimension is first rotated by ``FT`` (removing unit effects and the
mean of the log-chi-squared error), then each period is centered by ``Jn``
(removing the rotated time effects). With ``N = n (T - 1)`` the moment vector
is

    g(theta) = ( U' P~_1 U, ..., U' P~_m U, Q~' U )

where ``U`` stacks the rotated residuals, ``P~_j = Jn P_j Jn`` per period and
``Q~ = J_N Q``. Estimation is two-step: identity weighting, then the inverse
of the plug-in moment covariance from the step-1 residuals.

Parameters are ordered ``(rho, gamma, delta, beta...)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .exceptions import (
    BoundarySolutionError,
    DegenerateInstrumentsError,
    SingularInformationError,
)
from .panel import Projector, StarPanel, apply_FT, build_projectors, cross_demean
from .weights import WeightMatrix, admissible_interval

__all__ = [
    "GmmParam",
    "TransformedData",
    "MomentSystem",
    "GmmResult",
    "transform_for_gmm",
    "build_default_moments",
    "trace_adjusted",
    "moment_vector",
    "moment_jacobian",
    "weight_matrix_estimate",
    "estimate_gmm",
    "gmm_variance",
    "WeightingFallbackWarning",
]

INSTRUMENTS = ("backward", "levels", "rotated")
MAX_ITER = 200
RIDGE = 1e-10
LARGE_T = 10


class WeightingFallbackWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GmmParam:
    rho: float
    eta: tuple[float, ...]  # (gamma, delta, beta...)

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, *self.eta])

    @classmethod
    def from_array(cls, a) -> "GmmParam":
        a = np.asarray(a, dtype=float)
        return cls(float(a[0]), tuple(float(x) for x in a[1:]))

    @property
    def gamma(self) -> float:
        return self.eta[0]

    @property
    def delta(self) -> float:
        return self.eta[1]

    @property
    def beta(self) -> tuple[float, ...]:
        return self.eta[2:]

    def as_dict(self) -> dict[str, float]:
        d = {"rho": self.rho, "gamma": self.gamma, "delta": self.delta}
        d.update({f"beta{j}": b for j, b in enumerate(self.beta)})
        return d


@dataclass(frozen=True, eq=False)
class TransformedData:
    """FT-rotated arrays; every block has T - 1 periods."""

    y: np.ndarray  # n, T-1
    Wy: np.ndarray  # n, T-1
    Z: np.ndarray  # n, T-1, k+2: (lag, W lag, X*)
    W: WeightMatrix

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def periods(self) -> int:
        return self.y.shape[1]

    @property
    def N(self) -> int:
        return self.y.size


def transform_for_gmm(data: StarPanel, proj: Projector, W: WeightMatrix) -> TransformedData:
    """Rotate outcome, lagged outcome, its spatial lag and X by ``FT``.

    The lagged series is the rotation of ``(Y*_0, ..., Y*_{T-1})``.
    """
    y = apply_FT(data.Ystar, proj)
    lag = apply_FT(data.lagged, proj)
    X = apply_FT(data.X, proj)
    Wv = W.values
    Z = np.concatenate([lag[:, :, None], (Wv @ lag)[:, :, None], X], axis=2)
    return TransformedData(y=y, Wy=Wv @ y, Z=Z, W=W)


def trace_adjusted(P: np.ndarray) -> np.ndarray:
    """``P - tr(Jn P Jn) / (n - 1) * I``, which satisfies ``tr(Jn P Jn) = 0``."""
    n = P.shape[0]
    JPJ = cross_demean(cross_demean(P).T).T
    return P - np.trace(JPJ) / (n - 1) * np.eye(n)


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """Centered quadratic matrices, centered instruments and the data they act on.

    ``P_list`` holds ``Jn P_j Jn`` (n x n, applied period by period). ``Q``
    has shape (n, T-1, k_q) and is already centered per period, so
    ``Q' J_N U = Q' U``.
    """

    data: TransformedData
    P_list: tuple[np.ndarray, ...]
    Q: np.ndarray
    instrument_names: tuple[str, ...] = ()

    @property
    def m(self) -> int:
        return len(self.P_list)

    @property
    def kq(self) -> int:
        return self.Q.shape[2]

    @property
    def n_moments(self) -> int:
        return self.m + self.kq

    @property
    def n_params(self) -> int:
        return self.data.Z.shape[2] + 1

    @property
    def N(self) -> int:
        return self.data.N

    def residuals(self, theta) -> np.ndarray:
        """Centered rotated residuals ``J_N U(theta)`` as an (n, T-1) matrix.

        The rotated time effects are omitted; centering removes them.
        """
        theta = np.asarray(theta, dtype=float)
        d = self.data
        U = d.y - theta[0] * d.Wy - d.Z @ theta[1:]
        return cross_demean(U)


def _prune_columns(Q: np.ndarray, names, tol=1e-10, raw_scale=None):
    """Drop linearly dependent instrument columns (pivoted QR, relative tolerance).

    Columns whose norm is below ``tol * raw_scale`` (their norm before
    centering) count as zero.
    """
    flat = Q.reshape(-1, Q.shape[-1])
    scale = np.linalg.norm(flat, axis=0)
    floor = 0.0 if raw_scale is None else tol * np.asarray(raw_scale)
    keep0 = np.flatnonzero(scale > floor)
    if keep0.size == 0:
        raise DegenerateInstrumentsError("every instrument column is zero after centering")
    A = flat[:, keep0] / scale[keep0]
    _, R, piv = sla.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > tol * d[0]))
    keep = np.sort(keep0[piv[:rank]])
    return Q[:, :, keep], tuple(names[i] for i in keep)


def build_default_moments(
    data: StarPanel | TransformedData,
    W: WeightMatrix,
    proj: Projector | None = None,
    *,
    instruments: str = "backward",
) -> MomentSystem:
    """Default moment set: two quadratic and up to ``3 + 2k`` linear moments.

    Quadratic matrices are trace-adjusted ``W`` and ``W'W``. Instruments are
    the rotated lag, its first and second spatial lags, the rotated X and
    ``W X``, each centered per period, pruned to full column rank.

    The lagged outcome enters as ``instruments``:

    ``"backward"``
        ``Y*_{t-1}`` minus the mean of the earlier lags (zero in the first
        period). Predetermined under the forward-orthogonal rotation and free
        of the unit effects.
    ``"levels"``
        ``Y*_{t-1}`` itself. Predetermined but carries the unit effects.
    ``"rotated"``
        The rotated lag. Correlated with the rotated error, so the linear
        moments are biased for fixed T.
    """
    if isinstance(data, StarPanel):
        if proj is None:
            proj = build_projectors(data.n, data.T)
        raw = data
        td = transform_for_gmm(data, proj, W)
    else:
        raw = None
        td = data
    if instruments not in INSTRUMENTS:
        raise ValueError(f"instruments must be one of {INSTRUMENTS}, got {instruments!r}")
    Wv = W.values
    P1 = trace_adjusted(Wv)
    P2 = trace_adjusted(Wv.T @ Wv)
    P_list = tuple(cross_demean(cross_demean(P).T).T for P in (P1, P2))

    if instruments in ("levels", "backward"):
        if raw is None:
            raise ValueError(f"{instruments} instruments need the StarPanel")
        lag = raw.lagged[:, :-1]
        if instruments == "backward":
            past = np.cumsum(lag, axis=1)[:, :-1] / np.arange(1, lag.shape[1])
            lag = np.concatenate([np.zeros((lag.shape[0], 1)), lag[:, 1:] - past], axis=1)
    else:
        lag = td.Z[:, :, 0]
    X = td.Z[:, :, 2:]
    k = X.shape[2]
    cols = [lag, Wv @ lag, Wv @ (Wv @ lag)]
    cols += [X[:, :, j] for j in range(k)]
    cols += [Wv @ X[:, :, j] for j in range(k)]
    names = ["lag", "W_lag", "W2_lag", *[f"x{j}" for j in range(k)], *[f"W_x{j}" for j in range(k)]]
    raw_Q = np.stack(cols, axis=2)
    Q = cross_demean(raw_Q)
    Q, names = _prune_columns(Q, names, raw_scale=np.linalg.norm(raw_Q.reshape(-1, raw_Q.shape[2]), axis=0))
    return MomentSystem(td, P_list, Q, names)


def moment_vector(theta, sys: MomentSystem) -> np.ndarray:
    """Quadratic moments followed by linear moments (not scaled by N)."""
    e = sys.residuals(theta)
    quad = [np.sum(e * (P @ e)) for P in sys.P_list]
    lin = np.einsum("ntq,nt->q", sys.Q, e)
    return np.concatenate([quad, lin])


def moment_jacobian(theta, sys: MomentSystem) -> np.ndarray:
    """Analytic ``d g / d theta'``, shape (m + k_q, k + 3)."""
    e = sys.residuals(theta)
    d = sys.data
    dU = -np.concatenate([d.Wy[:, :, None], d.Z], axis=2)  # n, T-1, p
    dU = dU - dU.mean(axis=0, keepdims=True)
    rows = []
    for P in sys.P_list:
        Se = (P + P.T) @ e
        rows.append(np.einsum("ntp,nt->p", dU, Se))
    lin = np.einsum("ntq,ntp->qp", sys.Q, dU)
    return np.vstack([np.array(rows), lin])


def weight_matrix_estimate(residuals, sys: MomentSystem, ridge: float = RIDGE) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Plug-in ``Omega_N = Var(g) / N`` for i.i.d. residual entries.

    Uses the sample central moments m2, m3, m4 of the residuals::

        quad-quad  (m4 - 3 m2^2) d_j'd_l + m2^2 tr(P_j (P_l + P_l'))
        quad-lin   m3 d_j' Q
        lin-lin    m2 Q'Q

    where ``d_j`` is the diagonal of the centered quadratic matrix. Returns
    the matrix and ``(m2, m3, m4)``.
    """
    e = np.asarray(residuals, dtype=float)
    if e.ndim == 1:
        e = e.reshape(sys.data.n, -1, order="F")
    N = e.size
    c = e - e.mean()
    m2, m3, m4 = (np.mean(c**p) for p in (2, 3, 4))
    periods = e.shape[1]
    m, kq = sys.m, sys.kq
    Om = np.empty((m + kq, m + kq))
    diags = [np.diag(P) for P in sys.P_list]
    for j, Pj in enumerate(sys.P_list):
        for l, Pl in enumerate(sys.P_list):
            Om[j, l] = periods * ((m4 - 3 * m2**2) * diags[j] @ diags[l]
                                  + m2**2 * np.sum(Pj * (Pl + Pl.T).T))
    Qflat = sys.Q.reshape(-1, kq)
    for j in range(m):
        Om[j, m:] = Om[m:, j] = m3 * np.einsum("n,ntq->q", diags[j], sys.Q)
    Om[m:, m:] = m2 * Qflat.T @ Qflat
    Om = 0.5 * (Om + Om.T) / N
    return Om, (m2, m3, m4)


def _regularized_inverse(Om, ridge=RIDGE):
    """Inverse of a symmetric PSD matrix; adds ``ridge * I`` (scaled) when needed."""
    try:
        L = np.linalg.cholesky(Om)
        return sla.cho_solve((L, True), np.eye(len(Om)))
    except np.linalg.LinAlgError:
        pass
    scale = max(np.max(np.abs(np.diag(Om))), 1.0)
    Om2 = Om + ridge * scale * np.eye(len(Om))
    L = np.linalg.cholesky(Om2)  # LinAlgError propagates: non-PSD after regularization
    return sla.cho_solve((L, True), np.eye(len(Om)))


def _objective(theta, sys, A):
    g = moment_vector(theta, sys) / sys.N
    return float(g @ A @ g)


def _minimize(theta0, sys: MomentSystem, A: np.ndarray, bounds, max_iter=MAX_ITER, tol=1e-12):
    """Levenberg-Marquardt on ``g' A g`` with rho kept inside ``bounds``."""
    N = sys.N
    lo, hi = bounds
    theta = np.asarray(theta0, dtype=float).copy()
    theta[0] = np.clip(theta[0], lo + 1e-6, hi - 1e-6)
    g = moment_vector(theta, sys) / N
    f = float(g @ A @ g)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        G = moment_jacobian(theta, sys) / N
        H = G.T @ A @ G
        grad = G.T @ A @ g
        if np.max(np.abs(grad)) * max(1.0, np.max(np.abs(theta))) < tol * max(f, 1e-300) ** 0.5 + 1e-15:
            converged = True
            break
        improved = False
        for _ in range(30):
            step = np.linalg.solve(H + lam * np.diag(np.maximum(np.diag(H), 1e-12)), -grad)
            cand = theta + step
            if not lo < cand[0] < hi:
                lam *= 10
                continue
            gc = moment_vector(cand, sys) / N
            fc = float(gc @ A @ gc)
            if fc < f:
                improved = True
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not improved:
            converged = True  # no descent direction left at this damping
            break
        rel = (f - fc) / max(f, 1e-300)
        theta, g, f = cand, gc, fc
        if rel < 1e-14 or np.max(np.abs(step)) < 1e-12:
            converged = True
            break
    return theta, f, converged, it


@dataclass(frozen=True, eq=False)
class GmmResult:
    theta_hat: GmmParam
    sigma2_hat: float
    variance: np.ndarray
    std_errors: np.ndarray
    J_stat: float
    steps: int
    converged: bool
    regime: str
    iterations: tuple[int, ...] = ()
    objective: tuple[float, ...] = ()  # (step-2 obj at step-1 iterate, at final)
    weighting_fallback: bool = False
    step1_theta: np.ndarray | None = None

    df: int = 0  # over-identification degrees of freedom

    method = "gmm"


def gmm_variance(theta, sys: MomentSystem, Om_inv: np.ndarray) -> np.ndarray:
    """``(G' Omega^-1 G)^-1 / N`` with ``G = (1/N) dg/dtheta'``."""
    N = sys.N
    G = moment_jacobian(theta, sys) / N
    M = G.T @ Om_inv @ G
    M = 0.5 * (M + M.T)
    try:
        if np.linalg.cond(M) > 1e14:
            raise np.linalg.LinAlgError("ill-conditioned")
        V = np.linalg.inv(M) / N
    except np.linalg.LinAlgError as exc:
        raise SingularInformationError(f"singular G' Omega^-1 G: {exc}") from exc
    return 0.5 * (V + V.T)


def estimate_gmm(
    data: StarPanel,
    W: WeightMatrix,
    proj: Projector | None = None,
    *,
    start=None,
    instruments: str = "backward",
    sys: MomentSystem | None = None,
) -> GmmResult:
    """Two-step optimal GMM.

    Parameters
    ----------
    start
        Initial ``(rho, gamma, delta, beta...)``. When omitted, the exact
        transformation-approach QML estimate is used for row-normalized W and
        zeros otherwise.
    """
    if data.T < 2:
        raise ValueError("GMM needs T >= 2")
    if proj is None:
        proj = build_projectors(data.n, data.T)
    if sys is None:
        sys = build_default_moments(data, W, proj, instruments=instruments)
    p = sys.n_params
    bounds = admissible_interval(W)
    if start is None:
        if W.row_normalized:
            from .qml import estimate_qml

            try:
                q = estimate_qml(data, W, "transformed", variance=False)
                start = np.concatenate([[q.theta_hat.rho], q.theta_hat.eta])
            except Exception:  # noqa: BLE001 - any failure just falls back to zeros
                start = np.zeros(p)
        else:
            start = np.zeros(p)
    start = np.asarray(start, dtype=float)

    A1 = np.eye(sys.n_moments)
    th1, _f1, conv1, it1 = _minimize(start, sys, A1, bounds)
    Om, _ = weight_matrix_estimate(sys.residuals(th1), sys)
    fallback = False
    try:
        A2 = _regularized_inverse(Om)
    except np.linalg.LinAlgError:
        warnings.warn("moment covariance not PSD; keeping step-1 weights", WeightingFallbackWarning)
        A2, fallback = A1, True
    f_start = _objective(th1, sys, A2)
    th2, f2, conv2, it2 = _minimize(th1, sys, A2, bounds)
    lo, hi = bounds
    if th2[0] - lo < 1e-5 or hi - th2[0] < 1e-5:
        raise BoundarySolutionError(f"GMM estimate of rho on the boundary ({th2[0]:.6f})")

    e = sys.residuals(th2)
    Om2, (m2, _, _) = weight_matrix_estimate(e, sys)
    try:
        Om2_inv = A2 if fallback else _regularized_inverse(Om2)
        V = gmm_variance(th2, sys, Om2_inv)
        se = np.sqrt(np.clip(np.diag(V), 0, None))
    except (SingularInformationError, np.linalg.LinAlgError):
        V = np.full((p, p), np.nan)
        se = np.full(p, np.nan)
    J = float(sys.N * f2)
    return GmmResult(
        theta_hat=GmmParam.from_array(th2),
        sigma2_hat=float(m2),
        variance=V,
        std_errors=se,
        J_stat=J,
        steps=2,
        converged=bool(conv1 and conv2),
        regime="finite_T" if data.T <= LARGE_T else "large_T",
        iterations=(it1, it2),
        objective=(f_start, f2),
        weighting_fallback=fallback,
        step1_theta=th1,
        df=sys.n_moments - p,
    )
