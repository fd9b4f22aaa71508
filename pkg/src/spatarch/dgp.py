"""Simulation of the dynamic spatiotemporal ARCH process.

The log-squared outcome follows the spatial dynamic panel recursion

    Y*_t = rho W Y*_t + gamma Y*_{t-1} + delta W Y*_{t-1} + X_t beta + mu + alpha_t 1 + eps*_t

with ``eps*_t = log eps_t**2`` and ``eps_t ~ N(0, 1)``. Levels are recovered as
``Y_t = sign(eps_t) * exp(Y*_t / 2)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .exceptions import ParameterSpaceError, StationarityError
from .panel import Panel
from .weights import WeightMatrix, admissible_interval, build_lattice_queen

__all__ = [
    "DgpConfig",
    "TrueEffects",
    "SimulationDraws",
    "make_rng",
    "simulate",
    "simulate_draws",
    "spectral_radius",
    "log_chi2_density",
    "log_chi2_moments",
    "LOG_CHI2_MEAN",
    "LOG_CHI2_VAR",
    "MODELS",
    "model_config",
]

EULER_GAMMA = 0.57721566490153286061
APERY = 1.2020569031595942854

LOG_CHI2_MEAN = -EULER_GAMMA - math.log(2.0)
LOG_CHI2_VAR = math.pi**2 / 2.0
# central moments from the cumulants psi^(r-1)(1/2) of log Gamma(1/2, 2)
LOG_CHI2_M3 = -14.0 * APERY
LOG_CHI2_M4 = math.pi**4 + 3.0 * LOG_CHI2_VAR**2

STREAM_MU, STREAM_ALPHA, STREAM_X, STREAM_EPS = range(4)


def log_chi2_density(x):
    """Density of ``log eps**2`` for standard normal ``eps``; vectorized."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore"):
        out = np.exp(-0.5 * (np.exp(x) - x)) / math.sqrt(2.0 * math.pi)
    return out if out.ndim else float(out)


def log_chi2_moments() -> tuple[float, float, float, float]:
    """(mean, variance, third central moment, fourth central moment)."""
    return LOG_CHI2_MEAN, LOG_CHI2_VAR, LOG_CHI2_M3, LOG_CHI2_M4


@dataclass(frozen=True)
class TrueEffects:
    mu: np.ndarray
    alpha: np.ndarray


@dataclass(frozen=True, eq=False)
class DgpConfig:
    """Parameters of one data-generating process.

    ``seed`` keys a counter-based (Philox) generator together with the
    replication and cell indices passed to :func:`simulate`, so any
    replication can be regenerated independently of the others.
    """

    W: WeightMatrix
    T: int
    rho0: float
    gamma0: float
    delta0: float
    beta0: tuple[float, ...] = (0.5, 1.0)
    sigma_mu: float = 1.0
    use_time_effects: bool = False
    sigma_alpha: float = 1.0
    burn_in: int = 100
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "beta0", tuple(float(b) for b in np.atleast_1d(self.beta0)))
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.burn_in < 0:
            raise ValueError("burn_in must be >= 0")
        if self.sigma_mu < 0 or self.sigma_alpha < 0:
            raise ValueError("effect scales must be non-negative")
        lo, hi = admissible_interval(self.W)
        if not lo < self.rho0 < hi:
            raise ParameterSpaceError(
                f"rho0={self.rho0} outside admissible interval ({lo:.4g}, {hi:.4g})"
            )
        r = spectral_radius(self.W, self.rho0, self.gamma0, self.delta0)
        if not r < 1:
            raise StationarityError(f"spectral radius of the lag operator is {r:.4g} >= 1")

    @property
    def n(self) -> int:
        return self.W.n

    @property
    def k(self) -> int:
        return len(self.beta0)

    @property
    def theta0(self) -> dict[str, float]:
        out = {"rho": self.rho0, "gamma": self.gamma0, "delta": self.delta0}
        out.update({f"beta{j}": b for j, b in enumerate(self.beta0)})
        out["sigma2"] = LOG_CHI2_VAR
        return out

    def with_(self, **kw) -> "DgpConfig":
        return replace(self, **kw)


@dataclass(frozen=True, eq=False)
class SimulationDraws:
    """Everything produced by one simulation, before converting to a Panel."""

    Ystar: np.ndarray  # n x (T+1), period 0 first
    eps: np.ndarray  # n x (T+1) Gaussian draws (signs of the levels)
    eps_star: np.ndarray  # n x (T+1) innovations actually used
    X: np.ndarray  # n x T x k
    effects: TrueEffects = field(repr=False)


def spectral_radius(W: WeightMatrix, rho: float, gamma: float, delta: float) -> float:
    """Spectral radius of ``(I - rho W)^{-1} (gamma I + delta W)``."""
    n = W.n
    A = np.linalg.solve(np.eye(n) - rho * W.values, gamma * np.eye(n) + delta * W.values)
    return float(np.max(np.abs(np.linalg.eigvals(A))))


def make_rng(seed: int, *key: int) -> np.random.Generator:
    """Philox generator keyed by ``(seed, *key)``."""
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def simulate_draws(
    cfg: DgpConfig,
    replication: int = 0,
    cell: int = 0,
    *,
    effects: TrueEffects | None = None,
    eps_star_shift: float = 0.0,
    innovations: str = "log_chi2",
) -> SimulationDraws:
    """Run the recursion and return the latent log process with its draws.

    Parameters
    ----------
    effects
        Replace the drawn fixed effects (the draws are still consumed, so all
        other randomness is unchanged).
    eps_star_shift
        Constant added to every innovation.
    innovations
        ``"log_chi2"`` (the model), ``"gaussian"`` (normal with the log-chi2
        mean and variance) or ``"mean"`` (innovations fixed at their mean).
        The last two are placebo designs for estimator checks.
    """
    n, T, k, B = cfg.n, cfg.T, cfg.k, cfg.burn_in
    L = B + T + 1
    mu = make_rng(cfg.seed, cell, replication, STREAM_MU).standard_normal(n) * cfg.sigma_mu
    alpha_draw = make_rng(cfg.seed, cell, replication, STREAM_ALPHA).standard_normal(T)
    alpha = alpha_draw * cfg.sigma_alpha if cfg.use_time_effects else np.zeros(T)
    X_all = make_rng(cfg.seed, cell, replication, STREAM_X).standard_normal((n, L, k))
    rng_eps = make_rng(cfg.seed, cell, replication, STREAM_EPS)
    eps = rng_eps.standard_normal((n, L))
    if effects is None:
        effects = TrueEffects(mu, alpha)
    else:
        effects = TrueEffects(np.asarray(effects.mu, float), np.asarray(effects.alpha, float))
    if innovations == "log_chi2":
        eps_star = np.log(np.square(eps))
    elif innovations == "gaussian":
        eps_star = LOG_CHI2_MEAN + math.sqrt(LOG_CHI2_VAR) * rng_eps.standard_normal((n, L))
    elif innovations == "mean":
        eps_star = np.full((n, L), LOG_CHI2_MEAN)
    else:
        raise ValueError(f"unknown innovations {innovations!r}")
    eps_star = eps_star + eps_star_shift

    W = cfg.W.values
    S = np.eye(n) - cfg.rho0 * W
    A = np.linalg.solve(S, cfg.gamma0 * np.eye(n) + cfg.delta0 * W)
    beta = np.asarray(cfg.beta0)
    # time effects are zero during burn-in and at period 0
    alpha_full = np.concatenate([np.zeros(B + 1), effects.alpha])
    shocks = X_all @ beta + effects.mu[:, None] + alpha_full[None, :] + eps_star
    shocks = np.linalg.solve(S, shocks)
    Ys = np.empty((n, L))
    prev = np.zeros(n)
    for s in range(L):
        prev = A @ prev + shocks[:, s]
        Ys[:, s] = prev
    return SimulationDraws(
        Ystar=Ys[:, B:],
        eps=eps[:, B:],
        eps_star=eps_star[:, B:],
        X=X_all[:, B + 1 :, :],
        effects=effects,
    )


def simulate(cfg: DgpConfig, replication: int = 0, cell: int = 0, **kw) -> tuple[Panel, TrueEffects]:
    """Simulate one panel. Keyword arguments go to :func:`simulate_draws`."""
    d = simulate_draws(cfg, replication, cell, **kw)
    levels = np.sign(d.eps) * np.exp(0.5 * d.Ystar)
    return Panel(levels[:, 0], levels[:, 1:], d.X), d.effects


MODELS = {
    "M1": dict(rho0=0.2, gamma0=0.5, delta0=-0.2, beta0=(0.5, 1.0), use_time_effects=False),
    "M2": dict(rho0=0.3, gamma0=0.2, delta0=0.2, beta0=(0.5, 1.0), use_time_effects=False),
    "M3": dict(rho0=0.8, gamma0=0.1, delta0=-0.2, beta0=(0.5, 1.0), use_time_effects=True),
}


def model_config(name: str, side: int, T: int, seed: int = 0, **overrides) -> DgpConfig:
    """One of the three benchmark designs on a ``side x side`` queen lattice."""
    try:
        params = dict(MODELS[name])
    except KeyError:
        raise ValueError(f"unknown model {name!r}; expected one of {sorted(MODELS)}") from None
    params.update(overrides)
    return DgpConfig(W=build_lattice_queen(side), T=T, seed=seed, name=name, **params)
