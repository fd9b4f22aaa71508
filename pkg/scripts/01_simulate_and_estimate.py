# %% [markdown]
# Simulate one panel of the benchmark design M1 on a 7 x 7 queen lattice and
# fit it with the three estimators. All of them work on the log-squared
# outcomes Y* = log Y^2.

# %%
import numpy as np

from spatarch import estimate_gmm, estimate_qml, log_square, model_config, simulate, spectral_radius

cfg = model_config("M1", side=7, T=10, seed=2024)
print("design:", cfg.name, "n =", cfg.n, "T =", cfg.T)
print("spectral radius of the lag operator:", round(spectral_radius(cfg.W, cfg.rho0, cfg.gamma0, cfg.delta0), 4))

panel, effects = simulate(cfg, replication=0)
data = log_square(panel)
# the log-chi2 mean -1.270 is amplified by the space-time lag polynomial
print("Y* mean", data.Ystar.mean().round(3), "vs", round(-1.2704 / (1 - cfg.rho0 - cfg.gamma0 - cfg.delta0), 3))

# %% [markdown]
# Transformed QML removes both effects by orthogonal projections. Direct QML
# concentrates out unit (and here no time) dummies. GMM uses quadratic and
# linear moments after the same projections.

# %%
fits = {
    "qml_transformed": estimate_qml(data, cfg.W, "transformed"),
    "qml_direct": estimate_qml(data, cfg.W, "direct", time_effects=False),
    "gmm": estimate_gmm(data, cfg.W),
}
truth = dict(cfg.theta0)
print(f"{'':>16}" + "".join(f"{p:>10}" for p in ("rho", "gamma", "delta", "beta0", "beta1")))
print(f"{'truth':>16}" + "".join(f"{truth[p]:10.3f}" for p in ("rho", "gamma", "delta", "beta0", "beta1")))
for name, r in fits.items():
    est = r.theta_hat.as_dict()
    print(f"{name:>16}" + "".join(f"{est[p]:10.3f}" for p in ("rho", "gamma", "delta", "beta0", "beta1")))

# %%
# standard errors: sandwich for QML, (G' Omega^-1 G)^-1 / N for GMM
g = fits["gmm"]
print("gmm J =", round(g.J_stat, 2), "on", g.df, "degrees of freedom")
print("gmm s.e.", np.round(g.std_errors, 3))
q = fits["qml_direct"]
print("qml_direct s.e.", {p: round(float(v), 3) for p, v in zip(q.theta_hat.names(), q.std_errors)})
