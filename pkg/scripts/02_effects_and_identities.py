# %% [markdown]
# Why the estimators ignore fixed effects: the time rotation F_T kills
# anything constant over time (unit effects and the mean of log eps^2), and
# the cross-sectional projector J_n kills anything constant over units
# (time effects).

# %%
import numpy as np

from spatarch import build_lattice_queen, build_projectors, log_det_spatial
from spatarch.panel import apply_FT, cross_demean, helmert_basis

n, T = 25, 6
proj = build_projectors(n, T)
rng = np.random.default_rng(0)
V = rng.standard_normal((n, T))
mu = rng.standard_normal(n)
alpha = rng.standard_normal(T)

shifted = V + mu[:, None] + alpha[None, :] + 3.0
a = cross_demean(apply_FT(V, proj))
b = cross_demean(apply_FT(shifted, proj))
print("max |difference| after both projections:", np.abs(a - b).max())

# %%
# F has orthonormal columns orthogonal to 1, and F F' is the demeaning matrix
F = helmert_basis(T)
print("F'F - I:", np.abs(F.T @ F - np.eye(T - 1)).max())
print("F'1:", np.abs(F.T @ np.ones(T)).max())
print("FF' - J:", np.abs(F @ F.T - (np.eye(T) - 1 / T)).max())

# %% [markdown]
# The Jacobian of the transformed model lives on n - 1 dimensions. For
# row-normalized W the two determinants differ by exactly ln(1 - rho).

# %%
W = build_lattice_queen(5)
Fn = helmert_basis(W.n)
Ms = Fn.T @ W.values @ Fn
for rho in (-0.5, 0.2, 0.8):
    small = np.linalg.slogdet(np.eye(W.n - 1) - rho * Ms)[1]
    print(f"rho={rho:+.1f}  ln|I-rho M*| + ln(1-rho) = {small + np.log(1 - rho):.12f}"
          f"   ln|I-rho M| = {log_det_spatial(W, rho):.12f}")
