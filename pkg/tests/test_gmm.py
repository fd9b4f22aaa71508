import math

import numpy as np
import pytest

from conftest import star_panel
from spatarch import gmm as gmm_mod
from spatarch.dgp import TrueEffects, model_config, simulate_draws
from spatarch.exceptions import BoundarySolutionError, DegenerateInstrumentsError
from spatarch.gmm import (
    MomentSystem,
    TransformedData,
    WeightingFallbackWarning,
    build_default_moments,
    estimate_gmm,
    moment_jacobian,
    moment_vector,
    trace_adjusted,
    transform_for_gmm,
    weight_matrix_estimate,
)
from spatarch.panel import StarPanel, build_projectors, cross_demean
from spatarch.weights import WeightMatrix, build_lattice_queen


def star_from_draws(d):
    return StarPanel(d.Ystar[:, 0], d.Ystar[:, 1:], d.X)


def truth(cfg):
    return np.array([cfg.rho0, cfg.gamma0, cfg.delta0, *cfg.beta0])


def test_transform_annihilates_effects():
    cfg = model_config("M3", 5, 6, seed=2)
    base = simulate_draws(cfg, 0)
    e = base.effects
    proj = build_projectors(25, 6)
    ref = transform_for_gmm(star_from_draws(base), proj, cfg.W)
    assert ref.Z.shape == (25, 5, 4)
    for d in (simulate_draws(cfg, 0, effects=TrueEffects(e.mu + 2.5, e.alpha)),
              simulate_draws(cfg, 0, eps_star_shift=-0.8)):
        t = transform_for_gmm(star_from_draws(d), proj, cfg.W)
        for a in ("y", "Wy", "Z"):
            np.testing.assert_allclose(getattr(t, a), getattr(ref, a), atol=1e-10)


def test_trace_condition_on_lattice():
    W = build_lattice_queen(5)
    J = np.eye(25) - 1 / 25
    for P in (W.values, W.values.T @ W.values):
        assert abs(np.trace(J @ trace_adjusted(P) @ J)) < 1e-12


def test_two_cycle_adjustment():
    W = np.array([[0.0, 1.0], [1.0, 0.0]])
    J = np.eye(2) - 0.5
    assert np.trace(J @ W @ J) == pytest.approx(-1.0)
    # the correction divides by n - 1 = 1
    np.testing.assert_allclose(trace_adjusted(W), W + np.eye(2), atol=1e-15)


@pytest.mark.parametrize("instruments", ["levels", "rotated"])
def test_instrument_count_bound(instruments):
    data, cfg, _ = star_panel("M1", 5, 5)
    sys = build_default_moments(data, cfg.W, instruments=instruments)
    assert sys.m == 2
    assert sys.kq <= 3 + 2 * data.k
    np.testing.assert_allclose(sys.Q.sum(axis=0), 0.0, atol=1e-10)


def test_collinear_instruments_are_pruned():
    data, cfg, _ = star_panel("M1", 5, 5)
    X = np.array(data.X)
    X[:, :, 1] = 3.0 * X[:, :, 0] - 1.0
    sys = build_default_moments(StarPanel(data.Ystar0, data.Ystar, X), cfg.W)
    names = set(sys.instrument_names)
    assert sys.kq == 5 and len(names & {"x0", "x1"}) == 1 and len(names & {"W_x0", "W_x1"}) == 1


def test_degenerate_instruments():
    n, T = 9, 5
    Y = np.tile(np.arange(1.0, T + 1), (n, 1))
    with pytest.raises(DegenerateInstrumentsError):
        estimate_gmm(StarPanel(np.zeros(n), Y, np.ones((n, T, 1))), build_lattice_queen(3))


def test_quadratic_moments_ignore_period_constants(rng):
    data, cfg, _ = star_panel("M2", 5, 6)
    sys = build_default_moments(data, cfg.W)
    th = np.array([0.3, 0.4, -0.1, 0.5, 1.0])
    td = sys.data
    shifted = TransformedData(y=td.y + rng.standard_normal(td.periods)[None, :], Wy=td.Wy, Z=td.Z, W=td.W)
    sys2 = MomentSystem(shifted, sys.P_list, sys.Q, sys.instrument_names)
    np.testing.assert_allclose(moment_vector(th, sys2), moment_vector(th, sys), rtol=1e-10, atol=1e-9)


def test_linear_block_at_origin():
    data, cfg, _ = star_panel("M1", 5, 5)
    sys = build_default_moments(data, cfg.W)
    g = moment_vector(np.zeros(sys.n_params), sys)
    expected = np.einsum("ntq,nt->q", sys.Q, cross_demean(sys.data.y))
    np.testing.assert_allclose(g[sys.m:], expected, rtol=1e-12)


def test_population_moments_vanish_at_truth():
    cfg = model_config("M1", 5, 5, seed=77)
    th0 = truth(cfg)
    g = []
    for rep in range(500):
        sys = build_default_moments(star_from_draws(simulate_draws(cfg, rep)), cfg.W)
        g.append(moment_vector(th0, sys))
    g = np.array(g)
    se = g.std(axis=0, ddof=1) / math.sqrt(len(g))
    assert np.all(np.abs(g.mean(axis=0)) < 3 * se)


def test_jacobian_matches_finite_differences(rng):
    data, cfg, _ = star_panel("M3", 5, 6)
    sys = build_default_moments(data, cfg.W)
    h = 1e-6
    for _ in range(50):
        th = np.concatenate([[rng.uniform(-0.9, 0.9)], rng.uniform(-1, 1, sys.n_params - 1)])
        G = moment_jacobian(th, sys)
        E = np.eye(th.size) * h
        fd = np.column_stack([(moment_vector(th + e, sys) - moment_vector(th - e, sys)) / (2 * h) for e in E])
        rel = np.max(np.abs(G - fd)) / np.max(np.abs(fd))
        assert rel < 1e-5


def test_jacobian_structure(rng):
    data, cfg, _ = star_panel("M1", 5, 6)
    sys = build_default_moments(data, cfg.W)
    a, b = rng.uniform(-0.5, 0.5, (2, sys.n_params))
    np.testing.assert_allclose(moment_jacobian(a, sys)[sys.m:], moment_jacobian(b, sys)[sys.m:], rtol=1e-13)
    td = sys.data
    # a system whose outcome is exactly explained has U = 0 at the generating point
    th = np.array([0.3, 0.4, -0.1, 0.5, 1.0])
    y = np.linalg.solve(np.eye(td.n) - th[0] * cfg.W.values, td.Z @ th[1:])
    exact = TransformedData(y=y, Wy=cfg.W.values @ y, Z=td.Z, W=td.W)
    sys0 = MomentSystem(exact, sys.P_list, sys.Q, sys.instrument_names)
    np.testing.assert_allclose(moment_jacobian(th, sys0)[: sys.m], 0.0, atol=1e-9)


def test_gaussian_residuals_have_no_quad_lin_block(rng):
    data, cfg, _ = star_panel("M1", 9, 10)
    sys = build_default_moments(data, cfg.W)
    shape = sys.data.y.shape
    m = sys.m

    def corr(Om):
        d = np.sqrt(np.diag(Om))
        return np.abs(Om / np.outer(d, d))[:m, m:].max()

    Om_g, (_, m3g, _) = weight_matrix_estimate(rng.standard_normal(shape), sys)
    Om_l, (_, m3l, _) = weight_matrix_estimate(np.log(rng.standard_normal(shape) ** 2), sys)
    assert abs(m3g) < 0.3 and m3l < -5
    assert corr(Om_g) < 0.01
    # the block is linear in m3 for a fixed system
    np.testing.assert_allclose(Om_g[:m, m:] / m3g, Om_l[:m, m:] / m3l, rtol=1e-10)


def test_quadratic_variance_matches_brute_force(rng):
    n, periods = 10, 100_000
    J = np.eye(n) - 1 / n
    dummy = np.zeros((n, periods))
    td = TransformedData(y=dummy, Wy=dummy, Z=np.zeros((n, periods, 1)), W=build_lattice_queen(2))
    Q = cross_demean(rng.standard_normal((n, periods)))[:, :, None]
    sys = MomentSystem(td, (J,), Q)
    draws = np.log(rng.standard_normal((n, periods)) ** 2)
    Om, _ = weight_matrix_estimate(draws, sys)
    per_period = Om[0, 0] * sys.N / periods
    U = np.log(rng.standard_normal((100_000, n)) ** 2)
    q = np.einsum("ri,ij,rj->r", U, J, U)
    assert per_period == pytest.approx(q.var(), rel=0.05)


def test_weight_matrix_scaling(rng):
    data, cfg, _ = star_panel("M1", 5, 6)
    sys = build_default_moments(data, cfg.W)
    e = rng.standard_normal(sys.data.y.shape)
    m = sys.m
    A, _ = weight_matrix_estimate(e, sys)
    B, _ = weight_matrix_estimate(2.0 * e, sys)
    np.testing.assert_allclose(B[m:, m:], 4 * A[m:, m:], rtol=1e-12)
    np.testing.assert_allclose(B[:m, :m], 16 * A[:m, :m], rtol=1e-12)


def test_noiseless_limit_recovers_truth():
    cfg = model_config("M2", 5, 6, seed=3)
    d = simulate_draws(cfg, effects=TrueEffects(np.zeros(25), np.zeros(6)), innovations="mean")
    r = estimate_gmm(star_from_draws(d), cfg.W)
    np.testing.assert_allclose(r.theta_hat.as_array(), truth(cfg), atol=1e-6)


def test_step_two_does_not_increase_objective():
    for rep in range(10):
        data, cfg, _ = star_panel("M1", 7, 10, rep=rep)
        r = estimate_gmm(data, cfg.W)
        assert r.objective[1] <= r.objective[0] + 1e-15
        assert r.converged and r.steps == 2
        assert r.regime == "finite_T"
        assert r.df == 2 + 7 - 5


def test_variance_is_psd():
    data, cfg, _ = star_panel("M2", 7, 20)
    r = estimate_gmm(data, cfg.W)
    assert r.regime == "large_T"
    np.testing.assert_allclose(r.variance, r.variance.T, atol=1e-12)
    assert np.min(np.linalg.eigvalsh(r.variance)) >= -1e-10


def test_fixed_effect_immunity():
    cfg = model_config("M3", 7, 8, seed=5)
    base = simulate_draws(cfg, 3)
    e = base.effects
    ref = estimate_gmm(star_from_draws(base), cfg.W).theta_hat.as_array()
    for d in (simulate_draws(cfg, 3, effects=TrueEffects(e.mu * 0 + 4.0, e.alpha)),
              simulate_draws(cfg, 3, effects=TrueEffects(e.mu, e.alpha - 3.0)),
              simulate_draws(cfg, 3, eps_star_shift=2.0)):
        est = estimate_gmm(star_from_draws(d), cfg.W).theta_hat.as_array()
        np.testing.assert_allclose(est, ref, atol=1e-8)


def test_weighting_fallback(monkeypatch):
    data, cfg, _ = star_panel("M1", 5, 6)

    def broken(Om, ridge=0.0):
        raise np.linalg.LinAlgError("not PSD")

    monkeypatch.setattr(gmm_mod, "_regularized_inverse", broken)
    with pytest.warns(WeightingFallbackWarning):
        r = estimate_gmm(data, cfg.W)
    assert r.weighting_fallback


def test_boundary(rng):
    W = build_lattice_queen(5)
    X = rng.standard_normal((25, 6, 2))
    Y = np.linalg.solve(np.eye(25) - 1.2 * W.values, X @ np.array([1.0, -1.0]) + 0.05 * rng.standard_normal((25, 6)))
    with pytest.raises(BoundarySolutionError):
        estimate_gmm(StarPanel(rng.standard_normal(25), Y, X), W)


def test_non_normalized_weights_start_at_zero():
    data, cfg, _ = star_panel("M1", 5, 8)
    A = WeightMatrix(cfg.W.values * 2.0)
    r = estimate_gmm(data, A)
    assert abs(r.theta_hat.rho) < 0.5


def test_j_statistic_mean_matches_degrees_of_freedom():
    cfg = model_config("M1", 7, 10, seed=91)
    J, df = [], None
    for rep in range(1000):
        try:
            r = estimate_gmm(star_from_draws(simulate_draws(cfg, rep)), cfg.W)
        except BoundarySolutionError:
            continue
        J.append(r.J_stat)
        df = r.df
    assert len(J) > 950
    assert np.mean(J) == pytest.approx(df, rel=0.15)


def test_standard_errors_track_replication_spread():
    cfg = model_config("M2", 9, 20, seed=93)
    est, se = [], []
    for rep in range(200):
        r = estimate_gmm(star_from_draws(simulate_draws(cfg, rep)), cfg.W)
        est.append(r.theta_hat.as_array())
        se.append(r.std_errors)
    ratio = np.mean(se, axis=0) / np.std(est, axis=0, ddof=1)
    assert np.all(np.abs(ratio - 1) < 0.25), ratio


def test_variance_scales_with_sample_size():
    def mean_var(side):
        cfg = model_config("M2", side, 10, seed=95)
        return np.mean([estimate_gmm(star_from_draws(simulate_draws(cfg, rep)), cfg.W).variance.diagonal()
                        for rep in range(100)], axis=0)

    # n = 49 -> 196 at fixed T; at n = 25 the rho variance is still inflated
    ratio = mean_var(7) / mean_var(14)
    assert np.all(np.abs(ratio / 4 - 1) < 0.2), ratio
