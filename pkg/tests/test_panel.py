import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from spatarch.exceptions import DegenerateObservationError, InvalidDimensionError
from spatarch.panel import (
    Panel,
    StarPanel,
    apply_FT,
    apply_FT_transpose,
    build_projectors,
    cross_demean,
    helmert_basis,
    log_square,
    read_panel_csv,
    time_demean,
    write_panel_csv,
)
from spatarch.weights import build_lattice_queen, log_det_lu


def test_log_square_examples():
    p = Panel(np.array([1.0, -math.e]), np.array([[1.0, -math.e], [2.0, 0.5]]), np.zeros((2, 2, 1)))
    s = log_square(p)
    assert s.Ystar[0, 0] == 0.0
    assert s.Ystar[0, 1] == pytest.approx(2.0, abs=1e-15)
    assert s.Ystar0[1] == pytest.approx(2.0, abs=1e-15)
    np.testing.assert_array_equal(s.X, p.X)


def test_log_square_zero_names_position():
    Y = np.ones((3, 4))
    Y[1, 2] = 0.0
    with pytest.raises(DegenerateObservationError, match=r"i=2, t=3"):
        log_square(Panel(np.ones(3), Y, np.zeros((3, 4))))
    with pytest.raises(DegenerateObservationError, match=r"i=3, t=0"):
        log_square(Panel(np.array([1.0, 1.0, 0.0]), np.ones((3, 4)), np.zeros((3, 4))))


def test_log_chi2_sample_mean(rng):
    e = rng.standard_normal(10**6)
    s = log_square(Panel(e[:1000], e.reshape(1000, 1000), np.zeros((1000, 1000, 1))))
    assert abs(s.Ystar.mean() + 1.2704) < 0.01


def test_panel_shape_checks():
    with pytest.raises(InvalidDimensionError):
        Panel(np.ones(2), np.ones((3, 4)), np.zeros((3, 4)))
    with pytest.raises(InvalidDimensionError):
        Panel(np.ones(3), np.ones((3, 4)), np.zeros((3, 5, 1)))
    p = Panel(np.ones(3), np.ones((3, 4)), np.zeros((3, 4)))
    assert (p.n, p.T, p.k) == (3, 4, 1)


def test_projector_n2():
    F = build_projectors(2, 2).Fn
    assert F.shape == (2, 1)
    np.testing.assert_allclose(np.abs(F[:, 0]), [1 / math.sqrt(2)] * 2)
    assert F[0, 0] == -F[1, 0]


@pytest.mark.parametrize("m", [2, 3, 5, 10, 25, 49, 81])
def test_helmert_properties(m):
    F = helmert_basis(m)
    J = np.eye(m) - 1.0 / m
    assert np.max(np.abs(F.T @ F - np.eye(m - 1))) < 1e-12
    assert np.max(np.abs(F.T @ np.ones(m))) < 1e-12
    assert np.max(np.abs(F @ F.T - J)) < 1e-12


def test_projector_rejects_small():
    with pytest.raises(InvalidDimensionError):
        build_projectors(1, 5)
    with pytest.raises(InvalidDimensionError):
        build_projectors(5, 1)


def test_time_demean_examples(rng):
    np.testing.assert_array_equal(time_demean(np.full((3, 4), 2.5)), 0.0)
    np.testing.assert_allclose(time_demean(np.array([[1.0, 2.0, 3.0]])), [[-1.0, 0.0, 1.0]])
    V = rng.standard_normal((25, 10))
    assert np.max(np.abs(time_demean(V).sum(axis=1))) < 1e-12
    with pytest.raises(InvalidDimensionError):
        time_demean(np.ones((3, 1)))


def test_cross_demean_is_Jn(rng):
    V = rng.standard_normal((7, 4))
    J = build_projectors(7, 4).Jn
    np.testing.assert_allclose(cross_demean(V), J @ V, atol=1e-14)


def test_apply_FT_examples(rng):
    proj = build_projectors(6, 8)
    np.testing.assert_allclose(apply_FT(3.7 * np.ones((6, 8)), proj), 0.0, atol=1e-13)
    V = rng.standard_normal((6, 8))
    out = apply_FT(V, proj)
    assert out.shape == (6, 7)
    np.testing.assert_allclose(out.T @ out, proj.FT.T @ (V.T @ V) @ proj.FT, atol=1e-12)
    assert np.sum(out**2) == pytest.approx(np.sum(time_demean(V) ** 2), rel=1e-12)
    np.testing.assert_allclose(apply_FT_transpose(out, proj), time_demean(V), atol=1e-10)
    X = rng.standard_normal((6, 8, 3))
    np.testing.assert_allclose(apply_FT(X, proj)[:, :, 1], apply_FT(X[:, :, 1], proj), atol=1e-14)
    with pytest.raises(InvalidDimensionError):
        apply_FT(rng.standard_normal((6, 5)), proj)


@pytest.mark.parametrize("side", [5, 7, 9])
def test_transformed_determinant_identity(side, rng):
    W = build_lattice_queen(side)
    Fn = build_projectors(W.n, 2).Fn
    Ms = Fn.T @ W.values @ Fn
    for rho in rng.uniform(-0.99, 0.99, 20):
        lhs = np.linalg.slogdet(np.eye(W.n - 1) - rho * Ms)[1] + math.log(1 - rho)
        assert lhs == pytest.approx(log_det_lu(W, rho), abs=1e-8)


def test_subpanel_periods():
    Y0 = np.array([0.0, 1.0])
    Y = np.arange(1.0, 13.0).reshape(2, 6)
    X = np.arange(12.0).reshape(2, 6, 1)
    s = StarPanel(Y0, Y, X)
    lo, hi = s.subpanel(0, 3), s.subpanel(3, 6)
    np.testing.assert_array_equal(lo.Ystar0, Y0)
    np.testing.assert_array_equal(hi.Ystar0, Y[:, 2])
    np.testing.assert_array_equal(hi.Ystar, Y[:, 3:])
    np.testing.assert_array_equal(hi.X, X[:, 3:])
    np.testing.assert_array_equal(s.lagged[:, 1:], Y[:, :-1])


def test_panel_csv_round_trip(tmp_path, rng):
    p = Panel(rng.standard_normal(4), rng.standard_normal((4, 3)) * 1e-7, rng.standard_normal((4, 3, 2)))
    f = tmp_path / "panel.csv"
    write_panel_csv(p, f)
    first = f.read_text().splitlines()
    assert first[0] == "i,t,y,x1,x2"
    assert first[1].startswith("1,0,") and first[1].endswith(",,")
    q = read_panel_csv(f)
    for a in ("Y0", "Y", "X"):
        np.testing.assert_array_equal(getattr(p, a), getattr(q, a))
    assert p.digest() == q.digest()


def test_panel_csv_errors(tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("a,b,c\n")
    with pytest.raises(ValueError, match="header"):
        read_panel_csv(f)
    f.write_text("i,t,y,x1\n1,0,1.0,\n1,1,2.0,0.5\n2,0,1.0,\n")
    with pytest.raises(ValueError, match="unbalanced"):
        read_panel_csv(f)


@settings(max_examples=50, deadline=None)
@given(
    st.integers(2, 12),
    st.integers(2, 9),
    st.data(),
)
def test_quadratic_form_identity_property(n, T, data):
    U = data.draw(arrays(np.float64, (n, T), elements=st.floats(-1e3, 1e3)))
    Fn = build_projectors(n, T).Fn
    lhs = np.sum((Fn.T @ U) ** 2)
    rhs = np.sum(U * cross_demean(U))
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-6)
