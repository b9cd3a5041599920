import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relperf.bsde_engine import (ConvergenceError, NaNError, Projector, RankDeficientError,
                                 backward_solve, bmo_norm_estimate, brownian_features,
                                 conditional_mean_common, polynomial_basis, regress_conditional)

P, N_STEPS, T = 10_000, 50, 1.0
DT = T / N_STEPS


@pytest.fixture(scope="module")
def brownian():
    rng = np.random.default_rng(123)
    dw = rng.standard_normal((P, N_STEPS)) * math.sqrt(DT)
    w = np.zeros((P, N_STEPS + 1))
    np.cumsum(dw, axis=1, out=w[:, 1:])
    return dw, w, np.linspace(0, T, N_STEPS + 1)


def test_regression_exact_on_polynomials():
    rng = np.random.default_rng(0)
    w = rng.normal(size=500)
    X = polynomial_basis(w, None, 3)
    assert X.shape == (500, 4)
    _, fit = regress_conditional(1 + 2 * w - w ** 3, X, ridge=0.0)
    np.testing.assert_allclose(fit, 1 + 2 * w - w ** 3, atol=1e-9)


def test_basis_two_variables():
    w = np.arange(4.0)
    X = polynomial_basis(w, -w, 2, extra=np.ones((4, 2)))
    assert X.shape == (4, 8)
    np.testing.assert_allclose(X[:, 4], -w * w)


def test_rank_deficient():
    X = np.ones((10, 2))
    with pytest.raises(RankDeficientError):
        Projector(X, ridge=0.0)


def test_linear_oracle(brownian):
    # Y_t = W_T + int_t^T 0.3 Z ds - int Z dW with Z = 1 -> Y_0 = 0.3 T
    dw, w, t = brownian
    sol = backward_solve(w[:, -1], lambda k, y, z, s: 0.3 * z[:, 0], dw, brownian_features(w, None, t), DT,
                         coupled=False)
    se = sol.y0_stderr()[0]
    assert abs(sol.y0[0] - 0.3) <= 3 * se
    # per-step regression noise is about 1/sqrt(P dt); the time average is much tighter
    assert abs(sol.z[0, 0].mean() - 1.0) < 0.03


def test_quadratic_terminal(brownian):
    # Y_t = W_t^2 + T - t, Z_t = 2 W_t
    dw, w, t = brownian
    sol = backward_solve(w[:, -1] ** 2, lambda k, y, z, s: 0.0, dw, brownian_features(w, None, t), DT,
                         coupled=False)
    assert abs(sol.y0[0] - T) <= 3 * sol.y0_stderr()[0]
    err = sol.z[0, 0] - 2 * w[:, :-1]
    assert np.sqrt(np.mean(err[:, 1:] ** 2)) < 0.15


def test_deterministic_merton_value(brownian):
    dw, w, t = brownian
    b = 0.2
    sol = backward_solve(np.zeros(P), lambda k, y, z, s: -(b * z[:, 0] + b * b / 2), dw,
                         brownian_features(w, None, t), DT, coupled=False)
    assert sol.y0[0] == pytest.approx(-0.02, abs=1e-12)
    assert sol.y0_stderr()[0] < 1e-12


def test_implicit_linear_term(brownian):
    dw, w, t = brownian
    sol = backward_solve(np.ones(P), lambda k, y, z, s: 0.0, dw, brownian_features(w, None, t), DT,
                         linear_y=lambda k, s: 0.5, picard=(5, 1e-14))
    assert sol.y0[0] == pytest.approx((1 / (1 - 0.5 * DT)) ** N_STEPS, rel=1e-10)


def test_picard_coupling_converges(brownian):
    # f = 0.3 * frozen z: fixed point equals the linear oracle
    dw, w, t = brownian
    sol = backward_solve(w[:, -1], lambda k, y, z, s: 0.3 * s.z[:, 0, :, k], dw,
                         brownian_features(w, None, t), DT, picard=(20, 1e-10))
    assert sol.converged and sol.picard_iters <= 10
    assert abs(sol.y0[0] - 0.3) <= 3 * sol.y0_stderr()[0]


def test_nonconvergence_raises(brownian):
    dw, w, t = brownian

    def driver(k, y, z, s):
        return s.iteration * np.sin(w[:, k])

    with pytest.raises(ConvergenceError) as exc:
        backward_solve(np.zeros(P), driver, dw, brownian_features(w, None, t), DT, picard=(3, 1e-12))
    assert len(exc.value.residuals) == 3


def test_nan_detection(brownian):
    dw, w, t = brownian
    with pytest.raises(NaNError) as exc:
        backward_solve(np.zeros(P), lambda k, y, z, s: np.where(k == 7, np.nan, 0.0), dw,
                       brownian_features(w, None, t), DT, coupled=False)
    assert exc.value.step == 7
    with pytest.raises(NaNError):
        backward_solve(np.full(P, np.inf), lambda *a: 0.0, dw, brownian_features(w, None, t), DT)


def test_conditional_mean_common():
    v = np.arange(12.0).reshape(2, 2, 3)
    np.testing.assert_allclose(conditional_mean_common(v), v.mean(axis=-1))
    with pytest.raises(ValueError):
        conditional_mean_common(np.zeros((3, 0)))


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.floats(0.1, 3.0), st.integers(0, 10 ** 6))
def test_bmo_proxy_below_sup_bound(n, T_, seed):
    rng = np.random.default_rng(seed)
    z = rng.uniform(-2, 2, size=(5, n))
    assert bmo_norm_estimate(z, T_ / n) <= np.max(np.abs(z)) * math.sqrt(T_) + 1e-12


def test_bmo_multi_driver():
    z = np.ones((2, 3, 10))
    assert bmo_norm_estimate(z, 0.1) == pytest.approx(math.sqrt(2))
