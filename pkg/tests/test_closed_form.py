import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relperf import closed_form as cf
from relperf.market import ConfigError, load_config


def _oracle_2x2(theta, m):
    # independent elimination: z1 = t1 (z2 + m2), z2 = t2 (z1 + m1)
    t1, t2 = theta
    m1, m2 = m
    z1 = (t1 * m2 + t1 * t2 * m1) / (1 - t1 * t2)
    return np.array([z1, t2 * (z1 + m1)])


def test_hetero2_values():
    cfg = load_config("hetero2")
    z = cf.solve_zi0_linear_system(cfg, 0.0)
    np.testing.assert_allclose(z, _oracle_2x2([0.5, 0.25], [1.0, 1.0]), atol=1e-14)
    # frozen oracle values
    np.testing.assert_allclose(z, [5 / 7, 3 / 7], atol=1e-12)


def test_sym3_values(sym3):
    eq = cf.nplayer_closed_form(sym3)
    np.testing.assert_allclose(eq.z_i0, 0.2, atol=1e-12)
    np.testing.assert_allclose(eq.pi0, 0.4, atol=1e-12)
    np.testing.assert_allclose(eq.pi, 0.1, atol=1e-15)
    np.testing.assert_allclose(eq.z_ij[0, 1], 0.5 / 2 * 0.1)
    assert eq.z_ij[0, 0, 0] == 0.0
    # frozen: -(0.2*0.2 + (0.01 + 0.04)/2 - 0.5*2*0.025^2) + 0.25*2*(0.2*0.2 + 0.05)
    assert eq.y0[0] == pytest.approx(-0.019375, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 16), st.integers(0, 10 ** 6))
def test_linear_system_residual(N, seed):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 0.9, N)
    m = rng.uniform(-1, 1, N)
    z = cf.solve_zi0(theta, m)
    assert cf.zi0_residual(theta, m, z) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10 ** 6))
def test_corrected_explicit_matches_system(N, seed):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0, 0.9, N)
    m = rng.uniform(-1, 1, N)
    np.testing.assert_allclose(cf.explicit_zi0_corrected(theta, m), cf.solve_zi0(theta, m), atol=1e-10)


def test_literal_explicit_formula_differs_for_heterogeneous_theta(make_nplayer):
    cfg = make_nplayer([0.5, 0.25, 0.4], alphas=[1.0, 2.0, 4.0], b0=0.3)
    rep = cf.explicit_formula_crosscheck(cfg)
    assert rep["corrected_agrees"]
    assert not rep["literal_agrees"]


def test_literal_explicit_formula_agrees_for_identical_players(make_nplayer):
    cfg = make_nplayer([0.4] * 4, alphas=[2.0] * 4, b0=0.3)
    rep = cf.explicit_formula_crosscheck(cfg)
    assert rep["literal_agrees"] and rep["corrected_agrees"]


def test_singular_system():
    with pytest.raises(cf.SingularSystemError):
        cf.solve_zi0([1.0, 1.0], [0.1, 0.2])


@pytest.mark.parametrize("N", range(2, 17))
def test_homogeneous_nplayer_equals_mfg(N, make_nplayer, make_mfg):
    eq = cf.nplayer_closed_form(make_nplayer([0.3] * N, alphas=[2.0] * N, b0=0.4))
    mf = cf.mfg_closed_form(make_mfg([(2.0, 0.3, 0.0, 0)], b0=0.4))
    assert np.max(np.abs(eq.pi0 - mf.pi0[0])) <= 1e-12


def test_theta_zero_is_merton(make_nplayer):
    eq = cf.nplayer_closed_form(make_nplayer([0.0, 0.0], alphas=[2.0, 4.0], b=0.3, b0=0.2))
    np.testing.assert_allclose(eq.pi[:, 0], [0.15, 0.075])
    np.testing.assert_allclose(eq.pi0[:, 0], [0.1, 0.05])
    np.testing.assert_allclose(eq.y0, -(0.09 + 0.04) / (2 * np.array([2.0, 4.0])))


def test_mfg_closed_form_fixed_point():
    mf = cf.mfg_closed_form(load_config("twotype-mfg"))
    assert mf.fixed_point_residual() < 1e-14
    np.testing.assert_allclose(mf.z, 0.0)


def test_mfg_single_type_example(make_mfg):
    # theta = 0.5, b0/alpha = 0.2 -> pi0 = 0.2 / (1 - 0.5)
    mf = cf.mfg_closed_form(make_mfg([(1.0, 0.5, 0.0, 0)], b=0.0, b0=0.2))
    np.testing.assert_allclose(mf.pi0, 0.4, atol=1e-14)


def test_mfg_requires_Etheta_below_one(make_mfg):
    with pytest.raises(ConfigError):
        cf.mfg_closed_form(make_mfg([(1.0, 0.5, 0.0, 0)], b0=0.2, theta_noise_amp=0.2))


def test_grid_time_validation(sym3):
    with pytest.raises(ValueError):
        cf.solve_zi0_linear_system(sym3, 0.013)
