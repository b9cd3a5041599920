import math

import numpy as np
import pytest

from relperf import closed_form as cf
from relperf import verification as V
from relperf.market import exp_utility, load_config, sample_paths


def test_value_function():
    assert V.value_function(0.3, 0.3, 2.0) == -1.0
    assert V.value_function(1.0, 0.0, 1.0) == pytest.approx(-math.exp(-1))
    with pytest.raises(ValueError):
        V.value_function(0.0, 0.0, 0.0)


@pytest.fixture(scope="module")
def merton():
    cfg = load_config("merton")
    return cfg, cf.nplayer_closed_form(cfg), sample_paths(cfg, 10_000, cfg.N)


def test_value_function_matches_simulation(merton):
    cfg, eq, paths = merton
    x = V._profile_wealth(eq, paths, cfg.dt)
    u = exp_utility(x[0, :, -1], 0.0, eq.alpha[0], 0.0)
    v = V.value_function(eq.x0[0], eq.y0[0], eq.alpha[0])
    assert abs(u.mean() - v) <= 3 * u.std(ddof=1) / math.sqrt(u.size)


def test_merton_nash(merton):
    cfg, eq, paths = merton
    rep = V.nash_deviation_test(cfg, eq, 0, paths=paths)
    assert rep.verdict and rep.large_all_worse
    assert {p.direction for p in rep.perturbations} == set(V.DIRECTIONS)
    assert len(rep.perturbations) == 16


def test_martingale_check_merton(merton):
    cfg, eq, paths = merton
    d = V.martingale_check(cfg, eq, 0, paths)
    assert d.mean_R[0] == d.R0 and d.stderr[0] < 1e-12
    assert d.max_dev_se <= 3
    assert d.sub_drop_se > 3 and d.sub_nonincreasing
    assert d.valid and d.clamped_frac == 0.0


def test_closed_form_y_terminal(merton):
    cfg, eq, paths = merton
    x = V._profile_wealth(eq, paths, cfg.dt)
    y = V.closed_form_y_paths(cfg, eq, x)
    assert np.all(y[:, :, -1] == 0.0)  # theta = 0
    np.testing.assert_allclose(y[:, 0, 0], eq.y0, atol=1e-14)


def test_sym3_y_reconstruction(sym3):
    eq = cf.nplayer_closed_form(sym3)
    paths = sample_paths(sym3, 50, 3)
    x = V._profile_wealth(eq, paths, sym3.dt)
    y = V.closed_form_y_paths(sym3, eq, x)
    assert np.max(np.abs(y[:, :, 0] - eq.y0[:, None])) < 1e-14
    xbar = (x.sum(axis=0) - x) / 2
    np.testing.assert_allclose(y[:, :, -1], 0.5 * xbar[:, :, -1], atol=1e-14)


def test_zero_market():
    cfg = load_config("zero")
    eq = cf.nplayer_closed_form(cfg)
    rep = V.nash_deviation_test(cfg, eq, 1, paths=sample_paths(cfg, 5000, 2))
    # pi* = 0: the scale direction does not exist
    assert "scale" not in {p.direction for p in rep.perturbations}
    assert all(p.diff < 0 for p in rep.perturbations)
    assert rep.verdict and rep.J == -1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_clamping_invalidates(make_nplayer):
    cfg = make_nplayer([0.0, 0.0], alphas=[400.0, 400.0], b=0.0, b0=0.0)
    eq = cf.nplayer_closed_form(cfg)
    eq2 = type(eq)(**{**eq.__dict__, "z_ii": eq.z_ii + 5.0})
    d = V.martingale_check(cfg, eq2, 0, sample_paths(cfg, 500, 2))
    assert not d.valid and d.clamped_frac > 0.01


def test_wrong_bundle(merton):
    cfg, eq, _ = merton
    with pytest.raises(ValueError):
        V.nash_deviation_test(cfg, eq, 0, paths=sample_paths(cfg, 10, 3))


def test_risk_aversion_monotone(merton):
    # the same optimal wealth evaluated with doubled alpha has strictly lower utility
    cfg, eq, paths = merton
    x = V._profile_wealth(eq, paths, cfg.dt)[0, :, -1]
    u1 = exp_utility(x, 0.0, eq.alpha[0], 0.0)
    u2 = exp_utility(x, 0.0, 2 * eq.alpha[0], 0.0)
    diff = u2 - u1
    assert diff.mean() < -3 * diff.std(ddof=1) / math.sqrt(diff.size)


def test_convergence_two_types():
    rep = V.convergence_study(load_config("convergence-suite"), [4, 8, 16, 32])
    assert rep.strictly_decreasing and rep.b_nonincreasing
    assert -1.5 <= rep.slope <= -0.4
    assert np.all(np.diff(rep.y0_gap) < 0)


def test_convergence_homogeneous_zero(make_mfg):
    rep = V.convergence_study(make_mfg([(1.0, 0.4, 0.0, 0)], b0=0.3), [2, 4, 8])
    np.testing.assert_allclose(rep.pi_gap, 0.0, atol=1e-14)
    assert math.isnan(rep.slope)


def test_convergence_theta_zero(make_mfg):
    rep = V.convergence_study(make_mfg([(1.0, 0.0, 0.0, 0), (2.0, 0.0, 0.0, 1)], model="type_dependent",
                                       b=[0.1, 0.2], b0=[0.3, 0.1]), [2, 4])
    np.testing.assert_allclose(rep.pi_gap, 0.0, atol=1e-15)
    np.testing.assert_allclose(rep.b_energy, 0.0, atol=1e-20)


def test_convergence_schedule_validation():
    with pytest.raises(ValueError):
        V.convergence_study(load_config("convergence-suite"), [8, 4])


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_convergence_bsde_path_agrees():
    base = load_config("convergence-suite").replace(n_steps=10)
    a = V.convergence_study(base, [2, 4])
    b = V.convergence_study(base, [2, 4], method="bsde", n_blocks=300)
    np.testing.assert_allclose(b.pi_gap, a.pi_gap, atol=1e-8)
    np.testing.assert_allclose(b.b_energy, a.b_energy, rtol=1e-6, atol=1e-14)


def test_stratified_players():
    players, atoms = V.stratified_players(load_config("convergence-suite"), 6)
    assert list(atoms) == [0, 0, 0, 1, 1, 1]
    assert players[3].alpha == 2.0
