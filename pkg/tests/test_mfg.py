import numpy as np
import pytest

from relperf import closed_form as cf
from relperf import mfg
from relperf.bsde_engine import ConvergenceError
from relperf.market import ConfigError, load_config, sample_paths


@pytest.fixture(scope="module")
def fixed_cfg():
    return load_config("mfg-fixed")


@pytest.fixture(scope="module")
def fixed_paths(fixed_cfg):
    return sample_paths(fixed_cfg, 4000, 1)


def test_common_noise_matches_closed_form():
    cfg = load_config("twotype-mfg")
    sol = mfg.solve_mfg_common_noise(cfg, sample_paths(cfg, 300, 10))
    mf = cf.mfg_closed_form(cfg)
    tm = sol.type_means()
    np.testing.assert_allclose(tm["z0"], mf.z0, atol=1e-10)
    np.testing.assert_allclose(tm["z"], 0.0, atol=1e-10)
    np.testing.assert_allclose(tm["y0"], mf.y0, atol=1e-10)
    assert sol.gap <= 1e-6 + 3 * sol.gap_stderr


def test_common_noise_single_type_example(make_mfg):
    cfg = make_mfg([(1.0, 0.5, 0.0, 0)], b=0.0, b0=0.2)
    sol = mfg.solve_mfg_common_noise(cfg, sample_paths(cfg, 100, 5))
    np.testing.assert_allclose(sol.pi0, 0.4, atol=1e-10)


def test_common_noise_theta_zero_is_merton(make_mfg):
    cfg = make_mfg([(2.0, 0.0, 0.0, 0)], b=0.3, b0=0.2)
    sol = mfg.solve_mfg_common_noise(cfg, sample_paths(cfg, 100, 5))
    np.testing.assert_allclose(sol.pi, 0.15, atol=1e-10)
    np.testing.assert_allclose(sol.pi0, 0.1, atol=1e-10)


def test_common_noise_rejects_random_theta(make_mfg):
    cfg = make_mfg([(1.0, 0.2, 0.0, 0)], theta_noise_amp=0.1)
    with pytest.raises(ConfigError):
        mfg.solve_mfg_common_noise(cfg, sample_paths(cfg, 10, 2))


def test_common_noise_gap_error(make_mfg):
    cfg = make_mfg([(1.0, 0.3, 0.0, 0)], b=0.2, b0=0.2)
    with pytest.raises(mfg.MfgConsistencyError) as exc:
        mfg.solve_mfg_common_noise(cfg, sample_paths(cfg, 50, 1), tol=-1.0)
    assert exc.value.gap >= 0


def test_independent_theta_zero_one_step(make_mfg):
    cfg = make_mfg([(1.0, 0.0, 0.0, 0)], b=0.2)
    paths = sample_paths(cfg, 1000, 1)
    sol = mfg.solve_mf_fbsde_independent(cfg, paths, mu0=0.3)
    # no coupling: first update lands on the Merton mean, the second confirms it
    assert len(sol.mu_trace) == 3
    dw, _ = paths.flat()
    assert sol.mu == pytest.approx(np.mean(0.2 * (0.2 + dw.sum(axis=1))), abs=1e-12)


def test_independent_vs_bisection(fixed_cfg, fixed_paths):
    sol = mfg.solve_mf_fbsde_independent(fixed_cfg, fixed_paths, tol=1e-8)
    ref = mfg.bisection_mu(fixed_cfg, fixed_paths, tol=1e-8)
    assert abs(sol.mu - ref) <= 1e-6
    assert sol.ratio < 0.9
    assert sol.gap <= 1e-8


def test_damping_self_consistency(fixed_cfg, fixed_paths):
    a = mfg.solve_mf_fbsde_independent(fixed_cfg, fixed_paths, tol=1e-8)
    b = mfg.solve_mf_fbsde_independent(fixed_cfg, fixed_paths, tol=1e-8, damping=0.5)
    assert abs(a.mu - b.mu) <= 2e-8


def test_divergence_detected():
    # Phi(mu) = -2 mu: ratio 2 with alternating steps, no halving allowed
    with pytest.raises(mfg.MfgDivergenceError, match="time marching"):
        mfg._mu_iterate(lambda m: -2 * m + 1, 0.0, 1.0, 1e-10, 100, auto_damp=False)


def test_auto_damping_rescues_oscillation():
    mu, trace, ratios, d, conv = mfg._mu_iterate(lambda m: -2 * m + 1, 0.0, 1.0, 1e-10, 500)
    assert conv and d < 1.0
    assert mu == pytest.approx(1 / 3, abs=1e-9)


def test_budget_exhausted(fixed_cfg, fixed_paths):
    with pytest.raises(ConvergenceError):
        mfg.solve_mf_fbsde_independent(fixed_cfg, fixed_paths, tol=0.0, max_iter=1)


def test_characteristic_constant():
    cfg = load_config("mfg-char")
    ch = mfg.solve_characteristic_bsde(cfg, sample_paths(cfg, 2000, 1))
    np.testing.assert_allclose(ch.y, 0.1, atol=1e-10)
    np.testing.assert_allclose(ch.z, 0.0, atol=1e-10)
    assert ch.slope[0] == 1.0
    # m = b * 0 = 0, so E[grad X] stays at 1
    np.testing.assert_allclose(ch.slope, 1.0, atol=1e-10)


def test_characteristic_random_theta_terminal_exact():
    cfg = load_config("mfg-char").replace(theta_noise_amp=0.05)
    paths = sample_paths(cfg, 2000, 1)
    ch = mfg.solve_characteristic_bsde(cfg, paths)
    dw, _ = paths.flat()
    w_T = np.cumsum(dw, axis=1)[:, -1]
    np.testing.assert_array_equal(ch.y[0, :, -1], 0.1 + 0.05 * np.tanh(w_T))
    assert ch.converged and ch.residuals[-1] <= 1e-8
    # linear-BSDE representation under the change of measure agrees with the scheme
    assert ch.girsanov["y0"][0] == pytest.approx(ch.y[0, :, 0].mean(), abs=5e-3)


def test_characteristic_slope_matches_finite_difference():
    cfg = load_config("mfg-char").replace(theta_noise_amp=0.05)
    paths = sample_paths(cfg, 3000, 1)
    ch = mfg.solve_characteristic_bsde(cfg, paths)
    h = 1e-3
    a = mfg.solve_mf_fbsde_independent(cfg, paths, tol=1e-12).mu
    b = mfg.solve_mf_fbsde_independent(cfg, paths, tol=1e-12, x_shift=h).mu
    fd = (b - a) / h
    assert abs(ch.slope_T - fd) <= 5e-2 * abs(fd)
    assert ch.slope_T != 1.0


def test_variational_consistency():
    """grad Z = Z^ E[grad X]_{k+1} reproduces the forward mean equation exactly."""
    cfg = load_config("mfg-char").replace(theta_noise_amp=0.05)
    ch = mfg.solve_characteristic_bsde(cfg, sample_paths(cfg, 2000, 1))
    b, _ = cfg.return_grid([0])
    G = ch.slope
    gradZ = ch.z[0] * G[1:]
    rhs = G[:-1] + (b[0] * gradZ).mean(axis=0) * cfg.dt
    np.testing.assert_allclose(G[1:], rhs, atol=1e-12)


def test_march_single_interval_is_direct(fixed_cfg, fixed_paths):
    d = mfg.solve_mf_fbsde_independent(fixed_cfg, fixed_paths, tol=1e-10)
    m = mfg.time_march_global(fixed_cfg, fixed_paths, delta=2.0, tol=1e-10)
    assert m.extras["windows"] == [[0, fixed_cfg.n_steps]]
    assert abs(m.mu - d.mu) <= 2e-10


def test_march_matches_direct(fixed_cfg, fixed_paths):
    d = mfg.solve_mf_fbsde_independent(fixed_cfg, fixed_paths, tol=1e-10)
    m = mfg.time_march_global(fixed_cfg, fixed_paths, delta=0.3, tol=1e-10)
    assert len(m.extras["windows"]) == 4
    assert abs(m.mu - d.mu) <= 2e-8
    assert max(m.extras["secant_gap"]) < 1e-8
    np.testing.assert_allclose(m.z, d.z, atol=1e-8)


def test_march_random_theta_matches_direct():
    cfg = load_config("mfg-char").replace(theta_noise_amp=0.05)
    paths = sample_paths(cfg, 2000, 1)
    d = mfg.solve_mf_fbsde_independent(cfg, paths, tol=1e-12)
    m = mfg.time_march_global(cfg, paths, delta=0.5, tol=1e-12)
    assert abs(m.mu - d.mu) <= 1e-3


def test_march_theta_zero(make_mfg):
    cfg = make_mfg([(1.0, 0.0, 0.0, 0)], b=0.2)
    paths = sample_paths(cfg, 500, 1)
    d = mfg.solve_mf_fbsde_independent(cfg, paths)
    m = mfg.time_march_global(cfg, paths, delta=0.25)
    assert m.mu == pytest.approx(d.mu, abs=1e-12)


def test_march_bad_delta(fixed_cfg, fixed_paths):
    with pytest.raises(ValueError):
        mfg.time_march_global(fixed_cfg, fixed_paths, delta=0.0)
