import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relperf import assumptions as A
from relperf.market import load_config


def test_benchmark_hand_cases(make_nplayer):
    ok = A.check_benchmark(make_nplayer([0.0, 0.0], b=0.1, b0=0.0), R=1.0)
    c = [x for x in ok.by_id("L2.1-i") if x.index == 0][0]
    assert c.lhs == pytest.approx(0.1, abs=1e-15) and c.rhs == 0.125 and c.passed
    bad = A.check_benchmark(make_nplayer([0.0, 0.0], b=0.5, b0=0.0), R=1.0)
    c = [x for x in bad.by_id("L2.1-i") if x.index == 0][0]
    assert c.lhs == pytest.approx(2.5) and not c.passed


def test_mfg_delta_hand_case(make_mfg):
    cfg = make_mfg([(1.0, 0.5, 0.0, 0)], b=0.0, b0=0.2)
    rep = A.check_mfg(cfg)
    # 1 / (160 (1 + 0.25 / 0.25) 0.04)
    assert rep.extras["delta_star"] == pytest.approx(0.078125, abs=1e-15)
    assert rep.passed


def test_mfg_delta_zero_returns(make_mfg):
    rep = A.check_mfg(make_mfg([(1.0, 0.3, 0.0, 0)], b=0.0, b0=0.0))
    assert rep.extras["delta_star_uncapped"] == math.inf
    assert rep.extras["delta_star"] == 1.0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.01, 1.0))
def test_delta_star_monotone_in_b0(b0a, b0b):
    from conftest import mfg_dict
    from relperf.market import config_from_dict

    lo, hi = sorted((b0a, b0b))
    d_lo = A.check_mfg(config_from_dict(mfg_dict([(1.0, 0.4, 0.0, 0)], b=0.1, b0=lo))).extras["delta_star"]
    d_hi = A.check_mfg(config_from_dict(mfg_dict([(1.0, 0.4, 0.0, 0)], b=0.1, b0=hi))).extras["delta_star"]
    assert d_hi <= d_lo


def test_characteristic_hand_cases(make_mfg):
    rep = A.check_characteristic(make_mfg([(1.0, 0.1, 0.0, 0)], b=0.1), R=1.0)
    r = rep.by_id("P3.2-R")[0]
    assert r.rhs == pytest.approx(2.5) and r.passed
    big = A.check_characteristic(make_mfg([(1.0, 0.9, 0.0, 0)], b=0.1))
    second = [c for c in big.by_id("P3.2-θ") if c.index == 1][0]
    # 8 (1.1)^2 0.1 0.9 exp(0.1)
    assert second.lhs == pytest.approx(8 * 1.21 * 0.09 * math.exp(0.1), rel=1e-12)
    assert not second.passed


def test_zero_parameters_pass_everything():
    rep = A.check_all(load_config("zero"))
    assert rep.passed
    ids = {c.id for c in rep.conditions}
    assert ids == {"L2.1-i", "T2.1-i", "T2.1-ii", "T3.1-δ", "P3.1-δ", "P3.2-R", "P3.2-θ", "T3.2-δ"}


def test_sym3_outside_regime(sym3):
    rep = A.check_benchmark(sym3)
    assert "L2.1-i" in rep.failed_ids()
    c = [x for x in rep.by_id("L2.1-i") if x.index == 1][0]
    # 20 (1 + 0.25 / 0.25) 0.04 = 1.6 > 1/8
    assert c.lhs == pytest.approx(1.6)


def test_default_R_makes_R_conditions_pass(make_nplayer):
    rep = A.check_benchmark(make_nplayer([0.3, 0.6], b=0.01, b0=0.01))
    assert all(c.passed for c in rep.conditions if c.index >= 2)


def test_analytic_mode_deterministic(sym3):
    assert A.check_all(sym3).to_dict() == A.check_all(sym3).to_dict()


def test_report_json_keys(sym3):
    d = A.check_all(sym3).to_dict()
    assert set(d["conditions"]) >= {"L2.1-i", "T2.1-i", "T2.1-ii"}


def test_bad_norm_mode(sym3):
    with pytest.raises(ValueError):
        A.check_benchmark(sym3, norm_mode="weird")


def test_strict_delta_infinite_rhs(make_mfg):
    rep = A.check_characteristic(make_mfg([(1.0, 0.3, 0.0, 0)], b=0.0))
    assert all(c.passed for c in rep.by_id("T3.2-δ"))


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 5), st.integers(0, 10 ** 6))
def test_empirical_proxy_below_analytic(N, seed):
    from conftest import nplayer_dict
    from relperf.market import config_from_dict

    rng = np.random.default_rng(seed)
    d = nplayer_dict(list(rng.uniform(0, 0.9, N)), alphas=list(rng.uniform(0.5, 3, N)),
                     b=float(rng.uniform(0, 0.5)), b0=float(rng.uniform(0, 0.5)), model="sinusoidal",
                     n_steps=int(rng.integers(2, 30)), T=float(rng.uniform(0.2, 2)))
    d["returns"].update(amp_b=float(rng.uniform(0, 0.2)), amp_b0=float(rng.uniform(0, 0.2)))
    cfg = config_from_dict(d)
    a = A._player_norms(cfg, "analytic")
    e = A._player_norms(cfg, "empirical")
    for name in ("b", "b0", "bbar_sa", "b0_a", "b0_sa", "b_a", "thb0"):
        assert np.all(getattr(e, name) <= getattr(a, name) + 1e-12)


def test_multibsde_uses_supplied_A(make_nplayer):
    cfg = make_nplayer([0.0, 0.0], b=0.0, b0=0.0)
    rep = A.check_multibsde(cfg, R=1.0, A=1.0)
    c = [x for x in rep.by_id("T2.1-i") if x.index == 1][0]
    assert c.lhs == pytest.approx(640) and not c.passed
