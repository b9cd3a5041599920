import os
import sys

import numpy as np
import pytest

from relperf.market import config_from_dict, load_config

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(num, passed, detail):
    ACCEPTANCE[num] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def nplayer_dict(thetas, alphas=None, b=0.1, b0=0.2, T=1.0, n_steps=20, seed=7, x0=None, model="constant"):
    N = len(thetas)
    alphas = [1.0] * N if alphas is None else alphas
    x0 = [0.0] * N if x0 is None else x0
    return {
        "mode": "nplayer", "horizon": T, "n_steps": n_steps, "seed": seed, "return_model": model,
        "returns": {"b": b, "b0": b0},
        "players": [{"alpha": a, "theta": t, "x0": x, "type_label": 0} for a, t, x in zip(alphas, thetas, x0)],
    }


def mfg_dict(types, probs=None, b=0.1, b0=0.0, T=1.0, n_steps=20, seed=11, model="constant", **kw):
    d = {
        "mode": "mfg", "horizon": T, "n_steps": n_steps, "seed": seed, "return_model": model,
        "returns": {"b": b, "b0": b0},
        "types": [dict(alpha=a, theta=t, x0=x, type_label=l) for a, t, x, l in types],
    }
    if probs is not None:
        d["probs"] = probs
    d.update(kw)
    return d


@pytest.fixture
def sym3():
    return load_config("sym3")


@pytest.fixture
def make_nplayer():
    return lambda *a, **k: config_from_dict(nplayer_dict(*a, **k))


@pytest.fixture
def make_mfg():
    return lambda *a, **k: config_from_dict(mfg_dict(*a, **k))
