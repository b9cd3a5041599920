"""Sufficient smallness conditions, evaluated literally.

Norm modes:
    analytic   ||f||_BMO <= ||f||_inf sqrt(T) (exact for deterministic f of constant size)
    empirical  grid proxy ``bsde_engine.bmo_norm_estimate`` of the deterministic return grids

Condition ids: L2.1-i (benchmark), T2.1-i / T2.1-ii (hat system), T3.1-delta (common-noise
MFG horizon), P3.1-delta, P3.2-R, P3.2-theta, T3.2-delta (independent-asset MFG).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .bsde_engine import bmo_norm_estimate
from .market import GameConfig, population_law

NORM_MODES = ("analytic", "empirical")


@dataclass
class Condition:
    id: str
    index: int  # position inside its display
    lhs: float
    rhs: float
    passed: bool
    norm_mode: str
    player: Optional[int] = None
    note: str = ""


@dataclass
class AssumptionReport:
    conditions: list = field(default_factory=list)
    norm_mode: str = "analytic"
    extras: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    def failed_ids(self) -> list:
        return [c.id for c in self.conditions if not c.passed]

    def by_id(self, cid: str) -> list:
        return [c for c in self.conditions if c.id == cid]

    def add(self, cid, index, lhs, rhs, norm_mode, player=None, strict=False, note=""):
        lhs, rhs = float(lhs), float(rhs)
        ok = (lhs < rhs or rhs == math.inf) if strict else lhs <= rhs
        self.conditions.append(Condition(cid, index, lhs, rhs, bool(ok), norm_mode, player, note))

    def merge(self, other: "AssumptionReport") -> "AssumptionReport":
        self.conditions.extend(other.conditions)
        self.extras.update(other.extras)
        return self

    def to_dict(self) -> dict:
        out = {"passed": self.passed, "norm_mode": self.norm_mode, "conditions": {}}
        for c in self.conditions:
            out["conditions"].setdefault(c.id, []).append(
                {k: v for k, v in asdict(c).items() if k not in ("id", "norm_mode")})
        out.update(_jsonable(self.extras))
        return out


def _jsonable(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            v = v.item()
        if isinstance(v, float) and math.isinf(v):
            v = "inf"
        out[k] = v
    return out


def _check_mode(norm_mode):
    if norm_mode not in NORM_MODES:
        raise ValueError(f"norm_mode must be one of {NORM_MODES}, got {norm_mode}")


def _norm(grid, config: GameConfig, norm_mode: str) -> np.ndarray:
    """BMO norm of deterministic grids [m, n] row by row."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    if norm_mode == "analytic":
        return np.max(np.abs(grid), axis=1) * math.sqrt(config.T)
    return np.array([bmo_norm_estimate(g[None, :], config.dt) for g in grid])


@dataclass
class _PlayerNorms:
    alpha: np.ndarray
    theta: np.ndarray  # ||theta^i||
    Eth: float
    xbar: np.ndarray
    b: np.ndarray  # ||b^i||_BMO
    b0: np.ndarray
    bbar_sa: np.ndarray  # ||bbar/sqrt(alpha)||_BMO
    b0_a: np.ndarray  # ||b0/alpha||
    b0_sa: np.ndarray  # ||b0/sqrt(alpha)||
    b_a: np.ndarray  # ||b/alpha||
    thb0: np.ndarray  # ||theta b0||


def _player_norms(config: GameConfig, norm_mode: str) -> _PlayerNorms:
    alpha = np.array([p.alpha for p in config.players])
    theta = np.array([p.theta for p in config.players])
    x0 = np.array([p.x0 for p in config.players])
    N = config.N
    b, b0 = config.player_returns()
    law, _ = population_law(config)
    a = alpha[:, None]
    return _PlayerNorms(
        alpha=alpha, theta=theta, Eth=law.mean(law.theta), xbar=(x0.sum() - x0) / (N - 1),
        b=_norm(b, config, norm_mode), b0=_norm(b0, config, norm_mode),
        bbar_sa=_norm(np.sqrt((b ** 2 + b0 ** 2) / a), config, norm_mode),
        b0_a=_norm(b0 / a, config, norm_mode), b0_sa=_norm(b0 / np.sqrt(a), config, norm_mode),
        b_a=_norm(b / a, config, norm_mode), thb0=_norm(theta[:, None] * b0, config, norm_mode),
    )


# ---------------------------------------------------------------------------
# N-player game

def _benchmark_lhs(nm: _PlayerNorms):
    th2 = nm.theta ** 2
    q = th2 / (1.0 - nm.Eth) ** 2
    return [
        (10 * nm.b ** 2, 1 / 8),
        (20 * (1 + q) * nm.b0 ** 2, 1 / 8),
        (2.5 * nm.bbar_sa ** 4, None),
        (40 * q * nm.b0 ** 2 * nm.b0_a ** 2, None),
        (10 * th2 * nm.bbar_sa ** 4, None),
        ((nm.theta * nm.xbar) ** 2, None),
    ]


def default_R_benchmark(config: GameConfig, norm_mode: str = "analytic") -> float:
    """Smallest R for which the R-dependent benchmark conditions hold."""
    nm = _player_norms(config, norm_mode)
    worst = max(float(np.max(l)) for l, r in _benchmark_lhs(nm)[2:])
    return math.sqrt(40.0 / 3.0 * worst) * (1 + 1e-12)


def check_benchmark(config: GameConfig, R: Optional[float] = None, norm_mode: str = "analytic") -> AssumptionReport:
    """The six benchmark inequalities for every player (id L2.1-i)."""
    _check_mode(norm_mode)
    R = default_R_benchmark(config, norm_mode) if R is None else float(R)
    nm = _player_norms(config, norm_mode)
    rep = AssumptionReport(norm_mode=norm_mode, extras={"R": R})
    for idx, (lhs, rhs) in enumerate(_benchmark_lhs(nm)):
        rhs = 3 * R ** 2 / 40 if rhs is None else rhs
        for i in range(config.N):
            rep.add("L2.1-i", idx, lhs[i], rhs, norm_mode, player=i)
    return rep


def b_drift_bound(config: GameConfig, R: float, norm_mode: str = "analytic") -> np.ndarray:
    """Upper bound on ||sqrt|B^{i,N}|||_BMO per player (appendix estimate)."""
    nm = _player_norms(config, norm_mode)
    N = config.N
    th = nm.theta
    Dp = 1.0 - np.sum(th / (N - 1 + th))
    ke = th / (1.0 - nm.Eth)

    def avg_ex(x):
        return (x.sum() - x) / (N - 1)

    avg_b0a = nm.b0_a.mean()
    terms = [
        th * R * avg_ex(nm.b),
        th * nm.b * R,
        2 * th * nm.b0 * R / Dp,
        ke * nm.b0 * R,
        2 * th * nm.b0 / Dp * avg_b0a,
        ke * nm.b0 * nm.b0_a,
        th * R * avg_ex(nm.b0),
        th * nm.b0 * R,
        2 * th / Dp * avg_ex(nm.thb0) * R,
        th ** 2 / (1 - nm.Eth) * nm.b0 * R,
        2 * th / Dp * avg_ex(nm.thb0) * avg_b0a,
        th ** 2 / (1 - nm.Eth) * nm.b0 * nm.b0_a,
        th * avg_ex(nm.bbar_sa ** 2),
        th * nm.bbar_sa ** 2,
        th / (N - 1) * nm.b0_sa ** 2,
        th / (N - 1) ** 2 * avg_ex(th * nm.b0_sa ** 2) * (N - 1),
        th / (N - 1) * nm.b0 * R,
    ]
    return np.sum(terms, axis=0)


def check_multibsde(config: GameConfig, R: Optional[float] = None, norm_mode: str = "analytic",
                    A=None, biN_bmo=None) -> AssumptionReport:
    """The seven hat-system inequalities (T2.1-i) and the A-condition (T2.1-ii).

    ``A`` defaults to ``nplayer.compute_AiN`` fed with ``biN_bmo`` or, when that is
    missing, with the appendix bound on ||sqrt|B|||_BMO.
    """
    from .nplayer import compute_AiN

    _check_mode(norm_mode)
    R = default_R_benchmark(config, norm_mode) if R is None else float(R)
    nm = _player_norms(config, norm_mode)
    N = config.N
    if A is None:
        if biN_bmo is None:
            biN_bmo = b_drift_bound(config, R, norm_mode)
        A = compute_AiN(config, biN_bmo, R, b_over_alpha_bmo=nm.b_a)
    A = np.broadcast_to(np.asarray(A, dtype=float), (N,))
    Amax = float(np.max(A))
    th = nm.theta
    Dp = 1.0 - np.sum(th / (N - 1 + th))

    def avg_ex(x):
        return (x.sum() - x) / (N - 1)

    lhs = [
        20 * nm.b ** 2,
        640 * nm.alpha ** 2 * Amax ** 2,
        20 * th ** 2 * avg_ex(nm.b ** 2),
        20 * nm.b0 ** 2,
        20 * th ** 2 / Dp ** 2 * nm.b0 ** 2,
        20 * th ** 2 * avg_ex(nm.b0 ** 2),
        20 * th ** 2 / Dp ** 2 * avg_ex(nm.thb0) ** 2,
    ]
    rep = AssumptionReport(norm_mode=norm_mode, extras={"R": R, "A": A.copy(), "D_prime": Dp})
    for idx, l in enumerate(lhs):
        for i in range(N):
            rep.add("T2.1-i", idx, l[i], 1 / 20, norm_mode, player=i)
    ii = 40 * nm.alpha ** 2 * (6 * Amax ** 2 + 12 * (2 * Amax ** 2 / (N - 1) + 4 * R ** 2 / (N - 1)
                                                   + 4 / (N - 1) * avg_ex(nm.b_a ** 2)))
    for i in range(N):
        rep.add("T2.1-ii", 0, ii[i], 1 / 20, norm_mode, player=i)
    return rep


# ---------------------------------------------------------------------------
# mean-field games

def _law_sup(config: GameConfig):
    law, _ = population_law(config)
    b, b0 = config.return_grid(list(law.labels))
    th_sup = float(np.max(law.theta)) + config.theta_noise_amp
    return law, b, b0, th_sup


def check_mfg(config: GameConfig, norm_mode: str = "analytic") -> AssumptionReport:
    """Largest admissible step delta* of the common-noise extension argument (T3.1-delta).

    delta* = min over the two inequalities solved for delta, capped at T. Both
    inequalities are reported at delta = delta*.
    """
    _check_mode(norm_mode)
    law, b, b0, th = _law_sup(config)
    Eth = law.mean(law.theta)
    bi = float(np.max(np.abs(b)))
    b0i = float(np.max(np.abs(b0)))
    q = 1 + th ** 2 / (1 - Eth) ** 2
    d1 = math.inf if bi == 0 else 1.0 / (80 * bi ** 2)
    d2 = math.inf if b0i == 0 else 1.0 / (160 * q * b0i ** 2)
    raw = min(d1, d2)
    dstar = min(raw, config.T)
    rep = AssumptionReport(norm_mode="sup", extras={
        "delta_star": dstar, "delta_star_uncapped": raw, "n_intervals": math.ceil(config.T / dstar - 1e-12)})
    rep.add("T3.1-δ", 0, 10 * bi ** 2 * dstar, 1 / 8, "sup")
    rep.add("T3.1-δ", 1, 20 * q * b0i ** 2 * dstar, 1 / 8, "sup")
    return rep


def _g(bi):
    return 4.0 / 3.0 + 16.0 / 3.0 * bi ** 2 * math.exp(4 * bi ** 2)


def default_R_characteristic(config: GameConfig, norm_mode: str = "analytic") -> float:
    law, b, _, _ = _law_sup(config)
    bb = float(np.max(_norm(b, config, norm_mode)))
    return 1.0 if bb == 0 else min(1.0, 1.0 / (4 * bb))


def check_characteristic(config: GameConfig, R: Optional[float] = None, norm_mode: str = "analytic",
                         delta: Optional[float] = None) -> AssumptionReport:
    """R-bound (P3.2-R), theta-bounds (P3.2-theta) and the two delta-bounds (P3.1, T3.2).

    The delta-bounds are strict inequalities; an infinite right side (b = 0) passes.
    ``delta`` defaults to min(1, T).
    """
    _check_mode(norm_mode)
    law, b, _, th = _law_sup(config)
    R = default_R_characteristic(config, norm_mode) if R is None else float(R)
    if not R > 0:
        raise ValueError("R must be positive")
    bb = float(np.max(_norm(b, config, norm_mode)))
    bi = float(np.max(np.abs(b)))
    delta = min(1.0, config.T) if delta is None else float(delta)
    rep = AssumptionReport(norm_mode=norm_mode, extras={"R": R, "delta": delta})
    rep.add("P3.2-R", 0, R, math.inf if bb == 0 else 1.0 / (4 * bb), norm_mode)
    rep.add("P3.2-θ", 0, 8 * (bb + 1) ** 2 * (1 + 2 * bb * math.exp(2 * bb * R) * R) * th ** 2, R ** 2, norm_mode)
    rep.add("P3.2-θ", 1, 8 * (bb + 1) ** 2 * bb * th * math.exp(bb * R), 0.5, norm_mode)
    cap = min(1.0, config.T)
    den = (4.0 / 3.0 * th ** 2 + 16.0 / 3.0 * bi ** 2 * th ** 2 * math.exp(4 * bi ** 2)) * bi ** 2
    p31 = math.inf if den == 0 else 1.0 / den
    rep.add("P3.1-δ", 0, delta, p31, "sup", strict=True)
    rep.add("P3.1-δ", 1, delta, cap, "sup", note="delta <= min(1, T)")
    g = _g(bi)
    d1 = math.inf if bi * R == 0 else 1.0 / (2 * bi ** 2 * R ** 2 * g)
    d2 = math.inf if bi * th == 0 else 1.0 / (2 * bi ** 2 * th ** 2 * g)
    rep.add("T3.2-δ", 0, delta, min(d1, d2), "sup", strict=True)
    rep.add("T3.2-δ", 1, delta, cap, "sup", note="delta <= min(1, T)")
    rep.extras["delta_max_P3.1"] = min(p31, cap)
    rep.extras["delta_max_T3.2"] = min(d1, d2, cap)
    return rep


def check_all(config: GameConfig, R: Optional[float] = None, norm_mode: str = "analytic") -> AssumptionReport:
    """Every condition applicable to the config's mode."""
    rep = AssumptionReport(norm_mode=norm_mode)
    if config.mode == "nplayer":
        rep.merge(check_benchmark(config, R, norm_mode))
        rep.merge(check_multibsde(config, R, norm_mode))
    rep.merge(check_mfg(config, norm_mode))
    rep.merge(check_characteristic(config, None, norm_mode))
    return rep
