"""Nash verification by Monte Carlo, value functions and the N -> infinity study."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .closed_form import EquilibriumSolution, mfg_closed_form, nplayer_closed_form
from .market import GameConfig, PathBundle, PlayerSpec, exp_utility, population_law
from .nplayer import BenchmarkSolution, compute_BiN

EPSILONS = (-0.2, -0.05, 0.05, 0.2)
DIRECTIONS = ("shift_pi", "shift_pi0", "bump", "scale")


def value_function(x0: float, y0: float, alpha: float) -> float:
    """V = -exp(-alpha (x0 - y0)).

    Raises:
        ValueError: alpha <= 0.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    return -math.exp(-alpha * (x0 - y0))


# ---------------------------------------------------------------------------
# wealth under a strategy profile

def _profile_wealth(eq: EquilibriumSolution, paths: PathBundle, dt: float, pi=None, pi0=None,
                    player: Optional[int] = None):
    """Wealth of all players [N, P, n+1]; ``player`` uses (pi, pi0) when given.

    One block is one joint sample; player j trades on idiosyncratic copy j.
    """
    N = eq.N
    if paths.K != N:
        raise ValueError(f"bundle needs K = N = {N} idiosyncratic copies, got {paths.K}")
    dw0 = paths.common_increments
    out = np.empty((N, paths.n_blocks, eq.times.size + 1))
    for j in range(N):
        p, p0 = eq.pi[j], eq.pi0[j]
        if j == player:
            p, p0 = pi, pi0
        out[j] = kernels.euler_wealth(eq.x0[j], p, p0, eq.b[j], eq.b0[j],
                                      paths.idio_increments[:, j, :], dw0, dt)
    return out


def _peer_avg(x, i):
    N = x.shape[0]
    return (x.sum(axis=0) - x[i]) / (N - 1)


# ---------------------------------------------------------------------------
# deviation test

@dataclass
class Perturbation:
    direction: str
    eps: float
    J: float
    diff: float  # J - J*
    stderr: float  # paired stderr of the difference
    improves: bool
    worse: bool


@dataclass
class NashReport:
    player: int
    J: float
    J_stderr: float
    perturbations: list
    drift: "DriftProfile"
    verdict: bool
    degenerate: bool = False
    threshold: float = 3.0
    note: str = "no profitable deviation found in the tested class"

    @property
    def large_all_worse(self) -> bool:
        return all(p.worse for p in self.perturbations if abs(p.eps) >= 0.2 - 1e-12)

    def to_dict(self) -> dict:
        return {
            "player": self.player, "J": self.J, "J_stderr": self.J_stderr,
            "verdict": "pass" if self.verdict else "fail", "degenerate": self.degenerate,
            "large_all_worse": self.large_all_worse, "threshold": self.threshold,
            "note": self.note if self.verdict else "profitable deviation or martingale drift detected",
            "perturbations": [p.__dict__ for p in self.perturbations],
            "drift": self.drift.to_dict(),
        }


def directions(eq: EquilibriumSolution, player: int, T: float):
    """Bounded deterministic directions (d_pi, d_pi0) scaled to unit sup norm; zero ones skipped."""
    n = eq.times.size
    t = eq.times
    one, zero = np.ones(n), np.zeros(n)
    bump = ((t >= 0.4 * T) & (t < 0.6 * T)).astype(float)
    out = {"shift_pi": (one, zero), "shift_pi0": (zero, one), "bump": (bump, bump)}
    s = max(np.max(np.abs(eq.pi[player])), np.max(np.abs(eq.pi0[player])))
    if s > 0:
        out["scale"] = (eq.pi[player] / s, eq.pi0[player] / s)
    return {k: v for k, v in out.items() if np.any(v[0]) or np.any(v[1])}


def _utility(eq, x, i):
    u, n_clamped = exp_utility(x[i, :, -1], _peer_avg(x, i)[:, -1], eq.alpha[i], eq.theta[i],
                               return_clamped=True)
    return u, n_clamped


def nash_deviation_test(config: GameConfig, equilibrium: EquilibriumSolution, player: int,
                        perturbations: Optional[Sequence] = None, paths: Optional[PathBundle] = None,
                        threshold: float = 3.0) -> NashReport:
    """Unilateral deviation test for ``player`` with the opponents at equilibrium.

    Every evaluation reuses the same paths, so differences J(pi* + eps d) - J(pi*) have
    small paired standard errors.

    Args:
        perturbations: iterable of (direction name, eps); defaults to all directions x
            eps in (+-0.05, +-0.2).
        paths: bundle with K = N copies (one block per joint sample).
        threshold: stderr multiple for the verdict.
    """
    if paths is None:
        raise ValueError("paths are required")
    i = player
    dt = config.dt
    dirs = directions(equilibrium, i, config.T)
    if perturbations is None:
        perturbations = [(d, e) for d in DIRECTIONS if d in dirs for e in EPSILONS]
    x = _profile_wealth(equilibrium, paths, dt)
    u0, _ = _utility(equilibrium, x, i)
    P = u0.size
    J0 = float(u0.mean())
    se0 = float(u0.std(ddof=1) / math.sqrt(P))
    rows = []
    degenerate = False
    for name, eps in perturbations:
        if name not in dirs:
            continue
        d, d0 = dirs[name]
        xp = _profile_wealth(equilibrium, paths, dt, equilibrium.pi[i] + eps * d,
                             equilibrium.pi0[i] + eps * d0, player=i)
        u, _ = _utility(equilibrium, xp, i)
        diff = u - u0
        se = float(diff.std(ddof=1) / math.sqrt(P))
        degenerate |= se == 0.0
        J = float(u.mean())
        dm = J - J0
        rows.append(Perturbation(name, float(eps), J, dm, se, bool(dm > threshold * se),
                                 bool(-dm > threshold * se)))
    drift = martingale_check(config, equilibrium, i, paths, threshold=threshold)
    verdict = (not degenerate and not any(r.improves for r in rows)
               and drift.max_dev_se <= threshold and drift.valid)
    return NashReport(i, J0, se0, rows, drift, bool(verdict), bool(degenerate), threshold)


# ---------------------------------------------------------------------------
# martingale check

@dataclass
class DriftProfile:
    times: np.ndarray  # [n+1]
    mean_R: np.ndarray
    stderr: np.ndarray
    R0: float
    max_dev_se: float  # max_t |mean R_t - R_0| / max_t stderr_t
    sub_mean_R: np.ndarray
    sub_drop_se: float  # (R_0 - mean R_T) / stderr_T under the suboptimal strategy
    sub_nonincreasing: bool
    clamped_frac: float
    valid: bool

    def to_dict(self) -> dict:
        return {
            "t": self.times.tolist(), "mean_R": self.mean_R.tolist(), "stderr": self.stderr.tolist(),
            "R0": self.R0, "max_dev_se": self.max_dev_se, "sub_mean_R": self.sub_mean_R.tolist(),
            "sub_drop_se": self.sub_drop_se, "sub_nonincreasing": self.sub_nonincreasing,
            "clamped_frac": self.clamped_frac, "valid": self.valid,
        }


def closed_form_y_paths(config: GameConfig, eq: EquilibriumSolution, x: np.ndarray) -> np.ndarray:
    """Y^i_t = theta^i Xbar^{-i}_t + g_i(t) for the deterministic-coefficient equilibrium.

    g_i(t_k) = sum_{l >= k} (c_i sum_{j != i} peer_j - own_i)(t_l) dt, so Y_T = theta Xbar_T.
    """
    N = eq.N
    a = eq.alpha[:, None]
    c = (eq.theta / (N - 1))[:, None]
    own = eq.z_i0 * eq.b0 + (eq.b ** 2 + eq.b0 ** 2) / (2 * a) - 0.5 * a * (eq.z_ij ** 2).sum(axis=1)
    peer = eq.pi * eq.b + eq.pi0 * eq.b0
    rate = c * (peer.sum(axis=0, keepdims=True) - peer) - own  # [N, n]
    tail = np.zeros((N, rate.shape[1] + 1))
    tail[:, :-1] = np.cumsum(rate[:, ::-1], axis=1)[:, ::-1] * config.dt
    xbar = (x.sum(axis=0, keepdims=True) - x) / (N - 1)
    return eq.theta[:, None, None] * xbar + tail[:, None, :]


def _r_profile(alpha, x, y):
    vals, n = kernels.clamped_neg_exp(-alpha * (x - y))
    return vals, n


def martingale_check(config: GameConfig, equilibrium: EquilibriumSolution, player: int,
                     paths: PathBundle, y_paths: Optional[np.ndarray] = None,
                     x_paths: Optional[np.ndarray] = None, threshold: float = 3.0,
                     sub_shift: float = 0.5) -> DriftProfile:
    """Sample means of R_t = -exp(-alpha (X_t - Y_t)) along the equilibrium.

    ``y_paths``/``x_paths`` ([P, n+1] for ``player``) come from the BSDE solver; the
    closed-form reconstruction is used otherwise. The suboptimal run shifts pi by
    ``sub_shift`` with Y unchanged. More than 1% clamped exponents marks the check invalid.
    """
    i = player
    eq = equilibrium
    x_all = _profile_wealth(eq, paths, config.dt)
    if y_paths is None:
        y = closed_form_y_paths(config, eq, x_all)[i]
    else:
        y = np.asarray(y_paths, dtype=float)
    x = x_all[i] if x_paths is None else np.asarray(x_paths, dtype=float)
    R, n1 = _r_profile(eq.alpha[i], x, y)
    P = R.shape[0]
    mean = R.mean(axis=0)
    se = R.std(axis=0, ddof=1) / math.sqrt(P)
    R0 = float(mean[0])
    scale = float(se.max())
    dev = np.abs(mean - R0)
    max_dev = float(dev.max() / scale) if scale > 0 else (0.0 if dev.max() == 0 else math.inf)
    xs = _profile_wealth(eq, paths, config.dt, eq.pi[i] + sub_shift, eq.pi0[i], player=i)[i]
    Rs, n2 = _r_profile(eq.alpha[i], xs, y)
    smean = Rs.mean(axis=0)
    sse = Rs.std(axis=0, ddof=1) / math.sqrt(P)
    drop = float((R0 - smean[-1]) / sse[-1]) if sse[-1] > 0 else math.inf
    nonincr = bool(np.all(np.diff(smean) <= threshold * np.maximum(sse[1:], sse[:-1])))
    frac = (n1 + n2) / (2.0 * R.size)
    return DriftProfile(config.times, mean, se, R0, max_dev, smean, drop, nonincr, frac, frac <= 0.01)


# ---------------------------------------------------------------------------
# convergence study

@dataclass
class ConvergenceReport:
    N: np.ndarray
    pi_gap: np.ndarray  # grid L2 of (pi, pi0) - MFG, averaged over players
    y0_gap: np.ndarray
    b_energy: np.ndarray  # mean_i E int |B^{i,N}|^2 dt
    slope: float
    method: str = "closed_form"
    extras: dict = field(default_factory=dict)

    @property
    def gap_ratios(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.pi_gap[1:] / self.pi_gap[:-1]

    @property
    def strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.pi_gap) < 0))

    @property
    def b_nonincreasing(self) -> bool:
        return bool(np.all(np.diff(self.b_energy) <= 1e-15 + 1e-12 * self.b_energy[:-1]))

    def to_dict(self) -> dict:
        return {
            "N": self.N.tolist(), "pi_gap": self.pi_gap.tolist(), "y0_gap": self.y0_gap.tolist(),
            "b_energy": self.b_energy.tolist(), "slope": self.slope, "method": self.method,
            "strictly_decreasing": self.strictly_decreasing, "b_nonincreasing": self.b_nonincreasing,
            **self.extras,
        }


def stratified_players(base: GameConfig, N: int):
    """N players with types at the mid-quantiles (j + 1/2)/N of the type law."""
    law, _ = population_law(base)
    cdf = np.cumsum(law.probs)
    q = (np.arange(N) + 0.5) / N
    atoms = np.minimum(np.searchsorted(cdf, q, side="right"), law.n_atoms - 1)
    types = base.types
    return tuple(PlayerSpec(alpha=types[a].alpha, theta=types[a].theta, x0=types[a].x0,
                            type_label=types[a].type_label) for a in atoms), atoms


def deterministic_benchmark(config: GameConfig) -> BenchmarkSolution:
    """Benchmark for deterministic returns: the transformed z and z0 vanish identically."""
    law, atom_of = population_law(config)
    b, b0 = config.return_grid(list(law.labels))
    N, n = config.N, config.n_steps
    p = law.probs
    zeros = np.zeros((N, 1, n))
    zb = np.zeros((1, n))
    return BenchmarkSolution(
        y=np.zeros((N, 1, n + 1)), z=zeros, z0=zeros.copy(), Ez0=zb, Ebz=zb.copy(), Eb0z0=zb.copy(),
        Em=p @ (b0 / law.alpha[:, None]), Eth=float(p @ law.theta),
        Ethb0=p @ (law.theta[:, None] * b0), Eb2a=p @ ((b ** 2 + b0 ** 2) / law.alpha[:, None]),
        terminal=np.zeros(N), R=math.nan, bound_lhs=np.zeros(N), picard_iters=0, picard_residuals=[],
    )


def convergence_study(base_config: GameConfig, N_schedule: Sequence[int], paths=None,
                      method: str = "closed_form", n_blocks: int = 2000) -> ConvergenceReport:
    """N-player vs MFG gaps along an increasing N schedule.

    Players take the type-law mid-quantiles. The closed-form path is exact for
    deterministic returns; ``method="bsde"`` runs the full N-player pipeline on
    ``n_blocks`` joint samples per N (``paths`` may supply a seed override).

    Raises:
        ValueError: schedule not strictly increasing or N < 2.
    """
    from .market import sample_paths

    Ns = np.asarray(list(N_schedule), dtype=int)
    if Ns.size == 0 or np.any(np.diff(Ns) <= 0) or Ns[0] < 2:
        raise ValueError("N schedule must be strictly increasing with N >= 2")
    if not base_config.types:
        raise ValueError("convergence study needs a declared type law")
    mfg = mfg_closed_form(base_config)
    dt = base_config.dt
    pi_gap, y0_gap, benergy = [], [], []
    for N in Ns:
        players, atoms = stratified_players(base_config, int(N))
        cfg = base_config.replace(mode="nplayer", players=players)
        if method == "closed_form":
            eq = nplayer_closed_form(cfg)
            bench = deterministic_benchmark(cfg)
        elif method == "bsde":
            from .nplayer import solve_nplayer

            seed = getattr(paths, "seed", None) if paths is not None else None
            pb = sample_paths(cfg, n_blocks, int(N), seed=seed)
            res = solve_nplayer(cfg, pb)
            eq = res.equilibrium
            bench = res.bench
        else:
            raise ValueError(f"unknown method '{method}'")
        d = (eq.pi - mfg.pi[atoms]) ** 2 + (eq.pi0 - mfg.pi0[atoms]) ** 2
        pi_gap.append(float(np.sqrt(np.mean(d.sum(axis=1) * dt))))
        y0_gap.append(float(np.mean(np.abs(eq.y0 - mfg.y0[atoms]))))
        B = compute_BiN(cfg, bench)
        benergy.append(float(np.mean((B ** 2).sum(axis=-1) * dt)))
    pi_gap = np.array(pi_gap)
    if np.all(pi_gap > 0):
        slope = float(np.polyfit(np.log(Ns), np.log(pi_gap), 1)[0])
    else:
        slope = math.nan
    return ConvergenceReport(Ns, pi_gap, np.array(y0_gap), np.array(benergy), slope, method)
