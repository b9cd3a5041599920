"""N-player pipeline: benchmark BSDEs, hat system, and the map back to the FBSDE.

Notation: c_i = theta^i/(N-1), m_j = b^{j0}/alpha^j, S(v) = sum_k v_k/(1+c_k) and
D = 1 - sum_k theta^k/(N-1+theta^k). Equations are written as dY = F dt + Z dW, so
the backward solver receives the driver -F.

Path layout: one block per joint sample of (W^1..W^N, W^0); player j owns the
idiosyncratic copy j, so bundles carry K = N copies.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .bsde_engine import backward_solve, bmo_norm_estimate, polynomial_basis
from .closed_form import EquilibriumSolution
from .cmf import CmfSolution, solve_cmf
from .market import GameConfig, PathBundle, population_law


def _params(config: GameConfig):
    alpha = np.array([p.alpha for p in config.players])
    theta = np.array([p.theta for p in config.players])
    x0 = np.array([p.x0 for p in config.players])
    b, b0 = config.player_returns()
    return alpha, theta, x0, b, b0


def _check_bundle(config: GameConfig, paths: PathBundle):
    if paths.K < config.N:
        raise ValueError(f"need K >= N = {config.N} idiosyncratic copies per block, got {paths.K}")
    if paths.n_steps != config.n_steps:
        raise ValueError(f"bundle has {paths.n_steps} steps, config has {config.n_steps}")


# ---------------------------------------------------------------------------
# algebra of the transformations

def _shape(N, ndim):
    return (N,) + (1,) * (ndim - 1)


def f_iN(zt0, theta, m):
    """Z^{.0} from Z~^{.0}: the map f_{i,N} for all i at once.

    Args:
        zt0: Z~^{.0}, shape [N, ...].
        theta: [N].
        m: b^{j0}/alpha^j, broadcastable to zt0.
    """
    zt0 = np.asarray(zt0, dtype=float)
    N = theta.size
    sh = _shape(N, zt0.ndim)
    c = (theta / (N - 1)).reshape(sh)
    D = 1.0 - np.sum(theta / (N - 1 + theta))
    m = np.broadcast_to(m, zt0.shape)
    Sz = (zt0 / (1 + c)).sum(axis=0)
    Sm = (m / (1 + c)).sum(axis=0)
    return (zt0 + c * Sz / D + c * Sm / D - c * m) / (1 + c)


def to_tilde(theta, alpha, b, b0, Zii, Zij, Zi0):
    """Original (Z^{ii}, Z^{ij}, Z^{i0}) -> tilde variables.

    Zii, Zi0: [N, ...]; Zij: [N, N, ...] (diagonal ignored); b, b0 broadcastable to Zii.
    """
    N = theta.size
    sh = _shape(N, np.ndim(Zii))
    c = (theta / (N - 1)).reshape(sh)
    a = alpha.reshape(sh)
    off = (1.0 - np.eye(N)).reshape((N, N) + (1,) * (np.ndim(Zii) - 1))
    pj = Zii + b / a  # Z^{jj} + b^j/alpha^j
    Zt_ij = (Zij - c[:, None] * pj[None, :]) * off
    C = Zi0 + b0 / a
    Zt_i0 = Zi0 - c * (C.sum(axis=0) - C)
    return Zii.copy(), Zt_ij, Zt_i0


def from_tilde(theta, alpha, b, b0, Zt_ii, Zt_ij, Zt_i0):
    """Inverse of ``to_tilde`` (Z^{i0} through f_{i,N})."""
    N = theta.size
    sh = _shape(N, np.ndim(Zt_ii))
    c = (theta / (N - 1)).reshape(sh)
    a = alpha.reshape(sh)
    off = (1.0 - np.eye(N)).reshape((N, N) + (1,) * (np.ndim(Zt_ii) - 1))
    Zij = (Zt_ij + c[:, None] * (Zt_ii + b / a)[None, :]) * off
    Zi0 = f_iN(Zt_i0, theta, np.broadcast_to(b0 / a, np.shape(Zt_i0)))
    return Zt_ii.copy(), Zij, Zi0


def to_hat(Zt_ii, Zt_i0, zb, zb0):
    """Tilde -> hat shift by the benchmark (Z~^{ij} is unchanged)."""
    return Zt_ii - zb, Zt_i0 - zb0


def from_hat(Zh_ii, Zh_i0, zb, zb0):
    return Zh_ii + zb, Zh_i0 + zb0


# ---------------------------------------------------------------------------
# benchmark

@dataclass
class BenchmarkSolution:
    """Benchmark solution of each player along its own copy; arrays [N, B, ...]."""

    y: np.ndarray  # [N, B, n+1]
    z: np.ndarray  # [N, B, n]
    z0: np.ndarray  # [N, B, n]
    Ez0: np.ndarray  # [B, n]
    Ebz: np.ndarray
    Eb0z0: np.ndarray
    Em: np.ndarray  # [n]
    Eth: float
    Ethb0: np.ndarray  # [n]
    Eb2a: np.ndarray  # [n]
    terminal: np.ndarray  # [N]
    R: float
    bound_lhs: np.ndarray  # empirical ||y||_inf^2 + bmo(z)^2 + bmo(z0)^2 per player
    picard_iters: int
    picard_residuals: list
    assumptions: Optional[dict] = None
    outside_proven_regime: bool = False
    raw: Optional[CmfSolution] = field(default=None, repr=False)

    @property
    def bound_ok(self) -> np.ndarray:
        return self.bound_lhs <= self.R ** 2


def _smallness(check, config, R, norm_mode="analytic"):
    rep = check(config, R=R, norm_mode=norm_mode)
    if not rep.passed:
        warnings.warn(
            f"smallness conditions {sorted(set(rep.failed_ids()))} fail; results are outside the proven regime",
            RuntimeWarning, stacklevel=3)
    return rep


def solve_benchmark(config: GameConfig, paths: PathBundle, R: Optional[float] = None,
                    picard=(50, 1e-10), ridge=1e-8, degree=2, check=True) -> BenchmarkSolution:
    """Benchmark conditional mean-field BSDEs for all players.

    Every atom of the population law is solved on every copy; player i reads the
    solution of its own atom along copy i. The terminal value theta^i xbar^{-i} is a
    constant, so the atoms are solved with terminal 0 and shifted afterwards.

    Raises:
        ConvergenceError: Picard non-convergence.
    """
    from . import assumptions

    _check_bundle(config, paths)
    alpha, theta, x0, _, _ = _params(config)
    N = config.N
    law, atom_of = population_law(config)
    b_at, b0_at = config.return_grid(list(law.labels))
    if R is None:
        R = assumptions.default_R_benchmark(config)
    rep = _smallness(assumptions.check_benchmark, config, R) if check else None
    raw = solve_cmf(law, b_at, b0_at, paths, config.times, np.zeros(law.n_atoms),
                    picard=picard, ridge=ridge, degree=degree)
    xbar = (x0.sum() - x0) / (N - 1)
    shift = theta * xbar
    idx = np.arange(N)
    y = raw.y[atom_of, :, idx, :] + shift[:, None, None]
    z = raw.z[atom_of, :, idx, :]
    z0 = raw.z0[atom_of, :, idx, :]
    p = law.probs
    Ethb0 = p @ (law.theta[:, None] * b0_at)
    Eb2a = p @ ((b_at ** 2 + b0_at ** 2) / law.alpha[:, None])
    lhs = np.array([
        np.max(np.abs(y[i])) ** 2 + bmo_norm_estimate(z[i], config.dt) ** 2
        + bmo_norm_estimate(z0[i], config.dt) ** 2 for i in range(N)
    ])
    return BenchmarkSolution(
        y=y, z=z, z0=z0, Ez0=raw.Ez0, Ebz=raw.Ebz, Eb0z0=raw.Eb0z0, Em=raw.Em, Eth=raw.Eth,
        Ethb0=Ethb0, Eb2a=Eb2a, terminal=shift, R=float(R), bound_lhs=lhs,
        picard_iters=raw.picard_iters, picard_residuals=raw.picard_residuals,
        assumptions=None if rep is None else rep.to_dict(),
        outside_proven_regime=bool(rep is not None and not rep.passed), raw=raw,
    )


def benchmark_drift(config: GameConfig, bench: BenchmarkSolution) -> np.ndarray:
    """F of the benchmark equation per player and path, [N, B, n]."""
    alpha, theta, _, b, b0 = _params(config)
    a = alpha[:, None, None]
    th = theta[:, None, None]
    ka = th / (1.0 - bench.Eth)
    bb, bb0 = b[:, None, :], b0[:, None, :]
    return (bb * bench.z + (bb ** 2 + bb0 ** 2) / (2 * a)
            + bb0 * (bench.z0 + ka * bench.Ez0 + ka * bench.Em)
            - th * bench.Eb2a - th * bench.Ebz - th * bench.Eb0z0
            - ka * bench.Ethb0 * bench.Ez0 - ka * bench.Ethb0 * bench.Em)


# ---------------------------------------------------------------------------
# B^{i,N} and A^{i,N}

def compute_BiN(config: GameConfig, bench: BenchmarkSolution, k: Optional[int] = None) -> np.ndarray:
    """B^{i,N} evaluated group by group, shape [N, B, n] (or [N, B] at step ``k``)."""
    alpha, theta, _, b, b0 = _params(config)
    N = config.N
    sh = (N, 1, 1)
    c = (theta / (N - 1)).reshape(sh)
    th = theta.reshape(sh)
    a = alpha.reshape(sh)
    D = 1.0 - np.sum(theta / (N - 1 + theta))
    ka = th / (1.0 - bench.Eth)
    bb, bb0 = b[:, None, :], b0[:, None, :]
    m = bb0 / a
    zb, zb0 = bench.z, bench.z0

    def excl(x):  # sum over j != i
        return x.sum(axis=0, keepdims=True) - x

    Sz = (zb0 / (1 + c)).sum(axis=0)
    Sm = (m / (1 + c)).sum(axis=0)
    g1 = -c * excl(bb * zb) + th * bench.Ebz
    g2 = bb0 * c * Sz / D / (1 + c) - ka * bb0 * bench.Ez0
    g3 = (bb0 * c * Sm / D / (1 + c) - ka * bb0 * bench.Em
          - c * excl(bb0 * zb0 / (1 + c)) + th * bench.Eb0z0)
    g4 = -c * excl(bb0 * c / (1 + c)) * Sz / D + ka * bench.Ethb0 * bench.Ez0
    g5 = -c * excl(bb0 * c / (1 + c)) * Sm / D + ka * bench.Ethb0 * bench.Em
    g6 = th * (-excl((bb ** 2 + bb0 ** 2) / a) / (N - 1) + bench.Eb2a)
    g7 = (-th / ((N - 1) * (1 + c)) * bb0 ** 2 / a
          + th / (N - 1) ** 2 * excl(th * bb0 ** 2 / (a * (1 + c))))
    g8 = -th / (N - 1 + th) * bb0 * zb0
    B = g1 + g2 + g3 + g4 + g5 + g6 + g7 + g8
    B = np.broadcast_to(B, zb.shape).copy()
    return B if k is None else B[:, :, k]


def compute_AiN(config: GameConfig, biN_bmo, R: float, b_over_alpha_bmo=None) -> np.ndarray:
    """A^{i,N} from ||sqrt|B^{i,N}|||_BMO per player.

    ``b_over_alpha_bmo`` defaults to the analytic bound sup|b^j/alpha^j| sqrt(T).
    """
    alpha, theta, _, b, _ = _params(config)
    N = config.N
    biN_bmo = np.broadcast_to(np.asarray(biN_bmo, dtype=float), (N,))
    if b_over_alpha_bmo is None:
        b_over_alpha_bmo = np.max(np.abs(b), axis=1) / alpha * math.sqrt(config.T)
    ba2 = np.asarray(b_over_alpha_bmo, dtype=float) ** 2
    avg = (ba2.sum() - ba2) / (N - 1)
    inner = (20 * biN_bmo ** 2 + 640 * alpha ** 2 * theta ** 4 * R ** 4 / (N - 1) ** 2
             + 80 * alpha ** 2 * theta ** 4 * avg ** 2 / (N - 1) ** 2)
    return np.sqrt(2 * inner)


# ---------------------------------------------------------------------------
# hat system

@dataclass
class HatSolution:
    """Hat system on [N comps, N+1 drivers (W^1..W^N, W^0), B paths, n steps].

    z[i, i] = Z^^{ii}, z[i, j] = Z~^{ij} (j != i), z[i, N] = Z^^{i0}.
    """

    y: np.ndarray  # [N, B, n+1]
    z: np.ndarray
    B: np.ndarray  # [N, B, n]
    A: np.ndarray  # [N]
    bound_lhs: np.ndarray  # [N] empirical left side of the hat estimate
    picard_iters: int
    picard_residuals: list
    converged: bool
    y0_stderr: np.ndarray

    @property
    def bound_ok(self) -> np.ndarray:
        return self.bound_lhs <= np.max(self.A) ** 2


def _hat_dW(paths: PathBundle, N: int) -> np.ndarray:
    dW = np.empty((N + 1, paths.n_blocks, paths.n_steps))
    dW[:N] = np.moveaxis(paths.idio_increments[:, :N, :], 1, 0)
    dW[N] = paths.common_increments
    return dW


def _hat_features(paths: PathBundle, N: int, times, degree):
    dW = _hat_dW(paths, N)
    W = np.zeros(dW.shape[:2] + (dW.shape[2] + 1,))
    np.cumsum(dW, axis=2, out=W[:, :, 1:])

    def feats(k):
        P = W.shape[1]
        if times[k] <= 0:
            return np.ones((P, 1))
        s = 1.0 / math.sqrt(times[k])
        out = []
        for i in range(N):
            others = np.delete(W[:N, :, k], i, axis=0).T * s
            out.append(polynomial_basis(W[i, :, k] * s, W[N, :, k] * s, degree, extra=others))
        return np.stack(out)

    return feats


def hat_drift(config: GameConfig, bench: BenchmarkSolution, Bmat, z_own, z_frozen, k: int) -> np.ndarray:
    """G1 + G2 + G3 + B of the hat equation at step k, [N, P].

    ``z_own`` supplies row i for player i; other players' entries come from ``z_frozen``.
    Both are [N, N+1, P].
    """
    alpha, theta, _, b, b0 = _params(config)
    N = config.N
    c = theta / (N - 1)
    D = 1.0 - np.sum(theta / (N - 1 + theta))
    bk, b0k = b[:, k], b0[:, k]
    idx = np.arange(N)
    hjj_f = z_frozen[idx, idx]  # [N, P]
    h0_f = z_frozen[:, N]
    zb = bench.z[:, :, k]
    out = np.empty((N, z_own.shape[-1]))
    for i in range(N):
        others = idx != i
        zii = z_own[i, i]
        zi0 = z_own[i, N]
        h0 = h0_f.copy()
        h0[i] = zi0
        Sh = (h0 / (1 + c)[:, None]).sum(axis=0)
        lin = zb[others] + (bk[others] / alpha[others])[:, None] + hjj_f[others]
        quad = ((z_own[i, :N][others] + c[i] * lin) ** 2).sum(axis=0)
        g1 = bk[i] * zii - 0.5 * alpha[i] * quad - c[i] * (bk[others, None] * hjj_f[others]).sum(axis=0)
        g2 = (b0k[i] * zi0 / (1 + c[i]) + theta[i] * b0k[i] / ((1 + c[i]) * (N - 1)) * Sh / D
              - c[i] * ((b0k[others] / (1 + c[others]))[:, None] * h0_f[others]).sum(axis=0))
        g3 = -c[i] * np.sum(b0k[others] * c[others] / (1 + c[others])) * Sh / D
        out[i] = g1 + g2 + g3 + Bmat[i, :, k]
    return out


def tilde_drift(config: GameConfig, Zt_ii, Zt_ij, Zt_i0, k: int) -> np.ndarray:
    """Drift of the tilde system at step k for tilde arrays [N, P] / [N, N, P]."""
    alpha, theta, _, b, b0 = _params(config)
    N = config.N
    c = theta / (N - 1)
    bk, b0k = b[:, k][:, None], b0[:, k][:, None]
    a = alpha[:, None]
    fz = f_iN(Zt_i0, theta, b0k / a)
    off = 1.0 - np.eye(N)
    lin = Zt_ii + bk / a
    quad = (((Zt_ij + c[:, None, None] * lin[None]) ** 2) * off[:, :, None]).sum(axis=1)
    peer = bk * Zt_ii + b0k * fz
    peer_sum = peer.sum(axis=0) - peer
    b2a = (bk ** 2 + b0k ** 2) / a
    b2a_sum = b2a.sum(axis=0) - b2a
    return (bk * Zt_ii + b0k * fz + b2a / 2 - 0.5 * a * quad
            - c[:, None] * peer_sum - c[:, None] * b2a_sum)


def solve_hat_system(config: GameConfig, paths: PathBundle, bench: BenchmarkSolution,
                     picard=(50, 1e-8), ridge=1e-8, degree=2, z_init=None,
                     R: Optional[float] = None, raise_on_fail=True) -> HatSolution:
    """Picard fixed point of the hat system.

    Args:
        z_init: optional warm start [N, N+1, B, n] (e.g. from ``hat_from_closed_form``).

    Raises:
        ConvergenceError: residual above tolerance after the sweep budget.
    """
    _check_bundle(config, paths)
    N, n = config.N, config.n_steps
    dW = _hat_dW(paths, N)
    Bmat = compute_BiN(config, bench)
    R = bench.R if R is None else R

    def driver(k, y_next, zk, state):
        return -hat_drift(config, bench, Bmat, zk, state.z[..., k], k)

    sol = backward_solve(np.zeros((N, paths.n_blocks)), driver, dW,
                         _hat_features(paths, N, config.times, degree), config.dt,
                         picard=picard, ridge=ridge, z_init=z_init, raise_on_fail=raise_on_fail)
    dt = config.dt
    bmoB = np.array([bmo_norm_estimate(np.sqrt(np.abs(Bmat[i])), dt) for i in range(N)])
    A = compute_AiN(config, bmoB, R)
    lhs = np.empty(N)
    for i in range(N):
        others = [j for j in range(N) if j != i]
        lhs[i] = (0.5 * np.max(np.abs(sol.y[i])) ** 2 + bmo_norm_estimate(sol.z[i, i], dt) ** 2
                  + bmo_norm_estimate(sol.z[i, N], dt) ** 2
                  + sum(bmo_norm_estimate(sol.z[i, j], dt) ** 2 for j in others))
    return HatSolution(
        y=sol.y, z=sol.z, B=Bmat, A=A, bound_lhs=lhs, picard_iters=sol.picard_iters,
        picard_residuals=sol.picard_residuals, converged=sol.converged, y0_stderr=sol.y0_stderr(),
    )


# ---------------------------------------------------------------------------
# back to the FBSDE

@dataclass
class FbsdeSolution:
    """Per-player FBSDE paths on [N, B, ...] plus the grid-mean equilibrium."""

    X: np.ndarray  # [N, B, n+1]
    Y: np.ndarray  # [N, B, n+1]
    Zii: np.ndarray  # [N, B, n]
    Zij: np.ndarray  # [N, N, B, n]
    Zi0: np.ndarray  # [N, B, n]
    pi: np.ndarray
    pi0: np.ndarray
    equilibrium: EquilibriumSolution


def untransform(hat: HatSolution, bench: BenchmarkSolution, config: GameConfig,
                paths: PathBundle) -> FbsdeSolution:
    """Hat + benchmark -> tilde -> original variables, then wealth and Y paths."""
    alpha, theta, x0, b, b0 = _params(config)
    N = config.N
    idx = np.arange(N)
    Zt_ii, Zt_i0 = from_hat(hat.z[idx, idx], hat.z[:, N], bench.z, bench.z0)
    Zt_ij = hat.z[:, :N].copy()
    Zt_ij[idx, idx] = 0.0
    bb, bb0 = b[:, None, :], b0[:, None, :]
    Zii, Zij, Zi0 = from_tilde(theta, alpha, bb, bb0, Zt_ii, Zt_ij, Zt_i0)
    a = alpha[:, None, None]
    pi = Zii + bb / a
    pi0 = Zi0 + bb0 / a
    dW = _hat_dW(paths, N)
    X = np.empty((N, paths.n_blocks, config.n_steps + 1))
    for i in range(N):
        X[i] = kernels.euler_wealth(x0[i], pi[i], pi0[i], b[i], b0[i], dW[i], dW[N], config.dt)
    Yt = hat.y + bench.y
    xbar = (x0.sum() - x0) / (N - 1)
    Xbar = (X.sum(axis=0)[None] - X) / (N - 1)
    Y = Yt + theta[:, None, None] * (Xbar - xbar[:, None, None])
    y0 = Y[:, :, 0].mean(axis=1)
    eq = EquilibriumSolution(
        times=config.times[:-1], z_ii=Zii.mean(axis=1), z_ij=Zij.mean(axis=2), z_i0=Zi0.mean(axis=1),
        b=b, b0=b0, alpha=alpha, theta=theta, x0=x0, y0=y0,
        value=-np.exp(-alpha * (x0 - y0)),
    )
    return FbsdeSolution(X=X, Y=Y, Zii=Zii, Zij=Zij, Zi0=Zi0, pi=pi, pi0=pi0, equilibrium=eq)


def forward_transform(config: GameConfig, bench: BenchmarkSolution, Zii, Zij, Zi0):
    """Original Z arrays -> hat z layout [N, N+1, B, n] (inverse of ``untransform``'s Z map)."""
    alpha, theta, _, b, b0 = _params(config)
    N = config.N
    idx = np.arange(N)
    Zt_ii, Zt_ij, Zt_i0 = to_tilde(theta, alpha, b[:, None, :], b0[:, None, :], Zii, Zij, Zi0)
    Zh_ii, Zh_i0 = to_hat(Zt_ii, Zt_i0, bench.z, bench.z0)
    z = np.empty((N, N + 1) + Zii.shape[1:])
    z[:, :N] = Zt_ij
    z[idx, idx] = Zh_ii
    z[:, N] = Zh_i0
    return z


def hat_from_closed_form(config: GameConfig, bench: BenchmarkSolution, n_blocks: int) -> np.ndarray:
    """Warm start for the hat Picard loop from the deterministic closed form."""
    from .closed_form import nplayer_closed_form

    cf = nplayer_closed_form(config)
    rep = lambda a: np.repeat(a[..., None, :], n_blocks, axis=-2)  # noqa: E731
    return forward_transform(config, bench, rep(cf.z_ii), rep(cf.z_ij), rep(cf.z_i0))


@dataclass
class NPlayerResult:
    bench: BenchmarkSolution
    hat: HatSolution
    fbsde: FbsdeSolution

    @property
    def equilibrium(self) -> EquilibriumSolution:
        return self.fbsde.equilibrium


def solve_nplayer(config: GameConfig, paths: PathBundle, R: Optional[float] = None,
                  picard=(50, 1e-8), ridge=1e-8, degree=2, warm_start=False) -> NPlayerResult:
    """solve_benchmark -> solve_hat_system -> untransform."""
    bench = solve_benchmark(config, paths, R=R, ridge=ridge, degree=degree)
    z_init = hat_from_closed_form(config, bench, paths.n_blocks) if warm_start else None
    hat = solve_hat_system(config, paths, bench, picard=picard, ridge=ridge, degree=degree, z_init=z_init)
    return NPlayerResult(bench, hat, untransform(hat, bench, config, paths))
