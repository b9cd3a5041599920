"""Exact equilibria when returns are deterministic in (t, type).

The linear system for Z^{i0} is authoritative; the displayed explicit formula is
kept as a cross-check together with an index-corrected variant.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .market import ConfigError, GameConfig, population_law


class SingularSystemError(ValueError):
    """The Z^{i0} linear system (or its explicit-formula denominator) is degenerate."""


def _grid_index(config: GameConfig, t) -> int:
    k = int(round(float(t) / config.dt))
    if k < 0 or k > config.n_steps or abs(k * config.dt - float(t)) > 1e-9 * max(1.0, config.T):
        raise ValueError(f"t={t} is not a grid time")
    return min(k, config.n_steps - 1) if k == config.n_steps else k


def _players(config: GameConfig):
    if config.mode != "nplayer":
        raise ConfigError("N-player closed form needs an nplayer config")
    alpha = np.array([p.alpha for p in config.players])
    theta = np.array([p.theta for p in config.players])
    x0 = np.array([p.x0 for p in config.players])
    return alpha, theta, x0


def zi0_matrix(theta) -> np.ndarray:
    """I - diag(theta/(N-1)) (ones - I)."""
    theta = np.asarray(theta, dtype=float)
    N = theta.size
    c = theta / (N - 1)
    return np.eye(N) - c[:, None] * (np.ones((N, N)) - np.eye(N))


def solve_zi0(theta, m) -> np.ndarray:
    """Solve z_i = c_i sum_{j!=i}(z_j + m_j) for one or many right-hand sides.

    Args:
        theta: competition weights [N].
        m: Merton ratios b^{j0}/alpha^j, shape [N] or [N, n_times].

    Raises:
        SingularSystemError: |det| below 1e-10.
    """
    theta = np.asarray(theta, dtype=float)
    m = np.asarray(m, dtype=float)
    N = theta.size
    M = zi0_matrix(theta)
    det = np.linalg.det(M)
    if abs(det) < 1e-10:
        raise SingularSystemError(f"Z^(i0) system is singular (det={det:.3e}) for theta={theta.tolist()}")
    c = theta / (N - 1)
    off = m.sum(axis=0) - m
    rhs = c.reshape((N,) + (1,) * (m.ndim - 1)) * off
    z = np.linalg.solve(M, rhs)
    # one refinement step keeps the residual at rounding level for near-singular profiles
    z = z + np.linalg.solve(M, rhs - M @ z)
    return z


def zi0_residual(theta, m, z) -> float:
    theta = np.asarray(theta, dtype=float)
    N = theta.size
    c = (theta / (N - 1)).reshape((N,) + (1,) * (np.ndim(z) - 1))
    tot = (z + m).sum(axis=0)
    return float(np.max(np.abs(c * (tot - (z + m)) - z)))


def solve_zi0_linear_system(config: GameConfig, t) -> np.ndarray:
    """Z^{.0}(t) from the linear system at grid time ``t``."""
    alpha, theta, _ = _players(config)
    _, b0 = config.player_returns()
    k = _grid_index(config, t)
    return solve_zi0(theta, b0[:, k] / alpha)


def explicit_zi0_corrected(theta, m) -> np.ndarray:
    """Explicit Z^{i0} with the inner sum written as sum_j theta^j b^{j0}/((N-1+theta^j) alpha^j).

    This is the form the linear system implies; see ``explicit_zi0_literal`` for the
    displayed one.

    Raises:
        SingularSystemError: nonpositive denominator.
    """
    theta = np.asarray(theta, dtype=float)
    m = np.asarray(m, dtype=float)
    N = theta.size
    shape = (N,) + (1,) * (m.ndim - 1)
    w = theta / (N - 1 + theta)
    D = 1.0 - w.sum()
    if not D > 0:
        raise SingularSystemError(f"explicit formula denominator {D:.3e} <= 0 for theta={theta.tolist()}")
    msum = m.sum(axis=0)
    inner = (w.reshape(shape) * m).sum(axis=0)
    return w.reshape(shape) * (w.sum() * msum - inner) / D + w.reshape(shape) * (msum - m)


def explicit_zi0_literal(theta, alpha, b0) -> np.ndarray:
    """The displayed explicit formula, term by term (needs alpha and b^{i0} separately)."""
    theta = np.asarray(theta, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    b0 = np.asarray(b0, dtype=float)
    N = theta.size
    shape = (N,) + (1,) * (b0.ndim - 1)
    w = theta / (N - 1 + theta)
    D = 1.0 - w.sum()
    if not D > 0:
        raise SingularSystemError(f"explicit formula denominator {D:.3e} <= 0 for theta={theta.tolist()}")
    m = b0 / alpha.reshape(shape)
    msum = m.sum(axis=0)
    inv = (1.0 / ((N - 1 + theta) * alpha)).sum()
    inner = theta.reshape(shape) * b0 * inv
    return w.reshape(shape) * (w.sum() * msum - inner) / D + w.reshape(shape) * (msum - m)


def explicit_zi0_formula(config: GameConfig, t) -> np.ndarray:
    """Literal displayed explicit formula at grid time ``t``."""
    alpha, theta, _ = _players(config)
    _, b0 = config.player_returns()
    k = _grid_index(config, t)
    return explicit_zi0_literal(theta, alpha, b0[:, k])


def explicit_formula_crosscheck(config: GameConfig) -> dict:
    """Max discrepancies of the literal and corrected explicit formulas vs the linear system."""
    alpha, theta, _ = _players(config)
    _, b0 = config.player_returns()
    m = b0 / alpha[:, None]
    z = solve_zi0(theta, m)
    lit = explicit_zi0_literal(theta, alpha, b0)
    cor = explicit_zi0_corrected(theta, m)
    d_lit = float(np.max(np.abs(lit - z)))
    d_cor = float(np.max(np.abs(cor - z)))
    return {
        "literal_max_abs_diff": d_lit,
        "corrected_max_abs_diff": d_cor,
        "literal_agrees": d_lit <= 1e-10,
        "corrected_agrees": d_cor <= 1e-10,
    }


@dataclass(frozen=True)
class EquilibriumSolution:
    """N-player equilibrium on the left grid points t_0..t_{n-1}."""

    times: np.ndarray  # [n]
    z_ii: np.ndarray  # [N, n]
    z_ij: np.ndarray  # [N, N, n], diagonal zero
    z_i0: np.ndarray  # [N, n]
    b: np.ndarray  # [N, n]
    b0: np.ndarray  # [N, n]
    alpha: np.ndarray
    theta: np.ndarray
    x0: np.ndarray
    y0: np.ndarray  # [N]
    value: np.ndarray  # [N]

    @property
    def N(self) -> int:
        return self.z_ii.shape[0]

    @property
    def pi(self) -> np.ndarray:
        return self.z_ii + self.b / self.alpha[:, None]

    @property
    def pi0(self) -> np.ndarray:
        return self.z_i0 + self.b0 / self.alpha[:, None]


@dataclass(frozen=True)
class MfgEquilibrium:
    """MFG equilibrium per type on the left grid points."""

    times: np.ndarray
    z: np.ndarray  # [n_types, n]
    z0: np.ndarray
    b: np.ndarray
    b0: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    x0: np.ndarray
    probs: np.ndarray
    y0: np.ndarray
    value: np.ndarray

    @property
    def pi(self) -> np.ndarray:
        return self.z + self.b / self.alpha[:, None]

    @property
    def pi0(self) -> np.ndarray:
        return self.z0 + self.b0 / self.alpha[:, None]

    def fixed_point_residual(self) -> float:
        """max |pi0 - theta E[pi0] - b0/alpha| over types and times."""
        Epi0 = self.probs @ self.pi0
        r = self.pi0 - self.theta[:, None] * Epi0[None, :] - self.b0 / self.alpha[:, None]
        return float(np.max(np.abs(r)))


def nplayer_y0(alpha, theta, x0, b, b0, z_ij, z_i0, dt) -> np.ndarray:
    """Y^i_0 of the closed-form solution (left-point time integrals)."""
    N = alpha.size
    c = theta / (N - 1)
    xbar = (x0.sum() - x0) / (N - 1)
    own = z_i0 * b0 + (b ** 2 + b0 ** 2) / (2 * alpha[:, None]) - 0.5 * alpha[:, None] * (z_ij ** 2).sum(axis=1)
    peer = z_i0 * b0 + (b ** 2 + b0 ** 2) / alpha[:, None]
    peer_int = peer.sum(axis=1) * dt
    return theta * xbar + c * (peer_int.sum() - peer_int) - own.sum(axis=1) * dt


def nplayer_closed_form(config: GameConfig) -> EquilibriumSolution:
    """Closed-form N-player equilibrium.

    Raises:
        SingularSystemError: degenerate Z^{i0} system.
    """
    alpha, theta, x0 = _players(config)
    b, b0 = config.player_returns()
    N, n = b.shape
    c = theta / (N - 1)
    z_ij = c[:, None, None] * (b / alpha[:, None])[None, :, :]
    z_ij = z_ij * (1.0 - np.eye(N))[:, :, None]
    z_i0 = solve_zi0(theta, b0 / alpha[:, None])
    y0 = nplayer_y0(alpha, theta, x0, b, b0, z_ij, z_i0, config.dt)
    value = -np.exp(-alpha * (x0 - y0))
    return EquilibriumSolution(
        times=config.times[:-1], z_ii=np.zeros((N, n)), z_ij=z_ij, z_i0=z_i0, b=b, b0=b0,
        alpha=alpha, theta=theta, x0=x0, y0=y0, value=value,
    )


def mfg_closed_form(config: GameConfig) -> MfgEquilibrium:
    """Closed-form MFG equilibrium on the config's type law.

    Raises:
        ConfigError: E[theta] >= 1 or random (path-dependent) theta.
    """
    if config.theta_noise_amp:
        raise ConfigError("closed form needs theta measurable w.r.t. the type only")
    law, _ = population_law(config)
    Eth = law.mean(law.theta)
    if not Eth < 1.0:
        raise ConfigError(f"E[theta] = {Eth} >= 1")
    b, b0 = config.return_grid(list(law.labels))
    a = law.alpha[:, None]
    th = law.theta[:, None]
    p = law.probs
    m_bar = p @ (b0 / a)
    z0 = th / (1.0 - Eth) * m_bar[None, :]
    z = np.zeros_like(z0)
    Ex = law.mean(law.x0)
    E_b2a = p @ (b ** 2 / a)
    E_thb0 = p @ (th * b0)
    E_b02a = p @ (b0 ** 2 / a)
    dt = config.dt
    grow = (E_b2a + E_thb0 / (1.0 - Eth) * m_bar + E_b02a).sum() * dt
    own = (th / (1.0 - Eth) * m_bar[None, :] * b0 + (b ** 2 + b0 ** 2) / (2 * a)).sum(axis=1) * dt
    y0 = law.theta * (Ex + grow) - own
    value = -np.exp(-law.alpha * (law.x0 - y0))
    return MfgEquilibrium(
        times=config.times[:-1], z=z, z0=z0, b=b, b0=b0, alpha=law.alpha, theta=law.theta,
        x0=law.x0, probs=p, y0=y0, value=value,
    )
