"""Mean-field solvers.

Common noise: the transformed conditional mean-field BSDE (shared with the N-player
benchmark, terminal theta E[X_0]) followed by the map back to (Z, Z0).

Independent assets: for a fixed mean mu the backward equation

    Y_t = theta mu - int_t^T (b Z + b^2/(2 alpha)) ds - int_t^T Z dW

is solved, X is simulated with pi = Z + b/alpha and mu is updated towards E[X_T].
theta may depend on the terminal Brownian state: theta = theta_type + amp tanh(W_T).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import kernels
from .bsde_engine import ConvergenceError, backward_solve, bmo_norm_estimate, polynomial_basis
from .cmf import solve_cmf
from .market import ConfigError, GameConfig, PathBundle, population_law


class MfgConsistencyError(RuntimeError):
    """Fixed-point gap above tolerance."""

    def __init__(self, msg, gap):
        super().__init__(msg)
        self.gap = gap


class MfgDivergenceError(ConvergenceError):
    """mu-iteration ratio stayed >= 1; marching over shorter sub-intervals may help."""


@dataclass
class MfgSolution:
    """Per-type solution grids [A, P, ...] with fixed-point diagnostics."""

    mode: str
    times: np.ndarray
    probs: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    y: np.ndarray  # [A, P, n+1]
    z: np.ndarray  # [A, P, n]
    z0: np.ndarray  # [A, P, n]
    pi: np.ndarray
    pi0: np.ndarray
    x: np.ndarray  # [A, P, n+1]
    mu: float
    gap: float
    gap_stderr: float = 0.0
    mu_trace: list = field(default_factory=list)
    ratios: list = field(default_factory=list)
    converged: bool = True
    damping: float = 1.0
    extras: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        """Largest observed contraction ratio (0 when fewer than two steps were taken)."""
        return max(self.ratios) if self.ratios else 0.0

    def type_means(self) -> dict:
        """Path means per type: y0 [A], z, z0, pi, pi0 [A, n]."""
        return {
            "y0": self.y[:, :, 0].mean(axis=1),
            "z": self.z.mean(axis=1), "z0": self.z0.mean(axis=1),
            "pi": self.pi.mean(axis=1), "pi0": self.pi0.mean(axis=1),
            "y": self.y.mean(axis=1),
        }


def _law(config: GameConfig):
    law, _ = population_law(config)
    b, b0 = config.return_grid(list(law.labels))
    return law, b, b0


# ---------------------------------------------------------------------------
# common noise

def solve_mfg_common_noise(config: GameConfig, paths: PathBundle, tol: float = 1e-6,
                           picard=(50, 1e-10), ridge=1e-8, degree=2) -> MfgSolution:
    """Common-noise MFG through the transformed conditional mean-field BSDE.

    The consistency gap is the block-RMS of E[X_T|F0_T] (copy average) minus the mean
    implied by the backward equation; it carries O(K^{-1/2}) idiosyncratic noise, so
    the check is gap <= tol + 3 * gap_stderr.

    Raises:
        ConfigError: E[theta] >= 1 or path-dependent theta.
        MfgConsistencyError: gap above the tolerance.
    """
    if config.theta_noise_amp:
        raise ConfigError("common-noise solver needs theta measurable w.r.t. the type")
    law, b, b0 = _law(config)
    Eth = law.mean(law.theta)
    if not Eth < 1:
        raise ConfigError(f"E[theta] = {Eth} >= 1")
    A, B, K, n = law.n_atoms, paths.n_blocks, paths.K, paths.n_steps
    dt = paths.dt
    EX0 = law.mean(law.x0)
    raw = solve_cmf(law, b, b0, paths, config.times, law.theta * EX0,
                    picard=picard, ridge=ridge, degree=degree)
    a = law.alpha[:, None, None, None]
    th = law.theta[:, None, None, None]
    m = (b0 / law.alpha[:, None])[:, None, None, :]
    z = raw.z
    z0 = raw.z0 + th * (raw.Ez0[None, :, None, :] + raw.Em) / (1.0 - Eth)
    bb, bb0 = b[:, None, None, :], b0[:, None, None, :]
    pi = z + bb / a
    pi0 = z0 + m
    dw = paths.idio_increments
    dw0 = paths.common_increments
    x = np.empty((A, B, K, n + 1))
    for t in range(A):
        x[t] = kernels.euler_wealth(
            law.x0[t], pi[t].reshape(B * K, n), pi0[t].reshape(B * K, n), b[t], b0[t],
            dw.reshape(B * K, n), np.repeat(dw0, K, axis=0), dt).reshape(B, K, n + 1)
    p = law.probs
    # conditional drifts and dW0 integrands of the absorbed integrals
    drift = p @ (pi * bb + pi0 * bb0).mean(axis=2).reshape(A, -1)
    vol0 = p @ pi0.mean(axis=2).reshape(A, -1)
    drift = drift.reshape(B, n)
    vol0 = vol0.reshape(B, n)
    absorbed = np.zeros((B, n + 1))
    np.cumsum(drift * dt + vol0 * dw0, axis=1, out=absorbed[:, 1:])
    mu_impl = EX0 + absorbed[:, -1]
    y = raw.y + th * absorbed[None, :, None, :]
    mart = np.cumsum(pi * dw[None], axis=-1)[..., -1]  # int pi dW, [A, B, K]
    xT_mean = p @ x[..., -1].mean(axis=2)
    gaps = xT_mean - mu_impl
    comb = np.tensordot(p, mart, axes=1)  # [B, K]
    se = comb.std(axis=1, ddof=1) / math.sqrt(K) if K > 1 else np.zeros(B)
    gap = float(np.sqrt(np.mean(gaps ** 2)))
    gap_se = float(np.sqrt(np.mean(se ** 2)))
    sol = MfgSolution(
        mode="common", times=config.times, probs=p, alpha=law.alpha, theta=law.theta,
        y=y.reshape(A, B * K, n + 1), z=z.reshape(A, B * K, n), z0=z0.reshape(A, B * K, n),
        pi=pi.reshape(A, B * K, n), pi0=pi0.reshape(A, B * K, n), x=x.reshape(A, B * K, n + 1),
        mu=float(mu_impl.mean()), gap=gap, gap_stderr=gap_se,
        extras={"mu_blocks": mu_impl, "picard_iters": raw.picard_iters,
                "picard_residuals": raw.picard_residuals, "Eth": Eth},
    )
    if gap > tol + 3 * gap_se:
        raise MfgConsistencyError(f"consistency gap {gap:.3e} above tol {tol:.1e} + 3 stderr", gap)
    return sol


# ---------------------------------------------------------------------------
# independent assets

class _Indep:
    """Per-type backward/forward machinery on a grid window [ks, ke]."""

    def __init__(self, config: GameConfig, paths: PathBundle, ridge=1e-8, degree=2):
        law, b, _ = _law(config)
        self.config, self.law, self.b = config, law, b
        self.dt = config.dt
        dw, _ = paths.flat()
        self.dw = dw
        self.P = dw.shape[0]
        w = np.zeros((self.P, config.n_steps + 1))
        np.cumsum(dw, axis=1, out=w[:, 1:])
        self.w = w
        self.times = config.times
        self.ridge, self.degree = ridge, degree
        amp = config.theta_noise_amp
        self.theta_T = law.theta[:, None] + amp * np.tanh(w[:, -1])[None, :]  # [A, P]

    def features(self, ks):
        w, times, deg = self.w, self.times, self.degree

        def feats(k):
            g = ks + k
            if times[g] <= 0:
                return np.ones((w.shape[0], 1))
            return polynomial_basis(w[:, g] / math.sqrt(times[g]), None, deg)

        return feats

    def backward(self, terminal, ks, ke):
        """Y, Z on [ks, ke] for the given terminal values [A, P]."""
        b = self.b[:, ks:ke]
        a = self.law.alpha[:, None]

        def driver(k, y_next, zk, state):
            bk = b[:, k:k + 1]
            return -(bk * zk[:, 0] + bk ** 2 / (2 * a))

        dW = self.dw[None, :, ks:ke]
        return backward_solve(terminal, driver, dW, self.features(ks), self.dt,
                              ridge=self.ridge, coupled=False)

    def forward(self, z, x_start, ks, ke):
        """Wealth paths [A, P, ke-ks+1] from x_start (scalar or [A] or [A, P])."""
        A = self.law.n_atoms
        b = self.b[:, ks:ke]
        out = np.empty((A, self.P, ke - ks + 1))
        xs = np.broadcast_to(np.asarray(x_start, dtype=float), (A,) if np.ndim(x_start) <= 1 else (A, self.P))
        for t in range(A):
            pi = z[t] + b[t] / self.law.alpha[t]
            out[t] = kernels.euler_wealth(xs[t], pi, 0.0, b[t], 0.0, self.dw[:, ks:ke], 0.0, self.dt)
        return out

    def phi(self, mu, A_e, C_e, x_start, ks, ke):
        """mu -> E[X_e] with terminal A_e + C_e mu."""
        sol = self.backward(A_e + C_e * mu, ks, ke)
        z = sol.z[:, 0]
        x = self.forward(z, x_start, ks, ke)
        return float(self.law.probs @ x[:, :, -1].mean(axis=1)), sol, x


def _mu_iterate(phi, mu0, damping, tol, max_iter, auto_damp=True):
    """Damped fixed-point iteration with divergence detection; returns (mu, trace, ratios, damping)."""
    mu = float(mu0)
    trace = [mu]
    ratios = []
    prev = None
    bad = 0
    for _ in range(max_iter):
        target = phi(mu)
        new = (1 - damping) * mu + damping * target
        step = new - mu
        if prev is not None and prev != 0:
            r = abs(step) / abs(prev)
            ratios.append(r)
            bad = bad + 1 if r >= 1 else 0
            if bad >= 5:
                raise MfgDivergenceError(
                    f"mu-iteration diverges (ratio >= 1 for 5 iterations, last {r:.3f}); "
                    "try time marching over shorter sub-intervals", trace)
            if auto_damp and r >= 1 and step * prev < 0:
                damping *= 0.5
        mu = new
        trace.append(mu)
        if abs(step) <= tol:
            return mu, trace, ratios, damping, True
        prev = step
    return mu, trace, ratios, damping, False


def _assemble(kind, config, law, mu, y, z, x, trace, ratios, conv, damping, extras=None):
    b, _ = config.return_grid(list(law.labels))
    pi = z + (b / law.alpha[:, None])[:, None, :]
    EXT = float(law.probs @ x[:, :, -1].mean(axis=1))
    return MfgSolution(
        mode=kind, times=config.times, probs=law.probs, alpha=law.alpha, theta=law.theta,
        y=y, z=z, z0=np.zeros_like(z), pi=pi, pi0=np.zeros_like(z), x=x, mu=float(mu),
        gap=abs(mu - EXT), mu_trace=list(trace), ratios=list(ratios), converged=conv,
        damping=damping, extras=extras or {},
    )


def solve_mf_fbsde_independent(config: GameConfig, paths: PathBundle, mu0: float = 0.0,
                               damping: float = 1.0, tol: float = 1e-8, max_iter: int = 200,
                               x_shift: float = 0.0, ridge=1e-8, degree=2,
                               auto_damp: bool = True) -> MfgSolution:
    """mu-fixed point mu = E[X_T(mu)] for the independent-asset MFG.

    Args:
        mu0: initial guess.
        damping: weight of the new iterate; halved on oscillation when ``auto_damp``.
        x_shift: added to every initial wealth (finite-difference sensitivities).

    Raises:
        MfgDivergenceError: ratio >= 1 for 5 consecutive iterations.
        ConvergenceError: iteration budget exhausted.
    """
    prob = _Indep(config, paths, ridge, degree)
    n = config.n_steps
    x_start = prob.law.x0 + x_shift
    zero = np.zeros_like(prob.theta_T)

    def phi(mu):
        return prob.phi(mu, zero, prob.theta_T, x_start, 0, n)[0]

    mu, trace, ratios, d, conv = _mu_iterate(phi, mu0, damping, tol, max_iter, auto_damp)
    if not conv:
        raise ConvergenceError(f"mu-iteration did not converge in {max_iter} iterations", trace)
    _, sol, x = prob.phi(mu, zero, prob.theta_T, x_start, 0, n)
    return _assemble("independent", config, prob.law, mu, sol.y, sol.z[:, 0], x, trace, ratios, conv, d)


def bisection_mu(config: GameConfig, paths: PathBundle, tol: float = 1e-8, lo: float = -1.0,
                 hi: float = 1.0, max_expand: int = 60, ridge=1e-8, degree=2) -> float:
    """Root of mu -> E[X_T(mu)] - mu by bracketing and bisection with the same inner solver."""
    prob = _Indep(config, paths, ridge, degree)
    n = config.n_steps
    zero = np.zeros_like(prob.theta_T)

    def g(mu):
        return prob.phi(mu, zero, prob.theta_T, prob.law.x0, 0, n)[0] - mu

    glo, ghi = g(lo), g(hi)
    for _ in range(max_expand):
        if glo * ghi <= 0:
            break
        width = hi - lo
        lo, hi = lo - width, hi + width
        glo, ghi = g(lo), g(hi)
    else:
        raise ConvergenceError("could not bracket the fixed point")
    while hi - lo > tol / 10:
        mid = 0.5 * (lo + hi)
        gm = g(mid)
        if gm == 0:
            return mid
        if (gm < 0) == (glo < 0):
            lo, glo = mid, gm
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# characteristic BSDE

@dataclass
class CharacteristicSolution:
    y: np.ndarray  # [A, P, n+1]
    z: np.ndarray  # [A, P, n]
    m: np.ndarray  # E[b z_k], [n]
    slope: np.ndarray  # E[grad X_t], [n+1]
    residuals: list
    converged: bool
    girsanov: Optional[dict] = None

    @property
    def slope_T(self) -> float:
        return float(self.slope[-1])


def _characteristic(prob: _Indep, terminal, ks, ke, tol, max_iter, raise_on_fail=True):
    law = prob.law
    b = prob.b[:, ks:ke]
    p = law.probs
    dt = prob.dt

    def m_of(z):  # z [A, 1, P, n]
        return p @ (b * z[:, 0].mean(axis=1))

    def driver(k, y_next, zk, state):
        return -b[:, k:k + 1] * zk[:, 0]

    def linear_y(k, state):
        return m_of(state.z)[k]

    def residual(new, old):
        return bmo_norm_estimate((new.z - old.z)[:, 0].reshape(-1, new.z.shape[-1]), dt)

    sol = backward_solve(terminal, driver, prob.dw[None, :, ks:ke], prob.features(ks), dt,
                         picard=(max_iter, tol), ridge=prob.ridge, linear_y=linear_y,
                         residual=residual, raise_on_fail=raise_on_fail)
    m = m_of(sol.z)
    slope = np.concatenate([[1.0], np.cumprod(1.0 / (1.0 - m * dt))])
    return CharacteristicSolution(sol.y, sol.z[:, 0], m, slope, sol.picard_residuals, sol.converged)


def solve_characteristic_bsde(config: GameConfig, paths: PathBundle, R: Optional[float] = None,
                              tol: float = 1e-8, max_iter: int = 100, ridge=1e-8, degree=2,
                              check: bool = True) -> CharacteristicSolution:
    """Characteristic BSDE by iteration on the frozen mean m_k = E[b_k z_k].

    The term Y m is treated implicitly: y_k = (E_k[y_{k+1}] - dt b z_k) / (1 - m_k dt),
    which makes E[grad X_T] = prod_k 1/(1 - m_k dt) the exact discrete slope.

    Raises:
        ConvergenceError: BMO-proxy change above tol after max_iter sweeps.
    """
    if check:
        import warnings

        from . import assumptions

        rep = assumptions.check_characteristic(config, R)
        bad = [c.id for c in rep.conditions if not c.passed and c.id.startswith("P3.2")]
        if bad:
            warnings.warn(f"characteristic smallness conditions {sorted(set(bad))} fail", RuntimeWarning,
                          stacklevel=2)
    prob = _Indep(config, paths, ridge, degree)
    ch = _characteristic(prob, prob.theta_T, 0, config.n_steps, tol, max_iter)
    ch.girsanov = girsanov_y0(prob, ch.m)
    return ch


def girsanov_y0(prob: _Indep, m) -> dict:
    """Cross-check of y0 via the linear-BSDE representation under the measure with
    density L = exp(-int b dW - 1/2 int b^2 ds): y0 = E[L theta] exp(int m ds).

    Returns per-type ``y0`` and the sample variance of the importance weights.
    """
    dt = prob.dt
    b = prob.b
    logL = -(prob.dw @ b.T).T - 0.5 * (b ** 2).sum(axis=1)[:, None] * dt  # [A, P]
    L = np.exp(logL)
    scale = math.exp(float(np.sum(m)) * dt)
    return {"y0": (L * prob.theta_T).mean(axis=1) * scale, "weight_var": L.var(axis=1)}


# ---------------------------------------------------------------------------
# time marching

def _windows(n_steps, T, delta):
    if not delta > 0:
        raise ValueError("delta must be positive")
    n_sub = max(1, math.ceil(T / delta - 1e-12))
    edges = np.unique(np.round(np.linspace(0, n_steps, n_sub + 1)).astype(int))
    return list(zip(edges[:-1], edges[1:]))


def time_march_global(config: GameConfig, paths: PathBundle, delta: float, tol: float = 1e-8,
                      damping: float = 1.0, max_iter: int = 200, ridge=1e-8, degree=2,
                      secant_check: bool = True) -> MfgSolution:
    """Backward construction of the affine decoupling field Y_s = A_s + C_s E[X_s] on
    sub-intervals of length <= delta, then a forward pass with the actual means.

    C_s solves the characteristic BSDE on [s, e] with terminal C_e; A_s is the value at
    s of the sub-interval fixed point started from E[X_s] = 0.

    Raises:
        ConvergenceError: a sub-interval fails, with its index in the message.
    """
    prob = _Indep(config, paths, ridge, degree)
    law = prob.law
    wins = _windows(config.n_steps, config.T, delta)
    A_e = np.zeros_like(prob.theta_T)
    C_e = prob.theta_T.copy()
    fields = {}
    secant = []
    for j in range(len(wins) - 1, -1, -1):
        ks, ke = wins[j]
        fields[j] = (A_e, C_e)
        try:
            ch = _characteristic(prob, C_e, ks, ke, tol, 100)
            phi = lambda mu, x=0.0: prob.phi(mu, A_e, C_e, x, ks, ke)[0]  # noqa: E731
            mu, *_ = _mu_iterate(phi, 0.0, damping, tol, max_iter)
        except ConvergenceError as exc:
            raise ConvergenceError(f"sub-interval {j} [{ks}, {ke}] failed: {exc}", exc.residuals) from exc
        _, sol, _ = prob.phi(mu, A_e, C_e, 0.0, ks, ke)
        A_s = sol.y[:, :, 0]
        C_s = ch.y[:, :, 0]
        if secant_check:
            mu1, *_ = _mu_iterate(lambda m: prob.phi(m, A_e, C_e, 1.0, ks, ke)[0], mu, damping, tol, max_iter)
            y1 = prob.phi(mu1, A_e, C_e, 1.0, ks, ke)[1].y[:, :, 0]
            secant.append(float(np.max(np.abs((y1 - A_s).mean(axis=1) - C_s.mean(axis=1)))))
        A_e, C_e = A_s, C_s
    # forward pass
    n = config.n_steps
    A_ = law.n_atoms
    y = np.empty((A_, prob.P, n + 1))
    z = np.empty((A_, prob.P, n))
    x = np.empty((A_, prob.P, n + 1))
    x_start = np.broadcast_to(law.x0[:, None], (A_, prob.P)).copy()
    trace, ratios = [], []
    mu_e = law.mean(law.x0)
    for j, (ks, ke) in enumerate(wins):
        Ae, Ce = fields[j]
        xm = float(law.probs @ x_start.mean(axis=1))
        phi = lambda mu: prob.phi(mu, Ae, Ce, x_start, ks, ke)[0]  # noqa: E731
        try:
            mu_e, tr, rt, _, conv = _mu_iterate(phi, xm, damping, tol, max_iter)
        except ConvergenceError as exc:
            raise ConvergenceError(f"sub-interval {j} [{ks}, {ke}] failed: {exc}", exc.residuals) from exc
        if not conv:
            raise ConvergenceError(f"sub-interval {j} [{ks}, {ke}] did not converge", tr)
        trace.extend(tr)
        ratios.extend(rt)
        _, sol, xs = prob.phi(mu_e, Ae, Ce, x_start, ks, ke)
        y[:, :, ks:ke + 1] = sol.y
        z[:, :, ks:ke] = sol.z[:, 0]
        x[:, :, ks:ke + 1] = xs
        x_start = xs[:, :, -1]
    return _assemble("march", config, law, mu_e, y, z, x, trace, ratios, True, damping,
                     extras={"windows": [list(map(int, w)) for w in wins], "secant_gap": secant})
