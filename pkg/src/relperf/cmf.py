"""Conditional mean-field BSDE shared by the N-player benchmark and the common-noise MFG.

For each atom tau of the population law (alpha, theta, b, b0) the unknowns are
(y, z, z0) driven by (W, W0) with

    dy = { b z + |bbar|^2/(2 alpha) + b0 (z0 + k E[z0|F0] + k E[b0/alpha])
           - theta E[|bbar|^2/alpha] - theta E[b z|F0] - theta E[b0 z0|F0]
           - k E[theta b0] E[z0|F0] - k E[theta b0] E[b0/alpha] } dt + z dW + z0 dW0,

with k = theta / (1 - E[theta]). Expectations over the type law are exact finite sums;
the idiosyncratic part of E[.|F0] is the average over the K copies of a block.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde_engine import backward_solve, polynomial_basis
from .market import PathBundle, PopulationLaw


@dataclass
class CmfSolution:
    y: np.ndarray  # [A, B, K, n+1]
    z: np.ndarray  # [A, B, K, n]
    z0: np.ndarray  # [A, B, K, n]
    Ez0: np.ndarray  # E[z0 | F0], [B, n]
    Ebz: np.ndarray  # E[b z | F0], [B, n]
    Eb0z0: np.ndarray  # E[b0 z0 | F0], [B, n]
    Em: np.ndarray  # E[b0/alpha], [n]
    Eth: float
    picard_iters: int
    picard_residuals: list
    y0_stderr: np.ndarray  # [A]


def _features(paths: PathBundle, times, degree):
    w, w0 = paths.brownian()

    def feats(k):
        if times[k] <= 0:
            return np.ones((w.shape[0], 1))
        s = 1.0 / np.sqrt(times[k])
        return polynomial_basis(w[:, k] * s, w0[:, k] * s, degree)

    return feats


def cond_means(z, z0, b, b0, probs):
    """Type-weighted copy averages E[z0|F0], E[b z|F0], E[b0 z0|F0] per block.

    z, z0: [A, B, K] at one step; b, b0: [A] at that step.
    """
    mz0 = z0.mean(axis=-1)  # [A, B]
    mz = z.mean(axis=-1)
    return probs @ mz0, probs @ (b[:, None] * mz), probs @ (b0[:, None] * mz0)


def solve_cmf(law: PopulationLaw, b, b0, paths: PathBundle, times, terminal,
              picard=(50, 1e-10), ridge=1e-8, degree=2) -> CmfSolution:
    """Solve the conditional mean-field BSDE for every atom on every copy.

    Args:
        law: finite type law (atoms A).
        b, b0: return grids per atom [A, n].
        paths: bundle with B blocks and K copies.
        times: grid [n + 1].
        terminal: per-atom terminal constants [A] (or per path [A, B*K]).
        picard: (max_iters, tol); the mean-field terms are frozen at the previous sweep.

    Raises:
        ConvergenceError, NaNError: from the backward solver.
    """
    A = law.n_atoms
    B, K, n = paths.n_blocks, paths.K, paths.n_steps
    P = B * K
    dt = paths.dt
    alpha, theta, p = law.alpha, law.theta, law.probs
    Eth = float(p @ theta)
    kap = theta / (1.0 - Eth)
    m = b0 / alpha[:, None]
    Em = p @ m
    Ethb0 = p @ (theta[:, None] * b0)
    Eb2a = p @ ((b ** 2 + b0 ** 2) / alpha[:, None])
    dw, dw0 = paths.flat()
    dW = np.stack([dw, dw0])
    term = np.broadcast_to(np.asarray(terminal, dtype=float).reshape(A, -1), (A, P)).copy()

    def driver(k, y_next, zk, state):
        zf = state.z[:, :, :, k].reshape(A, 2, B, K)
        Ez0, Ebz, Eb0z0 = cond_means(zf[:, 0], zf[:, 1], b[:, k], b0[:, k], p)
        Ez0 = np.repeat(Ez0, K)
        Ebz = np.repeat(Ebz, K)
        Eb0z0 = np.repeat(Eb0z0, K)
        bk, b0k = b[:, k:k + 1], b0[:, k:k + 1]
        th, ka = theta[:, None], kap[:, None]
        F = (bk * zk[:, 0] + (bk ** 2 + b0k ** 2) / (2 * alpha[:, None])
             + b0k * (zk[:, 1] + ka * Ez0 + ka * Em[k])
             - th * Eb2a[k] - th * Ebz - th * Eb0z0
             - ka * Ethb0[k] * Ez0 - ka * Ethb0[k] * Em[k])
        return -F

    sol = backward_solve(term, driver, dW, _features(paths, times, degree), dt,
                         picard=picard, ridge=ridge)
    z = sol.z[:, 0].reshape(A, B, K, n)
    z0 = sol.z[:, 1].reshape(A, B, K, n)
    Ez0 = np.empty((B, n))
    Ebz = np.empty((B, n))
    Eb0z0 = np.empty((B, n))
    for k in range(n):
        Ez0[:, k], Ebz[:, k], Eb0z0[:, k] = cond_means(z[..., k], z0[..., k], b[:, k], b0[:, k], p)
    return CmfSolution(
        y=sol.y.reshape(A, B, K, n + 1), z=z, z0=z0, Ez0=Ez0, Ebz=Ebz, Eb0z0=Eb0z0, Em=Em,
        Eth=Eth, picard_iters=sol.picard_iters, picard_residuals=sol.picard_residuals,
        y0_stderr=sol.y0_stderr(),
    )
