"""Regression-based backward induction for (conditional mean-field) BSDEs.

Sign convention: a solution satisfies

    Y_t = xi + int_t^T f(s, Y_s, Z_s) ds - int_t^T Z_s dW_s,

so an equation written as dY = g dt + Z dW has driver f = -g.

Discrete scheme per step k (explicit in y, Z from the martingale increment):

    m_k   = P_k[y_{k+1}]
    z_k   = P_k[(y_{k+1} - m_k) dW_k] / dt
    y_k   = m_k + P_k[dt f(k, y_{k+1}, z_k)]

where P_k is the least-squares projection on the step-k basis. Subtracting m_k
before the z regression is a control variate; it leaves the estimator's mean unchanged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import kernels


class ConvergenceError(RuntimeError):
    """Picard iteration did not reach the tolerance."""

    def __init__(self, msg, residuals=None, solution=None):
        super().__init__(msg)
        self.residuals = list(residuals or [])
        self.solution = solution


class NaNError(FloatingPointError):
    """Non-finite values appeared during backward induction."""

    def __init__(self, msg, step):
        super().__init__(msg)
        self.step = step


class RankDeficientError(np.linalg.LinAlgError):
    """Design matrix is rank deficient and no ridge was requested."""


# ---------------------------------------------------------------------------
# regression

class Projector:
    """Least-squares projection on the column space of a fixed design matrix.

    Minimizes |v - X c|^2 + ridge |c|^2 where the intercept (first column, if it is
    constant) is left unpenalized, so constants are reproduced exactly.
    """

    def __init__(self, X: np.ndarray, ridge: float = 1e-8):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("design matrix must be 2-D")
        n, p = X.shape
        if n <= p and ridge == 0:
            raise RankDeficientError(f"{n} samples for {p} features")
        self.X = X
        G = X.T @ X
        if ridge > 0:
            pen = np.full(p, ridge)
            if p and np.all(X[:, 0] == X[0, 0]):
                pen[0] = 0.0
            G = G + np.diag(pen)
        else:
            if np.linalg.matrix_rank(X) < p:
                raise RankDeficientError(f"design matrix has rank < {p} and ridge is 0")
        try:
            self._cho = cho_factor(G, lower=False, check_finite=False)
        except np.linalg.LinAlgError:
            raise RankDeficientError("normal equations are not positive definite") from None

    def coef(self, V: np.ndarray) -> np.ndarray:
        """Coefficients for targets V [n] or [n, m]."""
        return cho_solve(self._cho, self.X.T @ V, check_finite=False)

    def fit(self, V: np.ndarray) -> np.ndarray:
        return self.X @ self.coef(V)


def regress_conditional(values, features, ridge: float = 1e-8):
    """Least-squares conditional expectation.

    Args:
        values: per-path targets [n] (or [n, m] for several targets).
        features: design matrix [n, p]; the constant column should come first.
        ridge: Tikhonov weight on the non-intercept coefficients.

    Returns:
        (coef, fitted).

    Raises:
        RankDeficientError: rank-deficient design with ridge == 0.
    """
    proj = Projector(features, ridge)
    c = proj.coef(np.asarray(values, dtype=float))
    return c, proj.X @ c


def polynomial_basis(w, w0=None, degree: int = 2, extra=None) -> np.ndarray:
    """Total-degree polynomials in (w, w0) plus optional linear ``extra`` columns.

    Columns are ordered by degree, constant first.
    """
    w = np.asarray(w, dtype=float)
    vars_ = [w] if w0 is None else [w, np.asarray(w0, dtype=float)]
    if degree == 2 and len(vars_) == 2:
        cols = kernels.poly2_features(vars_[0], vars_[1])
    else:
        out = [np.ones_like(w)]
        for d in range(1, degree + 1):
            if len(vars_) == 1:
                out.append(w ** d)
            else:
                for a in range(d, -1, -1):
                    out.append(vars_[0] ** a * vars_[1] ** (d - a))
        cols = np.column_stack(out)
    if extra is not None:
        extra = np.asarray(extra, dtype=float)
        cols = np.column_stack([cols, extra.reshape(w.shape[0], -1)])
    return cols


def brownian_features(w: np.ndarray, w0: Optional[np.ndarray], times: np.ndarray, degree: int = 2):
    """Feature callable k -> design matrix built from standardized W_{t_k} (and W0_{t_k}).

    At t_0 only the constant is used.
    """

    def features(k):
        n = w.shape[0]
        if k == 0 or times[k] <= 0:
            return np.ones((n, 1))
        s = 1.0 / math.sqrt(times[k])
        return polynomial_basis(w[:, k] * s, None if w0 is None else w0[:, k] * s, degree)

    return features


# ---------------------------------------------------------------------------
# conditional means and norms

def conditional_mean_common(values, t=None) -> np.ndarray:
    """E[. | common noise] per block: average over the K idiosyncratic copies.

    Args:
        values: array [..., n_blocks, K].
        t: grid time (unused; kept for interface symmetry).

    Raises:
        ValueError: K == 0.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim < 2 or values.shape[-1] == 0:
        raise ValueError("need at least one idiosyncratic copy per block")
    return values.mean(axis=-1)


def bmo_norm_estimate(z, dt: float) -> float:
    """Grid BMO proxy max_t sqrt(mean_paths sum_{s>=t} |z_s|^2 dt).

    ``z`` is [paths, steps] or [drivers, paths, steps] (squared norms are summed over
    drivers). This is a lower proxy for the essential-sup BMO norm.
    """
    z = np.asarray(z, dtype=float)
    if z.size == 0:
        return 0.0
    z2 = z ** 2 if z.ndim == 2 else (z ** 2).sum(axis=0)
    if z2.ndim == 1:
        z2 = z2[None, :]
    return kernels.bmo_proxy(z2, dt)


# ---------------------------------------------------------------------------
# backward induction

@dataclass
class BsdeGridSolution:
    """Grid solution of a (system of) BSDE(s).

    y is [n_comp, n_paths, n_steps + 1]; z is [n_comp, n_dw, n_paths, n_steps].
    """

    y: np.ndarray
    z: np.ndarray
    dt: float
    picard_iters: int = 0
    picard_residuals: list = field(default_factory=list)
    converged: bool = True
    int_f: Optional[np.ndarray] = None  # per-path sum_k f_k dt, [n_comp, n_paths]

    @property
    def y0(self) -> np.ndarray:
        """Mean of y at t_0 per component."""
        return self.y[:, :, 0].mean(axis=1)

    def y0_stderr(self) -> np.ndarray:
        """Standard error of y_0 as the sample mean of xi + sum_k f_k dt.

        With an unpenalized intercept the regression scheme returns exactly this sample
        mean at t_0, so its spread is the Monte-Carlo error of y_0.
        """
        n = self.y.shape[1]
        if n < 2:
            return np.zeros(self.y.shape[0])
        pathwise = self.y[:, :, -1] + (0.0 if self.int_f is None else self.int_f)
        return pathwise.std(axis=1, ddof=1) / math.sqrt(n)

    def bmo(self, comp: int = 0) -> float:
        return bmo_norm_estimate(self.z[comp], self.dt)


@dataclass
class PicardState:
    """Previous Picard iterate handed to drivers (frozen arguments)."""

    y: np.ndarray
    z: np.ndarray
    iteration: int


def backward_solve(terminal, driver: Callable, dW, features: Callable, dt: float,
                   picard=(50, 1e-10), ridge: float = 1e-8, z_init=None,
                   linear_y: Optional[Callable] = None, residual: Optional[Callable] = None,
                   coupled: bool = True, raise_on_fail: bool = True) -> BsdeGridSolution:
    """Solve a system of BSDEs by least-squares backward induction and Picard iteration.

    Args:
        terminal: terminal values [n_comp, n_paths] (or [n_paths] for one component).
        driver: ``driver(k, y_next, z_k, state) -> f`` with y_next [n_comp, P], z_k
            [n_comp, n_dw, P] (current sweep) and ``state`` the previous iterate. Drivers
            should read other components' z from ``state`` (frozen) and their own from z_k.
        dW: increments [n_dw, n_paths, n_steps].
        features: ``features(k)`` -> design [P, p] shared by all components or
            [n_comp, P, p] per component.
        dt: step size.
        picard: (max_iters, tol) on the sup change of z between sweeps.
        ridge: regression ridge (non-intercept coefficients).
        z_init: initial frozen z, default zeros.
        linear_y: optional ``linear_y(k, state) -> l`` for a driver term l * y_k treated
            implicitly, y_k = (m_k + P[dt f]) / (1 - dt l).
        residual: optional ``residual(new, old) -> float`` replacing the sup change of z.
        coupled: False runs a single sweep (driver has no frozen arguments).
        raise_on_fail: raise ConvergenceError when max_iters is exhausted.

    Returns:
        BsdeGridSolution.

    Raises:
        ConvergenceError: Picard residual above tol after max_iters.
        NaNError: non-finite values, with the offending step index.
    """
    terminal = np.asarray(terminal, dtype=float)
    if terminal.ndim == 1:
        terminal = terminal[None, :]
    if not np.all(np.isfinite(terminal)):
        raise NaNError("non-finite terminal values", step=None)
    dW = np.asarray(dW, dtype=float)
    if dW.ndim == 2:
        dW = dW[None]
    n_comp, P = terminal.shape
    n_dw, P2, n_steps = dW.shape
    if P2 != P:
        raise ValueError(f"terminal has {P} paths, increments have {P2}")
    max_iters, tol = picard
    if not coupled:
        max_iters = 1

    z_prev = np.zeros((n_comp, n_dw, P, n_steps)) if z_init is None else np.array(z_init, dtype=float)
    y_prev = np.zeros((n_comp, P, n_steps + 1))
    y_prev[:, :, -1] = terminal
    projectors = {}
    residuals = []
    converged = False
    y = z = None
    for it in range(1, max_iters + 1):
        state = PicardState(y_prev, z_prev, it)
        y = np.empty((n_comp, P, n_steps + 1))
        z = np.empty((n_comp, n_dw, P, n_steps))
        y[:, :, -1] = terminal
        int_f = np.zeros((n_comp, P))
        for k in range(n_steps - 1, -1, -1):
            proj = projectors.get(k)
            if proj is None:
                X = features(k)
                proj = Projector(X, ridge) if X.ndim == 2 else [Projector(x, ridge) for x in X]
                projectors[k] = proj
            y_next = y[:, :, k + 1]
            m = _project(proj, y_next)
            incr = (y_next - m)[:, None, :] * dW[None, :, :, k]
            zk = _project(proj, incr.reshape(n_comp, n_dw * P).reshape(n_comp, n_dw, P), many=True) / dt
            f = np.asarray(driver(k, y_next, zk, state), dtype=float)
            f = np.broadcast_to(f, (n_comp, P))
            int_f += dt * f
            yk = m + _project(proj, dt * f)
            if linear_y is not None:
                yk = yk / (1.0 - dt * np.asarray(linear_y(k, state)))
            if not (np.all(np.isfinite(yk)) and np.all(np.isfinite(zk))):
                raise NaNError(f"non-finite values at step {k} (Picard sweep {it})", step=k)
            y[:, :, k] = yk
            z[:, :, :, k] = zk
        if not coupled:
            residuals.append(0.0)
            converged = True
            break
        r = float(residual(BsdeGridSolution(y, z, dt), BsdeGridSolution(y_prev, z_prev, dt))) \
            if residual is not None else float(np.max(np.abs(z - z_prev))) if z.size else 0.0
        residuals.append(r)
        y_prev, z_prev = y, z
        if r <= tol:
            converged = True
            break
    sol = BsdeGridSolution(y, z, dt, picard_iters=len(residuals), picard_residuals=residuals,
                           converged=converged, int_f=int_f)
    if not converged and raise_on_fail:
        raise ConvergenceError(
            f"Picard iteration did not converge in {max_iters} sweeps (last residual {residuals[-1]:.3e})",
            residuals, sol)
    return sol


def _project(proj, V, many=False):
    """Project per component. V is [n_comp, P] or, with many=True, [n_comp, n_t, P]."""
    if isinstance(proj, Projector):
        if many:
            n_comp, n_t, P = V.shape
            return proj.fit(V.reshape(n_comp * n_t, P).T).T.reshape(n_comp, n_t, P)
        return proj.fit(V.T).T
    out = np.empty_like(V)
    for c, pr in enumerate(proj):
        out[c] = pr.fit(V[c].T).T if many else pr.fit(V[c])
    return out
