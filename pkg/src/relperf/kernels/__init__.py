"""Kernel dispatch: compiled extension when available, numpy fallback otherwise.

Set ``RELPERF_PURE_PYTHON=1`` to force the fallback.
"""
import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if os.environ.get("RELPERF_PURE_PYTHON", "0") != "1":
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"


def _c(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    # memoryviews in the extension need writable buffers
    return a if a.flags.writeable else a.copy()


def euler_wealth(x0, pi, pi0, b, b0, dw, dw0, dt, impl=None):
    """Euler wealth recursion with unit volatilities.

    All per-step arrays broadcast to ``[paths, steps]``; ``x0`` broadcasts to ``[paths]``.
    """
    impl = impl or _impl
    shape = np.broadcast_shapes(np.shape(pi), np.shape(pi0), np.shape(b), np.shape(b0),
                                np.shape(dw), np.shape(dw0))
    arrs = [_c(np.broadcast_to(a, shape)) for a in (pi, pi0, b, b0, dw, dw0)]
    x0 = _c(np.broadcast_to(x0, shape[:1]))
    return impl.euler_wealth(x0, *arrs, float(dt))


def bmo_proxy(z2, dt, impl=None):
    """max_t sqrt(mean_paths sum_{s>=t} z2_s dt) for squared integrands ``z2[paths, steps]``."""
    impl = impl or _impl
    z2 = _c(np.atleast_2d(z2))
    if z2.size == 0:
        return 0.0
    return float(impl.bmo_proxy(z2, float(dt)))


def clamped_neg_exp(expo, impl=None):
    """Return (-exp(clip(expo)), number of clamped entries)."""
    impl = impl or _impl
    expo = np.asarray(expo, dtype=np.float64)
    vals, n = impl.clamped_neg_exp(_c(expo.ravel()))
    return np.asarray(vals).reshape(expo.shape), int(n)


def poly2_features(w, w0, impl=None):
    impl = impl or _impl
    return np.asarray(impl.poly2_features(_c(w), _c(w0)))


__all__ = ["BACKEND", "euler_wealth", "bmo_proxy", "clamped_neg_exp", "poly2_features"]
