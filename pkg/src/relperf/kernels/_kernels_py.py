"""Pure-Python (numpy) versions of the compiled kernels."""
import numpy as np

EXP_CLAMP = 700.0


def euler_wealth(x0, pi, pi0, b, b0, dw, dw0, dt):
    incr = pi * (b * dt + dw) + pi0 * (b0 * dt + dw0)
    out = np.empty((pi.shape[0], pi.shape[1] + 1))
    out[:, 0] = x0
    # sequential sum keeps bitwise agreement with the compiled loop
    acc = np.array(x0, dtype=float)
    for k in range(pi.shape[1]):
        acc = acc + incr[:, k]
        out[:, k + 1] = acc
    return out


def bmo_proxy(z2, dt):
    if z2.size == 0:
        return 0.0
    tail = np.cumsum((z2 * dt)[:, ::-1], axis=1)[:, ::-1]
    return float(np.sqrt(max(tail.mean(axis=0).max(), 0.0)))


def clamped_neg_exp(expo):
    clipped = np.clip(expo, -EXP_CLAMP, EXP_CLAMP)
    n_clamped = int(np.count_nonzero(clipped != expo))
    return -np.exp(clipped), n_clamped


def poly2_features(w, w0):
    return np.column_stack([np.ones_like(w), w, w0, w * w, w * w0, w0 * w0])
