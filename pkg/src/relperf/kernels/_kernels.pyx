# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops. Signatures mirror ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()

cdef double EXP_CLAMP = 700.0


def euler_wealth(double[::1] x0, double[:, ::1] pi, double[:, ::1] pi0,
                 double[:, ::1] b, double[:, ::1] b0,
                 double[:, ::1] dw, double[:, ::1] dw0, double dt):
    cdef Py_ssize_t n_paths = pi.shape[0]
    cdef Py_ssize_t n_steps = pi.shape[1]
    out = np.empty((n_paths, n_steps + 1), dtype=np.float64)
    cdef double[:, ::1] x = out
    cdef Py_ssize_t p, k
    cdef double acc
    for p in range(n_paths):
        acc = x0[p]
        x[p, 0] = acc
        for k in range(n_steps):
            acc = acc + (pi[p, k] * (b[p, k] * dt + dw[p, k]) + pi0[p, k] * (b0[p, k] * dt + dw0[p, k]))
            x[p, k + 1] = acc
    return out


def bmo_proxy(double[:, ::1] z2, double dt):
    cdef Py_ssize_t n_paths = z2.shape[0]
    cdef Py_ssize_t n_steps = z2.shape[1]
    cdef double[::1] tail = np.zeros(n_steps + 1, dtype=np.float64)
    cdef Py_ssize_t p, k
    cdef double run
    for p in range(n_paths):
        run = 0.0
        for k in range(n_steps - 1, -1, -1):
            run = run + z2[p, k] * dt
            tail[k] += run
    cdef double best = 0.0
    cdef double v
    for k in range(n_steps):
        v = tail[k] / n_paths
        if v > best:
            best = v
    return sqrt(best)


def clamped_neg_exp(double[::1] expo):
    cdef Py_ssize_t n = expo.shape[0]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] r = out
    cdef Py_ssize_t i
    cdef long n_clamped = 0
    cdef double e
    for i in range(n):
        e = expo[i]
        if e > EXP_CLAMP:
            e = EXP_CLAMP
            n_clamped += 1
        elif e < -EXP_CLAMP:
            e = -EXP_CLAMP
            n_clamped += 1
        r[i] = -exp(e)
    return out, n_clamped


def poly2_features(double[::1] w, double[::1] w0):
    cdef Py_ssize_t n = w.shape[0]
    out = np.empty((n, 6), dtype=np.float64)
    cdef double[:, ::1] f = out
    cdef Py_ssize_t i
    cdef double a, c
    for i in range(n):
        a = w[i]
        c = w0[i]
        f[i, 0] = 1.0
        f[i, 1] = a
        f[i, 2] = c
        f[i, 3] = a * a
        f[i, 4] = a * c
        f[i, 5] = c * c
    return out
