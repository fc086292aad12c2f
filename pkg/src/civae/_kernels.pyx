# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the alpha-grid evaluation.

Each skew term is ``-log(c + (1 - c) * exp(r))`` for a log-density ratio ``r``
that does not depend on the grid point, so the exponential is hoisted out of
the grid loop and only one logarithm is paid per (row, draw, grid point).
"""
import numpy as np

from libc.math cimport exp, log
from libc.stdlib cimport free, malloc


cdef inline double _log_mix(double r, double w, double c) noexcept nogil:
    # log(c + (1 - c) e^r) with w = exp(-|r|) precomputed
    if c == 1.0:
        return 0.0
    if r <= 0.0:
        return log(c + (1.0 - c) * w)
    return r + log(c * w + (1.0 - c))


def alpha_grid_values(const double[::1] e0, const double[::1] e1,
                      const double[:, ::1] le_e, const double[:, ::1] lp_e,
                      const double[:, ::1] le_p, const double[:, ::1] lp_p,
                      const double[::1] alphas):
    """ELBO(alpha) for every row and grid point.

    ``le_e``/``lp_e`` are encoder/posterior log densities at encoder draws and
    ``le_p``/``lp_p`` the same at posterior draws, all shaped (rows, draws).
    """
    cdef Py_ssize_t B = le_e.shape[0], K = le_e.shape[1], G = alphas.shape[0]
    cdef Py_ssize_t b, g, k
    cdef double a, s_e, s_p
    out = np.empty((B, G), dtype=np.float64)
    cdef double[:, ::1] res = out
    cdef double *buf = <double *> malloc(4 * K * sizeof(double))
    if buf == NULL:
        raise MemoryError()
    cdef double *r_e = buf
    cdef double *w_e = buf + K
    cdef double *r_p = buf + 2 * K
    cdef double *w_p = buf + 3 * K
    try:
        with nogil:
            for b in range(B):
                for k in range(K):
                    r_e[k] = lp_e[b, k] - le_e[b, k]
                    w_e[k] = exp(-r_e[k]) if r_e[k] > 0.0 else exp(r_e[k])
                    r_p[k] = le_p[b, k] - lp_p[b, k]
                    w_p[k] = exp(-r_p[k]) if r_p[k] > 0.0 else exp(r_p[k])
                for g in range(G):
                    a = alphas[g]
                    s_e = 0.0
                    s_p = 0.0
                    if a > 0.0:
                        for k in range(K):
                            s_e -= _log_mix(r_e[k], w_e[k], a)
                        s_e /= K
                    if a < 1.0:
                        for k in range(K):
                            s_p -= _log_mix(r_p[k], w_p[k], 1.0 - a)
                        s_p /= K
                    res[b, g] = a * e1[b] + (1.0 - a) * e0[b] + a * s_e + (1.0 - a) * s_p
    finally:
        free(buf)
    return out
