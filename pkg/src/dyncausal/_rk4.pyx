# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled latent RK4 kernels; same contract as ``dyncausal._rk4_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport tanh

cnp.import_array()

cdef double[4] OFFSETS = [0.0, 0.5, 0.5, 1.0]


cdef void _stage(const double[:, ::1] P1, const double[::1] p1,
                 const double[:, ::1] P2, const double[::1] p2,
                 const double* y, double s, double* a, double* k,
                 Py_ssize_t m, Py_ssize_t q) noexcept nogil:
    cdef Py_ssize_t r, c
    cdef double acc
    for c in range(q):
        acc = p1[c] + s * P1[m, c]
        for r in range(m):
            acc = acc + y[r] * P1[r, c]
        a[c] = tanh(acc)
    for c in range(m):
        acc = p2[c]
        for r in range(q):
            acc = acc + a[r] * P2[r, c]
        k[c] = acc


def rk4_rollout(h0, P1, p1, P2, p2, Py_ssize_t n_steps, double horizon):
    cdef const double[::1] h0v = np.ascontiguousarray(h0, dtype=np.float64)
    cdef const double[:, ::1] P1v = np.ascontiguousarray(P1, dtype=np.float64)
    cdef const double[::1] p1v = np.ascontiguousarray(p1, dtype=np.float64)
    cdef const double[:, ::1] P2v = np.ascontiguousarray(P2, dtype=np.float64)
    cdef const double[::1] p2v = np.ascontiguousarray(p2, dtype=np.float64)
    cdef Py_ssize_t m = h0v.shape[0]
    cdef Py_ssize_t q = p1v.shape[0]
    H_arr = np.empty((n_steps + 1, m))
    Y_arr = np.empty((n_steps, 4, m))
    A_arr = np.empty((n_steps, 4, q))
    K_arr = np.empty((4, m))
    cdef double[:, ::1] H = H_arr
    cdef double[:, :, ::1] Y = Y_arr
    cdef double[:, :, ::1] A = A_arr
    cdef double[:, ::1] Kb = K_arr
    cdef Py_ssize_t i, st, r
    cdef double coef, s
    with nogil:
        for r in range(m):
            H[0, r] = h0v[r]
        for i in range(n_steps):
            for st in range(4):
                coef = 0.0 if st == 0 else (1.0 if st == 3 else 0.5)
                for r in range(m):
                    if st == 0:
                        Y[i, st, r] = H[i, r]
                    else:
                        Y[i, st, r] = H[i, r] + coef * Kb[st - 1, r]
                s = (i + OFFSETS[st]) / horizon
                _stage(P1v, p1v, P2v, p2v, &Y[i, st, 0], s, &A[i, st, 0], &Kb[st, 0], m, q)
            for r in range(m):
                H[i + 1, r] = H[i, r] + (Kb[0, r] + 2.0 * Kb[1, r] + 2.0 * Kb[2, r]
                                         + Kb[3, r]) / 6.0
    return H_arr, Y_arr, A_arr


def rk4_rollout_vjp(G, P1, p1, P2, p2, Y, A, double horizon):
    cdef const double[:, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef const double[:, ::1] P1v = np.ascontiguousarray(P1, dtype=np.float64)
    cdef const double[:, ::1] P2v = np.ascontiguousarray(P2, dtype=np.float64)
    cdef const double[:, :, ::1] Yv = np.ascontiguousarray(Y, dtype=np.float64)
    cdef const double[:, :, ::1] Av = np.ascontiguousarray(A, dtype=np.float64)
    cdef Py_ssize_t n_steps = Yv.shape[0]
    cdef Py_ssize_t m = Gv.shape[1]
    cdef Py_ssize_t q = Av.shape[2]
    dP1_arr = np.zeros((m + 1, q))
    dp1_arr = np.zeros(q)
    dP2_arr = np.zeros((q, m))
    dp2_arr = np.zeros(m)
    g_arr = np.empty(m)
    dh_arr = np.empty(m)
    gk_arr = np.empty((4, m))
    gz_arr = np.empty(q)
    gy_arr = np.empty(m)
    cdef double[:, ::1] dP1 = dP1_arr
    cdef double[::1] dp1 = dp1_arr
    cdef double[:, ::1] dP2 = dP2_arr
    cdef double[::1] dp2 = dp2_arr
    cdef double[::1] g = g_arr
    cdef double[::1] dh = dh_arr
    cdef double[:, ::1] gk = gk_arr
    cdef double[::1] gz = gz_arr
    cdef double[::1] gy = gy_arr
    cdef Py_ssize_t i, st, r, c
    cdef double acc, a, s
    with nogil:
        for r in range(m):
            g[r] = Gv[n_steps, r]
        for i in range(n_steps - 1, -1, -1):
            for r in range(m):
                gk[0, r] = g[r] / 6.0
                gk[1, r] = g[r] / 3.0
                gk[2, r] = g[r] / 3.0
                gk[3, r] = g[r] / 6.0
                dh[r] = g[r]
            for st in range(3, -1, -1):
                for c in range(q):
                    a = Av[i, st, c]
                    acc = 0.0
                    for r in range(m):
                        dP2[c, r] += a * gk[st, r]
                        acc = acc + gk[st, r] * P2v[c, r]
                    gz[c] = acc * (1.0 - a * a)
                for r in range(m):
                    dp2[r] += gk[st, r]
                s = (i + OFFSETS[st]) / horizon
                for r in range(m):
                    acc = 0.0
                    for c in range(q):
                        dP1[r, c] += Yv[i, st, r] * gz[c]
                        acc = acc + gz[c] * P1v[r, c]
                    gy[r] = acc
                for c in range(q):
                    dP1[m, c] += s * gz[c]
                    dp1[c] += gz[c]
                for r in range(m):
                    dh[r] += gy[r]
                    if st == 3:
                        gk[2, r] += gy[r]
                    elif st > 0:
                        gk[st - 1, r] += 0.5 * gy[r]
            for r in range(m):
                g[r] = dh[r] + Gv[i, r]
    return g_arr, dP1_arr, dp1_arr, dP2_arr, dp2_arr
