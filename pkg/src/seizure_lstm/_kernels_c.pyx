# cython: language_level=3
"""Compiled peephole-LSTM sequence kernels.

Drop-in replacement for ``seizure_lstm._kernels_py``; see that module for the
buffer layout. The time recursion is inherently sequential, so the win here is
removing per-timestep interpreter and temporary-array overhead.
"""

from libc.math cimport exp, tanh
from libc.stdlib cimport calloc, free


cdef inline double _sigmoid(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def lstm_forward(const double[:, :, ::1] W, const double[:, :, ::1] R,
                 const double[:, ::1] P, const double[:, ::1] b,
                 const double[:, :, ::1] X,
                 double[:, :, :, ::1] pre, double[:, :, :, ::1] act,
                 double[:, :, ::1] c, double[:, :, ::1] u):
    cdef Py_ssize_t n = X.shape[0], M = X.shape[1], L = X.shape[2]
    cdef Py_ssize_t B = W.shape[1], G = 4 * W.shape[1]
    cdef Py_ssize_t e, t, g, j, k
    cdef double xk, cp, ct
    cdef double* a
    cdef const double* row
    # transposed weights: row k holds the 4B coefficients of input k, so the
    # examples advance in lockstep and each row is reused from L1 across them
    cdef double* WT = <double*> calloc(L * G, sizeof(double))
    cdef double* RT = <double*> calloc(B * G, sizeof(double))
    if WT == NULL or RT == NULL:
        free(WT)
        free(RT)
        raise MemoryError()
    try:
        with nogil:
            for g in range(4):
                for j in range(B):
                    for k in range(L):
                        WT[k * G + g * B + j] = W[g, j, k]
                    for k in range(B):
                        RT[k * G + g * B + j] = R[g, j, k]
            for t in range(M):
                for e in range(n):
                    a = &pre[e, t, 0, 0]
                    for g in range(4):
                        for j in range(B):
                            a[g * B + j] = b[g, j]
                    for k in range(L):
                        row = &WT[k * G]
                        xk = X[e, t, k]
                        for j in range(G):
                            a[j] += row[j] * xk
                if t > 0:
                    for k in range(B):
                        row = &RT[k * G]
                        for e in range(n):
                            a = &pre[e, t, 0, 0]
                            xk = u[e, t - 1, k]
                            for j in range(G):
                                a[j] += row[j] * xk
                for e in range(n):
                    for j in range(B):
                        cp = c[e, t - 1, j] if t > 0 else 0.0
                        pre[e, t, 1, j] = pre[e, t, 1, j] + P[0, j] * cp
                        pre[e, t, 2, j] = pre[e, t, 2, j] + P[1, j] * cp
                        act[e, t, 0, j] = tanh(pre[e, t, 0, j])
                        act[e, t, 1, j] = _sigmoid(pre[e, t, 1, j])
                        act[e, t, 2, j] = _sigmoid(pre[e, t, 2, j])
                        ct = act[e, t, 0, j] * act[e, t, 1, j] + cp * act[e, t, 2, j]
                        c[e, t, j] = ct
                        pre[e, t, 3, j] = pre[e, t, 3, j] + P[2, j] * ct
                        act[e, t, 3, j] = _sigmoid(pre[e, t, 3, j])
                        u[e, t, j] = tanh(ct) * act[e, t, 3, j]
    finally:
        free(WT)
        free(RT)


def lstm_backward(const double[:, :, ::1] W, const double[:, :, ::1] R,
                  const double[:, ::1] P, const double[:, :, ::1] X,
                  const double[:, :, :, ::1] act, const double[:, :, ::1] c,
                  const double[:, :, ::1] u, const double[:, :, ::1] dU,
                  double[:, :, ::1] gW, double[:, :, ::1] gR,
                  double[:, ::1] gP, double[:, ::1] gb):
    cdef Py_ssize_t n = X.shape[0], M = X.shape[1], L = X.shape[2]
    cdef Py_ssize_t B = W.shape[1], G = 4 * W.shape[1]
    cdef Py_ssize_t e, t, g, j, k, gj
    cdef double dy, dc, tc, cp, z, ig, fg, og, d
    cdef double* grow
    cdef const double* rrow
    cdef const double* up
    cdef double* dn
    # per-example carries; da holds the four gate deltas of every example
    cdef double* dy_next = <double*> calloc(n * B, sizeof(double))
    cdef double* dc_next = <double*> calloc(n * B, sizeof(double))
    cdef double* da = <double*> calloc(n * G, sizeof(double))
    if dy_next == NULL or dc_next == NULL or da == NULL:
        free(dy_next)
        free(dc_next)
        free(da)
        raise MemoryError()
    try:
        with nogil:
            for t in range(M - 1, -1, -1):
                for e in range(n):
                    for j in range(B):
                        z = act[e, t, 0, j]
                        ig = act[e, t, 1, j]
                        fg = act[e, t, 2, j]
                        og = act[e, t, 3, j]
                        cp = c[e, t - 1, j] if t > 0 else 0.0
                        tc = tanh(c[e, t, j])
                        dy = dU[e, t, j] + dy_next[e * B + j]
                        d = dy * tc * og * (1.0 - og)
                        da[e * G + 3 * B + j] = d
                        dc = dc_next[e * B + j] + dy * og * (1.0 - tc * tc) + d * P[2, j]
                        da[e * G + j] = dc * ig * (1.0 - z * z)
                        da[e * G + B + j] = dc * z * ig * (1.0 - ig)
                        da[e * G + 2 * B + j] = dc * cp * fg * (1.0 - fg)
                        gP[0, j] += da[e * G + B + j] * cp
                        gP[1, j] += da[e * G + 2 * B + j] * cp
                        gP[2, j] += d * c[e, t, j]
                        dc_next[e * B + j] = dc * fg + da[e * G + B + j] * P[0, j] + da[e * G + 2 * B + j] * P[1, j]
                    for k in range(B):
                        dy_next[e * B + k] = 0.0
                for g in range(4):
                    for j in range(B):
                        gj = g * B + j
                        grow = &gR[g, j, 0]
                        rrow = &R[g, j, 0]
                        for e in range(n):
                            d = da[e * G + gj]
                            gb[g, j] += d
                            for k in range(L):
                                gW[g, j, k] += d * X[e, t, k]
                            dn = &dy_next[e * B]
                            for k in range(B):
                                dn[k] += rrow[k] * d
                            if t > 0:
                                up = &u[e, t - 1, 0]
                                for k in range(B):
                                    grow[k] += d * up[k]
    finally:
        free(dy_next)
        free(dc_next)
        free(da)
