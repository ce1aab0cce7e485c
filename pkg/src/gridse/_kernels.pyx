# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for quadratic-form stacks and same-padded 1-D convolution.

Every function here has a numpy twin in :mod:`gridse.kernels`; both must agree to
rounding error.
"""
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


def quad_eval(const cnp.int64_t[::1] ptr, const cnp.int64_t[::1] rows,
              const cnp.int64_t[::1] cols, const double[::1] vals,
              const double[::1] x):
    cdef Py_ssize_t m, j, n_forms = ptr.shape[0] - 1
    cdef double acc
    out = np.empty(n_forms, dtype=np.float64)
    cdef double[::1] o = out
    for m in range(n_forms):
        acc = 0.0
        for j in range(ptr[m], ptr[m + 1]):
            acc += vals[j] * x[rows[j]] * x[cols[j]]
        o[m] = acc
    return out


def quad_jacobian(const cnp.int64_t[::1] ptr, const cnp.int64_t[::1] rows,
                  const cnp.int64_t[::1] cols, const double[::1] vals,
                  const double[::1] x):
    cdef Py_ssize_t m, j, n_forms = ptr.shape[0] - 1, n = x.shape[0]
    out = np.zeros((n_forms, n), dtype=np.float64)
    cdef double[:, ::1] o = out
    for m in range(n_forms):
        for j in range(ptr[m], ptr[m + 1]):
            o[m, rows[j]] += 2.0 * vals[j] * x[cols[j]]
    return out


cdef inline void _gemm(char *ta, char *tb, int m, int n, int k, double *a, int lda,
                       double *b, int ldb, double beta, double *c, int ldc) noexcept nogil:
    # column-major BLAS: c = op(a) @ op(b) + beta * c
    cdef double one = 1.0
    dgemm(ta, tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


cdef _padded(const double[:, :, ::1] x, Py_ssize_t K):
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t left = (K - 1) // 2, i
    xp_arr = np.zeros((B, L + K - 1, C), dtype=np.float64)
    cdef double[:, :, ::1] xp = xp_arr
    for i in range(B):
        xp[i, left:left + L, :] = x[i]
    return xp_arr


def conv1d_forward(const double[:, :, ::1] x, double[:, :, ::1] w, const double[::1] b):
    """x: (B, L, C), w: (K, C, F), b: (F,) -> (B, L, F), zero 'same' padding.

    The padded batch is treated as one long sequence of B*(L+K-1) rows; each tap
    is then a single GEMM over shifted rows, and rows that straddle two samples
    are discarded.
    """
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t K = w.shape[0], F = w.shape[2]
    cdef Py_ssize_t Lp = L + K - 1, R = B * Lp - K + 1
    cdef Py_ssize_t i, l, f, j
    xp_arr = _padded(x, K)
    cdef double[:, :, ::1] xp = xp_arr
    full_arr = np.empty((B * Lp, F), dtype=np.float64)
    cdef double[:, ::1] full = full_arr
    with nogil:
        for j in range(K):
            _gemm(b"N", b"N", <int>F, <int>R, <int>C, &w[j, 0, 0], <int>F,
                  &xp[0, 0, 0] + j * C, <int>C, 0.0 if j == 0 else 1.0, &full[0, 0], <int>F)
    out = np.empty((B, L, F), dtype=np.float64)
    cdef double[:, :, ::1] y = out
    for i in range(B):
        for l in range(L):
            for f in range(F):
                y[i, l, f] = full[i * Lp + l, f] + b[f]
    return out


def conv1d_backward(const double[:, :, ::1] x, double[:, :, ::1] w, const double[:, :, ::1] dy):
    """Gradients of conv1d_forward w.r.t. (x, w, b) given upstream dy: (B, L, F)."""
    cdef Py_ssize_t B = x.shape[0], L = x.shape[1], C = x.shape[2]
    cdef Py_ssize_t K = w.shape[0], F = w.shape[2]
    cdef Py_ssize_t Lp = L + K - 1, R = B * Lp - K + 1, left = (K - 1) // 2
    cdef Py_ssize_t i, l, c, f, j
    xp_arr = _padded(x, K)
    cdef double[:, :, ::1] xp = xp_arr
    dyp_arr = np.zeros((B, Lp, F), dtype=np.float64)
    cdef double[:, :, ::1] dyp = dyp_arr
    db_arr = np.zeros(F, dtype=np.float64)
    cdef double[::1] db = db_arr
    for i in range(B):
        for l in range(L):
            for f in range(F):
                dyp[i, l, f] = dy[i, l, f]
                db[f] += dy[i, l, f]
    dw_arr = np.empty((K, C, F), dtype=np.float64)
    cdef double[:, :, ::1] dw = dw_arr
    dxp_arr = np.zeros((B, Lp, C), dtype=np.float64)
    cdef double[:, :, ::1] dxp = dxp_arr
    with nogil:
        for j in range(K):
            _gemm(b"N", b"T", <int>F, <int>C, <int>R, &dyp[0, 0, 0], <int>F,
                  &xp[0, 0, 0] + j * C, <int>C, 0.0, &dw[j, 0, 0], <int>F)
            _gemm(b"T", b"N", <int>C, <int>R, <int>F, &w[j, 0, 0], <int>F,
                  &dyp[0, 0, 0], <int>F, 1.0, &dxp[0, 0, 0] + j * C, <int>C)
    dx_arr = np.ascontiguousarray(dxp_arr[:, left:left + L, :])
    return dx_arr, dw_arr, db_arr
