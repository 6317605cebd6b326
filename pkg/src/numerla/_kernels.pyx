# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled policy-network kernels; same contracts as ``_kernels_py``.

Matrix products go through BLAS (scipy's Cython bindings); everything else is
fused into single passes over the rows.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _tanh(double x) noexcept nogil:
    # glibc tanh is several times slower than exp on this path
    if x > 20.0:
        return 1.0
    if x < -20.0:
        return -1.0
    return 1.0 - 2.0 / (exp(2.0 * x) + 1.0)


cdef void _gemm(char ta, char tb, int m, int n, int k, double* A, int lda,
                double* B, int ldb, double beta, double* C, int ldc) noexcept nogil:
    # column-major C(m, n) = op(A) op(B) + beta C
    cdef double one = 1.0
    dgemm(&ta, &tb, &m, &n, &k, &one, A, &lda, B, &ldb, &beta, C, &ldc)


cdef void _hidden(double* theta, double* X, int n, int n_in, int n_hid, double* H) noexcept nogil:
    # H (n, n_hid) row-major = tanh(X W1^T + b1)
    cdef Py_ssize_t j, k
    cdef double* b1 = theta + n_hid * n_in
    _gemm(b'T', b'N', n_hid, n, n_in, theta, n_in, X, n_in, 0.0, H, n_hid)
    for j in range(n):
        for k in range(n_hid):
            H[j * n_hid + k] = _tanh(H[j * n_hid + k] + b1[k])


cdef void _logits(double* theta, double* X, int n, int n_in, int n_hid, int n_out,
                  double* H, double* Z) noexcept nogil:
    cdef Py_ssize_t j, k
    cdef double* W2
    cdef double* b2
    if n_hid == 0:
        b2 = theta + n_out * n_in
        _gemm(b'T', b'N', n_out, n, n_in, theta, n_in, X, n_in, 0.0, Z, n_out)
    else:
        _hidden(theta, X, n, n_in, n_hid, H)
        W2 = theta + n_hid * n_in + n_hid
        b2 = W2 + n_out * n_hid
        _gemm(b'T', b'N', n_out, n, n_hid, W2, n_hid, H, n_hid, 0.0, Z, n_out)
    for j in range(n):
        for k in range(n_out):
            Z[j * n_out + k] += b2[k]


cdef inline void _log_softmax_rows(double* Z, int n, int n_out) noexcept nogil:
    cdef Py_ssize_t j, k
    cdef double m, s
    cdef double* z
    for j in range(n):
        z = Z + j * n_out
        m = z[0]
        for k in range(1, n_out):
            if z[k] > m:
                m = z[k]
        s = 0.0
        for k in range(n_out):
            z[k] -= m
            s += exp(z[k])
        s = log(s)
        for k in range(n_out):
            z[k] -= s


def log_softmax(const double[::1] theta, const double[:, ::1] X, int n_in, int n_hid, int n_out):
    cdef int n = X.shape[0]
    out = np.empty((n, n_out), dtype=np.float64)
    if n == 0:
        return out
    cdef double[:, ::1] Z = out
    cdef double[:, ::1] H = np.empty((n, max(n_hid, 1)))
    with nogil:
        _logits(<double*>&theta[0], <double*>&X[0, 0], n, n_in, n_hid, n_out, &H[0, 0], &Z[0, 0])
        _log_softmax_rows(&Z[0, 0], n, n_out)
    return out


def score_grad(const double[::1] theta, const double[:, ::1] X, const long[::1] actions,
               const double[::1] weights, int n_in, int n_hid, int n_out):
    cdef int n = X.shape[0]
    cdef Py_ssize_t d = theta.shape[0]
    g_arr = np.zeros(d, dtype=np.float64)
    if n == 0:
        return g_arr
    cdef double[::1] g = g_arr
    cdef double[:, ::1] H = np.empty((n, max(n_hid, 1)))
    cdef double[:, ::1] Z = np.empty((n, n_out))
    cdef double[:, ::1] D = np.empty((n, max(n_hid, 1)))
    cdef double* th = <double*>&theta[0]
    cdef double* x = <double*>&X[0, 0]
    cdef double* W2
    cdef Py_ssize_t j, k, ob
    cdef double w
    with nogil:
        _logits(th, x, n, n_in, n_hid, n_out, &H[0, 0], &Z[0, 0])
        _log_softmax_rows(&Z[0, 0], n, n_out)
        # Z <- w_j (onehot(a_j) - p_j)
        for j in range(n):
            w = weights[j]
            for k in range(n_out):
                Z[j, k] = -exp(Z[j, k]) * w
            Z[j, actions[j]] += w
        if n_hid == 0:
            _gemm(b'N', b'T', n_in, n_out, n, x, n_in, &Z[0, 0], n_out, 0.0, &g[0], n_in)
            ob = n_out * n_in
            for j in range(n):
                for k in range(n_out):
                    g[ob + k] += Z[j, k]
        else:
            W2 = th + n_hid * n_in + n_hid
            ob = n_hid * n_in + n_hid
            # dW2 (n_out, n_hid) = Z^T H
            _gemm(b'N', b'T', n_hid, n_out, n, &H[0, 0], n_hid, &Z[0, 0], n_out, 0.0, &g[ob], n_hid)
            ob = ob + n_out * n_hid
            for j in range(n):
                for k in range(n_out):
                    g[ob + k] += Z[j, k]
            # D (n, n_hid) = Z W2, then through tanh
            _gemm(b'N', b'N', n_hid, n, n_out, W2, n_hid, &Z[0, 0], n_out, 0.0, &D[0, 0], n_hid)
            ob = n_hid * n_in
            for j in range(n):
                for k in range(n_hid):
                    D[j, k] *= 1.0 - H[j, k] * H[j, k]
                    g[ob + k] += D[j, k]
            # dW1 (n_hid, n_in) = D^T X
            _gemm(b'N', b'T', n_in, n_hid, n, x, n_in, &D[0, 0], n_hid, 0.0, &g[0], n_in)
    return g_arr
