# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled correlation kernels and Cholesky helpers.

Same contract as ``treedgp._kernel_py``; matrices are returned as numpy
arrays, factors in Fortran order so LAPACK can use them in place.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, pow, fabs
from scipy.linalg.cython_lapack cimport dpotrf, dpotrs

cnp.import_array()

NAME = "cython"


cdef inline double _dist(const double[:, ::1] A, Py_ssize_t i,
                         const double[:, ::1] B, Py_ssize_t j,
                         const double[::1] d, double p0, bint iso) noexcept nogil:
    cdef Py_ssize_t k, m = A.shape[1]
    cdef double s = 0.0, t
    if iso:
        for k in range(m):
            t = A[i, k] - B[j, k]
            s += t * t
        if p0 == 2.0:
            return s / d[0]
        return pow(s, 0.5 * p0) / d[0]
    if p0 == 2.0:
        for k in range(m):
            t = A[i, k] - B[j, k]
            s += t * t / d[k]
    else:
        for k in range(m):
            s += pow(fabs(A[i, k] - B[j, k]), p0) / d[k]
    return s


def cross_corr(XX, X, d, double p0, bint isotropic):
    """Correlation between rows of ``XX`` and rows of ``X`` (no nugget)."""
    cdef const double[:, ::1] A = np.ascontiguousarray(XX, dtype=np.float64)
    cdef const double[:, ::1] B = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] dv = np.ascontiguousarray(d, dtype=np.float64)
    cdef Py_ssize_t i, j, na = A.shape[0], nb = B.shape[0]
    out = np.empty((na, nb), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(na):
            for j in range(nb):
                o[i, j] = exp(-_dist(A, i, B, j, dv, p0, isotropic))
    return out


cdef void _fill_corr(const double[:, ::1] A, const double[::1] dv, double g,
                     double p0, bint iso, double[::1, :] K) noexcept nogil:
    cdef Py_ssize_t i, j, n = A.shape[0]
    cdef double v
    for j in range(n):
        K[j, j] = 1.0 + g
        for i in range(j + 1, n):
            v = exp(-_dist(A, i, A, j, dv, p0, iso))
            K[i, j] = v
            K[j, i] = v


def corr_matrix(X, d, double g, double p0, bint isotropic):
    """Square correlation matrix of ``X`` with ``g`` added on the diagonal."""
    cdef const double[:, ::1] A = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] dv = np.ascontiguousarray(d, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    K = np.empty((n, n), dtype=np.float64, order="F")
    cdef double[::1, :] Kv = K
    with nogil:
        _fill_corr(A, dv, g, p0, isotropic, Kv)
    return K


cdef int _potrf_lower(double[::1, :] L) noexcept nogil:
    cdef int n = <int>L.shape[0], lda = n, info = 0
    cdef Py_ssize_t i, j
    cdef char uplo = b'L'
    if n == 0:
        return 0
    dpotrf(&uplo, &n, &L[0, 0], &lda, &info)
    for j in range(1, n):
        for i in range(j):
            L[i, j] = 0.0
    return info


def cholesky(K):
    """Lower Cholesky factor of ``K``; returns ``(L, info, pivot)``."""
    L = np.array(K, dtype=np.float64, order="F", copy=True)
    cdef double[::1, :] Lv = L
    cdef int info
    pivot = 0.0
    with nogil:
        info = _potrf_lower(Lv)
    if info > 0:
        # Schur-complement diagonal at the failing column
        j = info - 1
        pivot = float(K[j, j] - np.dot(L[j, :j], L[j, :j]))
    return L, info, pivot


def chol_solve(L, B):
    """Solve ``(L L^T) x = B`` given the lower factor ``L``."""
    cdef double[::1, :] Lv = np.asfortranarray(L, dtype=np.float64)
    vec = np.ndim(B) == 1
    X = np.array(B, dtype=np.float64, order="F", copy=True)
    if vec:
        X = X.reshape((-1, 1), order="F")
    cdef double[::1, :] Xv = X
    cdef int n = <int>Lv.shape[0], nrhs = <int>Xv.shape[1], info = 0
    cdef char uplo = b'L'
    if n == 0 or nrhs == 0:
        return X.ravel() if vec else X
    with nogil:
        dpotrs(&uplo, &n, &nrhs, &Lv[0, 0], &n, &Xv[0, 0], &n, &info)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return X[:, 0].copy() if vec else X


def factor_corr(X, d, double g, double p0, bint isotropic):
    """Build the nugget-augmented correlation matrix and factor it."""
    cdef const double[:, ::1] A = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[::1] dv = np.ascontiguousarray(d, dtype=np.float64)
    cdef Py_ssize_t n = A.shape[0]
    K = np.empty((n, n), dtype=np.float64, order="F")
    L = np.empty((n, n), dtype=np.float64, order="F")
    cdef double[::1, :] Kv = K
    cdef double[::1, :] Lv = L
    cdef int info
    pivot = 0.0
    with nogil:
        _fill_corr(A, dv, g, p0, isotropic, Kv)
        Lv[:, :] = Kv
        info = _potrf_lower(Lv)
    if info > 0:
        j = info - 1
        pivot = float(K[j, j] - np.dot(L[j, :j], L[j, :j]))
    return K, L, info, pivot
