"""Pure numpy/scipy implementation of the correlation kernels.

Mirrors the compiled ``_kernel_core`` module function for function; the
package picks one of the two at import time (see ``treedgp.kernel``).
"""

import numpy as np
from scipy.linalg import lapack

NAME = "python"


def _scaled_distance(XX, X, d, p0, isotropic):
    diff = XX[:, None, :] - X[None, :, :]
    if isotropic:
        r2 = np.einsum("ijk,ijk->ij", diff, diff)
        if p0 == 2.0:
            return r2 / d[0]
        return r2 ** (0.5 * p0) / d[0]
    if p0 == 2.0:
        return np.einsum("ijk,k->ij", diff * diff, 1.0 / d)
    return np.einsum("ijk,k->ij", np.abs(diff) ** p0, 1.0 / d)


def cross_corr(XX, X, d, p0, isotropic):
    """Correlation between rows of ``XX`` and rows of ``X`` (no nugget)."""
    XX = np.ascontiguousarray(XX, dtype=float)
    X = np.ascontiguousarray(X, dtype=float)
    d = np.asarray(d, dtype=float)
    return np.exp(-_scaled_distance(XX, X, d, float(p0), bool(isotropic)))


def corr_matrix(X, d, g, p0, isotropic):
    """Square correlation matrix of ``X`` with ``g`` added on the diagonal."""
    K = cross_corr(X, X, d, p0, isotropic)
    # the diagonal is exactly 1 + g regardless of round-off in exp(-0)
    np.fill_diagonal(K, 1.0 + g)
    return K


def cholesky(K):
    """Lower Cholesky factor of ``K``.

    Returns ``(L, info, pivot)``. ``info`` is 0 on success; otherwise it is
    the 1-based index of the failing leading minor and ``pivot`` holds the
    non-positive Schur-complement diagonal found there.
    """
    L, info = lapack.dpotrf(K, lower=1, clean=1, overwrite_a=0)
    if info == 0:
        return L, 0, 0.0
    j = info - 1
    pivot = float(K[j, j] - np.dot(L[j, :j], L[j, :j]))
    return L, int(info), pivot


def chol_solve(L, B):
    """Solve ``(L L^T) x = B`` given the lower factor ``L``."""
    x, info = lapack.dpotrs(L, B, lower=1)
    if info != 0:
        raise ValueError(f"dpotrs failed with info={info}")
    return x


def factor_corr(X, d, g, p0, isotropic):
    """Build the nugget-augmented correlation matrix and factor it."""
    K = corr_matrix(X, d, g, p0, isotropic)
    L, info, pivot = cholesky(K)
    return K, L, info, pivot
