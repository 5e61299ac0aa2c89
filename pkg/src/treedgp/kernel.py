"""Power-family correlation functions and the SPD linear algebra behind them.

The heavy lifting (pairwise correlations, Cholesky factor, triangular
solves) lives in a backend module chosen at import time: the compiled
``_kernel_core`` extension when it is importable, otherwise the numpy
implementation in ``_kernel_py``. Set ``TREEDGP_PURE_PYTHON=1`` to force
the fallback.
"""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernel_py

if os.environ.get("TREEDGP_PURE_PYTHON") == "1":
    _backend = _kernel_py
else:
    try:
        from . import _kernel_core as _backend
    except ImportError:  # extension not built
        _backend = _kernel_py

BACKEND = _backend.NAME

# nugget proposals below this are rejected before factorization
NUGGET_FLOOR = 1e-8


class ParameterDomainError(ValueError):
    """A correlation parameter lies outside its admissible domain."""


class IllConditionedError(np.linalg.LinAlgError):
    """Cholesky factorization of a correlation matrix failed.

    Attributes
    ----------
    index : int
        Zero-based column where the factorization broke down.
    pivot : float
        The non-positive pivot found there.
    """

    def __init__(self, index, pivot, nugget=None):
        self.index = index
        self.pivot = pivot
        self.nugget = nugget
        msg = f"correlation matrix not positive definite at column {index} (pivot {pivot:.3e})"
        if nugget is not None:
            msg += f"; nugget g={nugget:.3e} is likely too small"
        super().__init__(msg)


class Family(enum.Enum):
    ISOTROPIC = "isotropic"
    SEPARABLE = "separable"


def _check_power(p0):
    if not (0.0 < p0 <= 2.0):
        raise ParameterDomainError(f"power p0 must lie in (0, 2], got {p0}")


def corr_isotropic(x1, x2, d, p0=2.0):
    """Isotropic power correlation ``exp(-||x1 - x2||**p0 / d)``."""
    if not d > 0:
        raise ParameterDomainError(f"range d must be positive, got {d}")
    _check_power(p0)
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape:
        raise ParameterDomainError("points must have equal dimension")
    r = float(np.sqrt(np.sum((x1 - x2) ** 2)))
    return math.exp(-(r**p0) / d)


def corr_separable(x1, x2, d, p0=2.0):
    """Separable power correlation ``exp(-sum_i |x1_i - x2_i|**p0 / d_i)``."""
    d = np.asarray(d, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    if x1.shape != x2.shape or d.shape != x1.shape:
        raise ParameterDomainError(
            f"dimension mismatch: x1 {x1.shape}, x2 {x2.shape}, d {d.shape}"
        )
    if np.any(d <= 0):
        raise ParameterDomainError(f"all range components must be positive, got {d}")
    _check_power(p0)
    return math.exp(-float(np.sum(np.abs(x1 - x2) ** p0 / d)))


@dataclass(frozen=True)
class CorrParams:
    """Correlation parameters of one region.

    ``d`` is stored as a 1-d array: length 1 for the isotropic family,
    one entry per input dimension for the separable family.
    """

    family: Family
    d: np.ndarray
    g: float
    p0: float = 2.0

    def __post_init__(self):
        d = np.atleast_1d(np.asarray(self.d, dtype=float)).copy()
        d.setflags(write=False)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "g", float(self.g))
        if self.family is Family.ISOTROPIC and d.size != 1:
            raise ParameterDomainError("isotropic family takes a single range parameter")
        if np.any(d <= 0) or not np.all(np.isfinite(d)):
            raise ParameterDomainError(f"range parameters must be positive, got {d}")
        if not self.g > 0:
            raise ParameterDomainError(f"nugget must be positive, got {self.g}")
        _check_power(self.p0)

    @property
    def isotropic(self):
        return self.family is Family.ISOTROPIC

    def replace(self, d=None, g=None):
        return CorrParams(
            self.family, self.d if d is None else d, self.g if g is None else g, self.p0
        )


def corr_with_nugget(xj, xk, params, same_index):
    """``K*(xj, xk)`` plus the nugget when ``xj`` and ``xk`` are the same observation.

    The nugget is keyed on the observation index, not on coordinates, so
    replicated design points at distinct indices do not receive it.
    """
    if params.isotropic:
        v = corr_isotropic(xj, xk, params.d[0], params.p0)
    else:
        v = corr_separable(xj, xk, params.d, params.p0)
    return v + params.g if same_index else v


def design_matrix(X):
    """Linear-trend design ``F = (1, X)``."""
    X = np.asarray(X, dtype=float)
    return np.column_stack([np.ones(X.shape[0]), X])


@dataclass(frozen=True)
class CorrMatrix:
    """Factored correlation matrix of one region with cached solves."""

    K: np.ndarray
    chol: np.ndarray
    log_det: float
    inv_F: np.ndarray
    inv_z: np.ndarray | None = field(default=None)

    @property
    def n(self):
        return self.K.shape[0]

    def solve(self, b):
        return _backend.chol_solve(self.chol, b)


def build_corr_matrix(X, params, Z=None, F=None):
    """Build and factor the correlation matrix of design ``X``.

    Parameters
    ----------
    X : (n, m_X) array
        Design rows (unit-cube scale).
    params : CorrParams
    Z : (n,) array, optional
        Responses; when given, ``K^{-1} Z`` is cached.
    F : (n, m) array, optional
        Trend design, defaults to ``(1, X)``.

    Raises
    ------
    IllConditionedError
        If the Cholesky factorization breaks down.
    """
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty 2-d array")
    K, L, info, pivot = _backend.factor_corr(X, params.d, params.g, params.p0, params.isotropic)
    if info:
        raise IllConditionedError(info - 1, pivot, params.g)
    log_det = 2.0 * float(np.sum(np.log(np.diag(L))))
    if F is None:
        F = design_matrix(X)
    inv_F = _backend.chol_solve(L, F)
    inv_z = None if Z is None else _backend.chol_solve(L, np.asarray(Z, dtype=float))
    return CorrMatrix(K=K, chol=L, log_det=log_det, inv_F=inv_F, inv_z=inv_z)


def cross_corr(XX, X, params):
    """Correlations between query rows ``XX`` and design rows ``X``, no nugget."""
    XX = np.atleast_2d(np.asarray(XX, dtype=float))
    return _backend.cross_corr(XX, X, params.d, params.p0, params.isotropic)


def cholesky(K):
    """Lower Cholesky factor, raising :class:`IllConditionedError` on failure."""
    L, info, pivot = _backend.cholesky(np.asarray(K, dtype=float))
    if info:
        raise IllConditionedError(info - 1, pivot)
    return L


def chol_solve(L, b):
    return _backend.chol_solve(L, b)
