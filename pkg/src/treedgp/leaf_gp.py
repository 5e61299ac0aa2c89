"""Per-region hierarchical GP: conjugate conditionals and correlation updates.

Each region carries a GP with linear trend ``F beta``, variance ``sigma2``,
linear-prior scale ``tau2`` and correlation parameters ``(d, g)``. The
coefficients share a hierarchical prior ``N(beta0, sigma2 tau2 W)``.

Inverse-gamma draws use the shape/scale convention: ``IG(a, q)`` has
density proportional to ``x**-(a + 1) * exp(-q / x)``. Gamma distributions
in the range prior use shape/rate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import stats
from scipy.special import gammaln

from .kernel import (
    NUGGET_FLOOR,
    CorrMatrix,
    CorrParams,
    Family,
    IllConditionedError,
    build_corr_matrix,
    design_matrix,
)

LOG_2PI = math.log(2.0 * math.pi)

# mixture-of-gammas range prior: (weight, shape, rate)
RANGE_PRIOR = ((0.5, 1.0, 20.0), (0.5, 10.0, 10.0))

_RANGE_TERMS = tuple(
    (math.log(w) + k * math.log(r) - math.lgamma(k), k, r) for w, k, r in RANGE_PRIOR
)

# multiplicative sliding window for MH proposals
WINDOW = (0.75, 4.0 / 3.0)


class NumericStateError(ArithmeticError):
    """Sampler state produced an impossible quantity (e.g. q_sigma + psi <= 0)."""


def _as_matrix(v, m):
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return float(v) * np.eye(m)
    if v.ndim == 1:
        return np.diag(v)
    return v


@dataclass(frozen=True)
class Hyperparameters:
    """Fixed hyperparameters of the hierarchical model and tree prior."""

    mu: np.ndarray
    B: np.ndarray
    V: np.ndarray
    rho: float
    alpha_sigma: float = 5.0
    q_sigma: float = 5.0
    alpha_tau: float = 5.0
    q_tau: float = 5.0
    lambda_g: float = 10.0
    a: float = 0.5
    b: float = 2.0

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        m = mu.size
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "B", _as_matrix(self.B, m))
        object.__setattr__(self, "V", _as_matrix(self.V, m))
        for name in ("B", "V"):
            M = getattr(self, name)
            if M.shape != (m, m) or not np.allclose(M, M.T):
                raise ValueError(f"{name} must be a symmetric {m}x{m} matrix")
            if np.any(np.linalg.eigvalsh(M) <= 0):
                raise ValueError(f"{name} must be positive definite")
        if self.rho < m:
            raise ValueError(f"rho must be >= m = {m}, got {self.rho}")
        for name in ("alpha_sigma", "q_sigma", "alpha_tau", "q_tau", "lambda_g"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.a < 1:
            raise ValueError(f"tree prior a must lie in (0, 1), got {self.a}")
        if self.b < 0:
            raise ValueError(f"tree prior b must be >= 0, got {self.b}")

    @classmethod
    def default(cls, m, **overrides):
        """Weakly informative defaults for unit-cube inputs and standardized responses."""
        kw = dict(mu=np.zeros(m), B=np.eye(m), V=np.eye(m), rho=float(m))
        kw.update(overrides)
        return cls(**kw)

    @property
    def m(self):
        return self.mu.size

    @cached_property
    def B_inv(self):
        return np.linalg.inv(self.B)

    @cached_property
    def rhoV(self):
        return self.rho * self.V


class HyperState:
    """Shared hierarchical parameters ``beta0`` and ``W`` plus the fixed hyperparameters."""

    def __init__(self, fixed, beta0=None, W=None):
        self.fixed = fixed
        self.version = 0
        m = fixed.m
        self.set_beta0(fixed.mu if beta0 is None else beta0)
        self.set_W(np.eye(m) if W is None else W)

    def set_beta0(self, beta0):
        self.beta0 = np.array(beta0, dtype=float)
        self.version += 1

    def set_W(self, W):
        W = np.array(W, dtype=float)
        W = 0.5 * (W + W.T)
        L = np.linalg.cholesky(W)
        self.W = W
        self.W_inv = np.linalg.inv(W)
        self.W_logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        self.version += 1

    @property
    def m(self):
        return self.fixed.m

    def copy(self):
        return HyperState(self.fixed, self.beta0.copy(), self.W.copy())


@dataclass
class LeafState:
    """Parameters and data of one region.

    ``cm`` is the factored correlation matrix for ``(X, corr)``; it is
    ``None`` only when the sampler runs without a likelihood.
    """

    X: np.ndarray
    Z: np.ndarray
    idx: np.ndarray
    corr: CorrParams
    beta: np.ndarray
    sigma2: float = 1.0
    tau2: float = 1.0
    cm: CorrMatrix | None = field(default=None, repr=False)
    _cache: tuple | None = field(default=None, repr=False, compare=False)

    @property
    def n(self):
        return self.Z.shape[0]

    @cached_property
    def F(self):
        return design_matrix(self.X)

    def refactor(self, corr=None):
        """Rebuild the correlation cache, optionally with new parameters."""
        corr = self.corr if corr is None else corr
        self.cm = build_corr_matrix(self.X, corr, self.Z, self.F)
        self.corr = corr
        return self

    def copy(self, keep_cache=True):
        return LeafState(
            self.X, self.Z, self.idx, self.corr, self.beta.copy(), self.sigma2, self.tau2,
            self.cm if keep_cache else None,
        )


class PosteriorTerms(NamedTuple):
    beta_tilde: np.ndarray
    V_beta: np.ndarray
    V_beta_inv: np.ndarray
    V_beta_logdet: float
    psi: float


def posterior_terms(F, Z, cm, beta0, W_inv, tau2):
    """Conjugate quantities ``(beta~, V_beta, psi)`` for one region.

    ``cm`` may be ``None`` for a region without data, in which case the
    data contributions vanish.
    """
    prior_prec = W_inv / tau2
    prior_lin = prior_prec @ beta0
    if cm is None or len(Z) == 0:
        FtKF = 0.0
        FtKZ = 0.0
        ZtKZ = 0.0
    else:
        inv_z = cm.inv_z if cm.inv_z is not None else cm.solve(Z)
        inv_F = cm.inv_F
        FtKF = F.T @ inv_F
        FtKZ = F.T @ inv_z
        ZtKZ = float(Z @ inv_z)
    V_inv = FtKF + prior_prec
    V_inv = 0.5 * (V_inv + V_inv.T)
    try:
        L = np.linalg.cholesky(V_inv)
    except np.linalg.LinAlgError as exc:
        raise NumericStateError("beta precision matrix is not positive definite") from exc
    V = np.linalg.inv(V_inv)
    beta_tilde = V @ (FtKZ + prior_lin)
    logdet_V = -2.0 * float(np.sum(np.log(np.diag(L))))
    psi = ZtKZ + float(beta0 @ prior_lin) - float(beta_tilde @ V_inv @ beta_tilde)
    return PosteriorTerms(beta_tilde, V, V_inv, logdet_V, psi)


def leaf_terms(leaf, hyper):
    """:func:`posterior_terms` for a leaf, memoized on (factor, tau2, hyper version)."""
    c = leaf._cache
    if c is not None:
        cm, tau2, h, version, t = c
        if cm is leaf.cm and tau2 == leaf.tau2 and h is hyper and version == hyper.version:
            return t
    t = posterior_terms(leaf.F, leaf.Z, leaf.cm, hyper.beta0, hyper.W_inv, leaf.tau2)
    leaf._cache = (leaf.cm, leaf.tau2, hyper, hyper.version, t)
    return t


def beta_conditional(leaf, hyper):
    """Mean and unscaled covariance of ``beta | rest``.

    The Gibbs draw is ``N(mean, sigma2 * cov)``.
    """
    t = leaf_terms(leaf, hyper)
    return t.beta_tilde, t.V_beta


def draw_beta(leaf, hyper, rng):
    mean, cov = beta_conditional(leaf, hyper)
    L = np.linalg.cholesky(leaf.sigma2 * cov)
    return mean + L @ rng.standard_normal(mean.size)


def draw_inv_gamma(shape, scale, rng):
    if not (shape > 0 and scale > 0):
        raise NumericStateError(f"invalid inverse-gamma parameters ({shape}, {scale})")
    return scale / rng.gamma(shape)


def draw_tau2(leaf, hyper, rng):
    """Gibbs draw of ``tau2 ~ IG((alpha_tau + m)/2, (q_tau + b)/2)``."""
    fx = hyper.fixed
    diff = leaf.beta - hyper.beta0
    bq = float(diff @ hyper.W_inv @ diff) / leaf.sigma2
    return draw_inv_gamma(0.5 * (fx.alpha_tau + hyper.m), 0.5 * (fx.q_tau + bq), rng)


def draw_W(leaves, hyper, rng):
    """Gibbs draw of ``W`` through ``W^{-1} ~ Wishart((rho V + V_W)^{-1}, rho + R)``."""
    fx = hyper.fixed
    S = fx.rhoV.copy()
    for leaf in leaves:
        diff = leaf.beta - hyper.beta0
        S += np.outer(diff, diff) / (leaf.sigma2 * leaf.tau2)
    S = 0.5 * (S + S.T)
    try:
        scale = np.linalg.inv(S)
        np.linalg.cholesky(scale)
    except np.linalg.LinAlgError as exc:
        raise NumericStateError("Wishart scale matrix is not positive definite") from exc
    df = fx.rho + len(leaves)
    W_inv = np.atleast_2d(stats.wishart.rvs(df=df, scale=scale, random_state=rng))
    return np.linalg.inv(W_inv)


def beta0_conditional(leaves, hyper):
    """Mean and covariance of ``beta0 | rest``."""
    fx = hyper.fixed
    w = 0.0
    s = np.zeros(hyper.m)
    for leaf in leaves:
        c = 1.0 / (leaf.sigma2 * leaf.tau2)
        w += c
        s += c * leaf.beta
    prec = fx.B_inv + hyper.W_inv * w
    try:
        cov = np.linalg.inv(prec)
    except np.linalg.LinAlgError as exc:
        raise NumericStateError("beta0 precision is singular") from exc
    cov = 0.5 * (cov + cov.T)
    mean = cov @ (fx.B_inv @ fx.mu + hyper.W_inv @ s)
    return mean, cov


def draw_beta0(leaves, hyper, rng):
    mean, cov = beta0_conditional(leaves, hyper)
    return mean + np.linalg.cholesky(cov) @ rng.standard_normal(mean.size)


def log_prior_range(d):
    """Log density of the two-component gamma mixture, summed over components."""
    out = 0.0
    for x in np.atleast_1d(d).tolist():
        lx = math.log(x)
        c = [lw + (k - 1.0) * lx - r * x for lw, k, r in _RANGE_TERMS]
        top = max(c)
        out += top + math.log(sum(math.exp(v - top) for v in c))
    return out


def log_prior_corr(corr, fixed):
    """Log prior of ``(d, g)``: gamma mixture on each range, Exp(lambda) on the nugget."""
    lam = fixed.lambda_g
    return log_prior_range(corr.d) + math.log(lam) - lam * corr.g


def prior_draw_range(size, rng):
    w = np.array([c[0] for c in RANGE_PRIOR])
    comp = rng.choice(len(RANGE_PRIOR), size=size, p=w / w.sum())
    shape = np.array([RANGE_PRIOR[c][1] for c in comp])
    rate = np.array([RANGE_PRIOR[c][2] for c in comp])
    return rng.gamma(shape) / rate


def prior_draw_corr(hyper, m_X, family, rng, p0=2.0):
    """Draw ``(d, g)`` from the prior."""
    fixed = hyper.fixed if isinstance(hyper, HyperState) else hyper
    family = Family(family)
    k = 1 if family is Family.ISOTROPIC else m_X
    d = prior_draw_range(k, rng)
    g = rng.exponential(1.0 / fixed.lambda_g)
    while g < NUGGET_FLOOR:
        g = rng.exponential(1.0 / fixed.lambda_g)
    return CorrParams(family, d, g, p0)


def log_marginal(F, Z, cm, beta0, W_inv, W_logdet, tau2, alpha_sigma, q_sigma, terms=None):
    """Log of ``p(Z | K, beta0, W, tau2)`` with ``beta`` and ``sigma2`` integrated out.

    All normalizing constants are kept.
    """
    n = len(Z)
    m = F.shape[1]
    t = posterior_terms(F, Z, cm, beta0, W_inv, tau2) if terms is None else terms
    qpsi = q_sigma + t.psi
    if not qpsi > 0:
        raise NumericStateError(f"q_sigma + psi = {qpsi} is not positive")
    log_det_K = cm.log_det if (cm is not None and n) else 0.0
    out = 0.5 * (t.V_beta_logdet - n * LOG_2PI - log_det_K - W_logdet - m * math.log(tau2))
    out += 0.5 * alpha_sigma * math.log(0.5 * q_sigma) + gammaln(0.5 * (alpha_sigma + n))
    out -= 0.5 * (alpha_sigma + n) * math.log(0.5 * qpsi) + gammaln(0.5 * alpha_sigma)
    return out


def log_marginal_K(leaf, hyper, likelihood=True, corr=None, cm=None):
    """Log marginal posterior (up to the tree-level normalizer) of the leaf's correlation.

    Includes the data term with ``beta`` and ``sigma2`` integrated out and
    the log prior of ``(d, g)``. With ``likelihood=False`` only the prior
    term is returned. ``corr``/``cm`` evaluate a candidate parameter set
    against the leaf's data without touching the leaf.
    """
    if corr is None:
        corr = leaf.corr
        cm = leaf.cm
    lp = log_prior_corr(corr, hyper.fixed)
    if not likelihood:
        return lp
    terms = None
    if cm is None:
        cm = build_corr_matrix(leaf.X, corr, leaf.Z, leaf.F)
        if corr is leaf.corr:
            leaf.cm = cm
    if cm is leaf.cm:
        terms = leaf_terms(leaf, hyper)
    fx = hyper.fixed
    return lp + log_marginal(
        leaf.F, leaf.Z, cm, hyper.beta0, hyper.W_inv, hyper.W_logdet,
        leaf.tau2, fx.alpha_sigma, fx.q_sigma, terms,
    )


def sigma2_conditional(leaf, hyper):
    """Shape and scale of ``sigma2 | Z, K, beta0, W, tau2`` (``beta`` integrated out)."""
    fx = hyper.fixed
    t = leaf_terms(leaf, hyper)
    return 0.5 * (fx.alpha_sigma + leaf.n), 0.5 * (fx.q_sigma + t.psi)


def draw_sigma2_marginal(leaf, hyper, rng):
    shape, scale = sigma2_conditional(leaf, hyper)
    return draw_inv_gamma(shape, scale, rng)


def corr_log_accept(leaf, hyper, prop, likelihood=True):
    """Log MH ratio for moving ``leaf.corr`` to ``prop`` under the sliding window.

    Returns ``(log_ratio, cm)`` where ``cm`` is the proposal's factored
    correlation matrix (``None`` without a likelihood). A proposal whose
    factorization fails gets ``-inf``.
    """
    cur = leaf.corr
    log_q = float(np.sum(np.log(cur.d) - np.log(prop.d))) + math.log(cur.g) - math.log(prop.g)
    if not likelihood:
        return log_prior_corr(prop, hyper.fixed) - log_prior_corr(cur, hyper.fixed) + log_q, None
    lm_cur = log_marginal_K(leaf, hyper)
    try:
        cm = build_corr_matrix(leaf.X, prop, leaf.Z, leaf.F)
        lm_new = log_marginal_K(leaf, hyper, corr=prop, cm=cm)
    except (IllConditionedError, NumericStateError):
        return -math.inf, None
    return lm_new - lm_cur + log_q, cm


def mh_update_corr(leaf, hyper, rng, update_d=True, update_g=True, likelihood=True,
                   window=WINDOW):
    """One sliding-window Metropolis-Hastings step on ``(d, g)``.

    Each updated parameter ``x`` is proposed as ``x * Unif(window)``; the
    default window gives ``Unif(3x/4, 4x/3)``. The proposal is asymmetric,
    contributing ``log(x / x*)`` per parameter to the acceptance ratio.
    Proposals with a nugget below ``NUGGET_FLOOR`` or a failed
    factorization are rejected.

    Returns
    -------
    (LeafState, bool)
        The (possibly updated in place) leaf and whether the move was accepted.
    """
    lo, hi = window
    cur = leaf.corr
    d_new = cur.d * rng.uniform(lo, hi, size=cur.d.size) if update_d else cur.d
    g_new = cur.g * rng.uniform(lo, hi) if update_g else cur.g
    if g_new < NUGGET_FLOOR:
        return leaf, False
    prop = cur.replace(d=d_new, g=g_new)
    log_a, cm = corr_log_accept(leaf, hyper, prop, likelihood)
    if log_a == -math.inf or math.log(rng.uniform()) >= log_a:
        return leaf, False
    leaf.corr = prop
    leaf.cm = cm
    return leaf, True


def update_leaf(leaf, hyper, rng, likelihood=True, update_d=True, update_g=True, block=True):
    """Within-leaf sweep: MH on ``(d, g)``, then ``sigma2``, ``beta`` and ``tau2``.

    ``block=False`` replaces the joint ``(d, g)`` proposal with separate
    steps for ``d`` and then ``g``. Without a likelihood the GP parameters
    are drawn from their priors.
    """
    if block:
        mh_update_corr(leaf, hyper, rng, update_d=update_d, update_g=update_g,
                       likelihood=likelihood)
    else:
        if update_d:
            mh_update_corr(leaf, hyper, rng, update_g=False, likelihood=likelihood)
        if update_g:
            mh_update_corr(leaf, hyper, rng, update_d=False, likelihood=likelihood)
    if likelihood:
        leaf.sigma2 = draw_sigma2_marginal(leaf, hyper, rng)
        leaf.beta = draw_beta(leaf, hyper, rng)
    else:
        fx = hyper.fixed
        leaf.sigma2 = draw_inv_gamma(0.5 * fx.alpha_sigma, 0.5 * fx.q_sigma, rng)
        L = np.linalg.cholesky(leaf.sigma2 * leaf.tau2 * hyper.W)
        leaf.beta = hyper.beta0 + L @ rng.standard_normal(hyper.m)
    leaf.tau2 = draw_tau2(leaf, hyper, rng)
    return leaf


def update_hyper(leaves, hyper, rng):
    """Hierarchical draws of ``beta0`` then ``W`` given all leaves."""
    hyper.set_beta0(draw_beta0(leaves, hyper, rng))
    hyper.set_W(draw_W(leaves, hyper, rng))
    return hyper


def log_prior_hyper(hyper, leaves):
    """Log prior of ``beta0``, ``W^{-1}`` and every leaf's ``tau2``."""
    fx = hyper.fixed
    lp = float(stats.multivariate_normal.logpdf(hyper.beta0, fx.mu, fx.B))
    lp += float(stats.wishart.logpdf(hyper.W_inv, df=fx.rho, scale=np.linalg.inv(fx.rhoV)))
    a, q = 0.5 * fx.alpha_tau, 0.5 * fx.q_tau
    for leaf in leaves:
        lp += a * math.log(q) - gammaln(a) - (a + 1) * math.log(leaf.tau2) - q / leaf.tau2
    return lp
