"""Kriging prediction per posterior sample and Bayesian model averaging."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .kernel import build_corr_matrix, cross_corr, design_matrix
from .leaf_gp import posterior_terms
from .tree import SnapLeaf, partition, snapshot_leaves

DEFAULT_QUANTILES = (0.05, 0.95)


class LeafPredictor:
    """Predictive moments for queries inside one region.

    Parameters
    ----------
    X, Z : arrays
        The region's scaled design and responses.
    corr : CorrParams
    sigma2, tau2 : float
    beta0, W : arrays
        Hierarchical prior mean and covariance of the trend coefficients.
    """

    def __init__(self, X, Z, corr, sigma2, tau2, beta0, W, cm=None):
        self.X = np.asarray(X, dtype=float)
        self.Z = np.asarray(Z, dtype=float)
        self.corr = corr
        self.sigma2 = float(sigma2)
        self.F = design_matrix(self.X)
        if cm is None:
            cm = build_corr_matrix(self.X, corr, self.Z, self.F)
        self.cm = cm
        t = posterior_terms(self.F, self.Z, cm, np.asarray(beta0), np.linalg.inv(W), tau2)
        self.beta_tilde = t.beta_tilde
        self.V_beta = t.V_beta
        self.resid_solve = cm.inv_z - cm.inv_F @ t.beta_tilde

    def moments(self, XX):
        """Mean and variance at query rows ``XX``.

        The variance is that of a new noisy observation, so it includes
        the nugget.
        """
        XX = np.atleast_2d(np.asarray(XX, dtype=float))
        k = cross_corr(XX, self.X, self.corr)  # (q, n)
        f = design_matrix(XX)  # (q, m)
        mean = f @ self.beta_tilde + k @ self.resid_solve
        Kinv_k = self.cm.solve(k.T)  # (n, q)
        h = f - (self.F.T @ Kinv_k).T  # (q, m)
        var = (1.0 + self.corr.g) - np.einsum("ij,ji->i", k, Kinv_k)
        var += np.einsum("ij,jk,ik->i", h, self.V_beta, h)
        var = self.sigma2 * var
        return mean, np.maximum(var, np.finfo(float).tiny)


def predictive_moments(x, leaf, hyper):
    """Kriging mean and variance at a single point inside ``leaf``'s region."""
    pred = LeafPredictor(leaf.X, leaf.Z, leaf.corr, leaf.sigma2, leaf.tau2, hyper.beta0,
                         hyper.W, cm=leaf.cm)
    mean, var = pred.moments(np.atleast_2d(x))
    return float(mean[0]), float(var[0])


def predict_sample(XX, sample, X, Z):
    """Route each query to its leaf in ``sample`` and return kriging (mean, var).

    ``X``, ``Z`` are the scaled training data the sample was fitted to.
    """
    XX = np.atleast_2d(np.asarray(XX, dtype=float))
    leaves = snapshot_leaves(sample.tree)
    assign = partition(XX, sample.tree)
    mean = np.empty(XX.shape[0])
    var = np.empty(XX.shape[0])
    rows_all = None
    for j, leaf in enumerate(leaves):
        rows = np.flatnonzero(assign == j)
        if rows.size == 0:
            continue
        idx = leaf.idx
        if idx is None:
            if rows_all is None:
                rows_all = partition(X, sample.tree)
            idx = np.flatnonzero(rows_all == j)
        pred = LeafPredictor(X[idx], Z[idx], leaf.corr, leaf.sigma2, leaf.tau2,
                             sample.beta0, sample.W)
        mean[rows], var[rows] = pred.moments(XX[rows])
    return mean, var


def sample_noise(seed, sample, n):
    """Standard normals keyed on (seed, chain, round), independent of sample order."""
    rng = np.random.default_rng([int(seed), int(sample.chain), int(sample.round)])
    return rng.standard_normal(n)


@dataclass
class PredictiveSummary:
    """Model-averaged predictions on the original response scale."""

    XX: np.ndarray
    mean: np.ndarray
    median: np.ndarray
    quantiles: dict
    n_draws: int
    draws: np.ndarray | None = None

    def quantile(self, level):
        return self.quantiles[level]


def _quantile_name(level):
    pct = 100.0 * level
    return f"q{pct:02.0f}" if float(pct).is_integer() else f"q{pct:g}"


def posterior_moments(XX, samples, X, Z, workers=1):
    """Per-sample kriging means and variances, shape ``(S, q)`` each.

    With ``workers > 1`` the samples are split into blocks evaluated on a
    thread pool; results are joined in sample order.
    """
    XX = np.atleast_2d(np.asarray(XX, dtype=float))
    S = len(samples)
    means = np.empty((S, XX.shape[0]))
    vars_ = np.empty((S, XX.shape[0]))

    def job(block):
        for i in block:
            means[i], vars_[i] = predict_sample(XX, samples[i], X, Z)

    blocks = np.array_split(np.arange(S), max(1, min(workers, S)))
    if workers > 1 and S > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            list(ex.map(job, blocks))
    else:
        for b in blocks:
            job(b)
    return means, vars_


def aggregate(XX, samples, X, Z, quantiles=DEFAULT_QUANTILES, seed=0, dataset=None,
              workers=1, keep_draws=False):
    """Pool one posterior predictive draw per (sample, location).

    The reported mean is the average of the per-sample kriging means;
    median and quantiles come from the pooled draws. When ``dataset`` is
    given, ``XX`` is taken on the original input scale and everything is
    mapped back to the original response scale.
    """
    if not samples:
        raise ValueError("aggregate needs at least one posterior sample")
    XX_in = np.atleast_2d(np.asarray(XX, dtype=float))
    XXs = XX_in if dataset is None else dataset.scale_x(XX_in)
    if np.any(XXs < -1e-12) or np.any(XXs > 1 + 1e-12):
        warnings.warn("some query points lie outside the training input range", stacklevel=2)
    means, vars_ = posterior_moments(XXs, samples, X, Z, workers)
    noise = np.vstack([sample_noise(seed, s, XXs.shape[0]) for s in samples])
    draws = means + np.sqrt(vars_) * noise
    mean = means.mean(axis=0)
    levels = tuple(float(q) for q in quantiles)
    qs = np.quantile(draws, (0.5,) + levels, axis=0)
    median, qvals = qs[0], qs[1:]
    if dataset is not None:
        mean = dataset.unscale_z(mean)
        median = dataset.unscale_z(median)
        qvals = dataset.unscale_z(qvals)
        if keep_draws:
            draws = dataset.unscale_z(draws)
    return PredictiveSummary(
        XX=XX_in,
        mean=mean,
        median=median,
        quantiles={lv: qvals[i] for i, lv in enumerate(levels)},
        n_draws=len(samples),
        draws=draws if keep_draws else None,
    )


def write_summary(path, summary, columns=None):
    """Write a summary as UTF-8 CSV: coordinates, mean, lower quantile(s), median, upper."""
    XX = summary.XX
    if columns is None:
        columns = [f"x{i + 1}" for i in range(XX.shape[1])]
    levels = sorted(summary.quantiles)
    lower = [lv for lv in levels if lv < 0.5]
    upper = [lv for lv in levels if lv >= 0.5]
    header = list(columns) + ["mean"] + [_quantile_name(lv) for lv in lower] + ["median"]
    header += [_quantile_name(lv) for lv in upper]
    cols = [XX[:, i] for i in range(XX.shape[1])] + [summary.mean]
    cols += [summary.quantiles[lv] for lv in lower] + [summary.median]
    cols += [summary.quantiles[lv] for lv in upper]
    data = np.column_stack(cols)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(f"{v:.10g}" for v in row) + "\n")
