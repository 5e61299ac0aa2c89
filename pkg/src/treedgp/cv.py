"""K-fold cross-validation of predictive interval coverage."""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .predict import aggregate
from .sampler import run_chains


class CvError(ValueError):
    """Fold layout incompatible with the data."""


def assign_folds(n, folds, seed):
    """Seeded random fold labels: a disjoint, exhaustive partition of ``range(n)``.

    Fold sizes differ by at most one.
    """
    if folds < 2:
        raise CvError(f"folds must be >= 2, got {folds}")
    if folds > n:
        raise CvError(f"folds ({folds}) exceeds the number of rows ({n})")
    perm = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=int)
    labels[perm] = np.arange(n) % folds
    return labels


def interval_bounds(draws, level):
    """Central interval of pooled draws, column-wise."""
    lo = 0.5 * (1.0 - level)
    return np.quantile(draws, [lo, 1.0 - lo], axis=0)


@dataclass
class CvReport:
    """Per-row held-out results and the coverage they imply.

    ``draws`` holds the pooled posterior predictive draws (original scale)
    for every row, so coverage at other levels reuses the same fits.
    """

    folds: int
    level: float
    labels: np.ndarray
    observed: np.ndarray
    draws: list  # per row, 1-d array of pooled draws

    def _covered(self, level):
        out = np.empty(self.observed.size, dtype=bool)
        for i, d in enumerate(self.draws):
            lo, hi = interval_bounds(d, level)
            out[i] = lo <= self.observed[i] <= hi
        return out

    def bounds(self, level=None):
        level = self.level if level is None else level
        return np.array([interval_bounds(d, level) for d in self.draws]).reshape(-1, 2)

    @property
    def covered(self):
        return self._covered(self.level)

    def fold_coverage(self, level=None):
        cov = self._covered(self.level if level is None else level)
        return np.array([cov[self.labels == k].mean() for k in range(self.folds)])

    @property
    def coverage(self):
        return float(self.covered.mean())

    def coverage_at(self, level):
        return float(self._covered(level).mean())


def _fit_fold(args):
    dataset, train, test, mcmc, fixed, seed = args
    tr = dataset.subset(train)
    cfg = replace(mcmc, seed=int(seed), checkpoint_dir=None, workers=1)
    samples, results = run_chains(tr.X, tr.Z, cfg, fixed)
    if not samples:
        errs = "; ".join(r.error for r in results if r.error)
        raise ArithmeticError(f"no samples survived: {errs}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        summ = aggregate(dataset.X_raw[test], samples, tr.X, tr.Z, quantiles=(), seed=int(seed),
                         dataset=tr, keep_draws=True)
    return summ.draws


def run_cv(dataset, mcmc, fixed, folds=10, level=0.9, seed=0, workers=1, out_dir=None):
    """Fit on each fold's complement and record held-out interval membership.

    Parameters
    ----------
    dataset : Dataset
    mcmc : McmcConfig
        Sampler settings; each fold gets its own derived seed.
    fixed : Hyperparameters
    out_dir : str, optional
        Per-fold prediction files are written here and merged afterwards.
    """
    if not 0 < level < 1:
        raise CvError(f"level must lie in (0, 1), got {level}")
    n = dataset.n
    labels = assign_folds(n, folds, seed)
    n_min = mcmc.resolved_n_min(dataset.m_X)
    for k in range(folds):
        n_train = int(np.sum(labels != k))
        if n_train < n_min:
            raise CvError(f"fold {k} leaves {n_train} training rows, fewer than n_min={n_min}")
    fold_seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(folds)]
    jobs = []
    for k in range(folds):
        test = np.flatnonzero(labels == k)
        train = np.flatnonzero(labels != k)
        jobs.append((dataset, train, test, mcmc, fixed, fold_seeds[k]))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, folds)) as ex:
            fold_draws = list(ex.map(_fit_fold, jobs))
    else:
        fold_draws = [_fit_fold(j) for j in jobs]
    draws = [None] * n
    for (_, _, test, *_), d in zip(jobs, fold_draws):
        for j, row in enumerate(test):
            draws[row] = d[:, j]
    report = CvReport(folds, float(level), labels, dataset.Z_raw.copy(), draws)
    if out_dir is not None:
        write_cv(out_dir, report)
    return report


def write_cv(out_dir, report):
    """Write per-fold prediction files, the merged file and the fold summary."""
    os.makedirs(os.path.join(out_dir, "folds"), exist_ok=True)
    b = report.bounds()
    cov = report.covered
    header = "row,fold,observed,lower,upper,covered\n"

    def row_line(i):
        return (f"{i},{report.labels[i]},{report.observed[i]:.10g},{b[i, 0]:.10g},"
                f"{b[i, 1]:.10g},{int(cov[i])}\n")

    for k in range(report.folds):
        with open(os.path.join(out_dir, "folds", f"fold{k}.csv"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(header)
            for i in np.flatnonzero(report.labels == k):
                fh.write(row_line(i))
    with open(os.path.join(out_dir, "cv_predictions.csv"), "w", encoding="utf-8",
              newline="\n") as fh:
        fh.write(header)
        for k in range(report.folds):
            with open(os.path.join(out_dir, "folds", f"fold{k}.csv"), encoding="utf-8") as part:
                part.readline()
                fh.write(part.read())
    fc = report.fold_coverage()
    with open(os.path.join(out_dir, "cv_summary.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("fold,n_test,coverage,level\n")
        for k in range(report.folds):
            fh.write(f"{k},{int(np.sum(report.labels == k))},{fc[k]:.6f},{report.level:g}\n")
        fh.write(f"pooled,{report.labels.size},{report.coverage:.6f},{report.level:g}\n")
