"""Dataset ingestion, scaling and bundled/synthetic data sources."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from importlib import resources

import numpy as np


class DataError(ValueError):
    """Input data failed validation."""


@dataclass
class Dataset:
    """Raw data plus the affine maps to the unit cube and standardized response.

    Attributes
    ----------
    X_raw : (n, m_X) array
    Z_raw : (n,) array
    columns : list of str
        Input column names.
    response : str
    x_min, x_max : (m_X,) arrays
    z_mean, z_sd : float
    """

    X_raw: np.ndarray
    Z_raw: np.ndarray
    columns: list
    response: str
    x_min: np.ndarray
    x_max: np.ndarray
    z_mean: float
    z_sd: float

    @classmethod
    def from_arrays(cls, X, Z, columns=None, response="z", n_min=None, scale_like=None):
        """Validate and wrap arrays; scaling comes from the data or ``scale_like``."""
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        Z = np.asarray(Z, dtype=float).ravel()
        if X.shape[0] != Z.shape[0]:
            raise DataError(f"X has {X.shape[0]} rows but Z has {Z.shape[0]}")
        if columns is None:
            columns = [f"x{i + 1}" for i in range(X.shape[1])]
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
            raise DataError("data contain missing or non-finite values")
        need = X.shape[1] + 3 if n_min is None else n_min
        if X.shape[0] < need:
            raise DataError(f"need at least n_min={need} rows, got {X.shape[0]}")
        if scale_like is not None:
            return cls(X, Z, list(columns), response, scale_like.x_min, scale_like.x_max,
                       scale_like.z_mean, scale_like.z_sd)
        x_min = X.min(axis=0)
        x_max = X.max(axis=0)
        flat = np.flatnonzero(x_max - x_min <= 0)
        if flat.size:
            names = ", ".join(columns[i] for i in flat)
            raise DataError(f"degenerate (constant) input column(s): {names}")
        z_sd = float(Z.std(ddof=1))
        if not z_sd > 0:
            raise DataError(f"response column {response!r} is constant")
        return cls(X, Z, list(columns), response, x_min, x_max, float(Z.mean()), z_sd)

    @property
    def n(self):
        return self.X_raw.shape[0]

    @property
    def m_X(self):
        return self.X_raw.shape[1]

    @property
    def X(self):
        return self.scale_x(self.X_raw)

    @property
    def Z(self):
        return self.scale_z(self.Z_raw)

    def scale_x(self, X):
        return (np.asarray(X, dtype=float) - self.x_min) / (self.x_max - self.x_min)

    def unscale_x(self, X):
        return np.asarray(X, dtype=float) * (self.x_max - self.x_min) + self.x_min

    def scale_z(self, Z):
        return (np.asarray(Z, dtype=float) - self.z_mean) / self.z_sd

    def unscale_z(self, Z):
        return np.asarray(Z, dtype=float) * self.z_sd + self.z_mean

    def subset(self, rows, rescale=True):
        """Rows of this dataset; rescaled from the subset unless ``rescale`` is False."""
        return Dataset.from_arrays(self.X_raw[rows], self.Z_raw[rows], self.columns,
                                   self.response, scale_like=None if rescale else self)

    def scale_info(self):
        return {
            "columns": list(self.columns),
            "response": self.response,
            "x_min": [float(v) for v in self.x_min],
            "x_max": [float(v) for v in self.x_max],
            "z_mean": self.z_mean,
            "z_sd": self.z_sd,
        }


def _parse_float(text, row, col):
    t = text.strip()
    if t == "" or t.upper() in ("NA", "NAN"):
        raise DataError(f"missing value at row {row}, column {col!r}")
    try:
        v = float(t)
    except ValueError:
        raise DataError(f"non-numeric value {text!r} at row {row}, column {col!r}") from None
    if not math.isfinite(v):
        raise DataError(f"non-finite value {text!r} at row {row}, column {col!r}")
    return v


def read_table(path):
    """Read a header-plus-numeric-body CSV into ``(header, array)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    body = []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        body.append([_parse_float(c, r, header[j]) for j, c in enumerate(row)])
    return header, np.array(body, dtype=float).reshape(-1, len(header))


def load_csv(path, response_column, n_min=None):
    """Load a CSV with a header row; every non-response column is an input."""
    header, data = read_table(path)
    if response_column not in header:
        raise DataError(f"{path}: response column {response_column!r} not in header {header}")
    j = header.index(response_column)
    cols = [h for i, h in enumerate(header) if i != j]
    X = np.delete(data, j, axis=1)
    return Dataset.from_arrays(X, data[:, j], cols, response_column, n_min=n_min)


def motorcycle_path():
    return resources.files("treedgp") / "data" / "mcycle.csv"


def load_motorcycle():
    """Silverman's motorcycle accident data: head acceleration vs time (ms)."""
    with resources.as_file(motorcycle_path()) as p:
        return load_csv(p, "accel")


def step_data(n=60, step=0.5, jump=1.0, noise=0.05, seed=0):
    """1-d piecewise-constant data on an equispaced grid with a single jump.

    The grid is ``linspace(0, 1, n)``; the jump sits at ``step``.
    """
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 1.0, n)
    z = np.where(x <= step, 0.0, jump) + noise * rng.standard_normal(n)
    return Dataset.from_arrays(x[:, None], z, ["x"], "z")


def lgbb_surface(mach, alpha):
    """Noise-free lift-like surface with a sharp ridge at Mach one."""
    mach = np.asarray(mach, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    sub = 0.04 * alpha * (1.0 + 0.3 * mach)
    sup = 0.052 * alpha / np.sqrt(np.maximum(mach, 1.0))
    base = np.where(mach < 1.0, sub, sup)
    ridge = 0.3 * (alpha + 5.0) / 35.0 * np.exp(-np.abs(mach - 1.0) / 0.05)
    return base + ridge


def lgbb_noise_sd(mach, alpha):
    """Input-dependent noise: noisy at high angle of attack in the subsonic regime."""
    mach = np.asarray(mach, dtype=float)
    alpha = np.asarray(alpha, dtype=float)
    return np.where((alpha > 20.0) & (mach < 1.0), 0.08, 0.01)


def lgbb_like(n_coarse=(8, 6), n_fine=(10, 5), seed=0):
    """Synthetic stand-in for the booster lift data.

    A coarse grid over Mach ``[0, 6]`` x alpha ``[-5, 30]`` plus a finer grid
    around Mach one, mimicking the hand-designed nested grids.
    """
    rng = np.random.default_rng(seed)
    m1, a1 = np.meshgrid(np.linspace(0, 6, n_coarse[0]), np.linspace(-5, 30, n_coarse[1]))
    m2, a2 = np.meshgrid(np.linspace(0.6, 1.6, n_fine[0]), np.linspace(-5, 30, n_fine[1]))
    mach = np.concatenate([m1.ravel(), m2.ravel()])
    alpha = np.concatenate([a1.ravel(), a2.ravel()])
    z = lgbb_surface(mach, alpha) + lgbb_noise_sd(mach, alpha) * rng.standard_normal(mach.size)
    return Dataset.from_arrays(np.column_stack([mach, alpha]), z, ["mach", "alpha"], "lift")
