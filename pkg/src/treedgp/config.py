"""Flat ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Every problem in a file is
collected and reported together, before any data are touched.

Keys
----
data              CSV path (relative to the config file), ``builtin:mcycle``,
                  ``synthetic:step`` or ``synthetic:lgbb``
response          response column name (required for CSV data)
output            output directory (default ``fit_output`` beside the config)
data_seed         seed for the synthetic generators (default 0)
rounds, burn_in, thin, chains, seed, workers, checkpoint_every
move_weights      four weights: grow, prune, change, swap/rotate
family            ``isotropic`` or ``separable``
p0                power in (0, 2]
n_min             minimum observations per leaf (default m_X + 3)
block_corr        ``true`` for a joint (d, g) proposal, ``false`` for separate ones
mu                prior mean of beta0 (scalar or m values)
B, V              scalar (times identity), m diagonal values, or m*m entries
rho, alpha_sigma, q_sigma, alpha_tau, q_tau, lambda_g
tree_a, tree_b    tree prior split parameters
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, lgbb_like, load_csv, load_motorcycle, step_data
from .kernel import Family
from .leaf_gp import Hyperparameters
from .sampler import McmcConfig


class ConfigError(ValueError):
    """One or more configuration problems; ``errors`` lists them all."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


def _int(v):
    return int(v)


def _float(v):
    return float(v)


def _bool(v):
    t = v.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {v!r}")


def _floats(v):
    return tuple(float(x) for x in v.replace(",", " ").split())


def _family(v):
    return Family(v.strip().lower())


_MCMC_KEYS = {
    "rounds": _int,
    "burn_in": _int,
    "thin": _int,
    "chains": _int,
    "seed": _int,
    "workers": _int,
    "checkpoint_every": _int,
    "move_weights": _floats,
    "family": _family,
    "p0": _float,
    "n_min": _int,
    "block_corr": _bool,
}

_HYPER_KEYS = {
    "mu": _floats,
    "B": _floats,
    "V": _floats,
    "rho": _float,
    "alpha_sigma": _float,
    "q_sigma": _float,
    "alpha_tau": _float,
    "q_tau": _float,
    "lambda_g": _float,
    "tree_a": _float,
    "tree_b": _float,
}

_OTHER_KEYS = {"data": str, "response": str, "output": str, "data_seed": _int}

KNOWN_KEYS = {**_OTHER_KEYS, **_MCMC_KEYS, **_HYPER_KEYS}


@dataclass
class RunConfig:
    """A parsed configuration: data source, sampler settings and prior overrides."""

    data: str
    response: str | None = None
    output: str = "fit_output"
    data_seed: int = 0
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    hyper: dict = field(default_factory=dict)
    base_dir: str = "."

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.normpath(os.path.join(self.base_dir, path))

    @property
    def output_dir(self):
        return self.resolve(self.output)

    def load_data(self):
        """Load the configured dataset (raises :class:`~treedgp.data.DataError`)."""
        n_min = self.mcmc.n_min
        src = self.data
        if src == "builtin:mcycle":
            ds = load_motorcycle()
        elif src == "synthetic:step":
            ds = step_data(seed=self.data_seed)
        elif src == "synthetic:lgbb":
            ds = lgbb_like(seed=self.data_seed)
        else:
            return load_csv(self.resolve(src), self.response, n_min=n_min)
        if n_min is not None and ds.n < n_min:
            return Dataset.from_arrays(ds.X_raw, ds.Z_raw, ds.columns, ds.response, n_min=n_min)
        return ds

    def hyperparameters(self, m):
        """Build :class:`Hyperparameters` for ``m`` trend coefficients."""
        errs = []
        kw = {}
        for key, val in self.hyper.items():
            if key in ("tree_a", "tree_b"):
                kw[key[-1]] = val
            elif key == "mu":
                if len(val) == 1:
                    kw["mu"] = np.full(m, val[0])
                elif len(val) == m:
                    kw["mu"] = np.array(val)
                else:
                    errs.append(f"mu: expected 1 or {m} values, got {len(val)}")
            elif key in ("B", "V"):
                if len(val) == 1:
                    kw[key] = val[0] * np.eye(m)
                elif len(val) == m:
                    kw[key] = np.diag(val)
                elif len(val) == m * m:
                    kw[key] = np.array(val).reshape(m, m)
                else:
                    errs.append(f"{key}: expected 1, {m} or {m * m} values, got {len(val)}")
            else:
                kw[key] = val
        if errs:
            raise ConfigError(errs)
        try:
            return Hyperparameters.default(m, **kw)
        except ValueError as exc:
            raise ConfigError([str(exc)]) from None


def parse_config(text, base_dir="."):
    """Parse configuration text; raises :class:`ConfigError` listing every problem."""
    errs = []
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errs.append(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
            continue
        key, val = (t.strip() for t in line.split("=", 1))
        if key not in KNOWN_KEYS:
            errs.append(f"line {lineno}: unknown key {key!r}")
            continue
        if key in seen:
            errs.append(f"line {lineno}: duplicate key {key!r} (first set on line {seen[key][0]})")
            continue
        if val == "":
            errs.append(f"line {lineno}: empty value for {key!r}")
            continue
        try:
            seen[key] = (lineno, KNOWN_KEYS[key](val))
        except ValueError as exc:
            errs.append(f"line {lineno}: bad value for {key!r}: {exc}")

    vals = {k: v for k, (_, v) in seen.items()}
    if "data" not in vals and not any(e.endswith("'data'") for e in errs):
        errs.append("missing required key 'data'")
    data = vals.get("data", "")
    builtin = data.startswith(("builtin:", "synthetic:"))
    if builtin and data not in ("builtin:mcycle", "synthetic:step", "synthetic:lgbb"):
        errs.append(f"unknown data source {data!r}")
    if data and not builtin and "response" not in vals:
        errs.append("missing required key 'response' for CSV data")

    mcmc = McmcConfig(**{k: vals[k] for k in _MCMC_KEYS if k in vals})
    errs.extend(mcmc.validate())
    hyper = {k: vals[k] for k in _HYPER_KEYS if k in vals}
    for k in ("rho", "alpha_sigma", "q_sigma", "alpha_tau", "q_tau", "lambda_g"):
        if k in hyper and not hyper[k] > 0:
            errs.append(f"{k} must be positive, got {hyper[k]}")
    if "tree_a" in hyper and not 0 < hyper["tree_a"] < 1:
        errs.append(f"tree_a must lie in (0, 1), got {hyper['tree_a']}")
    if "tree_b" in hyper and hyper["tree_b"] < 0:
        errs.append(f"tree_b must be >= 0, got {hyper['tree_b']}")
    if errs:
        raise ConfigError(errs)
    return RunConfig(
        data=data,
        response=vals.get("response"),
        output=vals.get("output", "fit_output"),
        data_seed=vals.get("data_seed", 0),
        mcmc=mcmc,
        hyper=hyper,
        base_dir=base_dir,
    )


def load_config(path):
    """Read and parse a configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError([f"cannot read config {path}: {exc.strerror}"]) from None
    return parse_config(text, base_dir=os.path.dirname(os.path.abspath(path)))


def dump_config(cfg):
    """Canonical text for a :class:`RunConfig` (deterministic key order)."""
    m = cfg.mcmc
    lines = [f"data = {cfg.data}"]
    if cfg.response is not None:
        lines.append(f"response = {cfg.response}")
    lines += [
        f"data_seed = {cfg.data_seed}",
        f"rounds = {m.rounds}",
        f"burn_in = {m.burn_in}",
        f"thin = {m.thin}",
        f"chains = {m.chains}",
        f"seed = {m.seed}",
        "move_weights = " + ", ".join(f"{w:g}" for w in m.move_weights),
        f"family = {m.family.value}",
        f"p0 = {m.p0:g}",
        f"block_corr = {str(m.block_corr).lower()}",
    ]
    if m.n_min is not None:
        lines.append(f"n_min = {m.n_min}")
    for k in _HYPER_KEYS:
        if k in cfg.hyper:
            v = cfg.hyper[k]
            text = ", ".join(f"{x:g}" for x in v) if isinstance(v, tuple) else f"{v:g}"
            lines.append(f"{k} = {text}")
    return "\n".join(lines) + "\n"
