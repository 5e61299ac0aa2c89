"""Command-line interface: ``fit``, ``predict`` and ``cv``.

Exit codes: 0 on success, 1 for invalid input or configuration, 2 when the
numerics abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .config import ConfigError, dump_config, load_config
from .cv import CvError, run_cv
from .data import DataError, Dataset, read_table
from .kernel import IllConditionedError
from .leaf_gp import NumericStateError
from .predict import aggregate, write_summary
from .sampler import map_tree, read_samples, run_chains, write_samples, write_trace
from .tree import dumps_tree

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERIC = 2

log = logging.getLogger("treedgp")


class InputError(ValueError):
    pass


def _fail(msg, code):
    print(f"error: {msg}", file=sys.stderr)
    return code


# ------------------------------------------------------------------- fit
def _write_data(path, ds):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(ds.columns + [ds.response]) + "\n")
        for x, z in zip(ds.X_raw, ds.Z_raw):
            fh.write(",".join(repr(float(v)) for v in (*x, z)) + "\n")


def cmd_fit(config_path):
    cfg = load_config(config_path)
    ds = cfg.load_data()
    fixed = cfg.hyperparameters(ds.m_X + 1)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    mcmc = cfg.mcmc
    mcmc.checkpoint_dir = os.path.join(out, "checkpoints")
    samples, results = run_chains(ds.X, ds.Z, mcmc, fixed)
    aborted = [r for r in results if r.error]
    for r in aborted:
        print(f"warning: {r.error}", file=sys.stderr)
    if not samples:
        raise NumericStateError("every chain aborted before producing a sample")
    write_samples(os.path.join(out, "samples.csv"), samples)
    write_trace(os.path.join(out, "trace.csv"), samples)
    best = map_tree(samples)
    with open(os.path.join(out, "map_tree.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_tree(best.tree) + "\n")
    _write_data(os.path.join(out, "data.csv"), ds)
    model = {
        "format": "treedgp-model v1",
        "scale": ds.scale_info(),
        "n": ds.n,
        "samples": len(samples),
        "map": {"chain": best.chain, "round": best.round, "log_post": best.log_post},
        "chains": [
            {"chain": r.chain, "samples": len(r.samples), "error": r.error,
             "accept": {k: list(v) for k, v in sorted(r.accepts.items())},
             "mean_leaves": float(np.mean(r.leaf_counts)) if r.leaf_counts.size else None}
            for r in results
        ],
    }
    with open(os.path.join(out, "model.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump(model, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "config.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dump_config(cfg))
    counts = np.array([s.n_leaves for s in samples])
    print(f"saved {len(samples)} samples to {out}; mean leaves {counts.mean():.3f}")
    return EXIT_OK if not aborted else EXIT_NUMERIC


# --------------------------------------------------------------- predict
def load_model(model_dir):
    """Return ``(dataset, samples)`` from a fit output directory."""
    try:
        with open(os.path.join(model_dir, "model.json"), encoding="utf-8") as fh:
            model = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read model in {model_dir}: {exc.strerror}") from None
    sc = model["scale"]
    header, data = read_table(os.path.join(model_dir, "data.csv"))
    ds = Dataset(data[:, :-1], data[:, -1], sc["columns"], sc["response"],
                 np.array(sc["x_min"]), np.array(sc["x_max"]), sc["z_mean"], sc["z_sd"])
    samples = read_samples(os.path.join(model_dir, "samples.csv"), ds.X)
    return ds, samples


def parse_grid(spec, ds, fixed=None):
    """Grid over the training range from a per-dimension count spec like ``41x1``.

    Extra trailing counts beyond the input dimension must equal 1. A count
    of 1 pins that input to its ``fixed`` value, or the midpoint of its range.
    """
    try:
        counts = [int(t) for t in spec.lower().split("x")]
    except ValueError:
        raise InputError(f"bad grid spec {spec!r}; expected counts like '41x1'") from None
    m = ds.m_X
    if len(counts) < m:
        raise InputError(f"grid spec {spec!r} has {len(counts)} dimension(s); model has {m}")
    if any(c != 1 for c in counts[m:]):
        raise InputError(f"grid spec {spec!r} has more dimensions than the model's {m}")
    if any(c < 1 for c in counts):
        raise InputError(f"grid counts must be >= 1 in {spec!r}")
    fixed = fixed or {}
    axes = []
    for j, c in enumerate(counts[:m]):
        lo, hi = ds.x_min[j], ds.x_max[j]
        name = ds.columns[j]
        if c == 1:
            axes.append(np.array([fixed.get(name, 0.5 * (lo + hi))]))
        else:
            if name in fixed:
                raise InputError(f"--fix {name} conflicts with grid count {c}")
            axes.append(np.linspace(lo, hi, c))
    unknown = set(fixed) - set(ds.columns)
    if unknown:
        raise InputError(f"--fix names unknown column(s): {', '.join(sorted(unknown))}")
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in mesh])


def read_queries(path, ds):
    try:
        header, data = read_table(path)
    except OSError as exc:
        raise InputError(f"cannot read queries {path}: {exc.strerror}") from None
    missing = [c for c in ds.columns if c not in header]
    if missing:
        if len(header) == ds.m_X and all(h not in ds.columns for h in header):
            raise InputError(f"query columns {header} do not match model inputs {ds.columns}")
        raise InputError(f"queries lack model input column(s): {', '.join(missing)}")
    return data[:, [header.index(c) for c in ds.columns]]


def _parse_quantiles(text):
    try:
        qs = tuple(float(t) for t in text.split(","))
    except ValueError:
        raise InputError(f"bad quantile list {text!r}") from None
    if not qs or any(not 0 < q < 1 for q in qs):
        raise InputError(f"quantiles must lie in (0, 1), got {text!r}")
    return qs


def cmd_predict(model_dir, grid=None, queries=None, quantiles="0.05,0.95", output=None,
                seed=0, fix=(), workers=1):
    qs = _parse_quantiles(quantiles)
    ds, samples = load_model(model_dir)
    fixed = {}
    for item in fix:
        name, _, val = item.partition("=")
        try:
            fixed[name.strip()] = float(val)
        except ValueError:
            raise InputError(f"bad --fix {item!r}; expected name=value") from None
    XX = parse_grid(grid, ds, fixed) if grid is not None else read_queries(queries, ds)
    summ = aggregate(XX, samples, ds.X, ds.Z, quantiles=qs, seed=seed, dataset=ds,
                     workers=workers)
    out = output or os.path.join(model_dir, "predictions.csv")
    write_summary(out, summ, ds.columns)
    print(f"wrote {XX.shape[0]} rows to {out}")
    return EXIT_OK


# -------------------------------------------------------------------- cv
def cmd_cv(config_path, folds=10, level=0.9, seed=0, output=None, workers=None):
    cfg = load_config(config_path)
    ds = cfg.load_data()
    fixed = cfg.hyperparameters(ds.m_X + 1)
    out = output or os.path.join(cfg.output_dir, "cv")
    w = cfg.mcmc.workers if workers is None else workers
    report = run_cv(ds, cfg.mcmc, fixed, folds=folds, level=level, seed=seed, workers=w,
                    out_dir=out)
    for k, c in enumerate(report.fold_coverage()):
        print(f"fold {k}: coverage {c:.3f}")
    print(f"pooled coverage at level {level:g}: {report.coverage:.4f} "
          f"({int(report.covered.sum())}/{report.labels.size})")
    return EXIT_OK


# ------------------------------------------------------------------ main
def build_parser():
    p = argparse.ArgumentParser(prog="treedgp", description="Treed Gaussian process regression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="run the sampler and write fit artifacts")
    f.add_argument("--config", required=True)

    q = sub.add_parser("predict", help="model-averaged predictions from a fit")
    q.add_argument("--model", required=True, help="fit output directory")
    src = q.add_mutually_exclusive_group(required=True)
    src.add_argument("--grid", help="per-dimension counts, e.g. 41x1")
    src.add_argument("--queries", help="CSV of query inputs with a header row")
    q.add_argument("--quantiles", default="0.05,0.95")
    q.add_argument("--output")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--fix", action="append", default=[], metavar="NAME=VALUE",
                   help="pin an input whose grid count is 1")
    q.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("cv", help="k-fold predictive interval coverage")
    c.add_argument("--config", required=True)
    c.add_argument("--folds", type=int, default=10)
    c.add_argument("--level", type=float, default=0.9)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--output")
    c.add_argument("--workers", type=int)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "fit":
            return cmd_fit(args.config)
        if args.command == "predict":
            return cmd_predict(args.model, args.grid, args.queries, args.quantiles, args.output,
                               args.seed, args.fix, args.workers)
        return cmd_cv(args.config, args.folds, args.level, args.seed, args.output, args.workers)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_INVALID)
    except (DataError, CvError, InputError) as exc:
        return _fail(str(exc), EXIT_INVALID)
    except (ArithmeticError, IllConditionedError, NumericStateError, np.linalg.LinAlgError) as exc:
        return _fail(f"numeric failure: {exc}", EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
