"""MCMC orchestration for the treed GP.

A round is: one tree move drawn from ``move_weights`` (grow, prune, change,
swap/rotate), then a sweep over leaves (MH on ``(d, g)``, ``sigma2``,
``beta``, ``tau2``), then the hierarchical draws of ``beta0`` and ``W``.
"""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .kernel import CorrParams, Family
from .leaf_gp import (
    HyperState,
    Hyperparameters,
    LeafState,
    log_marginal_K,
    log_prior_hyper,
    update_hyper,
    update_leaf,
)
from .tree import (
    Tree,
    dumps_tree,
    loads_tree,
    snapshot,
    snapshot_leaves,
    tree_from_snapshot,
    tree_log_prior,
)

log = logging.getLogger(__name__)

MOVES = ("grow", "prune", "change", "swap")
CHECKPOINT_HEADER = "treedgp-checkpoint v1"


class ChainAborted(RuntimeError):
    def __init__(self, chain, round_, cause, checkpoint=None):
        self.chain = chain
        self.round = round_
        self.cause = cause
        self.checkpoint = checkpoint
        super().__init__(f"chain {chain} aborted at round {round_}: {cause}")


@dataclass
class McmcConfig:
    rounds: int = 20000
    burn_in: int = 5000
    thin: int = 10
    chains: int = 1
    seed: int = 0
    move_weights: tuple = (0.2, 0.2, 0.4, 0.2)
    family: Family = Family.ISOTROPIC
    p0: float = 2.0
    n_min: int | None = None
    likelihood: bool = True
    checkpoint_every: int = 1000
    checkpoint_dir: str | None = None
    workers: int = 1
    block_corr: bool = True

    def __post_init__(self):
        self.family = Family(self.family)
        self.move_weights = tuple(float(w) for w in self.move_weights)

    def validate(self):
        """Return a list of human-readable problems (empty when valid)."""
        errs = []
        if self.rounds < 1:
            errs.append(f"rounds must be >= 1, got {self.rounds}")
        if not 0 <= self.burn_in < self.rounds:
            errs.append(f"burn_in must satisfy 0 <= burn_in < rounds, got {self.burn_in}")
        if self.thin < 1:
            errs.append(f"thin must be >= 1, got {self.thin}")
        if self.chains < 1:
            errs.append(f"chains must be >= 1, got {self.chains}")
        w = self.move_weights
        if len(w) != 4 or any(x < 0 for x in w) or not (
            math.isclose(sum(w), 1.0, abs_tol=1e-9) or sum(w) == 0
        ):
            errs.append(f"move_weights must be 4 non-negative reals summing to 1 (or all zero "
                        f"for a fixed tree), got {w}")
        if not 0 < self.p0 <= 2:
            errs.append(f"p0 must lie in (0, 2], got {self.p0}")
        if self.n_min is not None and self.n_min < 1:
            errs.append(f"n_min must be >= 1, got {self.n_min}")
        if self.workers < 1:
            errs.append(f"workers must be >= 1, got {self.workers}")
        if self.checkpoint_every < 1:
            errs.append(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")
        return errs

    @property
    def samples_per_chain(self):
        return (self.rounds - self.burn_in) // self.thin

    def resolved_n_min(self, m_X):
        return self.n_min if self.n_min is not None else m_X + 3


@dataclass
class PosteriorSample:
    """One saved draw of the tree and all parameters."""

    tree: object  # SnapNode | SnapLeaf
    beta0: np.ndarray
    W: np.ndarray
    round: int
    chain: int
    log_post: float

    @property
    def n_leaves(self):
        return len(snapshot_leaves(self.tree))

    def leaves(self):
        return snapshot_leaves(self.tree)


@dataclass
class ChainState:
    tree: Tree
    hyper: HyperState
    round: int = 0
    accepts: dict = field(default_factory=lambda: {k: [0, 0] for k in MOVES + ("rotate",)})


@dataclass
class ChainResult:
    chain: int
    samples: list
    leaf_counts: np.ndarray
    accepts: dict
    error: str | None = None


def initial_state(X, Z, config, fixed):
    """Single-leaf starting state with least-squares trend coefficients."""
    m_X = X.shape[1]
    k = 1 if config.family is Family.ISOTROPIC else m_X
    corr = CorrParams(config.family, np.full(k, 0.5), 0.1, config.p0)
    F = np.column_stack([np.ones(len(Z)), X])
    beta = np.linalg.lstsq(F, Z, rcond=None)[0]
    hyper = HyperState(fixed)
    n_min = config.resolved_n_min(m_X)
    idx = np.arange(len(Z))
    leaf = LeafState(X, Z, idx, corr, beta, 1.0, 1.0)
    if config.likelihood:
        leaf.refactor()
    tree = Tree(X, Z, leaf, n_min, fixed.a, fixed.b, config.likelihood)
    return ChainState(tree, hyper)


def propose_move(kind, tree, hyper, rng):
    if kind == "grow":
        return tree.propose_grow(hyper, rng)
    if kind == "prune":
        return tree.propose_prune(hyper, rng)
    if kind == "change":
        return tree.propose_change(hyper, rng)
    return tree.propose_swap(hyper, rng)


def mcmc_round(state, config, rng):
    """Advance the chain by one round (tree move, leaf sweep, hierarchical draws)."""
    tree, hyper = state.tree, state.hyper
    w = config.move_weights
    if sum(w) > 0:
        kind = MOVES[int(rng.choice(4, p=np.asarray(w) / sum(w)))]
        move = propose_move(kind, tree, hyper, rng)
        if move is not None:
            acc = state.accepts[move.kind]
            acc[1] += 1
            if move.log_ratio >= 0 or math.log(rng.uniform()) < move.log_ratio:
                move.apply()
                acc[0] += 1
    leaves = tree.leaves()
    for leaf in leaves:
        update_leaf(leaf, hyper, rng, likelihood=config.likelihood, block=config.block_corr)
    update_hyper(leaves, hyper, rng)
    state.round += 1
    return state


def log_posterior(state):
    """Tree prior + leaf marginal likelihoods + hierarchical prior terms."""
    tree, hyper = state.tree, state.hyper
    leaves = tree.leaves()
    lp = tree_log_prior(tree)
    lp += sum(log_marginal_K(lf, hyper, likelihood=tree.likelihood) for lf in leaves)
    lp += log_prior_hyper(hyper, leaves)
    return float(lp)


def _sample(state, chain):
    return PosteriorSample(
        tree=snapshot(state.tree),
        beta0=state.hyper.beta0.copy(),
        W=state.hyper.W.copy(),
        round=state.round,
        chain=chain,
        log_post=log_posterior(state),
    )


def chain_seeds(seed, chains):
    """Independent per-chain seed sequences derived from the master seed."""
    return np.random.SeedSequence(int(seed)).spawn(chains)


# ------------------------------------------------------------ checkpoints
def write_checkpoint(path, state, rng, chain):
    hyper = state.hyper
    lines = [
        CHECKPOINT_HEADER,
        f"chain={chain}",
        f"round={state.round}",
        "rng=" + json.dumps(rng.bit_generator.state, sort_keys=True),
        "beta0=" + json.dumps([float(x).hex() for x in hyper.beta0]),
        "W=" + json.dumps([float(x).hex() for x in hyper.W.ravel()]),
        "tree=" + dumps_tree(state.tree),
    ]
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def read_checkpoint(path, X, Z, config, fixed):
    """Restore ``(state, rng, chain)`` from a checkpoint file."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise ValueError(f"{path}: not a {CHECKPOINT_HEADER} file")
    kv = dict(line.split("=", 1) for line in lines[1:])
    m = fixed.m
    beta0 = np.array([float.fromhex(x) for x in json.loads(kv["beta0"])])
    W = np.array([float.fromhex(x) for x in json.loads(kv["W"])]).reshape(m, m)
    hyper = HyperState(fixed, beta0, W)
    snap = loads_tree(kv["tree"])
    tree = tree_from_snapshot(snap, X, Z, config.resolved_n_min(X.shape[1]), hyper,
                              config.likelihood)
    rng = np.random.Generator(np.random.PCG64())
    rng.bit_generator.state = json.loads(kv["rng"])
    state = ChainState(tree, hyper, int(kv["round"]))
    return state, rng, int(kv["chain"])


def run_chain(X, Z, config, fixed, chain=0, seed_seq=None, resume=None, callback=None):
    """Run one chain and return its :class:`ChainResult`.

    Parameters
    ----------
    resume : str, optional
        Checkpoint path to continue from; only samples after the checkpointed
        round are returned.
    callback : callable, optional
        Called as ``callback(state)`` after every round.
    """
    if resume is not None:
        state, rng, chain = read_checkpoint(resume, X, Z, config, fixed)
    else:
        if seed_seq is None:
            seed_seq = chain_seeds(config.seed, chain + 1)[chain]
        rng = np.random.default_rng(seed_seq)
        state = initial_state(X, Z, config, fixed)
    samples = []
    counts = []
    ckpt = None
    if config.checkpoint_dir is not None:
        os.makedirs(config.checkpoint_dir, exist_ok=True)
        ckpt = os.path.join(config.checkpoint_dir, f"checkpoint_chain{chain}.txt")
    error = None
    while state.round < config.rounds:
        try:
            mcmc_round(state, config, rng)
        except (ArithmeticError, np.linalg.LinAlgError, ValueError) as exc:
            path = None
            if ckpt is not None:
                path = ckpt.replace(".txt", ".abort.txt")
                write_checkpoint(path, state, rng, chain)
            error = str(ChainAborted(chain, state.round, exc, path))
            log.error(error)
            break
        r = state.round
        counts.append(state.tree.n_leaves)
        if r > config.burn_in and (r - config.burn_in) % config.thin == 0:
            samples.append(_sample(state, chain))
        if ckpt is not None and r % config.checkpoint_every == 0:
            write_checkpoint(ckpt, state, rng, chain)
        if callback is not None:
            callback(state)
    if ckpt is not None and error is None and state.round % config.checkpoint_every != 0:
        write_checkpoint(ckpt, state, rng, chain)
    accepts = {k: tuple(v) for k, v in state.accepts.items()}
    return ChainResult(chain, samples, np.asarray(counts, dtype=int), accepts, error)


def _run_chain_job(args):
    return run_chain(*args)


def run_chains(X, Z, config, fixed=None):
    """Run ``config.chains`` independent chains and pool their samples.

    Returns
    -------
    samples : list of PosteriorSample
        Ordered by chain then round.
    results : list of ChainResult
        Per-chain diagnostics, including any abort message.
    """
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if fixed is None:
        fixed = Hyperparameters.default(X.shape[1] + 1)
    errs = config.validate()
    if errs:
        raise ValueError("; ".join(errs))
    seeds = chain_seeds(config.seed, config.chains)
    jobs = [(X, Z, config, fixed, c, seeds[c]) for c in range(config.chains)]
    if config.workers > 1 and config.chains > 1:
        with ProcessPoolExecutor(max_workers=min(config.workers, config.chains)) as ex:
            results = list(ex.map(_run_chain_job, jobs))
    else:
        results = [_run_chain_job(j) for j in jobs]
    for res in results:
        if res.error:
            log.warning("chain %d: %s (kept %d samples)", res.chain, res.error, len(res.samples))
    samples = [s for res in results for s in res.samples]
    return samples, results


def map_tree(samples):
    """The saved sample with the highest log posterior (earliest round on ties)."""
    if not samples:
        raise ValueError("map_tree needs at least one sample")
    best = samples[0]
    for s in samples[1:]:
        if s.log_post > best.log_post or (
            s.log_post == best.log_post and (s.round, s.chain) < (best.round, best.chain)
        ):
            best = s
    return best


# ------------------------------------------------------------- sample files
def dumps_sample(s):
    return ",".join([
        str(s.chain),
        str(s.round),
        f"{s.log_post:.16e}",
        " ".join(f"{x:.16e}" for x in s.beta0),
        " ".join(f"{x:.16e}" for x in s.W.ravel()),
        dumps_tree(s.tree),
    ])


SAMPLES_HEADER = "chain,round,log_post,beta0,W,tree"


def write_samples(path, samples):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SAMPLES_HEADER + "\n")
        for s in samples:
            fh.write(dumps_sample(s) + "\n")


def read_samples(path, X):
    """Load a samples file; leaf row indices are recomputed from ``X``."""
    out = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != SAMPLES_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            chain, rnd, lp, b0, W, tree = line.rstrip("\n").split(",", 5)
            beta0 = np.array([float(x) for x in b0.split()])
            Wm = np.array([float(x) for x in W.split()]).reshape(beta0.size, beta0.size)
            out.append(PosteriorSample(loads_tree(tree, X), beta0, Wm, int(rnd), int(chain),
                                       float(lp)))
    return out


TRACE_HEADER = "round,chain,leaves,log_post"


def write_trace(path, samples):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRACE_HEADER + "\n")
        for s in samples:
            fh.write(f"{s.round},{s.chain},{s.n_leaves},{s.log_post:.10e}\n")
