"""Binary treed partitions: prior, data routing and reversible-jump moves.

Internal nodes carry a split rule ``(u, s)``: rows with ``x[u] <= s`` go
left, the rest go right. Leaves carry a :class:`~treedgp.leaf_gp.LeafState`.

Every move is proposed without touching the tree. A proposal is returned
as a :class:`ProposedMove` holding its log acceptance ratio and a closure
that commits it, so a rejected move costs nothing to undo.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernel import CorrParams, Family, IllConditionedError
from .leaf_gp import (
    LeafState,
    NumericStateError,
    draw_beta,
    draw_inv_gamma,
    draw_sigma2_marginal,
    log_marginal_K,
    log_prior_corr,
    prior_draw_corr,
)

_MOVE_FAILURES = (IllConditionedError, NumericStateError)


class TreeStructureError(ValueError):
    """A tree violates the partition invariants (empty or undersized leaf)."""


def split_prob(depth, a, b):
    """Probability that a node at ``depth`` splits: ``a (1 + depth)**-b``."""
    if depth < 0:
        raise ValueError(f"depth must be >= 0, got {depth}")
    if not 0 < a < 1:
        raise ValueError(f"a must lie in (0, 1), got {a}")
    if b < 0:
        raise ValueError(f"b must be >= 0, got {b}")
    return a * (1.0 + depth) ** (-b)


def _log_split(q, a, b):
    return math.log(a) - b * math.log1p(q)


def _log_nosplit(q, a, b):
    return math.log1p(-a * (1.0 + q) ** (-b))


class Node:
    __slots__ = ("depth", "parent", "left", "right", "u", "s", "idx", "leaf", "_grow")

    def __init__(self, depth, idx, leaf=None, parent=None):
        self.depth = depth
        self.idx = idx
        self.leaf = leaf
        self.parent = parent
        self.left = None
        self.right = None
        self.u = None
        self.s = None
        self._grow = None

    @property
    def is_leaf(self):
        return self.left is None

    @property
    def prunable(self):
        return not self.is_leaf and self.left.is_leaf and self.right.is_leaf

    def walk(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.append(node.right)
                stack.append(node.left)

    def leaves(self):
        return [n for n in self.walk() if n.is_leaf]


def split_candidates(values, n_min):
    """Observed values ``s`` that leave ``>= n_min`` rows on both sides of ``x <= s``."""
    uniq, counts = np.unique(values, return_counts=True)
    left = np.cumsum(counts)
    n = values.shape[0]
    ok = (left >= n_min) & (n - left >= n_min)
    return uniq[ok]


@dataclass
class ProposedMove:
    """A fully evaluated proposal awaiting an accept/reject decision."""

    kind: str
    log_ratio: float
    apply: Callable[[], None]


class Tree:
    """Recursive partition of a fixed scaled dataset.

    Parameters
    ----------
    X, Z : arrays
        Full scaled design ``(n, m_X)`` and responses ``(n,)``.
    root_leaf : LeafState
        State for the single-region starting tree.
    n_min : int
        Minimum number of rows per leaf.
    likelihood : bool
        When False, leaf marginal likelihoods are replaced by their prior
        term only (used to check that moves recover the tree prior).
    """

    def __init__(self, X, Z, root_leaf, n_min, a=0.5, b=2.0, likelihood=True):
        self.X = np.asarray(X, dtype=float)
        self.Z = np.asarray(Z, dtype=float)
        self.n_min = int(n_min)
        self.a = float(a)
        self.b = float(b)
        self.likelihood = likelihood
        idx = np.arange(self.X.shape[0])
        if idx.size < self.n_min:
            raise TreeStructureError(f"need at least n_min={self.n_min} rows, got {idx.size}")
        self.root = Node(0, idx, root_leaf)

    @property
    def m_X(self):
        return self.X.shape[1]

    # ----------------------------------------------------------------- queries
    def nodes(self):
        return list(self.root.walk())

    def leaf_nodes(self):
        return self.root.leaves()

    def leaves(self):
        return [n.leaf for n in self.root.leaves()]

    def internal_nodes(self):
        return [n for n in self.root.walk() if not n.is_leaf]

    def prunable_nodes(self):
        return [n for n in self.root.walk() if n.prunable]

    def is_growable(self, node):
        if node._grow is None:
            vals = self.X[node.idx]
            node._grow = any(
                split_candidates(vals[:, u], self.n_min).size > 0 for u in range(self.m_X)
            )
        return node._grow

    def growable_nodes(self):
        return [n for n in self.leaf_nodes() if self.is_growable(n)]

    def swap_pairs(self):
        """All (parent, child) pairs of internal nodes."""
        pairs = []
        for node in self.root.walk():
            if node.is_leaf:
                continue
            for child in (node.left, node.right):
                if not child.is_leaf:
                    pairs.append((node, child))
        return pairs

    @property
    def n_leaves(self):
        return len(self.leaf_nodes())

    def height(self):
        return max(n.depth for n in self.leaf_nodes())

    # ---------------------------------------------------------------- building
    def make_leaf(self, idx, corr, tau2, beta, sigma2=1.0):
        leaf = LeafState(self.X[idx], self.Z[idx], idx, corr, np.array(beta, dtype=float),
                         sigma2, tau2)
        if self.likelihood:
            leaf.refactor()
        return leaf

    def _lm(self, leaf, hyper):
        return log_marginal_K(leaf, hyper, likelihood=self.likelihood)

    def _redraw(self, leaf, hyper, rng):
        if self.likelihood:
            leaf.sigma2 = draw_sigma2_marginal(leaf, hyper, rng)
            leaf.beta = draw_beta(leaf, hyper, rng)

    def _split_idx(self, idx, u, s):
        mask = self.X[idx, u] <= s
        return idx[mask], idx[~mask]

    def _repartition(self, node, rules):
        """Route ``node.idx`` through the subtree with some rules replaced.

        ``rules`` maps node -> (u, s) overrides. Returns a dict node -> idx for
        every node below ``node`` or None if a leaf ends up with fewer than
        ``n_min`` rows.
        """
        out = {node: node.idx}
        stack = [node]
        while stack:
            cur = stack.pop()
            idx = out[cur]
            if cur.is_leaf:
                if idx.size < self.n_min:
                    return None
                continue
            u, s = rules.get(cur, (cur.u, cur.s))
            li, ri = self._split_idx(idx, u, s)
            if li.size < self.n_min or ri.size < self.n_min:
                return None
            out[cur.left] = li
            out[cur.right] = ri
            stack.extend((cur.left, cur.right))
        return out

    def _relabel_ratio(self, new_idx, hyper):
        """Likelihood ratio for leaves whose data changed, with parameters held fixed."""
        log_r = 0.0
        new_leaves = {}
        for node, idx in new_idx.items():
            if not node.is_leaf or np.array_equal(idx, node.idx):
                continue
            old = node.leaf
            fresh = self.make_leaf(idx, old.corr, old.tau2, old.beta, old.sigma2)
            log_r += self._lm(fresh, hyper) - self._lm(old, hyper)
            new_leaves[node] = fresh
        return log_r, new_leaves

    def _commit_relabel(self, new_idx, new_leaves):
        for node, idx in new_idx.items():
            if not np.array_equal(idx, node.idx):
                node.idx = idx
                node._grow = None
            if node in new_leaves:
                node.leaf = new_leaves[node]

    # ------------------------------------------------------------------- moves
    def grow_shape_log_ratio(self, q):
        a, b = self.a, self.b
        return _log_split(q, a, b) + 2.0 * _log_nosplit(q + 1, a, b) - _log_nosplit(q, a, b)

    def propose_grow(self, hyper, rng):
        """Propose splitting a uniformly chosen growable leaf.

        One child, chosen at random, inherits the parent's correlation
        parameters and ``tau2``; the other draws them from the prior.
        Returns None when no valid split exists (counts as a rejection).
        """
        G = self.growable_nodes()
        if not G:
            return None
        node = G[rng.integers(len(G))]
        u = int(rng.integers(self.m_X))
        cands = split_candidates(self.X[node.idx, u], self.n_min)
        if cands.size == 0:
            return None
        s = float(cands[rng.integers(cands.size)])
        li, ri = self._split_idx(node.idx, u, s)
        parent = node.leaf
        fx = hyper.fixed
        new_corr = prior_draw_corr(fx, self.m_X, parent.corr.family, rng, parent.corr.p0)
        new_tau2 = draw_inv_gamma(0.5 * fx.alpha_tau, 0.5 * fx.q_tau, rng)
        inherit = int(rng.integers(2))
        specs = [(parent.corr, parent.tau2), (new_corr, new_tau2)]
        if inherit == 1:
            specs.reverse()
        try:
            kids = [self.make_leaf(ix, c, t, parent.beta, parent.sigma2)
                    for ix, (c, t) in zip((li, ri), specs)]
            lm_kids = sum(self._lm(k, hyper) for k in kids)
            lm_parent = self._lm(parent, hyper)
        except _MOVE_FAILURES:
            return None
        n_prune = len(self.prunable_nodes())
        p_parent = node.parent is not None and node.parent.prunable
        n_prune_new = n_prune if p_parent else n_prune + 1
        log_r = (math.log(len(G)) - math.log(n_prune_new)
                 + self.grow_shape_log_ratio(node.depth)
                 + lm_kids - lm_parent - log_prior_corr(new_corr, fx))

        def apply():
            node.u, node.s = u, s
            node.leaf = None
            node.left = Node(node.depth + 1, li, kids[0], node)
            node.right = Node(node.depth + 1, ri, kids[1], node)
            for k in kids:
                self._redraw(k, hyper, rng)

        return ProposedMove("grow", log_r, apply)

    def propose_prune(self, hyper, rng):
        """Propose merging the two leaf children of a uniformly chosen node.

        The merged leaf takes ``(K, tau2)`` from one child picked at random.
        """
        P = self.prunable_nodes()
        if not P:
            return None
        node = P[rng.integers(len(P))]
        donor_side = int(rng.integers(2))
        kids = (node.left.leaf, node.right.leaf)
        donor, other = kids[donor_side], kids[1 - donor_side]
        try:
            merged = self.make_leaf(node.idx, donor.corr, donor.tau2, donor.beta, donor.sigma2)
            lm_merged = self._lm(merged, hyper)
            lm_kids = self._lm(kids[0], hyper) + self._lm(kids[1], hyper)
        except _MOVE_FAILURES:
            return None
        n_grow = len(self.growable_nodes())
        n_grow_new = (n_grow - self.is_growable(node.left) - self.is_growable(node.right)
                      + 1)
        log_r = (math.log(len(P)) - math.log(n_grow_new)
                 - self.grow_shape_log_ratio(node.depth)
                 + lm_merged + log_prior_corr(other.corr, hyper.fixed) - lm_kids)

        def apply():
            node.left = node.right = None
            node.u = node.s = None
            node.leaf = merged
            node._grow = True
            self._redraw(merged, hyper, rng)

        return ProposedMove("prune", log_r, apply)

    def propose_change(self, hyper, rng):
        """Propose moving one split point to the adjacent observed value."""
        internal = self.internal_nodes()
        if not internal:
            return None
        node = internal[rng.integers(len(internal))]
        up = bool(rng.integers(2))
        vals = self.X[node.idx, node.u]
        if up:
            nxt = vals[vals > node.s]
            if nxt.size == 0:
                return None
            s_new = float(nxt.min())
        else:
            nxt = vals[vals < node.s]
            if nxt.size == 0:
                return None
            s_new = float(nxt.max())
        new_idx = self._repartition(node, {node: (node.u, s_new)})
        if new_idx is None:
            return None
        try:
            log_r, new_leaves = self._relabel_ratio(new_idx, hyper)
        except _MOVE_FAILURES:
            return None

        def apply():
            node.s = s_new
            self._commit_relabel(new_idx, new_leaves)

        return ProposedMove("change", log_r, apply)

    def propose_swap(self, hyper, rng):
        """Propose exchanging the rules of a random parent-child internal pair.

        Pairs splitting on the same variable are rotated instead.
        """
        pairs = self.swap_pairs()
        if not pairs:
            return None
        parent, child = pairs[rng.integers(len(pairs))]
        if parent.u == child.u:
            direction = "right" if child is parent.left else "left"
            return self.propose_rotate(rng, direction, node=parent)
        rules = {parent: (child.u, child.s), child: (parent.u, parent.s)}
        new_idx = self._repartition(parent, rules)
        if new_idx is None:
            return None
        try:
            log_r, new_leaves = self._relabel_ratio(new_idx, hyper)
        except _MOVE_FAILURES:
            return None

        def apply():
            (parent.u, parent.s), (child.u, child.s) = rules[parent], rules[child]
            self._commit_relabel(new_idx, new_leaves)

        return ProposedMove("swap", log_r, apply)

    def rotatable_nodes(self, direction):
        side = "left" if direction == "right" else "right"
        out = []
        for node in self.internal_nodes():
            child = getattr(node, side)
            if not child.is_leaf and child.u == node.u:
                out.append(node)
        return out

    def rotate_log_ratio(self, node, direction):
        """Prior ratio of a rotation: only depths of the outer subtrees change."""
        a, b = self.a, self.b
        if direction == "right":
            dec, inc = node.left.left, node.right
        else:
            dec, inc = node.right.right, node.left
        log_r = 0.0
        for n in inc.walk():
            q = n.depth
            if n.is_leaf:
                log_r += _log_nosplit(q + 1, a, b) - _log_nosplit(q, a, b)
            else:
                log_r += _log_split(q + 1, a, b) - _log_split(q, a, b)
        for n in dec.walk():
            q = n.depth
            if n.is_leaf:
                log_r += _log_nosplit(q - 1, a, b) - _log_nosplit(q, a, b)
            else:
                log_r += _log_split(q - 1, a, b) - _log_split(q, a, b)
        return log_r

    def rotate(self, node, direction):
        """Tree rotation at ``node``; leaf partitions are unchanged."""
        if direction == "right":
            B = node.left
            T1, T2, T3 = B.left, B.right, node.right
            node.left, node.right = T1, B
            B.left, B.right = T2, T3
            _shift_depth(T1, -1)
            _shift_depth(T3, +1)
        elif direction == "left":
            B = node.right
            T1, T2, T3 = node.left, B.left, B.right
            node.left, node.right = B, T3
            B.left, B.right = T1, T2
            _shift_depth(T1, +1)
            _shift_depth(T3, -1)
        else:
            raise ValueError(f"unknown rotation direction {direction!r}")
        for child in (node.left, node.right):
            child.parent = node
        for child in (B.left, B.right):
            child.parent = B
        (node.u, node.s), (B.u, B.s) = (B.u, B.s), (node.u, node.s)
        B.idx = np.sort(np.concatenate([B.left.idx, B.right.idx]))

    def propose_rotate(self, rng, direction, node=None):
        """Propose a same-variable rotation; accepted on the tree-prior ratio alone."""
        if node is None:
            cands = self.rotatable_nodes(direction)
            if not cands:
                return None
            node = cands[rng.integers(len(cands))]

        log_r = self.rotate_log_ratio(node, direction)

        def apply():
            self.rotate(node, direction)

        return ProposedMove("rotate", log_r, apply)

    # -------------------------------------------------------------- invariants
    def check(self):
        """Raise :class:`TreeStructureError` if the partition invariants fail."""
        seen = []
        for node in self.root.walk():
            if node.parent is not None and node.depth != node.parent.depth + 1:
                raise TreeStructureError("inconsistent depth")
            if node.is_leaf:
                if node.idx.size < self.n_min:
                    raise TreeStructureError(f"leaf with {node.idx.size} < n_min rows")
                if not np.array_equal(node.leaf.idx, node.idx):
                    raise TreeStructureError("leaf state out of sync with node data")
                seen.append(node.idx)
            else:
                li, ri = self._split_idx(node.idx, node.u, node.s)
                if not (np.array_equal(li, node.left.idx) and np.array_equal(ri, node.right.idx)):
                    raise TreeStructureError("child data does not match split rule")
        allidx = np.sort(np.concatenate(seen))
        if not np.array_equal(allidx, np.arange(self.X.shape[0])):
            raise TreeStructureError("leaves do not partition the data")


def _shift_depth(node, delta):
    for n in node.walk():
        n.depth += delta


def tree_log_prior(tree, a=None, b=None):
    """Log tree-shape prior: split factors at internal nodes, no-split factors at leaves.

    Split-rule probabilities are left out; they cancel in every move ratio.
    """
    root = tree.root if isinstance(tree, Tree) else tree
    a = tree.a if a is None else a
    b = tree.b if b is None else b
    out = 0.0
    for node in _walk_any(root):
        if _is_leaf_any(node):
            out += _log_nosplit(node.depth, a, b)
        else:
            out += _log_split(node.depth, a, b)
    return out


# ---------------------------------------------------------------- snapshots
@dataclass(frozen=True)
class SnapLeaf:
    depth: int
    corr: CorrParams
    beta: np.ndarray
    sigma2: float
    tau2: float
    idx: np.ndarray | None = None


@dataclass(frozen=True)
class SnapNode:
    depth: int
    u: int
    s: float
    left: object
    right: object


def _is_leaf_any(n):
    return isinstance(n, SnapLeaf) or (isinstance(n, Node) and n.is_leaf)


def _walk_any(root):
    stack = [root]
    while stack:
        n = stack.pop()
        yield n
        if not _is_leaf_any(n):
            stack.append(n.right)
            stack.append(n.left)


def snapshot(tree):
    """Immutable copy of the tree structure and leaf parameters."""

    def rec(node):
        if node.is_leaf:
            lf = node.leaf
            return SnapLeaf(node.depth, lf.corr, lf.beta.copy(), float(lf.sigma2),
                            float(lf.tau2), node.idx)
        return SnapNode(node.depth, node.u, node.s, rec(node.left), rec(node.right))

    return rec(tree.root)


def snapshot_leaves(snap):
    return [n for n in _walk_any(snap) if isinstance(n, SnapLeaf)]


def partition(X, tree, n_min=None):
    """Leaf number (left-to-right order) of every row of ``X``.

    Accepts a :class:`Tree`, its root node, or a snapshot. With ``n_min``
    a leaf receiving fewer rows raises :class:`TreeStructureError`.
    """
    root = tree.root if isinstance(tree, Tree) else tree
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.empty(X.shape[0], dtype=int)
    counter = [0]

    def rec(node, rows):
        if _is_leaf_any(node):
            out[rows] = counter[0]
            counter[0] += 1
            return
        mask = X[rows, node.u] <= node.s
        rec(node.left, rows[mask])
        rec(node.right, rows[~mask])

    rec(root, np.arange(X.shape[0]))
    if n_min is not None:
        check_partition(out, counter[0], n_min)
    return out


def check_partition(assign, n_leaves, n_min):
    """Raise :class:`TreeStructureError` when a leaf receives fewer than ``n_min`` rows."""
    counts = np.bincount(assign, minlength=n_leaves)
    if np.any(counts < n_min):
        raise TreeStructureError(f"leaf sizes {counts.tolist()} violate n_min={n_min}")
    return counts


# ------------------------------------------------------------ serialization
def _fmt(x):
    return f"{float(x):.16e}"


def _fmt_vec(v):
    return "[" + ";".join(_fmt(x) for x in np.atleast_1d(v)) + "]"


def dumps_tree(tree):
    """Deterministic parenthesized text form of a tree or snapshot."""
    root = tree.root if isinstance(tree, Tree) else tree
    parts = []

    def rec(node):
        if _is_leaf_any(node):
            if isinstance(node, Node):
                lf = node.leaf
                corr, beta, s2, t2, n = lf.corr, lf.beta, lf.sigma2, lf.tau2, node.idx.size
            else:
                corr, beta, s2, t2 = node.corr, node.beta, node.sigma2, node.tau2
                n = -1 if node.idx is None else node.idx.size
            parts.append(
                f"(leaf depth={node.depth} n={n} family={corr.family.value} "
                f"p0={_fmt(corr.p0)} d={_fmt_vec(corr.d)} g={_fmt(corr.g)} "
                f"sigma2={_fmt(s2)} tau2={_fmt(t2)} beta={_fmt_vec(beta)})"
            )
            return
        parts.append(f"(node depth={node.depth} u={node.u} s={_fmt(node.s)} ")
        rec(node.left)
        parts.append(" ")
        rec(node.right)
        parts.append(")")

    rec(root)
    return "".join(parts)


_TOKEN = re.compile(r"\(|\)|[^\s()]+")


def loads_tree(text, X=None):
    """Parse :func:`dumps_tree` output into a snapshot.

    With the training design ``X`` the leaf row indices are recomputed.
    """
    tokens = _TOKEN.findall(text)
    pos = 0

    def parse():
        nonlocal pos
        if tokens[pos] != "(":
            raise ValueError(f"expected '(' at token {pos}")
        kind = tokens[pos + 1]
        pos += 2
        fields = {}
        while tokens[pos] not in ("(", ")"):
            key, _, val = tokens[pos].partition("=")
            fields[key] = val
            pos += 1
        if kind == "leaf":
            if tokens[pos] != ")":
                raise ValueError("leaf node has children")
            pos += 1
            corr = CorrParams(Family(fields["family"]), _vec(fields["d"]), float(fields["g"]),
                              float(fields["p0"]))
            return SnapLeaf(int(fields["depth"]), corr, _vec(fields["beta"]),
                            float(fields["sigma2"]), float(fields["tau2"]))
        if kind != "node":
            raise ValueError(f"unknown node kind {kind!r}")
        left = parse()
        right = parse()
        if tokens[pos] != ")":
            raise ValueError("expected ')' closing internal node")
        pos += 1
        return SnapNode(int(fields["depth"]), int(fields["u"]), float(fields["s"]), left, right)

    try:
        root = parse()
    except (IndexError, KeyError) as exc:
        raise ValueError(f"malformed tree text: {exc}") from None
    if pos != len(tokens):
        raise ValueError("trailing tokens after tree")
    if X is not None:
        root = attach_indices(root, X)
    return root


def _vec(text):
    body = text.strip("[]")
    return np.array([float(t) for t in body.split(";")] if body else [], dtype=float)


def attach_indices(snap, X):
    """Return a copy of ``snap`` with each leaf's training row indices filled in."""
    X = np.asarray(X, dtype=float)

    def rec(node, rows):
        if isinstance(node, SnapLeaf):
            return SnapLeaf(node.depth, node.corr, node.beta, node.sigma2, node.tau2, rows)
        mask = X[rows, node.u] <= node.s
        return SnapNode(node.depth, node.u, node.s, rec(node.left, rows[mask]),
                        rec(node.right, rows[~mask]))

    return rec(snap, np.arange(X.shape[0]))


def tree_from_snapshot(snap, X, Z, n_min, hyper, likelihood=True):
    """Rebuild a live :class:`Tree` (with factored leaves) from a snapshot."""
    snap = attach_indices(snap, X)
    fx = hyper.fixed
    dummy = LeafState(X[:0], Z[:0], np.arange(0), _first_leaf(snap).corr, fx.mu.copy())
    tree = Tree(X, Z, dummy, n_min, fx.a, fx.b, likelihood)

    def rec(sn, parent):
        if isinstance(sn, SnapLeaf):
            node = Node(sn.depth, sn.idx, parent=parent)
            node.leaf = tree.make_leaf(sn.idx, sn.corr, sn.tau2, sn.beta, sn.sigma2)
            return node
        left = rec(sn.left, None)
        right = rec(sn.right, None)
        node = Node(sn.depth, np.sort(np.concatenate([left.idx, right.idx])), parent=parent)
        node.u, node.s = sn.u, sn.s
        node.left, node.right = left, right
        left.parent = right.parent = node
        return node

    tree.root = rec(snap, None)
    tree.check()
    return tree


def _first_leaf(snap):
    while not isinstance(snap, SnapLeaf):
        snap = snap.left
    return snap
