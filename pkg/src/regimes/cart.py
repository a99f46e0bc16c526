"""Regression and classification trees over a (species order, time) grid.

Trees are grown best-first: each step takes the single split, over every
current leaf, feature and threshold, that most lowers the total
within-leaf squared error. Pruning then collapses any split whose subtree
cost exceeds its own error plus the per-leaf penalty.
"""

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Union

import numpy as np

_TIE_TOL = 1e-10


@dataclass
class TreeConfig:
    max_splits: int = 10
    penalty: float = 0.0
    min_leaf: int = 5
    task: str = "regression"
    loss: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.max_splits < 0 or self.penalty < 0 or self.min_leaf < 1:
            raise ValueError("need max_splits >= 0, penalty >= 0, min_leaf >= 1")
        if self.task not in ("regression", "classification"):
            raise ValueError("task must be 'regression' or 'classification'")


@dataclass
class Leaf:
    value: float
    n: int
    r_hat: float
    proba: Optional[np.ndarray] = None


@dataclass
class Split:
    feature: int
    threshold: float
    left: "Node"
    right: "Node"
    value: float
    n: int
    r_hat: float
    proba: Optional[np.ndarray] = None


Node = Union[Leaf, Split]


@dataclass
class Tree:
    root: Node
    bounds: np.ndarray          # (n_features, 2) bounding box of the training inputs
    task: str = "regression"
    classes: Optional[np.ndarray] = None
    split_history: list = field(default_factory=list)

    def leaves(self):
        out, stack = [], [self.root]
        while stack:
            node = stack.pop()
            if isinstance(node, Leaf):
                out.append(node)
            else:
                stack.extend([node.right, node.left])
        return out

    @property
    def n_leaves(self):
        return len(self.leaves())

    def _leaf_for(self, row):
        node = self.root
        while isinstance(node, Split):
            node = node.left if row[node.feature] <= node.threshold else node.right
        return node

    def predict(self, x):
        x = np.atleast_2d(x)
        return np.array([self._leaf_for(r).value for r in x])

    def predict_proba(self, x):
        x = np.atleast_2d(x)
        return np.vstack([self._leaf_for(r).proba for r in x])


# --------------------------------------------------------------------------
# fitting

def _targets(y, task, classes):
    if task == "regression":
        return y.reshape(-1, 1).astype(float)
    return (y[:, None] == classes[None, :]).astype(float)


def _sse(Y):
    if Y.shape[0] == 0:
        return 0.0
    c = Y - Y.mean(axis=0)
    return float(np.sum(c * c))


def _node_summary(Y, task, classes, loss):
    n = Y.shape[0]
    r_hat = _sse(Y)
    if task == "regression":
        return float(Y.mean()), n, r_hat, None
    counts = Y.sum(axis=0)
    proba = counts / n
    expected_loss = counts @ loss          # cost of predicting each class
    label = classes[int(np.argmin(expected_loss))]
    return float(label), n, r_hat, proba


def _best_split_for(x, Y, min_leaf):
    """Best (gain, feature, threshold) for one leaf, or None."""
    n = Y.shape[0]
    if n < 2 * min_leaf:
        return None
    Yc = Y - Y.mean(axis=0)
    total = float(np.sum(Yc * Yc))
    best = None
    for j in range(x.shape[1]):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        Ys = Yc[order]
        cs = np.cumsum(Ys, axis=0)
        sq = np.cumsum(np.sum(Ys * Ys, axis=1))
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not np.any(valid):
            continue
        sl = cs[:-1]
        sr = cs[-1] - sl
        nl = n_left[:, None].astype(float)
        nr = (n - n_left)[:, None].astype(float)
        sse_l = sq[:-1] - np.sum(sl * sl / nl, axis=1)
        sse_r = (sq[-1] - sq[:-1]) - np.sum(sr * sr / nr, axis=1)
        gain = total - (sse_l + sse_r)
        gain[~valid] = -np.inf
        thresholds = 0.5 * (xs[1:] + xs[:-1])
        g_max = gain.max()
        tied = np.flatnonzero(gain >= g_max - _TIE_TOL * max(1.0, total))
        i = tied[np.argmin(thresholds[tied])]
        cand = (float(gain[i]), j, float(thresholds[i]))
        if best is None or cand[0] > best[0] + _TIE_TOL * max(1.0, total):
            best = cand
    return best


def fit_tree(x, y, cfg=None, classes=None):
    """Grow a tree with at most ``cfg.max_splits`` greedy splits.

    Parameters
    ----------
    x : (n, p) features; for the abundance grid the columns are
        (species order index, time).
    y : (n,) responses (class labels when ``cfg.task == "classification"``).
    classes : optional explicit class set for classification.

    Returns
    -------
    Tree
        Unpruned. Leaves whose squared error is already zero are never split,
        so a constant response yields a root-only tree.
    """
    cfg = cfg or TreeConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y)
    if x.shape[0] != y.shape[0]:
        raise ValueError("x and y must have the same number of rows")
    if x.shape[0] == 0:
        raise ValueError("cannot fit a tree to zero rows")
    if cfg.task == "classification":
        classes = np.unique(y) if classes is None else np.asarray(classes)
        loss = (1.0 - np.eye(classes.size)) if cfg.loss is None else np.asarray(cfg.loss, float)
    else:
        classes, loss = None, None
    Y = _targets(y, cfg.task, classes)
    bounds = np.column_stack([x.min(axis=0), x.max(axis=0)])

    # leaves are tracked as (creation id, row indices); a grown tree is
    # rebuilt from the recorded split history at the end
    leaves = {0: np.arange(x.shape[0])}
    splits = {}
    next_id = 1
    history = []
    cache = {}
    for _ in range(cfg.max_splits):
        cands = []
        for lid, idx in leaves.items():
            if lid not in cache:
                Yl = Y[idx]
                cache[lid] = None if _sse(Yl) <= 1e-12 else _best_split_for(x[idx], Yl, cfg.min_leaf)
            if cache[lid] is not None:
                g, j, thr = cache[lid]
                cands.append((g, j, thr, lid))
        if not cands:
            break
        g_max = max(c[0] for c in cands)
        scale = max(1.0, _sse(Y))
        tied = [c for c in cands if c[0] >= g_max - _TIE_TOL * scale]
        g, j, thr, lid = min(tied, key=lambda c: (c[1], c[2], c[3]))
        idx = leaves.pop(lid)
        go_left = x[idx, j] <= thr
        lid_l, lid_r = next_id, next_id + 1
        next_id += 2
        leaves[lid_l] = idx[go_left]
        leaves[lid_r] = idx[~go_left]
        splits[lid] = (j, thr, lid_l, lid_r, idx)
        history.append((lid, j, thr, g))

    def build(lid, idx):
        summary = _node_summary(Y[idx], cfg.task, classes, loss)
        if lid in splits:
            j, thr, l, r, _ = splits[lid]
            go_left = x[idx, j] <= thr
            return Split(j, thr, build(l, idx[go_left]), build(r, idx[~go_left]), *summary)
        return Leaf(*summary)

    root = build(0, np.arange(x.shape[0]))
    return Tree(root, bounds, cfg.task, classes, history)


def prune(tree, k):
    """Bottom-up cost-complexity collapse with a fixed per-leaf penalty ``k``.

    A split is merged whenever ``r_hat + k`` is below the summed cost of its
    pruned subtree. Costs are carried as (error, leaf count) so ``k = inf``
    is handled exactly.
    """

    def visit(node):
        if isinstance(node, Leaf):
            return node, node.r_hat, 1
        left, r_l, n_l = visit(node.left)
        right, r_r, n_r = visit(node.right)
        r_below, n_below = r_l + r_r, n_l + n_r
        # r_hat + k < r_below + n_below * k
        if node.r_hat - r_below < (n_below - 1) * k:
            return Leaf(node.value, node.n, node.r_hat, node.proba), node.r_hat, 1
        return (Split(node.feature, node.threshold, left, right, node.value, node.n,
                      node.r_hat, node.proba), r_below, n_below)

    root, _, _ = visit(tree.root)
    return Tree(root, tree.bounds.copy(), tree.task, tree.classes, list(tree.split_history))


def training_sse(tree):
    return sum(leaf.r_hat for leaf in tree.leaves())


# --------------------------------------------------------------------------
# partition export

@dataclass
class Rectangle:
    """Leaf region ``lo < x <= hi``; on a bounding-box face the low side is closed."""

    lo: np.ndarray
    hi: np.ndarray
    lo_open: np.ndarray
    value: float
    proba: Optional[np.ndarray] = None

    def contains(self, row):
        row = np.asarray(row, dtype=float)
        above = (row > self.lo) | ((row == self.lo) & ~self.lo_open)
        return bool(np.all(above) and np.all(row <= self.hi))


def extract_partition(tree):
    """Axis-aligned rectangles, one per leaf, tiling ``tree.bounds``.

    Points on a split threshold belong to the left (lower) rectangle, which
    matches :meth:`Tree.predict`.
    """
    out = []

    def visit(node, lo, hi, lo_open):
        if isinstance(node, Leaf):
            out.append(Rectangle(lo.copy(), hi.copy(), lo_open.copy(), node.value, node.proba))
            return
        hi_l = hi.copy()
        hi_l[node.feature] = node.threshold
        lo_r, open_r = lo.copy(), lo_open.copy()
        lo_r[node.feature] = node.threshold
        open_r[node.feature] = True
        visit(node.left, lo, hi_l, lo_open)
        visit(node.right, lo_r, hi, open_r)

    p = tree.bounds.shape[0]
    visit(tree.root, tree.bounds[:, 0].astype(float), tree.bounds[:, 1].astype(float),
          np.zeros(p, dtype=bool))
    return out


# --------------------------------------------------------------------------
# hurdle decomposition

class HurdleFit(NamedTuple):
    binary: Tree
    conditional: Optional[Tree]

    @property
    def conditional_absent(self):
        return self.conditional is None


def fit_hurdle(x, y, cfg=None):
    """Presence tree on ``1{y > 0}`` plus a regression tree on positive rows."""
    cfg = cfg or TreeConfig()
    y = np.asarray(y, dtype=float)
    if np.any(y < 0):
        raise ValueError("hurdle responses must be nonnegative")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    present = (y > 0).astype(int)
    bin_cfg = TreeConfig(cfg.max_splits, cfg.penalty, cfg.min_leaf, "classification", cfg.loss)
    binary = fit_tree(x, present, bin_cfg, classes=np.array([0, 1]))
    pos = y > 0
    if not np.any(pos):
        return HurdleFit(binary, None)
    reg_cfg = TreeConfig(cfg.max_splits, cfg.penalty, cfg.min_leaf, "regression")
    return HurdleFit(binary, fit_tree(x[pos], y[pos], reg_cfg))


def grid_features(matrix, species_order, times):
    """Long-format rows ``(species order position, time)`` with responses.

    ``matrix`` is (n_species, n_times); ``species_order`` lists row indices
    in display order (e.g. a dendrogram ``leaf_order``).
    """
    matrix = np.asarray(matrix, dtype=float)
    pos = np.empty(matrix.shape[0], dtype=float)
    pos[np.asarray(species_order)] = np.arange(matrix.shape[0])
    s, t = np.meshgrid(pos, np.asarray(times, dtype=float), indexing="ij")
    x = np.column_stack([s.ravel(), t.ravel()])
    return x, matrix.ravel()
