"""Panels of count series, transforms, distances and ordered hierarchical clustering."""

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist


@dataclass
class SeriesPanel:
    """Per-subject species-by-time count matrices sharing one species axis.

    Attributes
    ----------
    subjects : list of str
    times : list of 1-D arrays, strictly increasing sample times per subject.
    counts : list of 2-D arrays, ``(n_species, n_times)`` per subject.
    species : list of str, shared row labels in the same order for every subject.
    taxonomy : dict mapping species ID to family label (may be partial).
    """

    subjects: list
    times: list
    counts: list
    species: list
    taxonomy: dict = field(default_factory=dict)
    nonnegative: bool = True

    def __post_init__(self):
        self.times = [np.asarray(t, dtype=float) for t in self.times]
        self.counts = [np.asarray(c, dtype=float) for c in self.counts]
        if not (len(self.subjects) == len(self.times) == len(self.counts)):
            raise ValueError("subjects, times and counts must align")
        p = len(self.species)
        for s, t, c in zip(self.subjects, self.times, self.counts):
            if c.ndim != 2 or c.shape != (p, t.size):
                raise ValueError(f"subject {s}: counts shape {c.shape} != ({p}, {t.size})")
            if t.size > 1 and np.any(np.diff(t) <= 0):
                raise ValueError(f"subject {s}: times must be strictly increasing")
            if self.nonnegative and np.any(c < 0):
                raise ValueError(f"subject {s}: counts must be nonnegative")

    @property
    def n_species(self):
        return len(self.species)

    def species_matrix(self):
        """Concatenate subjects along time: one row per species."""
        return np.hstack(self.counts) if self.counts else np.zeros((self.n_species, 0))

    def subset_species(self, keep):
        keep = np.asarray(keep)
        if keep.dtype == bool:
            keep = np.flatnonzero(keep)
        return SeriesPanel(
            list(self.subjects), list(self.times), [c[keep] for c in self.counts],
            [self.species[i] for i in keep], dict(self.taxonomy), self.nonnegative)


class Transform(str, enum.Enum):
    ASINH = "asinh"
    BINARIZE = "binarize"
    FIRST_DIFFERENCE = "first_difference"
    BINARIZED_DIFFERENCE = "binarized_difference"


def transform_matrix(x, kind):
    """Apply a transform along the last (time) axis of ``x``."""
    kind = Transform(kind)
    x = np.asarray(x, dtype=float)
    if kind is Transform.ASINH:
        return np.arcsinh(x)
    if kind is Transform.BINARIZE:
        return (x > 0).astype(float)
    if x.shape[-1] < 2:
        raise ValueError("differencing needs at least 2 timepoints")
    if kind is Transform.FIRST_DIFFERENCE:
        return np.diff(x, axis=-1)
    return np.diff((x > 0).astype(float), axis=-1)


def apply_transform(panel, kind):
    kind = Transform(kind)
    counts = [transform_matrix(c, kind) for c in panel.counts]
    differenced = kind in (Transform.FIRST_DIFFERENCE, Transform.BINARIZED_DIFFERENCE)
    times = [t[1:] for t in panel.times] if differenced else list(panel.times)
    return SeriesPanel(list(panel.subjects), times, counts, list(panel.species),
                       dict(panel.taxonomy), nonnegative=not differenced)


def prevalence_filter(panel, threshold):
    """Keep species positive in at least ``threshold`` fraction of all samples."""
    x = panel.species_matrix()
    if x.shape[1] == 0:
        return panel
    frac = np.mean(x > 0, axis=1)
    return panel.subset_species(frac >= threshold - 1e-12)


# --------------------------------------------------------------------------
# distances

_KINDS = ("euclidean", "jaccard", "manhattan")


@dataclass
class DistanceSpec:
    """Which distance to use.

    ``kind="mixture"`` combines the base distances with convex ``weights``
    (a dict keyed by base kind). In a mixture the Jaccard component is
    evaluated on the binarized rows.
    """

    kind: str = "euclidean"
    weights: dict = field(default_factory=dict)
    jaccard_union: bool = False

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in _KINDS + ("mixture",):
            raise ValueError(f"unknown distance {self.kind!r}")
        if self.kind == "mixture":
            if not self.weights or any(k not in _KINDS for k in self.weights):
                raise ValueError("mixture needs weights over " + ", ".join(_KINDS))
            w = np.array(list(self.weights.values()), dtype=float)
            if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise ValueError("mixture weights must be nonnegative and sum to 1")


def jaccard_distance(rows, union=False):
    """Pairwise binary distance ``1 - #{both one} / p``.

    With ``union=True`` the denominator is ``#{either one}`` instead (the
    textbook Jaccard). Identical rows are at distance 0 under either rule.
    """
    x = np.asarray(rows, dtype=float)
    if not np.all((x == 0) | (x == 1)):
        raise ValueError("Jaccard distance requires binary (0/1) input")
    both = x @ x.T
    if union:
        tot = x.sum(axis=1)
        denom = tot[:, None] + tot[None, :] - both
        with np.errstate(invalid="ignore", divide="ignore"):
            d = np.where(denom > 0, 1.0 - both / denom, 0.0)
    else:
        p = x.shape[1]
        d = 1.0 - both / p if p > 0 else np.zeros_like(both)
    d[cdist(x, x, "hamming") == 0] = 0.0
    return d


def pairwise_distance(rows, spec=None):
    spec = spec or DistanceSpec()
    x = np.atleast_2d(np.asarray(rows, dtype=float))
    if spec.kind == "euclidean":
        d = cdist(x, x, "euclidean")
    elif spec.kind == "manhattan":
        d = cdist(x, x, "cityblock")
    elif spec.kind == "jaccard":
        d = jaccard_distance(x, spec.jaccard_union)
    else:
        d = np.zeros((x.shape[0], x.shape[0]))
        for kind, w in spec.weights.items():
            if w == 0:
                continue
            if kind == "jaccard":
                d += w * jaccard_distance((x > 0).astype(float), spec.jaccard_union)
            else:
                d += w * pairwise_distance(x, DistanceSpec(kind))
    d = 0.5 * (d + d.T)
    np.fill_diagonal(d, 0.0)
    return d


# --------------------------------------------------------------------------
# hierarchical clustering

@dataclass
class Dendrogram:
    """Merge tree in scipy-style numbering (leaves ``0..n-1``, node ``n+i`` from merge ``i``).

    ``merges[i] = (left, right, height)`` with the left child holding the larger
    average value.
    """

    merges: list
    leaf_order: list
    n_leaves: int

    def children(self, node):
        if node < self.n_leaves:
            return None
        left, right, _ = self.merges[node - self.n_leaves]
        return left, right


LINKAGES = ("single", "complete", "average")


def hclust(dist, values=None, linkage="average"):
    """Agglomerative clustering with left-heavy child ordering.

    Parameters
    ----------
    dist : (n, n) symmetric distance matrix.
    values : (n, p) matrix whose row means order siblings (larger mean goes
        left). Defaults to zeros, which leaves ties to the index rule.
    linkage : one of ``single``, ``complete``, ``average``.

    Ties between equal distances go to the lowest (row, column) slot pair.
    """
    if linkage not in LINKAGES:
        raise ValueError(f"linkage must be one of {LINKAGES}")
    D = np.array(dist, dtype=float)
    n = D.shape[0]
    if D.shape != (n, n):
        raise ValueError("distance matrix must be square")
    if n == 0:
        raise ValueError("need at least one series")
    row_mean = (np.zeros(n) if values is None
                else np.asarray(values, dtype=float).reshape(n, -1).mean(axis=1))
    if n == 1:
        return Dendrogram([], [0], 1)

    active = np.ones(n, dtype=bool)
    node_of = list(range(n))     # slot -> current node id
    size = np.ones(n)
    sum_vals = row_mean.copy()   # sum of member row means, per slot
    min_leaf = list(range(n))
    merges = []
    big = np.inf
    W = D.copy()
    np.fill_diagonal(W, big)
    mask_upper = np.zeros((n, n), dtype=bool)
    mask_upper[np.triu_indices(n, 1)] = True
    for step in range(n - 1):
        cand = np.where(mask_upper & active[:, None] & active[None, :], W, big)
        flat = int(np.argmin(cand))        # row-major: lowest (row, col) among ties
        a, b = divmod(flat, n)
        h = cand[a, b]
        na, nb = size[a], size[b]
        ma, mb = sum_vals[a] / na, sum_vals[b] / nb
        if ma > mb or (ma == mb and min_leaf[a] < min_leaf[b]):
            left, right = node_of[a], node_of[b]
        else:
            left, right = node_of[b], node_of[a]
        merges.append((left, right, float(h)))
        # Lance-Williams update into slot a
        if linkage == "single":
            new = np.minimum(W[a], W[b])
        elif linkage == "complete":
            new = np.maximum(W[a], W[b])
        else:
            new = (na * W[a] + nb * W[b]) / (na + nb)
        W[a, :] = new
        W[:, a] = new
        W[a, a] = big
        active[b] = False
        size[a] = na + nb
        sum_vals[a] += sum_vals[b]
        min_leaf[a] = min(min_leaf[a], min_leaf[b])
        node_of[a] = n + step
    order = _inorder(merges, n)
    return Dendrogram(merges, order, n)


def _inorder(merges, n):
    root = n + len(merges) - 1
    out, stack = [], [root]
    while stack:
        node = stack.pop()
        if node < n:
            out.append(node)
        else:
            left, right, _ = merges[node - n]
            stack.append(right)
            stack.append(left)
    return out


def cut_tree(dendro, k):
    """Labels from undoing the last ``k - 1`` merges.

    Clusters are numbered ``0..k-1`` in order of first appearance along
    ``leaf_order``.
    """
    n = dendro.n_leaves
    if not 1 <= k <= n:
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    parent = list(range(2 * n - 1))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, (left, right, _) in enumerate(dendro.merges[: n - k]):
        parent[find(left)] = n + i
        parent[find(right)] = n + i
    labels = np.empty(n, dtype=int)
    seen = {}
    for leaf in dendro.leaf_order:
        r = find(leaf)
        if r not in seen:
            seen[r] = len(seen)
        labels[leaf] = seen[r]
    return labels


# --------------------------------------------------------------------------
# hurdle summaries

@dataclass
class ClusterSummary:
    """Presence fraction and mean-of-positive curves for one cluster and subject.

    ``conditional_mean`` is NaN where no member is positive.
    """

    cluster: int
    subject: str
    times: np.ndarray
    presence: np.ndarray
    conditional_mean: np.ndarray
    n_members: int


def hurdle_curves(x):
    """Column-wise presence fraction and mean over strictly positive entries."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    pos = x > 0
    n_pos = pos.sum(axis=0)
    presence = n_pos / x.shape[0]
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(n_pos > 0, np.where(pos, x, 0.0).sum(axis=0) / n_pos, np.nan)
    return presence, cond


def cluster_summaries(panel, labels, n_clusters=None):
    labels = np.asarray(labels)
    if labels.shape != (panel.n_species,):
        raise ValueError("need one label per species")
    ids = range(n_clusters) if n_clusters is not None else sorted(set(labels.tolist()))
    out = []
    for k in ids:
        members = np.flatnonzero(labels == k)
        if members.size == 0:
            warnings.warn(f"cluster {k} is empty; skipped", RuntimeWarning, stacklevel=2)
            continue
        for subj, t, c in zip(panel.subjects, panel.times, panel.counts):
            presence, cond = hurdle_curves(c[members])
            out.append(ClusterSummary(int(k), subj, t.copy(), presence, cond, members.size))
    return out
