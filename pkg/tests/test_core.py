import itertools
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from regimes.core import (
    DistanceSpec, SeriesPanel, Transform, apply_transform, cluster_summaries, cut_tree,
    hclust, hurdle_curves, jaccard_distance, pairwise_distance, prevalence_filter,
    transform_matrix,
)


def _panel(counts, times=None):
    counts = np.asarray(counts, dtype=float)
    times = np.arange(counts.shape[1], dtype=float) if times is None else times
    return SeriesPanel(["s"], [times], [counts], [f"sp{i}" for i in range(counts.shape[0])])


class TestSeriesPanel:
    def test_rejects_negative_counts(self):
        with pytest.raises(ValueError):
            _panel([[1.0, -1.0]])

    def test_rejects_nonincreasing_times(self):
        with pytest.raises(ValueError):
            _panel([[1.0, 2.0]], times=np.array([1.0, 1.0]))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            SeriesPanel(["a"], [[0.0, 1.0]], [np.zeros((2, 3))], ["x", "y"])


class TestTransforms:
    def test_asinh_values(self):
        np.testing.assert_allclose(transform_matrix([0.0, 1.0], "asinh"),
                                   [0.0, np.log(1 + np.sqrt(2))], rtol=0, atol=1e-15)
        np.testing.assert_allclose(transform_matrix([1.0], "asinh"), [0.88137358701954305])

    def test_binarize(self):
        np.testing.assert_array_equal(transform_matrix([0, 2.5, 0.1], "binarize"), [0, 1, 1])

    def test_differencing_shapes(self):
        p = _panel(np.arange(12.0).reshape(3, 4))
        d = apply_transform(p, Transform.FIRST_DIFFERENCE)
        assert d.counts[0].shape == (3, 3)
        np.testing.assert_array_equal(d.times[0], [1.0, 2.0, 3.0])
        b = apply_transform(_panel([[0, 3, 0, 1]]), "binarized_difference")
        np.testing.assert_array_equal(b.counts[0], [[1, -1, 1]])

    def test_differencing_needs_two_points(self):
        with pytest.raises(ValueError):
            transform_matrix(np.ones((2, 1)), "first_difference")

    @given(arrays(float, 20, elements=st.floats(-1e6, 1e6)))
    @settings(max_examples=50, deadline=None)
    def test_asinh_odd_and_increasing(self, x):
        y = transform_matrix(x, "asinh")
        np.testing.assert_allclose(transform_matrix(-x, "asinh"), -y)
        order = np.argsort(x)
        xs, ys = x[order], y[order]
        assert np.all(ys[1:][xs[1:] > xs[:-1]] > ys[:-1][xs[1:] > xs[:-1]])


class TestDistances:
    def test_jaccard_as_printed(self):
        d = pairwise_distance([[1, 0, 1, 0], [1, 1, 0, 0]], DistanceSpec("jaccard"))
        assert d[0, 1] == pytest.approx(0.75)

    def test_jaccard_union_variant(self):
        d = jaccard_distance(np.array([[1, 0, 1, 0], [1, 1, 0, 0]]), union=True)
        assert d[0, 1] == pytest.approx(1 - 1 / 3)

    def test_jaccard_rejects_nonbinary(self):
        with pytest.raises(ValueError):
            pairwise_distance([[0.5, 1.0]], DistanceSpec("jaccard"))

    def test_euclidean_identity_and_mixture_zero(self):
        assert pairwise_distance([[1.0, 2.0], [1.0, 2.0]])[0, 1] == 0
        spec = DistanceSpec("mixture", {"euclidean": 0.5, "jaccard": 0.5})
        assert pairwise_distance([[1, 0], [1, 0]], spec)[0, 1] == 0

    def test_mixture_weights_validated(self):
        with pytest.raises(ValueError):
            DistanceSpec("mixture", {"euclidean": 0.7, "jaccard": 0.7})

    @given(arrays(float, (3, 5), elements=st.floats(0, 100)),
           st.floats(0, 1))
    @settings(max_examples=60, deadline=None)
    def test_mixture_is_metric_on_triples(self, x, w):
        spec = DistanceSpec("mixture", {"euclidean": w, "manhattan": 1 - w})
        d = pairwise_distance(x, spec)
        np.testing.assert_array_equal(np.diag(d), 0)
        np.testing.assert_allclose(d, d.T)
        assert np.all(d >= 0)
        for i, j, k in itertools.permutations(range(3)):
            assert d[i, k] <= d[i, j] + d[j, k] + 1e-9


class TestHclust:
    values = np.array([[0.0], [1.0], [10.0]])

    def test_three_points(self):
        d = hclust(pairwise_distance(self.values), self.values, "average")
        assert d.merges[0][:2] == (1, 0)
        assert d.merges[0][2] == pytest.approx(1.0)
        assert d.merges[1][2] == pytest.approx(9.5)
        assert d.leaf_order == [2, 1, 0]

    def test_two_series_larger_mean_left(self):
        v = np.array([[1.0, 1.0], [3.0, 5.0]])
        d = hclust(pairwise_distance(v), v)
        assert d.merges == [(1, 0, pytest.approx(np.sqrt(20)))]

    def test_single_series(self):
        d = hclust(np.zeros((1, 1)), np.ones((1, 2)))
        assert d.leaf_order == [0] and d.merges == []

    def test_cut_tree(self):
        d = hclust(pairwise_distance(self.values), self.values)
        np.testing.assert_array_equal(cut_tree(d, 3), [2, 1, 0])
        np.testing.assert_array_equal(cut_tree(d, 1), [0, 0, 0])
        lab = cut_tree(d, 2)
        assert lab[0] == lab[1] != lab[2]
        with pytest.raises(ValueError):
            cut_tree(d, 4)

    @pytest.mark.parametrize("linkage", ["single", "complete", "average"])
    def test_permutation_invariant_leaf_order(self, linkage):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(8, 5)) + np.arange(8)[:, None]
        base = hclust(pairwise_distance(x), x, linkage)
        for _ in range(5):
            perm = rng.permutation(8)
            d = hclust(pairwise_distance(x[perm]), x[perm], linkage)
            assert [int(perm[i]) for i in d.leaf_order] == base.leaf_order

    def test_heights_monotone_and_left_heavy(self):
        rng = np.random.default_rng(1)
        x = rng.gamma(2.0, size=(12, 6))
        d = hclust(pairwise_distance(x), x)
        heights = [h for _, _, h in d.merges]
        assert np.all(np.diff(heights) >= -1e-12)
        n = d.n_leaves

        def members(node):
            if node < n:
                return [node]
            l, r, _ = d.merges[node - n]
            return members(l) + members(r)

        rm = x.mean(axis=1)
        for l, r, _ in d.merges:
            assert rm[members(l)].mean() >= rm[members(r)].mean()
        assert sorted(d.leaf_order) == list(range(n))


class TestClusterSummaries:
    def test_hurdle_curves(self):
        p, c = hurdle_curves([[0, 2], [0, 4]])
        np.testing.assert_array_equal(p, [0, 1])
        assert np.isnan(c[0]) and c[1] == 3

    def test_single_member(self):
        p, c = hurdle_curves([[0, 5.0]])
        np.testing.assert_array_equal(p, [0, 1])
        assert c[1] == 5.0

    def test_empty_cluster_warns(self):
        panel = _panel([[0, 2], [0, 4]])
        with warnings.catch_warnings(record=True) as w:
            warnings.simplefilter("always")
            out = cluster_summaries(panel, [0, 0], n_clusters=2)
        assert len(out) == 1 and any("empty" in str(x.message) for x in w)

    def test_presence_is_member_ratio(self):
        rng = np.random.default_rng(2)
        c = rng.poisson(0.7, size=(6, 9)).astype(float)
        labels = np.array([0, 1, 0, 1, 1, 0])
        out = cluster_summaries(_panel(c), labels)
        for s in out:
            m = c[labels == s.cluster]
            np.testing.assert_array_equal(s.presence, (m > 0).sum(axis=0) / m.shape[0])


class TestPrevalence:
    def test_threshold_one(self):
        p = prevalence_filter(_panel([[1, 1, 1], [1, 0, 1], [0, 0, 0]]), 1.0)
        assert p.species == ["sp0"]
