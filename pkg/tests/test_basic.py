import itertools

import numpy as np
import pytest
from scipy.special import betaln

from oracles import basic_posterior, bb_segment_logml, nig_segment_logml, tv
from regimes._stats import NumericalError
from regimes.basic import (
    BetaBernoulli, GaussianNIG, GridPrior, changepoint_propensity_row, col_gibbs, column_ab,
    eb_objective, eb_optimize, fit_basic, jitter_mh, log_joint, row_gibbs, row_transitions,
    segment_cache, segment_marginal, suffix_coefficients, sweep,
)

# Log NIG marginals from dblquad over (mu, log sigma^2) on mu in [-30, 12],
# log sigma^2 in [-30, 30]; the truncated tails cost about 2e-5 relative on the
# single-point case. Rows: (data, mu0, lam0, a0, b0, log marginal).
NIG_QUADRATURE = [
    ([0.3], 0.0, 1.0, 1.0, 1.0, -1.4196865081938141),
    ([1.2, -0.4], 0.5, 2.0, 1.5, 0.8, -3.033974185673341),
    ([0.1, 0.4, -0.2], 0.0, 1.0, 2.0, 1.0, -2.5626317332424007),
    ([2.0, 1.5, 2.4, 1.9], 1.0, 0.5, 1.0, 2.0, -6.0214146922683325),
]


def nig_seg(model):
    return lambda x: nig_segment_logml(x, model.mu0, model.lam0, model.a0, model.b0)


def bb_seg(model):
    return lambda x: bb_segment_logml(x, model.a0, model.b0)


def config_distribution(rows):
    rows = np.atleast_2d(rows)[:, 1:]
    idx = rows @ (2 ** np.arange(rows.shape[1] - 1, -1, -1))
    return np.bincount(idx, minlength=2 ** rows.shape[1]) / rows.shape[0]


def config_probs(zs, w):
    """Exact distribution of the single row in ``zs``, indexed like ``config_distribution``."""
    out = np.zeros(2 ** (zs.shape[2] - 1))
    for z, p in zip(zs, w):
        out[int("".join(map(str, z[0, 1:])), 2)] += p
    return out


def shared_change_data():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(20, 30))
    x[:, 15:] += 4
    return x


class TestSegmentMarginal:
    def test_beta_bernoulli_worked(self):
        np.testing.assert_allclose(segment_marginal(BetaBernoulli(), [1, 0]), np.log(1 / 6), rtol=1e-14)
        np.testing.assert_allclose(segment_marginal(BetaBernoulli(), [1]), np.log(0.5), rtol=1e-14)

    def test_beta_bernoulli_cache(self):
        rng = np.random.default_rng(0)
        x = rng.integers(0, 2, size=(3, 9)).astype(float)
        m = BetaBernoulli(0.7, 2.5)
        L = segment_cache(m, x)
        for i in range(3):
            for t in range(9):
                for s in range(t + 1, 10):
                    k = x[i, t:s].sum()
                    ref = betaln(0.7 + k, 2.5 + s - t - k) - betaln(0.7, 2.5)
                    assert abs(L[i, t, s] - ref) < 1e-12
        assert np.all(np.isnan(L[:, np.tril_indices(10)[0], np.tril_indices(10)[1]]))

    @pytest.mark.parametrize("case", NIG_QUADRATURE)
    def test_nig_against_quadrature(self, case):
        *x_args, ref = case
        x, mu0, lam0, a0, b0 = x_args
        got = segment_marginal(GaussianNIG(mu0, lam0, a0, b0), x)
        assert abs(np.expm1(got - ref)) < 1e-4

    def test_nig_against_predictive_chain(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 7))
        m = GaussianNIG(0.3, 0.8, 1.7, 0.9)
        L = segment_cache(m, x)
        for i in range(2):
            for t in range(7):
                for s in range(t + 1, 8):
                    np.testing.assert_allclose(L[i, t, s], nig_seg(m)(x[i, t:s]), rtol=1e-10)

    def test_default_mean_from_data(self):
        x = np.array([[1.0, 2.0, 6.0]])
        np.testing.assert_allclose(segment_cache(GaussianNIG(), x)[0, 0, 3],
                                   nig_segment_logml(x[0], 3.0, 1.0, 1.0, 1.0), rtol=1e-12)

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            segment_marginal(BetaBernoulli(), [0.5])
        with pytest.raises(ValueError):
            segment_marginal(GaussianNIG(), [])
        with pytest.raises(ValueError):
            GaussianNIG(lam0=0.0)


class TestPropensity:
    def test_point_mass(self):
        np.testing.assert_allclose(changepoint_propensity_row(np.arange(5), 5, GridPrior.point(0.37)), 0.37)

    def test_two_point(self):
        prior = GridPrior([0.1, 0.9], [0.5, 0.5])
        n = 4
        N = n - 1
        num = 0.5 * 0.1 ** (N + 1) * 0.9 ** (n - 1 - N) + 0.5 * 0.9 ** (N + 1) * 0.1 ** (n - 1 - N)
        den = 0.5 * 0.1 ** N * 0.9 ** (n - 1 - N) + 0.5 * 0.9 ** N * 0.1 ** (n - 1 - N)
        c = changepoint_propensity_row(N, n, prior)
        np.testing.assert_allclose(c, num / den, rtol=1e-12)
        assert c > 0.89

    def test_interior(self):
        prior = GridPrior([0.2, 0.5, 0.7], [0.2, 0.3, 0.5])
        c = changepoint_propensity_row(np.arange(6), 6, prior)
        assert np.all((c > 0) & (c < 1))

    def test_degenerate(self):
        with pytest.raises(NumericalError):
            changepoint_propensity_row(0, 3, GridPrior.point(1.0))
        with pytest.raises(ValueError):
            changepoint_propensity_row(3, 3, GridPrior.uniform())

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            GridPrior([0.0, 0.5], [0.5, 0.5])
        with pytest.raises(ValueError):
            GridPrior([0.2, 0.5], [0.6, 0.6])
        g = GridPrior.uniform(50)
        np.testing.assert_allclose(g.q, np.arange(1, 51) / 50)


class TestRow:
    @pytest.mark.parametrize("kind,T", [("nig", 3), ("nig", 5), ("bb", 4), ("bb", 5)])
    def test_single_row_matches_enumeration(self, kind, T):
        rng = np.random.default_rng(T)
        if kind == "nig":
            model = GaussianNIG(0.0)
            x = rng.normal(size=(1, T)) + np.r_[np.zeros(T // 2), 2.5 * np.ones(T - T // 2)]
            seg = nig_seg(model)
        else:
            model = BetaBernoulli(0.5, 0.5)
            x = rng.integers(0, 2, size=(1, T)).astype(float)
            seg = bb_seg(model)
        prior = GridPrior([0.2, 0.5, 0.8], [0.5, 0.3, 0.2])
        zs, w = basic_posterior(x, seg, prior.q, prior.w)
        z = np.ones((1, T), dtype=np.int8)
        draws = row_gibbs(0, z, segment_cache(model, x), prior, np.random.default_rng(0), size=200_000)
        assert tv(config_distribution(draws), config_probs(zs, w)) < 0.01

    def test_conditional_on_other_rows(self):
        rng = np.random.default_rng(7)
        model = GaussianNIG(0.0)
        x = rng.normal(size=(2, 4))
        prior = GridPrior([0.2, 0.7], [0.6, 0.4])
        other = np.array([1, 0, 1, 1], dtype=np.int8)
        fixed = {(1, t): other[t] for t in range(1, 4)}
        zs, w = basic_posterior(x, nig_seg(model), prior.q, prior.w, fixed=fixed)
        z = np.ones((2, 4), dtype=np.int8)
        z[1] = other
        draws = row_gibbs(0, z, segment_cache(model, x), prior, np.random.default_rng(1), size=200_000)
        exact = config_probs(zs[:, :1], w)
        assert tv(config_distribution(draws), exact) < 0.01

    def test_recursion_base(self):
        L = segment_cache(GaussianNIG(0.0), np.array([[0.1, 0.5, -0.3, 0.9]]))[0]
        logQ, _ = row_transitions(L, np.full(5, 0.3))
        np.testing.assert_allclose(logQ[3], L[3, 4])

    def test_normalizer_is_row_evidence(self):
        x = np.array([[0.1, 0.5, -0.3]])
        model = GaussianNIG(0.0)
        L = segment_cache(model, x)[0]
        c = np.array([0.0, 0.3, 0.6])
        logQ, G = row_transitions(L, c)
        tot = []
        for bits in itertools.product((0, 1), repeat=2):
            row = np.array([1, *bits])
            cps = list(np.flatnonzero(row)) + [3]
            lp = sum(L[a, b] for a, b in zip(cps[:-1], cps[1:]))
            lp += sum(np.log(c[t] if row[t] else 1 - c[t]) for t in (1, 2))
            tot.append(lp)
        np.testing.assert_allclose(logQ[0], np.logaddexp.reduce(tot), rtol=1e-12)
        np.testing.assert_allclose(np.exp(G[0]).sum(), 1.0, rtol=1e-12)

    def test_certain_changepoints(self):
        x = np.random.default_rng(2).normal(size=(1, 6))
        z = np.ones((1, 6), dtype=np.int8)
        draws = row_gibbs(0, z, segment_cache(GaussianNIG(), x), GridPrior.point(1.0), np.random.default_rng(0),
                          size=100)
        assert np.all(draws == 1)


class TestColumn:
    def test_suffix_against_expansion(self):
        rng = np.random.default_rng(3)
        for n in range(1, 6):
            logA, logB = rng.normal(size=n), rng.normal(size=n)
            suf = suffix_coefficients(logA, logB)
            for i in range(n):
                below = range(i + 1, n)
                m = n - 1 - i
                ref = np.zeros(m + 1)
                for S in itertools.product((0, 1), repeat=m):
                    j = sum(S)
                    ref[j] += np.prod([np.exp(logA[r]) if s else np.exp(logB[r]) for r, s in zip(below, S)])
                np.testing.assert_allclose(np.exp(suf[i]), ref, rtol=1e-12)

    def test_single_row_matches_row_conditional(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 3))
        model = GaussianNIG(0.0)
        prior = GridPrior([0.2, 0.6], [0.5, 0.5])
        L = segment_cache(model, x)
        z = np.array([[1, 0, 1]], dtype=np.int8)
        zs, w = basic_posterior(x, nig_seg(model), prior.q, prior.w, fixed={(0, 2): 1})
        exact = w[zs[:, 0, 1] == 1].sum()
        draws = np.array([col_gibbs(1, z, L, prior, rng)[0] for _ in range(40_000)], dtype=float)
        se = np.sqrt(exact * (1 - exact) / draws.size)
        assert abs(draws.mean() - exact) < 3 * se

    def test_joint_column_matches_enumeration(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(3, 3))
        x[:, 1:] += 1.5
        model = GaussianNIG(0.0)
        prior = GridPrior([0.1, 0.5, 0.9], [0.3, 0.3, 0.4])
        L = segment_cache(model, x)
        z = np.array([[1, 0, 1], [1, 1, 0], [1, 0, 0]], dtype=np.int8)
        fixed = {(i, 2): z[i, 2] for i in range(3)}
        zs, w = basic_posterior(x, nig_seg(model), prior.q, prior.w, fixed=fixed)
        exact = np.zeros(8)
        for zz, p in zip(zs, w):
            exact[int("".join(map(str, zz[:, 1])), 2)] += p
        draws = np.array([col_gibbs(1, z, L, prior, rng) for _ in range(40_000)])
        emp = np.bincount(draws @ [4, 2, 1], minlength=8) / len(draws)
        assert tv(emp, exact) < 0.02

    def test_uninformative_data(self):
        rng = np.random.default_rng(6)
        L = np.zeros((1, 4, 4))
        prior = GridPrior.uniform(50)
        z = np.ones((1, 3), dtype=np.int8)
        draws = np.array([col_gibbs(1, z, L, prior, rng)[0] for _ in range(20_000)], dtype=float)
        c = prior.q.mean()
        assert abs(draws.mean() - c) < 3 * np.sqrt(c * (1 - c) / draws.size)
        logA, logB = column_ab(z, 1, L)
        np.testing.assert_array_equal(logA, logB)

    def test_first_column_fixed(self):
        with pytest.raises(ValueError):
            col_gibbs(0, np.ones((2, 3), dtype=np.int8), np.zeros((2, 4, 4)), GridPrior.uniform(), None)


class TestJitter:
    def test_no_changepoints(self):
        z = np.zeros((2, 5), dtype=np.int8)
        z[:, 0] = 1
        out, acc = jitter_mh(z, np.zeros((2, 6, 6)), GridPrior.uniform(), np.random.default_rng(0))
        np.testing.assert_array_equal(out, z)
        assert acc == 0

    def test_symmetric_moves(self):
        x = np.array([[0.0, 1.0, 3.0, 3.0, 1.0, 0.0]])
        L = segment_cache(GaussianNIG(1.0), x)
        prior = GridPrior.uniform(10)
        base = np.array([[1, 0, 0, 1, 0, 0]], dtype=np.int8)
        left, right = base.copy(), base.copy()
        left[0, 3], left[0, 2] = 0, 1
        right[0, 3], right[0, 4] = 0, 1
        here = log_joint(base, L, prior)
        np.testing.assert_allclose(log_joint(left, L, prior) - here, log_joint(right, L, prior) - here,
                                   atol=1e-12)

    def test_jitter_chain_preserves_conditional(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(1, 5))
        x[0, 2:] += 1.0
        model = GaussianNIG(0.0)
        prior = GridPrior([0.3, 0.6], [0.5, 0.5])
        L = segment_cache(model, x)
        zs, w = basic_posterior(x, nig_seg(model), prior.q, prior.w)
        keep = zs[:, 0, 1:].sum(axis=1) == 2
        exact = config_probs(zs[keep], w[keep] / w[keep].sum())
        z = np.array([[1, 1, 1, 0, 0]], dtype=np.int8)
        counts = np.zeros(16)
        for _ in range(60_000):
            z, _ = jitter_mh(z, L, prior, rng, moves=1)
            counts[int("".join(map(str, z[0, 1:])), 2)] += 1
        assert tv(counts / counts.sum(), exact) < 0.02


class TestSweep:
    def test_full_sweep_small_instance(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(2, 3))
        x[:, 2] += 2.0
        model = GaussianNIG(0.0)
        prior = GridPrior([0.2, 0.5, 0.8], [0.3, 0.4, 0.3])
        L = segment_cache(model, x)
        zs, w = basic_posterior(x, nig_seg(model), prior.q, prior.w)
        exact = np.tensordot(w, zs.astype(float), axes=1)
        z = np.ones((2, 3), dtype=np.int8)
        acc = np.zeros((2, 3))
        S = 8000
        for _ in range(S):
            z, _ = sweep(z, L, prior, rng)
            acc += z
        assert np.max(np.abs(acc / S - exact)) < 0.02

    def test_first_column_ones(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 8))
        L = segment_cache(GaussianNIG(), x)
        z = np.ones((3, 8), dtype=np.int8)
        for _ in range(10):
            z, _ = sweep(z, L, GridPrior.uniform(), rng)
            assert np.all(z[:, 0] == 1)


class TestEb:
    def test_recovers_grid_point(self):
        rng = np.random.default_rng(11)
        n, T = 40, 30
        samples = []
        for _ in range(5):
            z = np.zeros((n, T), dtype=np.int8)
            z[:, 0] = 1
            for t in range(1, T):
                z[rng.choice(n, 12, replace=False), t] = 1
            samples.append(z)
        fit, trace = eb_optimize(samples, GridPrior.uniform(50))
        assert fit.w[np.argmin(np.abs(fit.q - 0.3))] >= 0.8
        assert np.all(np.diff(trace) >= -1e-12)

    def test_single_grid_point(self):
        z = np.ones((3, 4), dtype=np.int8)
        fit, _ = eb_optimize([z], GridPrior.point(0.5))
        np.testing.assert_array_equal(fit.w, [1.0])

    def test_objective_matches_direct_sum(self):
        prior = GridPrior([0.2, 0.6], [0.3, 0.7])
        counts = np.array([[1.0, 2.0], [0.0, 3.0]])
        direct = np.mean([sum(np.log(0.3 * 0.2 ** N * 0.8 ** (3 - N) + 0.7 * 0.6 ** N * 0.4 ** (3 - N))
                              for N in row) for row in counts])
        np.testing.assert_allclose(eb_objective(counts, 3, prior), direct, rtol=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            eb_optimize([], GridPrior.uniform())


class TestFit:
    def test_shared_changepoint(self):
        res = fit_basic(shared_change_data(), iterations=150, seed=0)
        f = res.frequencies
        assert np.mean(f[:, 15] > 0.9) >= 0.9
        assert np.median(np.delete(f, [0, 15], axis=1)) < 0.2
        assert np.all(res.samples[:, :, 0] == 1)

    def test_reproducible(self):
        x = shared_change_data()[:4, :12]
        a = fit_basic(x, iterations=12, eb_rounds=1, seed=3)
        b = fit_basic(x, iterations=12, eb_rounds=1, seed=3)
        np.testing.assert_array_equal(a.samples, b.samples)
        np.testing.assert_array_equal(a.prior.w, b.prior.w)
        assert len(a.eb_traces) == 1

    def test_bernoulli_data(self):
        x = np.r_[np.zeros((3, 6)).T, np.ones((3, 6)).T].T
        res = fit_basic(x, model=BetaBernoulli(), iterations=40, seed=0)
        assert res.frequencies.shape == (3, 12)
        assert np.all(res.frequencies[:, 6] > 0.5)

    def test_validation(self):
        with pytest.raises(ValueError):
            fit_basic(np.zeros((2, 4)), iterations=0)
        with pytest.raises(ValueError):
            fit_basic(np.zeros((2, 4)), iterations=5, burn_in=5)
