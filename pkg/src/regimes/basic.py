"""Simultaneous changepoint detection across sequences with a shared per-time
changepoint probability.

``z[i, t] = 1`` marks a changepoint in sequence ``i`` at time ``t``; column 0
is always 1. Given ``z``, each segment ``[t, s)`` of a sequence is i.i.d.
under one parameter drawn from a conjugate prior, so its marginal likelihood
``P_i(t, s)`` is closed form. Each column's changepoint probability ``q_t`` is
drawn from a point-mass grid prior whose weights can be fit by empirical Bayes.

Times are 0-based and segments half-open; ``s = T`` denotes the series end.
"""

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.special import betaln, gammaln, xlog1py, xlogy

from ._stats import LOG_2PI, NumericalError, as_rng, lse


# --------------------------------------------------------------------------
# observation models

@dataclass
class GaussianNIG:
    """Normal likelihood with Normal-Inverse-Gamma prior on (mean, variance).

    ``mu0=None`` is replaced by the data mean when a cache is built.
    """

    mu0: Optional[float] = None
    lam0: float = 1.0
    a0: float = 1.0
    b0: float = 1.0

    def __post_init__(self):
        if self.lam0 <= 0 or self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("need lam0, a0, b0 > 0")

    def resolved(self, data):
        if self.mu0 is not None:
            return self
        return GaussianNIG(float(np.mean(data)), self.lam0, self.a0, self.b0)

    def check(self, x):
        if not np.all(np.isfinite(x)):
            raise ValueError("Gaussian observations must be finite")

    def table(self, x):
        mu0 = 0.0 if self.mu0 is None else self.mu0
        T = x.size
        c1 = np.concatenate([[0.0], np.cumsum(x)])
        c2 = np.concatenate([[0.0], np.cumsum(x * x)])
        t, s = np.meshgrid(np.arange(T + 1), np.arange(T + 1), indexing="ij")
        m = (s - t).astype(float)
        with np.errstate(invalid="ignore", divide="ignore"):
            S1 = c1[s] - c1[t]
            S2 = c2[s] - c2[t]
            xbar = S1 / m
            ss = np.clip(S2 - S1 * xbar, 0.0, None)
            lam_n = self.lam0 + m
            a_n = self.a0 + 0.5 * m
            b_n = self.b0 + 0.5 * ss + 0.5 * self.lam0 * m * (xbar - mu0) ** 2 / lam_n
            out = (gammaln(a_n) - gammaln(self.a0) + self.a0 * np.log(self.b0)
                   - a_n * np.log(b_n) + 0.5 * (np.log(self.lam0) - np.log(lam_n))
                   - 0.5 * m * LOG_2PI)
        out[m <= 0] = np.nan
        return out


@dataclass
class BetaBernoulli:
    a0: float = 1.0
    b0: float = 1.0

    def __post_init__(self):
        if self.a0 <= 0 or self.b0 <= 0:
            raise ValueError("need a0, b0 > 0")

    def resolved(self, data):
        return self

    def check(self, x):
        if not np.all((x == 0) | (x == 1)):
            raise ValueError("Beta-Bernoulli observations must be 0/1")

    def table(self, x):
        T = x.size
        c1 = np.concatenate([[0.0], np.cumsum(x)])
        t, s = np.meshgrid(np.arange(T + 1), np.arange(T + 1), indexing="ij")
        m = (s - t).astype(float)
        k = c1[s] - c1[t]
        with np.errstate(invalid="ignore"):
            out = betaln(self.a0 + k, self.b0 + m - k) - betaln(self.a0, self.b0)
        out[m <= 0] = np.nan
        return out


ObsModel = Union[GaussianNIG, BetaBernoulli]


def segment_marginal(model, data):
    """Log marginal likelihood of one segment under ``model``."""
    x = np.asarray(data, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("segment must be nonempty")
    model.check(x)
    return float(model.table(x)[0, x.size])


def segment_cache(model, data):
    """(n, T+1, T+1) array ``L[i, t, s] = log P_i(t, s)`` for ``t < s`` (NaN elsewhere)."""
    data = np.atleast_2d(np.asarray(data, dtype=float))
    model.check(data)
    model = model.resolved(data)
    return np.stack([model.table(row) for row in data])


# --------------------------------------------------------------------------
# grid prior

@dataclass
class GridPrior:
    q: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.w = np.asarray(self.w, dtype=float).ravel()
        if self.q.shape != self.w.shape or self.q.size == 0:
            raise ValueError("q and w must be nonempty and the same length")
        if np.any(self.q <= 0) or np.any(self.q > 1):
            raise ValueError("grid points must lie in (0, 1]")
        if np.any(self.w < 0) or abs(self.w.sum() - 1) > 1e-9:
            raise ValueError("weights must lie on the simplex")

    @classmethod
    def uniform(cls, Kg=50):
        q = np.arange(1, Kg + 1) / Kg
        return cls(q, np.full(Kg, 1.0 / Kg))

    @classmethod
    def point(cls, q0):
        return cls([q0], [1.0])

    def log_terms(self, N, n):
        """``log w_k + N log q_k + (n - N) log(1 - q_k)``; broadcasts over ``N``."""
        N = np.asarray(N, dtype=float)[..., None]
        with np.errstate(divide="ignore"):
            return np.log(self.w) + xlogy(N, self.q) + xlog1py(n - N, -self.q)

    def log_column_prob(self, N, n):
        """``log p(column with N ones out of n)`` with ``q`` integrated out."""
        return lse(self.log_terms(N, n), axis=-1)


def changepoint_propensity_row(N, n, prior):
    """``c = sum w q^(N+1) (1-q)^(n-1-N) / sum w q^N (1-q)^(n-1-N)``.

    ``N`` counts changepoints at this time among the other ``n - 1`` sequences.
    """
    N = np.asarray(N, dtype=float)
    if np.any(N < 0) or np.any(N > n - 1):
        raise ValueError("need 0 <= N <= n - 1")
    lt = prior.log_terms(N, n - 1)
    den = lse(lt, axis=-1)
    if np.any(~np.isfinite(den)):
        raise NumericalError("grid prior puts no mass on this changepoint count")
    with np.errstate(divide="ignore"):
        num = lse(lt + np.log(prior.q), axis=-1)
    return np.exp(num - den)


# --------------------------------------------------------------------------
# row updates

def _row_propensity(z, i, prior):
    n = z.shape[0]
    N = z[:, 1:].sum(axis=0) - z[i, 1:]
    c = np.zeros(z.shape[1])
    c[1:] = changepoint_propensity_row(N, n, prior)
    return c


def row_transitions(L, c):
    """Log ``Q(t)`` and the next-changepoint kernel for one row.

    ``G[s, t]`` is the log probability that, given a changepoint at ``s``,
    the next one is at ``t`` (``t = T`` meaning none). ``logQ[0]`` is
    ``log p(x_i | z_-i)``.
    """
    T = L.shape[0] - 1
    with np.errstate(divide="ignore"):
        logc = np.log(c)
        log1mc = np.log1p(-c)
    logQ = np.full(T, -np.inf)
    G = np.full((T, T + 1), -np.inf)
    for t in range(T - 1, -1, -1):
        cum = np.concatenate([[0.0], np.cumsum(log1mc[t + 1:T])])
        s = np.arange(t + 1, T)
        terms = np.empty(T - t)
        terms[:-1] = cum[s - t - 1] + logc[s] + L[t, s] + logQ[s]
        terms[-1] = cum[T - 1 - t] + L[t, T]
        logQ[t] = lse(terms)
        if not np.isfinite(logQ[t]):
            raise NumericalError(f"row likelihood vanished at t={t}")
        G[t, t + 1:] = terms - logQ[t]
    return logQ, G


def sample_row_path(G, rng, size=None):
    """Changepoint indicators drawn by walking the next-changepoint kernel from 0."""
    T = G.shape[0]
    n = 1 if size is None else int(size)
    z = np.zeros((n, T), dtype=np.int8)
    z[:, 0] = 1
    pos = np.zeros(n, dtype=int)
    live = np.ones(n, dtype=bool)
    P = np.exp(G)
    cum = np.cumsum(P, axis=1)
    while np.any(live):
        idx = np.flatnonzero(live)
        cs = cum[pos[idx]]
        u = rng.random(idx.size) * cs[:, -1]
        nxt = np.minimum(np.sum(cs <= u[:, None], axis=1), T)
        nxt = np.maximum(nxt, pos[idx] + 1)
        done = nxt >= T
        z[idx[~done], nxt[~done]] = 1
        pos[idx] = nxt
        live[idx[done]] = False
    return z[0] if size is None else z


def row_gibbs(i, z, L, prior, rng, size=None):
    """Exact draw of row ``i`` from ``p(z_i | z_-i, x)``."""
    c = _row_propensity(z, i, prior)
    _, G = row_transitions(L[i], c)
    return sample_row_path(G, rng, size)


# --------------------------------------------------------------------------
# column updates

def suffix_coefficients(logA, logB):
    """Log coefficients of ``prod_{i' > i} (A_i' q + B_i' (1 - q))``.

    Entry ``i`` holds ``m + 1`` values (``m = n - 1 - i``), the coefficient of
    ``q^j (1 - q)^(m - j)`` at position ``j``; built from ``i = n - 1`` upward.
    """
    n = len(logA)
    out = [None] * n
    cur = np.zeros(1)
    for i in range(n - 1, -1, -1):
        out[i] = cur
        nxt = np.full(cur.size + 1, -np.inf)
        nxt[1:] = cur + logA[i]
        nxt[:-1] = np.logaddexp(nxt[:-1], cur + logB[i])
        cur = nxt
    return out


def _neighbors(row, t):
    T = row.size
    before = np.flatnonzero(row[:t])
    after = np.flatnonzero(row[t + 1:])
    r = int(before[-1])
    s = int(after[0]) + t + 1 if after.size else T
    return r, s


def column_ab(z, t, L):
    """Per-row ``log A_t(i)`` (changepoint at ``t``) and ``log B_t(i)`` (none)."""
    n = z.shape[0]
    logA = np.empty(n)
    logB = np.empty(n)
    for i in range(n):
        r, s = _neighbors(z[i], t)
        logA[i] = L[i, r, t] + L[i, t, s]
        logB[i] = L[i, r, s]
    return logA, logB


def col_gibbs(t, z, L, prior, rng):
    """Exact joint draw of column ``t >= 1`` given all other columns, top down.

    Row ``i`` uses ``c = E[q | rows above, rows below marginalized]`` from the
    grid prior, the suffix polynomial over the rows below, and the count of
    new changepoints above it.
    """
    if t < 1:
        raise ValueError("column 0 is fixed")
    n = z.shape[0]
    logA, logB = column_ab(z, t, L)
    suf = suffix_coefficients(logA, logB)
    q = prior.q
    with np.errstate(divide="ignore"):
        logw = np.log(prior.w)
    new = np.empty(n, dtype=z.dtype)
    N = 0
    for i in range(n):
        m = n - 1 - i
        j = np.arange(m + 1)[:, None]
        a = suf[i][:, None] + xlogy(j + N, q) + xlog1py(m - j + i - N, -q)
        top = a.max(axis=0)
        with np.errstate(invalid="ignore"):
            pk = logw + top + np.log(np.exp(a - top).sum(axis=0))
        pk[~np.isfinite(top)] = -np.inf
        mx = pk.max()
        if not np.isfinite(mx):
            raise NumericalError(f"column {t}: prior mass vanished at row {i}")
        e = np.exp(pk - mx)
        c = float(e @ q / e.sum())
        on = np.exp(logA[i] - max(logA[i], logB[i])) * c
        off = np.exp(logB[i] - max(logA[i], logB[i])) * (1.0 - c)
        new[i] = 1 if rng.random() * (on + off) < on else 0
        N += int(new[i])
    return new


# --------------------------------------------------------------------------
# jitter

def row_loglik(row, Li):
    cps = np.append(np.flatnonzero(row), row.size)
    return float(np.sum(Li[cps[:-1], cps[1:]]))


def log_joint(z, L, prior):
    """``log p(x | z) + log p(z)`` with segment parameters and ``q`` integrated."""
    n = z.shape[0]
    ll = sum(row_loglik(z[i], L[i]) for i in range(n))
    return ll + float(np.sum(prior.log_column_prob(z[:, 1:].sum(axis=0), n)))


def jitter_mh(z, L, prior, rng, moves=None):
    """Metropolis moves of single changepoints by one step.

    Each move picks a changepoint uniformly among those at ``t >= 1`` and a
    direction uniformly; targets outside ``[1, T-1]`` or already occupied
    are rejected. The proposal is symmetric, so the acceptance ratio is the
    posterior ratio.
    """
    z = z.copy()
    n, T = z.shape
    cand = np.argwhere(z[:, 1:]) + [0, 1]
    if cand.size == 0:
        return z, 0
    moves = len(cand) if moves is None else moves
    accepted = 0
    for _ in range(moves):
        cand = np.argwhere(z[:, 1:]) + [0, 1]
        i, t = cand[rng.integers(len(cand))]
        t2 = t + (1 if rng.random() < 0.5 else -1)
        if t2 < 1 or t2 >= T or z[i, t2]:
            continue
        old_rows = row_loglik(z[i], L[i])
        N = z[:, [t, t2]].sum(axis=0)
        old_cols = prior.log_column_prob(N, n).sum()
        z[i, t], z[i, t2] = 0, 1
        new_rows = row_loglik(z[i], L[i])
        new_cols = prior.log_column_prob(N + [-1, 1], n).sum()
        log_ratio = new_rows + new_cols - old_rows - old_cols
        if np.log(rng.random()) < log_ratio:
            accepted += 1
        else:
            z[i, t], z[i, t2] = 1, 0
    return z, accepted


# --------------------------------------------------------------------------
# empirical Bayes

def eb_objective(counts, n, prior):
    """Mean over samples of ``sum_t log sum_k w_k q_k^N_t (1 - q_k)^(n - N_t)``."""
    return float(np.sum(prior.log_column_prob(counts, n)) / counts.shape[0])


def eb_optimize(z_samples, prior, max_iter=1000, tol=1e-10):
    """Mixture-weight EM for the grid prior on sampled changepoint matrices.

    Returns
    -------
    GridPrior with the fitted weights, and the objective trace.
    """
    z_samples = [np.asarray(z) for z in z_samples]
    if not z_samples:
        raise ValueError("need at least one z sample")
    n = z_samples[0].shape[0]
    counts = np.array([z[:, 1:].sum(axis=0) for z in z_samples], dtype=float)
    cur = GridPrior(prior.q, prior.w)
    trace = [eb_objective(counts, n, cur)]
    with np.errstate(divide="ignore"):
        base = xlogy(counts[..., None], cur.q) + xlog1py(n - counts[..., None], -cur.q)
    flat = base.reshape(-1, cur.q.size)
    for _ in range(max_iter):
        with np.errstate(divide="ignore"):
            lt = flat + np.log(cur.w)
        resp = np.exp(lt - lse(lt, axis=1)[:, None])
        w = resp.mean(axis=0)
        w = w / w.sum()
        cur = GridPrior(cur.q, w)
        trace.append(eb_objective(counts, n, cur))
        if trace[-1] - trace[-2] < tol:
            break
    return cur, trace


# --------------------------------------------------------------------------
# driver

@dataclass
class BasicResult:
    frequencies: np.ndarray          # (n, T) posterior changepoint frequency
    prior: GridPrior
    samples: np.ndarray              # (S, n, T) recorded z
    eb_traces: list = field(default_factory=list)
    jitter_accepted: int = 0


def sweep(z, L, prior, rng):
    """Rows, then columns ``1..T-1``, then one jitter pass."""
    z = z.copy()
    for i in range(z.shape[0]):
        z[i] = row_gibbs(i, z, L, prior, rng)
    for t in range(1, z.shape[1]):
        z[:, t] = col_gibbs(t, z, L, prior, rng)
    z, acc = jitter_mh(z, L, prior, rng)
    return z, acc


def fit_basic(data, model=None, prior=None, iterations=200, eb_rounds=0, burn_in=None,
              seed=None):
    """Run the sampler, optionally refitting the grid prior between rounds.

    Each of the ``eb_rounds + 1`` rounds runs ``iterations`` sweeps and keeps
    the draws after ``burn_in`` (default a fifth). The grid weights are refit
    on each round's draws except the last, whose draws give the frequencies.
    """
    data = np.atleast_2d(np.asarray(data, dtype=float))
    model = model or GaussianNIG()
    prior = prior or GridPrior.uniform()
    if iterations < 1 or eb_rounds < 0:
        raise ValueError("need iterations >= 1 and eb_rounds >= 0")
    burn_in = iterations // 5 if burn_in is None else burn_in
    if not 0 <= burn_in < iterations:
        raise ValueError("need 0 <= burn_in < iterations")
    rng = as_rng(seed)
    L = segment_cache(model, data)
    n, T = data.shape
    z = np.zeros((n, T), dtype=np.int8)
    z[:, 0] = 1
    traces = []
    accepted = 0
    for rnd in range(eb_rounds + 1):
        kept = []
        for it in range(iterations):
            z, acc = sweep(z, L, prior, rng)
            accepted += acc
            if it >= burn_in:
                kept.append(z.copy())
        if rnd < eb_rounds:
            prior, tr = eb_optimize(kept, prior)
            traces.append(tr)
    samples = np.array(kept)
    return BasicResult(samples.mean(axis=0), prior, samples, traces, accepted)
