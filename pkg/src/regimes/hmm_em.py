"""Gaussian-emission HMMs: log-space forwards-backwards and pooled EM.

Transition matrices are indexed ``P[from, to]``.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2

from ._stats import NumericalError, as_rng, log_normalize, logsumexp, mvn_logpdf, symmetrize

log = logging.getLogger(__name__)


@dataclass
class HmmParams:
    pi: np.ndarray          # (K,)
    P: np.ndarray           # (K, K)
    means: np.ndarray       # (K, D)
    covs: np.ndarray        # (K, D, D)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        K = self.pi.size
        self.means = np.asarray(self.means, dtype=float).reshape(K, -1)
        D = self.means.shape[1]
        self.covs = np.asarray(self.covs, dtype=float).reshape(K, D, D)
        if self.P.shape != (K, K):
            raise ValueError(f"P must be ({K}, {K})")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1) > 1e-10:
            raise ValueError("pi must lie on the simplex")
        if np.any(self.P < 0) or np.any(np.abs(self.P.sum(axis=1) - 1) > 1e-10):
            raise ValueError("rows of P must lie on the simplex")

    @property
    def K(self):
        return self.pi.size

    @property
    def dim(self):
        return self.means.shape[1]

    def permuted(self, perm):
        perm = np.asarray(perm)
        return HmmParams(self.pi[perm], self.P[np.ix_(perm, perm)], self.means[perm], self.covs[perm])


@dataclass
class PosteriorMarginals:
    gamma: np.ndarray       # (T, K)
    xi: np.ndarray          # (T-1, K, K)
    loglik: float


def _as_seq(obs, D):
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.ndim != 2 or obs.shape[1] != D:
        raise ValueError(f"observations must be (T, {D})")
    if obs.shape[0] < 1:
        raise ValueError("need at least one observation")
    return obs


def emission_loglik(params, obs):
    """(T, K) matrix of ``log N(x_t | mu_k, Sigma_k)``."""
    obs = _as_seq(obs, params.dim)
    return np.column_stack([mvn_logpdf(obs, params.means[k], params.covs[k])
                            for k in range(params.K)])


def _logs(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def _normalize_or_fail(v, t):
    try:
        return log_normalize(v)
    except ValueError as exc:
        raise NumericalError(f"every state has zero likelihood at t={t}") from exc


def forward(params, obs, loglik_matrix=None):
    """Filtered ``log p(z_t | x_{1:t})`` and ``log p(x_{1:T})``.

    Each step predicts with ``log(P' p_{t-1})`` (in log space), adds the
    emission log-densities and renormalizes; the normalizers accumulate to
    the log-likelihood.
    """
    E = emission_loglik(params, obs) if loglik_matrix is None else loglik_matrix
    T, K = E.shape
    logP = _logs(params.P)
    out = np.empty((T, K))
    prior = _logs(params.pi)
    total = 0.0
    for t in range(T):
        if t > 0:
            prior = logsumexp(out[t - 1][:, None] + logP, axis=0)
        v = prior + E[t]
        c = logsumexp(v)
        if not np.isfinite(c):
            raise NumericalError(f"every state has zero likelihood at t={t}")
        out[t] = v - c
        total += c
    return out, float(total)


def backward(params, obs, loglik_matrix=None):
    """``log p(x_{t+1:T} | z_t)`` for all t; the last row is zero."""
    E = emission_loglik(params, obs) if loglik_matrix is None else loglik_matrix
    T, K = E.shape
    logP = _logs(params.P)
    out = np.zeros((T, K))
    for t in range(T - 2, -1, -1):
        out[t] = logsumexp(logP + (E[t + 1] + out[t + 1])[None, :], axis=1)
    return out


def smoothed_marginals(params, obs, loglik_matrix=None):
    E = emission_loglik(params, obs) if loglik_matrix is None else loglik_matrix
    alpha, ll = forward(params, None, E)
    beta = backward(params, None, E)
    T, K = E.shape
    gamma = np.exp(np.vstack([_normalize_or_fail(alpha[t] + beta[t], t) for t in range(T)]))
    logP = _logs(params.P)
    xi = np.empty((max(T - 1, 0), K, K))
    for t in range(T - 1):
        m = alpha[t][:, None] + logP + (E[t + 1] + beta[t + 1])[None, :]
        xi[t] = np.exp(m - logsumexp(m))
    return PosteriorMarginals(gamma, xi, ll)


def modal_path(marginals):
    """Pointwise argmax of gamma; ties go to the lower state index."""
    gamma = marginals.gamma if isinstance(marginals, PosteriorMarginals) else np.asarray(marginals)
    return np.argmax(gamma, axis=1)


# --------------------------------------------------------------------------
# pooled EM

@dataclass
class EmResult:
    params: HmmParams
    marginals: list
    loglik_trace: list = field(default_factory=list)
    converged: bool = False

    @property
    def n_iter(self):
        return len(self.loglik_trace)


def _cov_mode(mode, D):
    if mode == "auto":
        return "full" if D <= 3 else "diag"
    if mode not in ("full", "diag"):
        raise ValueError("covariance must be 'auto', 'full' or 'diag'")
    return mode


def _shape_cov(S, mode, floor):
    S = symmetrize(S)
    if mode == "diag":
        S = np.diag(np.diag(S))
    D = S.shape[0]
    lo = np.linalg.eigvalsh(S)[0]
    if lo < floor:
        S = S + (floor - lo) * np.eye(D)
    return S


def kmeans_init(data, K, rng, covariance="auto", floor=1e-6):
    """Means from k-means, within-cluster covariances, uniform pi, sticky P."""
    data = np.asarray(data, dtype=float)
    D = data.shape[1]
    mode = _cov_mode(covariance, D)
    seed = int(rng.integers(2**31 - 1))
    centers, labels = kmeans2(data, K, minit="++", seed=seed)
    pooled = np.atleast_2d(np.cov(data.T, bias=True)) if data.shape[0] > 1 else np.eye(D)
    covs = np.empty((K, D, D))
    for k in range(K):
        pts = data[labels == k]
        S = np.atleast_2d(np.cov(pts.T, bias=True)) if pts.shape[0] > D else pooled
        covs[k] = _shape_cov(S, mode, floor)
    order = np.argsort(centers[:, 0], kind="stable")
    P = 0.9 * np.eye(K) + 0.1 / K
    return HmmParams(np.full(K, 1.0 / K), P, centers[order], covs[order])


def em_fit_pooled(sequences, K, init=None, max_iter=100, tol=1e-6, seed=None,
                  covariance="auto", cov_floor=1e-6, threads=1):
    """EM with emissions and transitions shared across all sequences.

    The E-step runs per sequence (optionally on ``threads`` workers); the
    M-step pools the expected sufficient statistics.

    Parameters
    ----------
    sequences : list of (T_i, D) arrays
    K : number of states
    init : optional HmmParams; k-means initialization otherwise.
    tol : stop when the total log-likelihood gains less than this.

    Returns
    -------
    EmResult
        ``loglik_trace[i]`` is the log-likelihood of the parameters entering
        iteration ``i``; ``marginals`` are computed under the final parameters.
    """
    rng = as_rng(seed)
    seqs = [np.asarray(s, dtype=float) for s in sequences]
    seqs = [s[:, None] if s.ndim == 1 else s for s in seqs]
    if not seqs:
        raise ValueError("need at least one sequence")
    D = seqs[0].shape[1]
    if any(s.shape[1] != D for s in seqs):
        raise ValueError("all sequences must share the emission dimension")
    mode = _cov_mode(covariance, D)
    data = np.vstack(seqs)
    params = init if init is not None else kmeans_init(data, K, rng, covariance, cov_floor)
    pool = ThreadPoolExecutor(threads) if threads > 1 else None
    trace = []
    converged = False

    def e_step(p):
        fn = lambda s: smoothed_marginals(p, s)
        return list(pool.map(fn, seqs)) if pool else [fn(s) for s in seqs]

    try:
        for _ in range(max_iter):
            marg = e_step(params)
            ll = float(sum(m.loglik for m in marg))
            if trace and ll - trace[-1] < tol:
                trace.append(ll)
                converged = True
                break
            trace.append(ll)
            params = _m_step(params, seqs, marg, mode, cov_floor, rng)
        else:
            marg = e_step(params)
    finally:
        if pool:
            pool.shutdown()
    return EmResult(params, marg, trace, converged)


def _m_step(params, seqs, marg, mode, floor, rng):
    K, D = params.K, params.dim
    pi = np.sum([m.gamma[0] for m in marg], axis=0)
    pi = pi / pi.sum()
    trans = np.zeros((K, K))
    Nk = np.zeros(K)
    Sx = np.zeros((K, D))
    for s, m in zip(seqs, marg):
        if m.xi.size:
            trans += m.xi.sum(axis=0)
        Nk += m.gamma.sum(axis=0)
        Sx += m.gamma.T @ s
    rows = trans.sum(axis=1)
    P = params.P.copy()
    ok = rows > 0
    P[ok] = trans[ok] / rows[ok, None]
    means = params.means.copy()
    covs = params.covs.copy()
    data = np.vstack(seqs)
    for k in range(K):
        if Nk[k] < 1e-8:
            log.warning("state %d is empty; reinitializing its emission from a data point", k)
            means[k] = data[rng.integers(data.shape[0])]
            covs[k] = _shape_cov(np.atleast_2d(np.cov(data.T, bias=True)), mode, floor)
            continue
        mu = Sx[k] / Nk[k]
        S = np.zeros((D, D))
        for s, m in zip(seqs, marg):
            c = s - mu
            S += (m.gamma[:, k, None] * c).T @ c
        means[k] = mu
        covs[k] = _shape_cov(S / Nk[k], mode, floor)
    return HmmParams(pi, P, means, covs)


def simulate_hmm(params, T, rng=None):
    """Draw ``(z, x)`` of length ``T``."""
    rng = as_rng(rng)
    z = np.empty(T, dtype=int)
    x = np.empty((T, params.dim))
    z[0] = rng.choice(params.K, p=params.pi)
    for t in range(T):
        if t > 0:
            z[t] = rng.choice(params.K, p=params.P[z[t - 1]])
        x[t] = rng.multivariate_normal(params.means[z[t]], params.covs[z[t]])
    return z, x
