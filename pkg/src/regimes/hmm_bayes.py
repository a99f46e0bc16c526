"""Blocked Gibbs samplers for the sticky HMM and the weak-limit sticky HDP-HMM.

Both samplers share forwards-filtering backwards-sampling (FFBS) over the
state sequences and a semi-conjugate emission update: independent Normal
prior on each state mean and Inverse-Wishart prior on each covariance.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg

from ._stats import (NumericalError, as_rng, lse, sample_dirichlet, sample_invwishart,
                     sample_mvn, symmetrize)
from .hmm_em import HmmParams, emission_loglik, kmeans_init


# --------------------------------------------------------------------------
# FFBS

def backward_messages(logP, E):
    """``log p(x_{t+1:T} | z_t)``, (T, K); last row zero."""
    T, K = E.shape
    out = np.zeros((T, K))
    for t in range(T - 2, -1, -1):
        out[t] = lse(logP + (E[t + 1] + out[t + 1])[None, :], axis=1)
    return out


def _draw_rows(logw, rng):
    """One categorical draw per row of ``logw``."""
    w = np.exp(logw - np.max(logw, axis=-1, keepdims=True))
    c = np.cumsum(w, axis=-1)
    u = rng.random(c.shape[:-1]) * c[..., -1]
    idx = np.sum(c <= u[..., None], axis=-1)
    return np.minimum(idx, w.shape[-1] - 1)


def ffbs_from_loglik(pi, P, E, rng, size=None):
    """FFBS given the (T, K) local log-likelihood matrix ``E``.

    Backward messages are computed once; then ``z_1`` is drawn from
    ``pi * exp(E_1) * message`` and each ``z_t`` from
    ``P[z_{t-1}] * exp(E_t) * message``.
    """
    E = np.asarray(E, dtype=float)
    T, K = E.shape
    with np.errstate(divide="ignore"):
        logP = np.log(P)
        logpi = np.log(pi)
    beta = backward_messages(logP, E)
    local = E + beta
    if not np.isfinite(lse(logpi + local[0])):
        raise NumericalError("every path has zero probability")
    n = 1 if size is None else int(size)
    z = np.empty((n, T), dtype=int)
    z[:, 0] = _draw_rows(np.broadcast_to(logpi + local[0], (n, K)), rng)
    for t in range(1, T):
        z[:, t] = _draw_rows(logP[z[:, t - 1]] + local[t][None, :], rng)
    return z[0] if size is None else z


def ffbs_states(params, obs, rng, loglik_matrix=None, size=None):
    """Exact draw of ``z_{1:T}`` from ``p(z | x, theta, pi, P)``.

    Parameters
    ----------
    size : optional int
        Number of independent paths to draw from the same messages. The
        result is then ``(size, T)``.
    """
    E = emission_loglik(params, obs) if loglik_matrix is None else loglik_matrix
    return ffbs_from_loglik(params.pi, params.P, E, rng, size)


# --------------------------------------------------------------------------
# conjugate pieces

def transition_counts(z_list, K):
    n = np.zeros((K, K))
    for z in z_list:
        z = np.asarray(z)
        if z.size > 1:
            np.add.at(n, (z[:-1], z[1:]), 1.0)
    return n


def _row_alpha(alpha, K):
    a = np.asarray(alpha, dtype=float)
    if a.ndim == 0:
        a = np.full((K, K), float(a))
    elif a.ndim == 1:
        a = np.broadcast_to(a, (K, K)).copy()
    if a.shape != (K, K) or np.any(a <= 0):
        raise ValueError("alpha must be positive, scalar, (K,) or (K, K)")
    return a


def sample_transitions_sticky(z_list, K, alpha, kappa, rng, counts=None):
    """Row ``k ~ Dirichlet(alpha_k + kappa e_k + n_k)`` with counts pooled over sequences."""
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    n = transition_counts(z_list, K) if counts is None else counts
    conc = _row_alpha(alpha, K) + kappa * np.eye(K) + n
    return sample_dirichlet(conc, rng)


@dataclass
class EmissionPrior:
    """``mu_k ~ N(mu0, Sigma0)`` and ``Sigma_k ~ IW(nu, Delta)``, independently."""

    mu0: np.ndarray
    Sigma0: np.ndarray
    nu: float
    Delta: np.ndarray

    def __post_init__(self):
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        D = self.mu0.size
        self.Sigma0 = np.atleast_2d(np.asarray(self.Sigma0, dtype=float))
        self.Delta = np.atleast_2d(np.asarray(self.Delta, dtype=float))
        if self.Sigma0.shape != (D, D) or self.Delta.shape != (D, D):
            raise ValueError("prior matrices must be (D, D)")
        if self.nu <= D - 1:
            raise ValueError("need nu > dim - 1")
        try:
            np.linalg.cholesky(self.Delta)
        except np.linalg.LinAlgError:
            raise ValueError("Delta must be positive definite") from None

    @property
    def dim(self):
        return self.mu0.size

    @classmethod
    def from_data(cls, data):
        """Weakly informative defaults centred on the pooled data."""
        data = np.asarray(data, dtype=float)
        data = data[:, None] if data.ndim == 1 else data
        D = data.shape[1]
        S = np.atleast_2d(np.cov(data.T)) if data.shape[0] > 1 else np.eye(D)
        S = S + 1e-6 * np.eye(D)
        return cls(data.mean(axis=0), 4.0 * S, D + 2.0, S)


def sample_emissions(z_list, data_list, hyper, covs, rng):
    """Two-stage draw per state: ``mu_k | Sigma_k, x`` then ``Sigma_k | mu_k, x``.

    ``covs`` are the current covariances that condition the mean draw.
    States with no assigned samples draw both from the prior.
    """
    K = covs.shape[0]
    D = hyper.dim
    z = np.concatenate([np.asarray(v) for v in z_list])
    x = np.vstack([np.asarray(v, dtype=float).reshape(len(v), -1) for v in data_list])
    P0 = linalg.inv(hyper.Sigma0)
    means = np.empty((K, D))
    new_covs = np.empty((K, D, D))
    for k in range(K):
        xk = x[z == k]
        n = xk.shape[0]
        if n == 0:
            means[k] = sample_mvn(hyper.mu0, hyper.Sigma0, rng)
            new_covs[k] = sample_invwishart(hyper.nu, hyper.Delta, rng)
            continue
        Sinv = linalg.inv(covs[k])
        V = symmetrize(linalg.inv(P0 + n * Sinv))
        mean = V @ (P0 @ hyper.mu0 + Sinv @ xk.sum(axis=0))
        means[k] = sample_mvn(mean, V, rng)
        c = xk - means[k]
        new_covs[k] = sample_invwishart(hyper.nu + n, hyper.Delta + c.T @ c, rng)
    return means, new_covs


# --------------------------------------------------------------------------
# chains

@dataclass
class SamplerChain:
    """Recorded draws after burn-in and thinning."""

    iterations: list = field(default_factory=list)
    states: list = field(default_factory=list)       # per draw: list of z arrays
    P: list = field(default_factory=list)
    means: list = field(default_factory=list)
    covs: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    aux: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.iterations)

    def record(self, it, z_list, P=None, means=None, covs=None, beta=None, aux=None):
        self.iterations.append(it)
        self.states.append([np.array(z) for z in z_list])
        for name, v in (("P", P), ("means", means), ("covs", covs), ("beta", beta)):
            if v is not None:
                getattr(self, name).append(np.array(v))
        if aux is not None:
            self.aux.append(aux)

    def transition_summary(self):
        """Posterior mean and standard error of each transition cell."""
        Ps = np.array(self.P)
        se = Ps.std(axis=0, ddof=1) / np.sqrt(len(Ps)) if len(Ps) > 1 else np.full(Ps.shape[1:], np.nan)
        return Ps.mean(axis=0), se

    def state_frequencies(self, seq=0, K=None):
        """(T, K) fraction of draws with ``z_t = k``."""
        zs = np.array([s[seq] for s in self.states])
        K = K or int(zs.max()) + 1
        return np.stack([(zs == k).mean(axis=0) for k in range(K)], axis=1)

    def coassignment(self, seq=0):
        zs = np.array([s[seq] for s in self.states])
        return np.sum(zs[:, :, None] == zs[:, None, :], axis=0)

    def modal_means(self, seq=0):
        """Per-time emission mean of the assigned state, averaged over draws (label invariant)."""
        vals = [m[s[seq]] for s, m in zip(self.states, self.means)]
        return np.mean(vals, axis=0)


def _check_chain_controls(iterations, burn_in, thin):
    if iterations < 1 or burn_in < 0 or thin < 1 or burn_in >= iterations:
        raise ValueError("need iterations >= 1, 0 <= burn_in < iterations, thin >= 1")


@dataclass
class StickyConfig:
    K: int = 2
    alpha: float = 1.0
    kappa: float = 0.0
    prior: Optional[EmissionPrior] = None
    iterations: int = 1000
    burn_in: int = 0
    thin: int = 1
    seed: Optional[int] = None
    init: Optional[HmmParams] = None
    fixed_emissions: bool = False

    def __post_init__(self):
        _check_chain_controls(self.iterations, self.burn_in, self.thin)
        if self.K < 1 or np.any(np.asarray(self.alpha) <= 0) or self.kappa < 0:
            raise ValueError("need K >= 1, alpha > 0, kappa >= 0")


def _prepare(sequences):
    seqs = [np.asarray(s, dtype=float) for s in sequences]
    seqs = [s[:, None] if s.ndim == 1 else s for s in seqs]
    if not seqs:
        raise ValueError("need at least one sequence")
    return seqs


def _initial_params(seqs, K, init, rng):
    if init is not None:
        return HmmParams(init.pi, init.P, init.means, init.covs)
    return kmeans_init(np.vstack(seqs), K, rng)


def sticky_hmm_gibbs(sequences, cfg):
    """Blocked Gibbs: FFBS per sequence, pooled sticky Dirichlet rows, emissions.

    The initial distribution stays uniform (not sampled).
    """
    rng = as_rng(cfg.seed)
    seqs = _prepare(sequences)
    K = cfg.K
    params = _initial_params(seqs, K, cfg.init, rng)
    prior = cfg.prior or EmissionPrior.from_data(np.vstack(seqs))
    pi = np.full(K, 1.0 / K)
    means, covs, P = params.means, params.covs, params.P
    chain = SamplerChain(meta={"seed": cfg.seed, "burn_in": cfg.burn_in, "thin": cfg.thin,
                               "iterations": cfg.iterations, "K": K})
    E_fixed = None
    if cfg.fixed_emissions:
        E_fixed = [emission_loglik(params, s) for s in seqs]
    for it in range(cfg.iterations):
        cur = HmmParams(pi, P, means, covs)
        z_list = [ffbs_states(cur, s, rng, E_fixed[i] if E_fixed else None)
                  for i, s in enumerate(seqs)]
        P = sample_transitions_sticky(z_list, K, cfg.alpha, cfg.kappa, rng)
        if not cfg.fixed_emissions:
            means, covs = sample_emissions(z_list, seqs, prior, covs, rng)
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            chain.record(it, z_list, P, means, covs)
    return chain


# --------------------------------------------------------------------------
# weak-limit HDP-HMM

@dataclass
class AuxCounts:
    n: np.ndarray
    m: np.ndarray
    w: np.ndarray
    mbar: np.ndarray

    def check(self):
        ok = (np.all(self.m >= 0) and np.all(self.m <= self.n)
              and np.all(self.w >= 0) and np.all(self.w <= np.diag(self.m))
              and np.all(self.mbar >= 0))
        off = ~np.eye(self.n.shape[0], dtype=bool)
        return bool(ok and np.array_equal(self.mbar[off], self.m[off])
                    and np.array_equal(np.diag(self.mbar), np.diag(self.m) - self.w))


def hdp_aux_updates(n, beta, alpha, kappa, rng, crt="printed"):
    """Table counts ``m``, override counts ``w`` and corrected counts ``m_bar``.

    ``m_jk`` sums ``Bernoulli(a / (i + a))`` for ``i = 1..n_jk`` with
    ``a = alpha beta_k + kappa 1{j = k}``; ``crt="textbook"`` uses
    ``a / (a + i - 1)`` instead. Then
    ``w_j ~ Binomial(m_jj, rho / (rho + beta_j (1 - rho)))`` with
    ``rho = kappa / (alpha + kappa)``.
    """
    if crt not in ("printed", "textbook"):
        raise ValueError("crt must be 'printed' or 'textbook'")
    n = np.asarray(n, dtype=np.int64)
    beta = np.asarray(beta, dtype=float)
    L = beta.size
    a = alpha * np.broadcast_to(beta, (L, L)) + kappa * np.eye(L)
    flat_n = n.ravel()
    total = int(flat_n.sum())
    m = np.zeros(L * L, dtype=np.int64)
    if total:
        cell = np.repeat(np.arange(L * L), flat_n)
        starts = np.cumsum(flat_n) - flat_n
        i = np.arange(total) - np.repeat(starts, flat_n) + 1
        ac = a.ravel()[cell]
        p = ac / (i + ac) if crt == "printed" else ac / (ac + i - 1)
        hits = rng.random(total) < p
        m = np.bincount(cell, weights=hits, minlength=L * L).astype(np.int64)
    m = m.reshape(L, L)
    rho = kappa / (alpha + kappa)
    dm = np.diag(m)
    if rho > 0:
        q = rho / (rho + beta * (1.0 - rho))
        w = rng.binomial(dm, q)
    else:
        w = np.zeros(L, dtype=np.int64)
    mbar = m.copy()
    mbar[np.diag_indices(L)] = dm - w
    return AuxCounts(n.copy(), m, w, mbar)


def sample_beta(mbar, gamma, L, rng):
    """``beta ~ Dirichlet(gamma / L + column sums of m_bar)``."""
    return sample_dirichlet(gamma / L + np.asarray(mbar, dtype=float).sum(axis=0), rng)


@dataclass
class HdpConfig:
    L: int = 10
    gamma: float = 1.0
    alpha: float = 1.0
    kappa: float = 0.0
    prior: Optional[EmissionPrior] = None
    iterations: int = 1000
    burn_in: int = 0
    thin: int = 1
    seed: Optional[int] = None
    init: Optional[HmmParams] = None
    crt: str = "printed"
    fixed_emissions: bool = False

    def __post_init__(self):
        _check_chain_controls(self.iterations, self.burn_in, self.thin)
        if self.gamma <= 0 or self.alpha <= 0 or self.kappa < 0 or self.L < 2:
            raise ValueError("need gamma, alpha > 0, kappa >= 0, L >= 2")

    @property
    def rho(self):
        return self.kappa / (self.alpha + self.kappa)


def hdp_hmm_gibbs(sequences, cfg):
    """Weak-limit blocked Gibbs for the sticky HDP-HMM.

    Each sweep: FFBS per sequence, auxiliary counts, ``beta``, transition
    rows ``Dirichlet(alpha beta + kappa e_j + n_j)``, emissions.
    Initialized from k-means with ``L`` clusters.
    """
    rng = as_rng(cfg.seed)
    seqs = _prepare(sequences)
    L = cfg.L
    params = _initial_params(seqs, L, cfg.init, rng)
    prior = cfg.prior or EmissionPrior.from_data(np.vstack(seqs))
    pi = np.full(L, 1.0 / L)
    beta = np.full(L, 1.0 / L)
    means, covs, P = params.means, params.covs, params.P
    chain = SamplerChain(meta={"seed": cfg.seed, "burn_in": cfg.burn_in, "thin": cfg.thin,
                               "iterations": cfg.iterations, "L": L})
    E_fixed = [emission_loglik(params, s) for s in seqs] if cfg.fixed_emissions else None
    for it in range(cfg.iterations):
        cur = HmmParams(pi, P, means, covs)
        z_list = [ffbs_states(cur, s, rng, E_fixed[i] if E_fixed else None)
                  for i, s in enumerate(seqs)]
        n = transition_counts(z_list, L)
        aux = hdp_aux_updates(n, beta, cfg.alpha, cfg.kappa, rng, cfg.crt)
        beta = sample_beta(aux.mbar, cfg.gamma, L, rng)
        P = sample_dirichlet(cfg.alpha * beta[None, :] + cfg.kappa * np.eye(L) + n, rng)
        if not cfg.fixed_emissions:
            means, covs = sample_emissions(z_list, seqs, prior, covs, rng)
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            chain.record(it, z_list, P, means, covs, beta, aux)
    return chain


def effective_state_count(chain, threshold=0.01):
    """Mean over draws of the number of states holding more than ``threshold``
    of that draw's assignments.

    Counting per draw keeps the statistic invariant to label switching.
    """
    counts = []
    for z_list in chain.states:
        z = np.concatenate(z_list)
        freq = np.bincount(z) / z.size
        counts.append(np.sum(freq > threshold))
    return float(np.mean(counts))
