"""Infinite mixture of Gaussian-process experts for a single series.

Timepoints are partitioned by a Chinese restaurant process; each cluster is a
zero-mean GP with kernel ``v0 exp(-(t - t')^2 / sf2) + v1``. Assignments are
updated by collapsed Gibbs and each cluster's log kernel parameters by HMC
under independent logistic priors.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ._stats import LOG_2PI, NumericalError, as_rng, log_normalize, sample_log_categorical

JITTER = 1e-6


@dataclass
class HmcConfig:
    """Leapfrog settings and logistic prior (location, scale) per log-parameter.

    Parameter order everywhere is ``(log v0, log v1, log sf2)``.
    """

    stepsize: float = 0.005
    steps: int = 5
    loc: tuple = (0.0, 0.0, 0.0)
    scale: tuple = (2.0, 2.0, 2.0)

    def __post_init__(self):
        self.loc = np.asarray(self.loc, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if self.stepsize <= 0 or self.steps < 1 or np.any(self.scale <= 0):
            raise ValueError("need stepsize > 0, steps >= 1, scales > 0")
        if self.loc.shape != (3,) or self.scale.shape != (3,):
            raise ValueError("prior locations and scales need three entries")

    def sample_prior(self, rng):
        return rng.logistic(self.loc, self.scale)

    def log_prior(self, theta):
        u = (np.asarray(theta) - self.loc) / self.scale
        return float(np.sum(-u - np.log(self.scale) - 2.0 * np.logaddexp(0.0, -u)))

    def grad_log_prior(self, theta):
        u = (np.asarray(theta) - self.loc) / self.scale
        return -np.tanh(0.5 * u) / self.scale


def expert_kernel(theta, t, t2=None):
    """``v0 exp(-(t - t')^2 / sf2) + v1`` for ``theta = (log v0, log v1, log sf2)``."""
    v0, v1, sf2 = np.exp(theta)
    t = np.asarray(t, dtype=float).ravel()
    t2 = t if t2 is None else np.asarray(t2, dtype=float).ravel()
    d2 = (t[:, None] - t2[None, :]) ** 2
    return v0 * np.exp(-d2 / sf2) + v1


def _cov(theta, t):
    v0, v1, _ = np.exp(theta)
    K = expert_kernel(theta, t)
    K[np.diag_indices_from(K)] += JITTER * (v0 + v1)
    return K


def cluster_loglik(times, values, theta, grad=False):
    """``log N(y | 0, K_theta(t) + 1e-6 (v0 + v1) I)``.

    With ``grad=True`` also returns the gradient over the three log-parameters.
    """
    t = np.asarray(times, dtype=float).ravel()
    y = np.asarray(values, dtype=float).ravel()
    if t.size != y.size or t.size == 0:
        raise ValueError("need matching, nonempty times and values")
    K = _cov(theta, t)
    try:
        cf = linalg.cho_factor(K, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("expert covariance not positive definite after jitter") from exc
    a = linalg.cho_solve(cf, y)
    val = -0.5 * y @ a - np.sum(np.log(np.diag(cf[0]))) - 0.5 * y.size * LOG_2PI
    if not grad:
        return float(val)
    v0, v1, sf2 = np.exp(theta)
    n = y.size
    d2 = (t[:, None] - t[None, :]) ** 2
    Ek = np.exp(-d2 / sf2)
    I = np.eye(n)
    W = np.outer(a, a) - linalg.cho_solve(cf, I)
    dK = (v0 * (Ek + JITTER * I), v1 * (np.ones((n, n)) + JITTER * I), v0 * Ek * d2 / sf2)
    return float(val), np.array([0.5 * np.sum(W * d) for d in dK])


def crp_predictive(counts, alpha):
    """Probabilities of joining each existing cluster, then a new one.

    ``counts`` excludes the point being reassigned.
    """
    counts = np.asarray(counts, dtype=float)
    if alpha < 0 or np.any(counts < 0):
        raise ValueError("alpha and counts must be nonnegative")
    denom = counts.sum() + alpha
    if denom <= 0:
        raise ValueError("need at least one other point or alpha > 0")
    return np.append(counts, alpha) / denom


# --------------------------------------------------------------------------
# HMC

def log_posterior(theta, times, values, cfg):
    ll, g = cluster_loglik(times, values, theta, grad=True)
    return ll + cfg.log_prior(theta), g + cfg.grad_log_prior(theta)


def hmc_step(logp_grad, theta, stepsize, steps, rng):
    """One leapfrog HMC transition with identity mass.

    Returns ``(theta', accept_prob, delta_H)``. A non-finite proposal is
    rejected and ``theta`` returned unchanged.
    """
    theta = np.asarray(theta, dtype=float)
    p0 = rng.standard_normal(theta.size)
    try:
        lp0, g = logp_grad(theta)
    except NumericalError:
        return theta.copy(), 0.0, np.nan
    H0 = -lp0 + 0.5 * p0 @ p0
    q, p = theta.copy(), p0.copy()
    lp = lp0
    try:
        if steps > 0:
            p = p + 0.5 * stepsize * g
            for s in range(steps):
                q = q + stepsize * p
                lp, g = logp_grad(q)
                if s < steps - 1:
                    p = p + stepsize * g
            p = p + 0.5 * stepsize * g
    except NumericalError:
        return theta.copy(), 0.0, np.nan
    H1 = -lp + 0.5 * p @ p
    dH = H1 - H0
    if not np.isfinite(dH):
        return theta.copy(), 0.0, dH
    acc = float(min(1.0, np.exp(-dH)))
    if rng.random() < acc:
        return q, acc, dH
    return theta.copy(), acc, dH


def hmc_update_kernel(theta, times, values, cfg, rng):
    if len(values) == 0:
        raise ValueError("cluster must be nonempty")
    fn = lambda th: log_posterior(th, times, values, cfg)
    return hmc_step(fn, theta, cfg.stepsize, cfg.steps, rng)[0]


# --------------------------------------------------------------------------
# collapsed Gibbs over assignments

@dataclass
class MixtureState:
    z: np.ndarray                  # (n,) labels 0..K-1, contiguous
    thetas: list                   # per cluster, (3,) log-parameters
    alpha: float

    @property
    def n_clusters(self):
        return len(self.thetas)

    def copy(self):
        return MixtureState(self.z.copy(), [t.copy() for t in self.thetas], self.alpha)


def _drop_cluster(state, k):
    del state.thetas[k]
    state.z[state.z > k] -= 1


def gibbs_sweep_assignments(state, times, values, cfg, rng):
    """One ascending-time sweep of the assignment conditionals.

    The new-cluster option carries one auxiliary parameter: the point's own
    parameters if it sat alone, otherwise a fresh prior draw. This keeps the
    sweep invariant for the joint posterior over (z, theta).
    """
    t = np.asarray(times, dtype=float).ravel()
    y = np.asarray(values, dtype=float).ravel()
    state = state.copy()
    n = y.size
    cache = {}

    def ll(k, idx):
        return cluster_loglik(t[idx], y[idx], state.thetas[k])

    for i in range(n):
        k_old = state.z[i]
        state.z[i] = -1
        members_old = np.flatnonzero(state.z == k_old)
        if members_old.size == 0:
            aux = state.thetas[k_old]
            _drop_cluster(state, k_old)
            cache = {(k if k < k_old else k - 1): v for k, v in cache.items() if k != k_old}
        else:
            aux = cfg.sample_prior(rng)
            cache.pop(k_old, None)
        K = state.n_clusters
        counts = np.bincount(state.z[state.z >= 0], minlength=K)
        logw = np.empty(K + 1)
        joined = []
        for k in range(K):
            idx = np.flatnonzero(state.z == k)
            if k not in cache:
                cache[k] = ll(k, idx)
            with_i = np.sort(np.append(idx, i))
            lj = cluster_loglik(t[with_i], y[with_i], state.thetas[k])
            joined.append(lj)
            logw[k] = lj - cache[k] + np.log(counts[k])
        l_new = cluster_loglik(t[i:i + 1], y[i:i + 1], aux)
        with np.errstate(divide="ignore"):
            logw[K] = l_new + np.log(state.alpha)
        choice = sample_log_categorical(logw, rng)
        if choice == K:
            state.thetas.append(np.array(aux, dtype=float))
            cache[K] = l_new
        else:
            cache[choice] = joined[choice]
        state.z[i] = choice
    return state


def assignment_log_weights(state, times, values, i, aux):
    """Normalized log conditional of ``z_i`` (existing clusters then new), for checks."""
    t = np.asarray(times, dtype=float).ravel()
    y = np.asarray(values, dtype=float).ravel()
    z = state.z.copy()
    z[i] = -1
    K = state.n_clusters
    logw = np.full(K + 1, -np.inf)
    for k in range(K):
        idx = np.flatnonzero(z == k)
        if idx.size == 0:
            continue
        with_i = np.sort(np.append(idx, i))
        logw[k] = (cluster_loglik(t[with_i], y[with_i], state.thetas[k])
                   - cluster_loglik(t[idx], y[idx], state.thetas[k]) + np.log(idx.size))
    with np.errstate(divide="ignore"):
        logw[K] = cluster_loglik(t[i:i + 1], y[i:i + 1], aux) + np.log(state.alpha)
    return log_normalize(logw)


# --------------------------------------------------------------------------
# driver

@dataclass
class ImgpeChain:
    assignments: np.ndarray                      # (iterations, T)
    thetas: list = field(default_factory=list)   # per iteration: (K, 3)
    meta: dict = field(default_factory=dict)

    @property
    def n_clusters(self):
        return np.array([th.shape[0] for th in self.thetas])


def fit_imgpe(times, values, alpha=0.15, cfg=None, iterations=500, seed=None):
    """Alternate an assignment sweep with one HMC update per cluster.

    Starts with every timepoint in one cluster whose parameters are drawn
    from the prior.
    """
    cfg = cfg or HmcConfig()
    rng = as_rng(seed)
    t = np.asarray(times, dtype=float).ravel()
    y = np.asarray(values, dtype=float).ravel()
    if t.size != y.size or t.size == 0:
        raise ValueError("need matching, nonempty times and values")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    state = MixtureState(np.zeros(y.size, dtype=int), [cfg.sample_prior(rng)], float(alpha))
    z_draws = np.empty((iterations, y.size), dtype=int)
    thetas = []
    for it in range(iterations):
        state = gibbs_sweep_assignments(state, t, y, cfg, rng)
        for k in range(state.n_clusters):
            idx = np.flatnonzero(state.z == k)
            state.thetas[k] = hmc_update_kernel(state.thetas[k], t[idx], y[idx], cfg, rng)
        z_draws[it] = state.z
        thetas.append(np.array(state.thetas))
    return ImgpeChain(z_draws, thetas, {"seed": seed, "alpha": alpha, "iterations": iterations})


def cooccurrence(chain):
    """(T, T) counts of iterations in which two timepoints share a cluster."""
    z = chain.assignments if isinstance(chain, ImgpeChain) else np.asarray(chain)
    z = np.atleast_2d(z)
    if z.shape[0] == 0:
        raise ValueError("chain is empty")
    return np.sum(z[:, :, None] == z[:, None, :], axis=0)
