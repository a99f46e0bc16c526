"""Switching linear dynamical systems by blocked Gibbs sampling.

Model, for regimes ``z_t`` with a Markov chain ``P``::

    x_t = A_{z_t} x_{t-1} + N(0, Q_{z_t}),   x_0 ~ N(mu0, Sigma0)
    y_t = C_{z_t} x_t + N(0, R_{z_t})

A sweep draws ``x | z, y`` (forward filter, backward sample), ``z | x, y``
(discrete FFBS) and the regime parameters by matrix-normal inverse-Wishart
conjugacy.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.cluster.vq import kmeans2

from ._stats import (NumericalError, as_rng, mvn_logpdf, sample_dirichlet, sample_invwishart,
                     symmetrize)
from .core import DistanceSpec, hclust, pairwise_distance
from .hmm_bayes import ffbs_from_loglik, transition_counts
from .lds import FilterResult, LdsParams, kalman_filter, rts_smooth


@dataclass
class SldsParams:
    A: np.ndarray       # (K, d, d)
    Q: np.ndarray       # (K, d, d)
    C: np.ndarray       # (K, p, d)
    R: np.ndarray       # (K, p, p)
    P: np.ndarray       # (K, K)
    mu0: np.ndarray
    Sigma0: np.ndarray
    pi: Optional[np.ndarray] = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        K = self.A.shape[0]
        d = self.A.shape[1]
        self.A = self.A.reshape(K, d, d)
        self.Q = np.asarray(self.Q, dtype=float).reshape(K, d, d)
        self.C = np.asarray(self.C, dtype=float)
        p = self.C.shape[1]
        self.C = self.C.reshape(K, p, d)
        self.R = np.asarray(self.R, dtype=float).reshape(K, p, p)
        self.P = np.asarray(self.P, dtype=float).reshape(K, K)
        self.mu0 = np.asarray(self.mu0, dtype=float).reshape(d)
        self.Sigma0 = np.asarray(self.Sigma0, dtype=float).reshape(d, d)
        self.pi = np.full(K, 1.0 / K) if self.pi is None else np.asarray(self.pi, float)
        if np.any(np.abs(self.P.sum(axis=1) - 1) > 1e-10) or np.any(self.P < 0):
            raise ValueError("rows of P must lie on the simplex")

    @property
    def K(self):
        return self.A.shape[0]

    @property
    def dims(self):
        return self.A.shape[1], self.C.shape[1]

    def regime(self, k):
        return LdsParams(self.A[k], self.C[k], self.Q[k], self.R[k], self.mu0, self.Sigma0)


@dataclass
class GaussianMessage:
    """Information-form potential ``exp(-x'Jx/2 + h'x)``."""

    J: np.ndarray
    h: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov):
        J = linalg.inv(cov)
        return cls(symmetrize(J), J @ mean)

    def moments(self):
        cov = linalg.inv(self.J)
        return cov @ self.h, symmetrize(cov)


def _as_y(y, p):
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    if y.shape[1] != p:
        raise ValueError(f"observations must be (T, {p})")
    return y


def forward_messages_x(z, y, params):
    """Time-varying Kalman filter using the matrices of regime ``z_t`` at each step.

    Returns a :class:`regimes.lds.FilterResult`; ``GaussianMessage.from_moments``
    converts any filtered belief to information form.
    """
    d, p = params.dims
    y = _as_y(y, p)
    z = np.asarray(z, dtype=int)
    if z.shape != (y.shape[0],) or np.any(z < 0) or np.any(z >= params.K):
        raise ValueError("z must hold one valid regime per timepoint")
    T = y.shape[0]
    pm, pc = np.empty((T, d)), np.empty((T, d, d))
    m, c = np.empty((T, d)), np.empty((T, d, d))
    K = np.empty((T, d, p))
    v, F = np.empty((T, p)), np.empty((T, p, p))
    mean, cov = params.mu0, params.Sigma0
    ll = 0.0
    for t in range(T):
        k = z[t]
        A, C, Q, R = params.A[k], params.C[k], params.Q[k], params.R[k]
        mu_pred = A @ mean
        S = symmetrize(A @ cov @ A.T + Q)
        Ft = symmetrize(R + C @ S @ C.T)
        try:
            cf = linalg.cho_factor(Ft, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"innovation covariance not positive definite at t={t}") from exc
        Kt = linalg.cho_solve(cf, C @ S).T
        vt = y[t] - C @ mu_pred
        mean = mu_pred + Kt @ vt
        cov = symmetrize(S - Kt @ C @ S)
        ll += (-0.5 * vt @ linalg.cho_solve(cf, vt) - np.sum(np.log(np.diag(cf[0])))
               - 0.5 * p * np.log(2 * np.pi))
        pm[t], pc[t], m[t], c[t], K[t], v[t], F[t] = mu_pred, S, mean, cov, Kt, vt, Ft
    return FilterResult(pm, pc, m, c, K, v, F, float(ll))


def _gauss_draws(mean, cov, rng, n):
    """``n`` draws from N(mean, cov) for PSD ``cov`` (eigen square root)."""
    w, U = np.linalg.eigh(symmetrize(cov))
    root = U * np.sqrt(np.clip(w, 0.0, None))
    return mean + rng.standard_normal((n, mean.size)) @ root.T


def backward_sample_x(filt, z, params, rng, size=None):
    """Draw ``x_{1:T}`` from ``p(x | z, y)`` given the forward pass.

    ``x_T`` comes from the last filtered belief, then each ``x_t | x_{t+1}``
    from the filtered belief conditioned on the next state.
    """
    z = np.asarray(z, dtype=int)
    T, d = filt.means.shape
    n = 1 if size is None else int(size)
    x = np.empty((n, T, d))
    x[:, T - 1] = _gauss_draws(filt.means[T - 1], filt.covs[T - 1], rng, n)
    for t in range(T - 2, -1, -1):
        A = params.A[z[t + 1]]
        Pt = filt.covs[t]
        S = filt.pred_covs[t + 1]
        J = linalg.solve(S, A @ Pt, assume_a="sym").T
        cov = symmetrize(Pt - J @ A @ Pt)
        mean = filt.means[t][None, :] + (x[:, t + 1] - filt.pred_means[t + 1][None, :]) @ J.T
        x[:, t] = mean + _gauss_draws(np.zeros(d), cov, rng, n)
    return x[0] if size is None else x


def regime_loglik(x, y, params):
    """(T, K) local log weights ``log N(x_t | A_k x_{t-1}, Q_k) + log N(y_t | C_k x_t, R_k)``.

    At ``t = 1`` the dynamics term integrates over ``x_0 ~ N(mu0, Sigma0)``.
    """
    d, p = params.dims
    x = np.asarray(x, dtype=float).reshape(-1, d)
    y = _as_y(y, p)
    T = x.shape[0]
    E = np.empty((T, params.K))
    for k in range(params.K):
        A, Q, C, R = params.A[k], params.Q[k], params.C[k], params.R[k]
        first = mvn_logpdf(x[:1], A @ params.mu0, A @ params.Sigma0 @ A.T + Q)
        rest = mvn_logpdf(x[1:] - x[:-1] @ A.T, np.zeros(d), Q) if T > 1 else np.empty(0)
        emis = mvn_logpdf(y - x @ C.T, np.zeros(p), R)
        E[:, k] = np.concatenate([first, rest]) + emis
    return E


def sample_z_ffbs(x, y, params, rng, size=None):
    return ffbs_from_loglik(params.pi, params.P, regime_loglik(x, y, params), rng, size)


# --------------------------------------------------------------------------
# conjugate parameter draws

@dataclass
class MniwPrior:
    """``Sigma ~ IW(nu, S)`` and ``B | Sigma ~ MN(M, Sigma, V^-1)`` for ``out = B inp + noise``."""

    M: np.ndarray
    V: np.ndarray
    nu: float
    S: np.ndarray

    def __post_init__(self):
        self.M = np.atleast_2d(np.asarray(self.M, dtype=float))
        self.V = np.atleast_2d(np.asarray(self.V, dtype=float))
        self.S = np.atleast_2d(np.asarray(self.S, dtype=float))
        r, c = self.M.shape
        if self.V.shape != (c, c) or self.S.shape != (r, r):
            raise ValueError("MNIW shapes: M (r, c), V (c, c), S (r, r)")
        if self.nu <= r - 1:
            raise ValueError("need nu > dim - 1")
        for name in ("V", "S"):
            try:
                np.linalg.cholesky(getattr(self, name))
            except np.linalg.LinAlgError:
                raise ValueError(f"{name} must be positive definite") from None

    def posterior(self, inp, out):
        """Updated (M, V, nu, S) from rows ``inp`` (N, c) and ``out`` (N, r)."""
        inp = np.asarray(inp, dtype=float).reshape(-1, self.M.shape[1])
        out = np.asarray(out, dtype=float).reshape(-1, self.M.shape[0])
        Sxx = self.V + inp.T @ inp
        Syx = self.M @ self.V + out.T @ inp
        Syy = self.M @ self.V @ self.M.T + out.T @ out
        Mn = linalg.solve(Sxx, Syx.T, assume_a="pos").T
        Sn = symmetrize(self.S + Syy - Mn @ Sxx @ Mn.T)
        return MniwPrior(Mn, symmetrize(Sxx), self.nu + inp.shape[0], Sn)

    def sample(self, rng):
        Sigma = sample_invwishart(self.nu, self.S, rng)
        Lr = np.linalg.cholesky(Sigma)
        Lc = np.linalg.cholesky(linalg.inv(self.V))
        B = self.M + Lr @ rng.standard_normal(self.M.shape) @ Lc.T
        return B, Sigma


def default_priors(y, d=1):
    """Weak dynamics prior around ``0.9 I`` and emission prior around ``[I 0]``."""
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    p = y.shape[1]
    scale = float(np.var(y)) if y.shape[0] > 1 and np.var(y) > 0 else 1.0
    dyn = MniwPrior(0.9 * np.eye(d), np.eye(d), d + 2.0, 0.1 * scale * np.eye(d))
    Me = np.zeros((p, d))
    Me[:min(p, d), :min(p, d)] = np.eye(min(p, d))
    emis = MniwPrior(Me, np.eye(d), p + 2.0, 0.1 * scale * np.eye(p))
    return dyn, emis


def sample_params_mniw(z, x, y, K, dyn_prior, emis_prior, alpha, rng, mu0, Sigma0,
                       min_count=None):
    """Per-regime MNIW posterior draws plus Dirichlet transition rows.

    Dynamics for regime ``k`` regress ``x_t`` on ``x_{t-1}`` over ``t >= 2``
    with ``z_t = k``; emissions regress ``y_t`` on ``x_t`` over ``z_t = k``.
    A regime with fewer than ``min_count`` (default ``d + 2``) assigned
    transitions draws from the prior.
    """
    z = np.asarray(z, dtype=int)
    x = np.asarray(x, dtype=float)
    x = x[:, None] if x.ndim == 1 else x
    y = _as_y(y, emis_prior.M.shape[0])
    d = x.shape[1]
    min_count = d + 2 if min_count is None else min_count
    A, Q, C, R = [], [], [], []
    for k in range(K):
        sel = np.flatnonzero(z[1:] == k) + 1
        post = dyn_prior.posterior(x[sel - 1], x[sel]) if sel.size >= min_count else dyn_prior
        Ak, Qk = post.sample(rng)
        emit = np.flatnonzero(z == k)
        post_e = (emis_prior.posterior(x[emit], y[emit]) if emit.size >= min_count
                  else emis_prior)
        Ck, Rk = post_e.sample(rng)
        A.append(Ak), Q.append(Qk), C.append(Ck), R.append(Rk)
    counts = transition_counts([z], K)
    P = sample_dirichlet(alpha + counts, rng)
    return SldsParams(np.array(A), np.array(Q), np.array(C), np.array(R), P, mu0, Sigma0)


# --------------------------------------------------------------------------
# driver

@dataclass
class SldsConfig:
    K: int = 2
    dim: int = 1
    alpha: float = 1.0
    dyn_prior: Optional[MniwPrior] = None
    emis_prior: Optional[MniwPrior] = None
    iterations: int = 500
    burn_in: int = 0
    thin: int = 1
    seed: Optional[int] = None
    init: Optional[SldsParams] = None
    fixed_params: bool = False
    min_count: Optional[int] = None
    window: int = 3

    def __post_init__(self):
        if self.K < 1 or self.dim < 1 or self.alpha <= 0:
            raise ValueError("need K >= 1, dim >= 1, alpha > 0")
        if self.iterations < 1 or not 0 <= self.burn_in < self.iterations or self.thin < 1:
            raise ValueError("need iterations >= 1, 0 <= burn_in < iterations, thin >= 1")
        if self.fixed_params and self.init is None:
            raise ValueError("fixed_params requires init parameters")


@dataclass
class SldsChain:
    iterations: list = field(default_factory=list)
    x: list = field(default_factory=list)
    z: list = field(default_factory=list)
    params: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.iterations)


def window_kmeans_labels(y, K, window, rng):
    """k-means labels on sliding windows of ``y`` (edge padded)."""
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    h = window // 2
    padded = np.pad(y, ((h, window - 1 - h), (0, 0)), mode="edge")
    feats = np.hstack([padded[i:i + y.shape[0]] for i in range(window)])
    if K == 1:
        return np.zeros(y.shape[0], dtype=int)
    _, labels = kmeans2(feats, K, minit="++", seed=int(rng.integers(2**31 - 1)))
    return labels.astype(int)


def _pooled_params(dyn, emis, K, d):
    A = dyn.M
    Q = dyn.S / max(dyn.nu - d - 1, 1.0)
    C = emis.M
    p = C.shape[0]
    R = emis.S / max(emis.nu - p - 1, 1.0)
    return SldsParams(np.repeat(A[None], K, 0), np.repeat(Q[None], K, 0),
                      np.repeat(C[None], K, 0), np.repeat(R[None], K, 0),
                      np.full((K, K), 1.0 / K), np.zeros(d), np.eye(d))


def fit_slds(y, cfg):
    """Blocked Gibbs over (x, z, parameters) for one centered series.

    Initialization: regimes from k-means on sliding windows of ``y`` and
    ``x`` from the RTS smoother under regime-shared prior-mean parameters.
    """
    rng = as_rng(cfg.seed)
    d = cfg.dim
    y = np.asarray(y, dtype=float)
    y = y[:, None] if y.ndim == 1 else y
    dyn, emis = default_priors(y, d)
    dyn = cfg.dyn_prior or dyn
    emis = cfg.emis_prior or emis
    K = cfg.K
    z = window_kmeans_labels(y, K, cfg.window, rng)
    pooled = cfg.init if cfg.init is not None else _pooled_params(dyn, emis, K, d)
    params = pooled
    smooth = rts_smooth(pooled.regime(0), kalman_filter(pooled.regime(0), y))
    x = smooth.means
    chain = SldsChain(meta={"seed": cfg.seed, "K": K, "iterations": cfg.iterations,
                            "burn_in": cfg.burn_in, "thin": cfg.thin})
    for it in range(cfg.iterations):
        if not cfg.fixed_params:
            params = sample_params_mniw(z, x, y, K, dyn, emis, cfg.alpha, rng,
                                        pooled.mu0, pooled.Sigma0, cfg.min_count)
        x = backward_sample_x(forward_messages_x(z, y, params), z, params, rng)
        if K > 1:
            z = sample_z_ffbs(x, y, params, rng)
        if it >= cfg.burn_in and (it - cfg.burn_in) % cfg.thin == 0:
            chain.iterations.append(it)
            chain.x.append(x.copy())
            chain.z.append(z.copy())
            chain.params.append(params)
    return chain


# --------------------------------------------------------------------------
# parameter-sequence clustering

PARAM_NAMES = ("A", "Q", "C", "R")


def parameter_sequence(chain):
    """(T, n_params) posterior mean of ``Theta_{z_t}`` laid out over time.

    Columns are the flattened entries of A, Q, C, R in that order.
    """
    rows = []
    for z, prm in zip(chain.z, chain.params):
        flat = np.hstack([getattr(prm, name).reshape(prm.K, -1) for name in PARAM_NAMES])
        rows.append(flat[z])
    return np.mean(rows, axis=0)


def parameter_names(params):
    names = []
    for name in PARAM_NAMES:
        shape = getattr(params, name).shape[1:]
        if shape == (1, 1):
            names.append(name)
        else:
            names.extend(f"{name}[{i},{j}]" for i in range(shape[0]) for j in range(shape[1]))
    return names


def clip_values(v, lo=-1.1, hi=2.1):
    return np.clip(v, lo, hi)


@dataclass
class ParameterClustering:
    dendrogram: object
    sequences: np.ndarray      # (n_series, T, n_params)
    names: list

    def export_rows(self, series_ids, clip=(-1.1, 2.1)):
        """Rows ``(series, t, param, posterior_mean, clipped)`` in leaf order."""
        out = []
        for i in self.dendrogram.leaf_order:
            for t in range(self.sequences.shape[1]):
                for j, name in enumerate(self.names):
                    v = float(self.sequences[i, t, j])
                    out.append((series_ids[i], t, name, v, float(clip_values(v, *clip))))
        return out


def parameter_sequence_clustering(chains, linkage="average"):
    """Euclidean hierarchical clustering of flattened posterior-mean parameter sequences."""
    if not chains:
        raise ValueError("need at least one chain")
    seqs = [parameter_sequence(c) for c in chains]
    T = seqs[0].shape[0]
    if any(s.shape[0] != T for s in seqs):
        raise ValueError("all series must share the same number of timepoints")
    stacked = np.stack(seqs)
    flat = stacked.reshape(len(seqs), -1)
    dist = pairwise_distance(flat, DistanceSpec("euclidean"))
    dendro = hclust(dist, flat, linkage)
    return ParameterClustering(dendro, stacked, parameter_names(chains[0].params[0]))
