"""Linear-Gaussian state space inference and the dynamic tobit scan sampler.

Model::

    z_t = A z_{t-1} + delta_t,   delta_t ~ N(0, Q)
    x_t = C z_t + eps_t,         eps_t ~ N(0, R)

with ``z_0 ~ N(mu0, Sigma0)``; the first observation is ``x_1``.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.special import log_ndtr, ndtri_exp

from ._stats import LOG_2PI, NumericalError, as_rng, symmetrize


@dataclass
class LdsParams:
    A: np.ndarray
    C: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    mu0: Optional[np.ndarray] = None
    Sigma0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        d, p = self.A.shape[0], self.C.shape[0]
        self.mu0 = np.zeros(d) if self.mu0 is None else np.atleast_1d(np.asarray(self.mu0, float))
        self.Sigma0 = self.Q.copy() if self.Sigma0 is None else np.atleast_2d(
            np.asarray(self.Sigma0, dtype=float))
        shapes = {"A": (d, d), "C": (p, d), "Q": (d, d), "R": (p, p),
                  "Sigma0": (d, d)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.mu0.shape != (d,):
            raise ValueError(f"mu0 has shape {self.mu0.shape}, expected ({d},)")

    @property
    def state_dim(self):
        return self.A.shape[0]

    @property
    def obs_dim(self):
        return self.C.shape[0]

    @classmethod
    def scalar(cls, A=1.0, C=1.0, Q=1.0, R=1.0, mu0=0.0, Sigma0=None):
        return cls([[A]], [[C]], [[Q]], [[R]], [mu0], None if Sigma0 is None else [[Sigma0]])


@dataclass
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray


@dataclass
class FilterResult:
    pred_means: np.ndarray      # (T, d)  E[z_t | x_{1:t-1}]
    pred_covs: np.ndarray       # (T, d, d)
    means: np.ndarray           # (T, d)  E[z_t | x_{1:t}]
    covs: np.ndarray
    gains: np.ndarray           # (T, d, p)
    innovations: np.ndarray     # (T, p)
    innovation_covs: np.ndarray  # (T, p, p)
    loglik: float

    def filtered(self, t):
        return GaussianBelief(self.means[t], self.covs[t])


@dataclass
class SmootherResult:
    means: np.ndarray
    covs: np.ndarray
    gains: np.ndarray           # (T-1, d, d)  J_t

    def smoothed(self, t):
        return GaussianBelief(self.means[t], self.covs[t])


def _as_obs(obs, p):
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None] if p == 1 else obs[None, :]
    if obs.ndim != 2 or obs.shape[1] != p:
        raise ValueError(f"observations must be (T, {p})")
    if obs.shape[0] < 1:
        raise ValueError("need at least one observation")
    return obs


def information_form_gain(pred_cov, C, R):
    """Gain ``(S^-1 + C' R^-1 C)^-1 C' R^-1``; equals the innovation-form gain."""
    Rinv = linalg.inv(R)
    return linalg.solve(linalg.inv(pred_cov) + C.T @ Rinv @ C, C.T @ Rinv, assume_a="pos")


def kalman_filter(params, obs, joseph=False):
    """Predict-update recursions for ``p(z_t | x_{1:t})``.

    The gain uses the innovation form ``S C' (R + C S C')^-1`` so the
    predicted covariance is never inverted. ``joseph=True`` switches the
    covariance update to the Joseph form.
    """
    A, C, Q, R = params.A, params.C, params.Q, params.R
    d, p = params.state_dim, params.obs_dim
    obs = _as_obs(obs, p)
    T = obs.shape[0]
    pm = np.empty((T, d))
    pc = np.empty((T, d, d))
    m = np.empty((T, d))
    c = np.empty((T, d, d))
    K = np.empty((T, d, p))
    v = np.empty((T, p))
    F = np.empty((T, p, p))
    loglik = 0.0
    mean, cov = params.mu0, params.Sigma0
    I = np.eye(d)
    for t in range(T):
        mu_pred = A @ mean
        S = symmetrize(A @ cov @ A.T + Q)
        Ft = symmetrize(R + C @ S @ C.T)
        try:
            cf = linalg.cho_factor(Ft, lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"innovation covariance not positive definite at t={t}") from exc
        Kt = linalg.cho_solve(cf, C @ S).T
        vt = obs[t] - C @ mu_pred
        mean = mu_pred + Kt @ vt
        if joseph:
            IKC = I - Kt @ C
            cov = IKC @ S @ IKC.T + Kt @ R @ Kt.T
        else:
            cov = S - Kt @ C @ S
        cov = symmetrize(cov)
        sol = linalg.cho_solve(cf, vt)
        loglik += -0.5 * (vt @ sol) - np.sum(np.log(np.diag(cf[0]))) - 0.5 * p * LOG_2PI
        pm[t], pc[t], m[t], c[t], K[t], v[t], F[t] = mu_pred, S, mean, cov, Kt, vt, Ft
    return FilterResult(pm, pc, m, c, K, v, F, float(loglik))


def rts_smooth(params, filt):
    """Backward pass ``J_t = Sigma_t A' Sigma_{t+1|t}^-1``."""
    A = params.A
    T, d = filt.means.shape
    means = filt.means.copy()
    covs = filt.covs.copy()
    J = np.empty((max(T - 1, 0), d, d))
    for t in range(T - 2, -1, -1):
        try:
            cf = linalg.cho_factor(filt.pred_covs[t + 1], lower=True)
        except linalg.LinAlgError as exc:
            raise NumericalError(f"predicted covariance singular at t={t + 1}") from exc
        Jt = linalg.cho_solve(cf, A @ filt.covs[t]).T
        means[t] = filt.means[t] + Jt @ (means[t + 1] - filt.pred_means[t + 1])
        covs[t] = symmetrize(filt.covs[t] + Jt @ (covs[t + 1] - filt.pred_covs[t + 1]) @ Jt.T)
        J[t] = Jt
    return SmootherResult(means, covs, J)


def sample_lds(params, T, rng=None):
    """Draw ``(z_{1:T}, x_{1:T})`` from the generative model."""
    rng = as_rng(rng)
    d, p = params.state_dim, params.obs_dim
    z = rng.multivariate_normal(params.mu0, params.Sigma0)
    zs = np.empty((T, d))
    xs = np.empty((T, p))
    for t in range(T):
        z = params.A @ z + rng.multivariate_normal(np.zeros(d), params.Q)
        zs[t] = z
        xs[t] = params.C @ z + rng.multivariate_normal(np.zeros(p), params.R)
    return zs, xs


# --------------------------------------------------------------------------
# dynamic tobit model

@dataclass
class TobitConfig:
    threshold: float = 0.0
    iterations: int = 100
    seed: Optional[int] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def smoothing_errors(params, x):
    """Disturbance-smoother quantities for scalar observations ``x``.

    Returns ``(u, M)`` with ``M_t = Var(x_t | x_{-t})^{-1}`` and
    ``u_t / M_t = x_t - E[x_t | x_{-t}]``, from the backward recursions::

        u_t = F_t^-1 v_t - K_t' r_t          M_t = F_t^-1 + K_t' N_t K_t
        r_{t-1} = C' u_t + A' r_t            N_{t-1} = C' F_t^-1 C + L_t' N_t L_t

    where ``K_t = A P_t C' F_t^-1`` is the one-step-ahead gain and
    ``L_t = A - K_t C``.
    """
    if params.obs_dim != 1:
        raise ValueError("the scan sampler handles scalar observations only")
    filt = kalman_filter(params, np.asarray(x, dtype=float).reshape(-1, 1))
    A, C = params.A, params.C
    T, d = filt.means.shape
    u = np.empty(T)
    M = np.empty(T)
    r = np.zeros(d)
    N = np.zeros((d, d))
    for t in range(T - 1, -1, -1):
        Finv = 1.0 / filt.innovation_covs[t, 0, 0]
        Kp = (A @ filt.gains[t])[:, 0]          # A * (filter gain) = prediction gain
        L = A - np.outer(Kp, C[0])
        u[t] = Finv * filt.innovations[t, 0] - Kp @ r
        M[t] = Finv + Kp @ N @ Kp
        r = C[0] * u[t] + A.T @ r
        N = Finv * np.outer(C[0], C[0]) + L.T @ N @ L
    return u, M


def conditional_precision(params, T):
    """Dense precision of ``x_{1:T}``, column by column from :func:`smoothing_errors`."""
    centered = LdsParams(params.A, params.C, params.Q, params.R,
                         np.zeros(params.state_dim), params.Sigma0)
    cols = np.empty((T, T))
    for s in range(T):
        e = np.zeros(T)
        e[s] = 1.0
        cols[:, s] = smoothing_errors(centered, e)[0]
    return symmetrize(cols)


def _upper_truncated_normal(mean, sd, upper, rng):
    b = (upper - mean) / sd
    logp = log_ndtr(b) + np.log(rng.random())
    return min(mean + sd * ndtri_exp(logp), upper)


def scan_sampler_dtm(params, y, cfg=None):
    """Gibbs scan sampler for the latent emission of a dynamic tobit model.

    ``y_t = (x_t - tau) 1{x_t > tau}``. Coordinates with ``y_t > 0`` are
    fixed at ``x_t = y_t + tau``; censored coordinates are redrawn from
    ``N(x_t - u_t / M_t, 1 / M_t)`` truncated to ``x_t <= tau``, alternating
    forward and backward scans. After each draw the vector ``u`` is moved
    along the matching precision column so later conditionals stay exact.

    Returns
    -------
    (iterations, T) array of ``x`` after each scan.
    """
    cfg = cfg or TobitConfig()
    y = np.asarray(y, dtype=float).ravel()
    if np.any(y < 0):
        raise ValueError("tobit observations must be nonnegative")
    rng = as_rng(cfg.seed)
    tau = float(cfg.threshold)
    T = y.size
    censored = y == 0
    x = y + tau
    chain = np.empty((cfg.iterations, T))
    if not np.any(censored):
        chain[:] = x
        return chain
    u, M = smoothing_errors(params, x)
    Lam = conditional_precision(params, T)
    sd = 1.0 / np.sqrt(M)
    free = np.flatnonzero(censored)
    for it in range(cfg.iterations):
        order = free if it % 2 == 0 else free[::-1]
        for t in order:
            mean = x[t] - u[t] / M[t]
            new = _upper_truncated_normal(mean, sd[t], tau, rng)
            delta = new - x[t]
            u += Lam[:, t] * delta
            x[t] = new
        chain[it] = x
    return chain
