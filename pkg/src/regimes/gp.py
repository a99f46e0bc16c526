"""Gaussian-process regression with a squared-exponential kernel.

Hyperparameters live on the log scale: ``log sigma_f^2``, one log lengthscale
(isotropic) or one per input axis, and ``log sigma^2`` for the noise.
"""

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy import linalg

from ._stats import LOG_2PI, NumericalError, symmetrize
from .lds import GaussianBelief


@dataclass
class KernelParams:
    """``sigma_f^2 exp(-0.5 sum_j (x_j - x'_j)^2 / l_j^2)``."""

    log_sf2: float = 0.0
    log_ls: np.ndarray = 0.0
    variant: str = "isotropic"

    def __post_init__(self):
        if self.variant not in ("isotropic", "per-axis"):
            raise ValueError("variant must be 'isotropic' or 'per-axis'")
        self.log_ls = np.atleast_1d(np.asarray(self.log_ls, dtype=float))
        if self.variant == "isotropic" and self.log_ls.size != 1:
            raise ValueError("isotropic kernel takes a single lengthscale")
        if not (np.isfinite(self.log_sf2) and np.all(np.isfinite(self.log_ls))):
            raise ValueError("kernel parameters must be finite")

    @classmethod
    def from_natural(cls, sf2=1.0, lengthscale=1.0, variant="isotropic"):
        if sf2 <= 0 or np.any(np.asarray(lengthscale) <= 0):
            raise ValueError("sf2 and lengthscales must be positive")
        return cls(float(np.log(sf2)), np.log(lengthscale), variant)

    @property
    def sf2(self):
        return float(np.exp(self.log_sf2))

    def lengthscales(self, dim):
        ls = np.exp(self.log_ls)
        if self.variant == "isotropic":
            return np.full(dim, ls[0])
        if ls.size != dim:
            raise ValueError(f"per-axis kernel has {ls.size} lengthscales, inputs have {dim} columns")
        return ls


def _as_inputs(x):
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def kernel_matrix(k, X, X2=None):
    X = _as_inputs(X)
    X2 = X if X2 is None else _as_inputs(X2)
    if X.shape[1] != X2.shape[1]:
        raise ValueError("input dimension mismatch")
    ls = k.lengthscales(X.shape[1])
    diff = (X[:, None, :] - X2[None, :, :]) / ls
    return k.sf2 * np.exp(-0.5 * np.sum(diff * diff, axis=-1))


def _kernel_grads(k, X, Kf):
    """dK/dlog(l) for each free lengthscale."""
    ls = k.lengthscales(X.shape[1])
    sq = ((X[:, None, :] - X[None, :, :]) / ls) ** 2
    if k.variant == "isotropic":
        return [Kf * sq.sum(axis=-1)]
    return [Kf * sq[..., j] for j in range(X.shape[1])]


@dataclass
class GpModel:
    kernel: KernelParams
    noise: float
    x: np.ndarray
    y: np.ndarray
    jitter: Optional[float] = None

    def __post_init__(self):
        self.x = _as_inputs(self.x)
        self.y = np.asarray(self.y, dtype=float).ravel()
        if self.x.shape[0] != self.y.size:
            raise ValueError("x and y must have the same number of rows")
        if self.noise < 0:
            raise ValueError("noise variance must be nonnegative")

    @property
    def n(self):
        return self.y.size

    def theta(self):
        """Free log-hyperparameters; the noise is free only when positive."""
        parts = [[self.kernel.log_sf2], self.kernel.log_ls]
        if self.noise > 0:
            parts.append([np.log(self.noise)])
        return np.concatenate(parts)

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        nl = self.kernel.log_ls.size
        kern = KernelParams(theta[0], theta[1:1 + nl], self.kernel.variant)
        noise = float(np.exp(theta[1 + nl])) if self.noise > 0 else 0.0
        return replace(self, kernel=kern, noise=noise)


def _factor(m):
    Kf = kernel_matrix(m.kernel, m.x)
    Ky = Kf + m.noise * np.eye(m.n)
    try:
        return Kf, linalg.cho_factor(Ky, lower=True)
    except linalg.LinAlgError:
        if m.jitter is None:
            raise NumericalError(
                "K + noise*I is singular (duplicate inputs with zero noise?); "
                "set a jitter, e.g. jitter='auto'") from None
    j = 1e-9 * np.trace(Ky) / m.n if m.jitter == "auto" else float(m.jitter)
    try:
        return Kf, linalg.cho_factor(Ky + j * np.eye(m.n), lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError("K + noise*I not positive definite even after jitter") from exc


def gp_posterior(m, x_star):
    """Posterior of the latent ``f`` at ``x_star``: (mean, covariance)."""
    if m.n < 1:
        raise ValueError("need at least one training point")
    _, cf = _factor(m)
    Ks = kernel_matrix(m.kernel, x_star, m.x)
    Kss = kernel_matrix(m.kernel, x_star)
    mean = Ks @ linalg.cho_solve(cf, m.y)
    V = linalg.solve_triangular(cf[0], Ks.T, lower=True)
    cov = symmetrize(Kss - V.T @ V)
    return GaussianBelief(mean, cov)


def log_marginal_likelihood(m, grad=False):
    """``-n/2 log 2pi - 1/2 log|K + s^2 I| - 1/2 y'(K + s^2 I)^-1 y``.

    With ``grad=True`` also returns the gradient over :meth:`GpModel.theta`,
    from ``1/2 tr((a a' - K^-1) dK)`` with ``a = K^-1 y``.
    """
    Kf, cf = _factor(m)
    a = linalg.cho_solve(cf, m.y)
    val = (-0.5 * m.y @ a - np.sum(np.log(np.diag(cf[0]))) - 0.5 * m.n * LOG_2PI)
    if not grad:
        return float(val)
    W = np.outer(a, a) - linalg.cho_solve(cf, np.eye(m.n))
    dKs = [Kf] + _kernel_grads(m.kernel, m.x, Kf)
    if m.noise > 0:
        dKs.append(m.noise * np.eye(m.n))
    g = np.array([0.5 * np.sum(W * dK) for dK in dKs])
    return float(val), g


def loo_terms(m):
    """Closed-form leave-one-out predictive means, variances and log densities."""
    if m.n < 2:
        raise ValueError("leave-one-out needs at least two points")
    _, cf = _factor(m)
    Kinv = linalg.cho_solve(cf, np.eye(m.n))
    a = Kinv @ m.y
    d = np.diag(Kinv)
    var = 1.0 / d
    mu = m.y - a / d
    logp = -0.5 * np.log(var) - 0.5 * (m.y - mu) ** 2 / var - 0.5 * LOG_2PI
    return mu, var, logp


def loo_cv_score(m, grad=False):
    """Sum of leave-one-out log predictive densities ``log p(y_i | x, y_-i)``."""
    _, _, logp = loo_terms(m)
    val = float(np.sum(logp))
    if not grad:
        return val
    Kf, cf = _factor(m)
    Kinv = linalg.cho_solve(cf, np.eye(m.n))
    a = Kinv @ m.y
    d = np.diag(Kinv)
    dKs = [Kf] + _kernel_grads(m.kernel, m.x, Kf)
    if m.noise > 0:
        dKs.append(m.noise * np.eye(m.n))
    g = np.empty(len(dKs))
    for j, dK in enumerate(dKs):
        Z = Kinv @ dK
        r = Z @ a
        s = np.sum(Z * Kinv.T, axis=1)        # diag(Z K^-1)
        g[j] = np.sum((a * r - 0.5 * (1.0 + a * a / d) * s) / d)
    return val, g


def optimize_hyperparams(m, objective="marginal", budget=100, gtol=1e-6):
    """Gradient ascent on the log-hyperparameters with backtracking.

    Returns
    -------
    best : GpModel
        Best model seen.
    trace : list of float
        Objective after every accepted step (starting value first).
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    fns = {"marginal": log_marginal_likelihood, "loo": loo_cv_score}
    if objective not in fns:
        raise ValueError("objective must be 'marginal' or 'loo'")
    fn = fns[objective]

    def evaluate(theta, with_grad):
        try:
            return fn(m.with_theta(theta), grad=with_grad)
        except NumericalError:
            return (-np.inf, None) if with_grad else -np.inf

    theta = m.theta()
    f, g = evaluate(theta, True)
    if not np.isfinite(f):
        raise NumericalError("objective is not finite at the starting point")
    trace = [f]
    step = 1.0
    for _ in range(budget):
        gn = float(g @ g)
        if np.sqrt(gn) < gtol:
            break
        accepted = False
        for _ in range(40):
            cand = theta + step * g
            fc = evaluate(cand, False)
            if np.isfinite(fc) and fc >= f + 1e-4 * step * gn:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        theta = cand
        f, g = evaluate(theta, True)
        trace.append(f)
        step *= 2.0
    return m.with_theta(theta), trace
