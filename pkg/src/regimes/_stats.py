"""Small numerical helpers shared across the samplers."""

import numpy as np
from scipy import linalg, stats
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)


class NumericalError(ArithmeticError):
    """Raised when a factorization or normalization fails irrecoverably."""


def as_rng(seed=None):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def substream(seed, *key):
    """Named child generator: same (seed, key) always gives the same stream."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def safe_cholesky(a, what="matrix"):
    try:
        return linalg.cholesky(a, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericalError(f"{what} is not positive definite") from exc


def mvn_logpdf(x, mean, cov):
    """Log density of rows of ``x`` under N(mean, cov)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    cov = np.atleast_2d(cov)
    L = safe_cholesky(cov, "covariance")
    diff = x - np.asarray(mean, dtype=float)
    sol = linalg.solve_triangular(L, diff.T, lower=True)
    d = cov.shape[0]
    return (-0.5 * np.sum(sol ** 2, axis=0) - np.sum(np.log(np.diag(L)))
            - 0.5 * d * LOG_2PI)


def sample_mvn(mean, cov, rng):
    L = safe_cholesky(symmetrize(np.atleast_2d(cov)), "covariance")
    return np.asarray(mean, dtype=float) + L @ rng.standard_normal(L.shape[0])


def sample_invwishart(df, scale, rng):
    scale = symmetrize(np.atleast_2d(scale))
    draw = stats.invwishart.rvs(df=df, scale=scale, random_state=rng)
    return symmetrize(np.atleast_2d(draw))


def log_normalize(v):
    """Return ``v - logsumexp(v)``; raises if every entry is -inf."""
    v = np.asarray(v, dtype=float)
    m = np.max(v, axis=-1, keepdims=True)
    if np.any(~np.isfinite(m)):
        if np.any(m == -np.inf):
            raise ValueError("cannot normalize: all log-weights are -inf")
        raise ValueError("cannot normalize: non-finite log-weights")
    return v - (m + np.log(np.sum(np.exp(v - m), axis=-1, keepdims=True)))


def lse(a, axis=None):
    """Lean log-sum-exp for small arrays (no scipy dispatch overhead)."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return np.squeeze(out, axis=axis) if axis is not None else float(out.ravel()[0])


def sample_dirichlet(alpha, rng):
    """Dirichlet draw that stays on the simplex for tiny concentrations.

    Uses ``log G = log G' + log(U) / a`` with ``G' ~ Gamma(a + 1)`` so no
    component underflows to an all-zero vector. Zero entries of ``alpha``
    get zero mass.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or np.any(np.all(alpha == 0, axis=-1)):
        raise ValueError("Dirichlet parameters must be nonnegative with a positive entry")
    with np.errstate(divide="ignore"):
        logg = (np.log(rng.standard_gamma(alpha + 1.0))
                + np.log(rng.random(alpha.shape)) / alpha)
    # a zero concentration is a degenerate component with zero mass
    logg = np.where(alpha > 0, logg, -np.inf)
    logg -= np.max(logg, axis=-1, keepdims=True)
    g = np.exp(logg)
    return g / g.sum(axis=-1, keepdims=True)


def sample_log_categorical(logw, rng):
    p = np.exp(log_normalize(logw))
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u * p.sum(), side="right"))
    return min(idx, len(p) - 1)


__all__ = [
    "LOG_2PI", "NumericalError", "as_rng", "substream", "symmetrize",
    "safe_cholesky", "mvn_logpdf", "sample_mvn", "sample_invwishart",
    "log_normalize", "sample_log_categorical", "logsumexp", "lse", "sample_dirichlet",
]
