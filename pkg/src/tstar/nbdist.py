"""Negative Binomial distribution in the (mean, shape) parameterisation.

With mean ``mu`` and shape ``r`` the success probability is
``p = mu / (r + mu)`` and

    P(X = k) = C(k + r - 1, k) (r / (r + mu))^r (mu / (r + mu))^k,

with variance ``mu + mu^2 / r``. All likelihood work happens in log space so
that large counts never overflow a factorial.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, xlogy

from .errors import ConfigError


@dataclass(frozen=True)
class NegBinParams:
    mu: float
    r: float

    def __post_init__(self):
        if not (np.isfinite(self.mu) and self.mu > 0):
            raise ConfigError(f"NB mean must be positive, got {self.mu}")
        if not (np.isfinite(self.r) and self.r > 0):
            raise ConfigError(f"NB shape must be positive, got {self.r}")

    @property
    def p(self) -> float:
        return self.mu / (self.r + self.mu)


def _check(mu, r):
    mu = np.asarray(mu, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(~(mu > 0)) or np.any(~(r > 0)):
        raise ConfigError("NB mean and shape must be strictly positive")
    return mu, r


def logpmf(mu, r, k):
    """Vectorised log P(X = k) for arrays of parameters and counts."""
    mu, r = _check(mu, r)
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0):
        raise ConfigError("NB support is the non-negative integers")
    log_total = np.log(r + mu)
    return (
        gammaln(k + r)
        - gammaln(r)
        - gammaln(k + 1.0)
        + r * (np.log(r) - log_total)
        + xlogy(k, mu)
        - k * log_total
    )


def pmf(params: NegBinParams, k) -> float | np.ndarray:
    return np.exp(logpmf(params.mu, params.r, k))


def log_likelihood(params: NegBinParams, k) -> float | np.ndarray:
    return logpmf(params.mu, params.r, k)


def nll_grad(mu, r, k):
    """Derivatives of ``-log P(k)`` with respect to ``mu`` and ``r``."""
    mu = np.asarray(mu, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    total = r + mu
    d_mu = (r + k) / total - k / mu
    d_r = -(digamma(k + r) - digamma(r) + np.log(r / total) + (mu - k) / total)
    return d_mu, d_r


def moments(params: NegBinParams) -> tuple[float, float]:
    return params.mu, params.mu + params.mu**2 / params.r


def sample_arrays(mu, r, n: int, rng: np.random.Generator) -> np.ndarray:
    """Gamma-Poisson draws; output shape is ``np.shape(mu) + (n,)``."""
    mu, r = _check(mu, r)
    shape = mu.shape + (n,)
    rate = rng.gamma(r[..., None], (mu / r)[..., None], size=shape)
    return rng.poisson(rate)


def sample(params: NegBinParams, n: int, rng_seed) -> np.ndarray:
    if n < 1:
        raise ConfigError("sample size must be at least 1")
    rng = np.random.default_rng(rng_seed)
    return sample_arrays(params.mu, params.r, n, rng)


def support_bound(params: NegBinParams, tail: float = 1e-12) -> int:
    """Smallest K with P(X > K) < tail, from the NB quantile function."""
    from scipy.stats import nbinom

    return int(nbinom.ppf(1.0 - tail, params.r, 1.0 - params.p)) + 1
