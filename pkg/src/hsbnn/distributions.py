"""Gaussian, log-normal, inverse-Gamma and half-Cauchy helpers.

Everything here works elementwise on numpy arrays as well as on Python
floats, so the same functions serve single parameters and whole layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import digamma, gammaln

LOG_2PI = float(np.log(2.0 * np.pi))


class DomainError(ValueError):
    """Raised when a distribution parameter or argument is out of its support."""


def _check_positive(name: str, value) -> None:
    arr = np.asarray(value, dtype=float)
    if not np.all(arr > 0) or not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} must be finite and > 0, got {value!r}")


@dataclass(frozen=True)
class GaussianParams:
    mu: float | np.ndarray
    sigma: float | np.ndarray

    def __post_init__(self):
        _check_positive("sigma", self.sigma)


@dataclass(frozen=True)
class InvGammaParams:
    """Inverse-Gamma with density proportional to x^-(shape+1) exp(-rate/x)."""

    shape: float | np.ndarray
    rate: float | np.ndarray

    def __post_init__(self):
        _check_positive("shape", self.shape)
        _check_positive("rate", self.rate)


@dataclass(frozen=True)
class HalfCauchyParams:
    scale_b: float

    def __post_init__(self):
        _check_positive("scale_b", self.scale_b)


# -- Gaussian ---------------------------------------------------------------

def gaussian_kl(q: GaussianParams, p: GaussianParams):
    """KL(N(q.mu, q.sigma^2) || N(p.mu, p.sigma^2)), elementwise."""
    return kl_normal(q.mu, q.sigma, p.mu, p.sigma)


def kl_normal(mu_q, sigma_q, mu_p, sigma_p):
    mu_q, sigma_q = np.asarray(mu_q, float), np.asarray(sigma_q, float)
    var_p = np.square(sigma_p)
    out = (np.log(sigma_p) - np.log(sigma_q)
           + (np.square(sigma_q) + np.square(mu_q - mu_p)) / (2.0 * var_p) - 0.5)
    return out if out.ndim else float(out)


def reparam_sample(p: GaussianParams, eps):
    """mu + sigma * eps; differentiable in (mu, sigma) for fixed eps."""
    return p.mu + p.sigma * np.asarray(eps, dtype=float)


# -- Log-normal -------------------------------------------------------------

def lognormal_moment(mu, sigma, a):
    """E[X^a] for log X ~ N(mu, sigma^2)."""
    return np.exp(a * np.asarray(mu) + 0.5 * a * a * np.square(sigma))


def lognormal_mode(mu, sigma):
    return np.exp(np.asarray(mu) - np.square(sigma))


def lognormal_entropy(mu, sigma):
    return np.asarray(mu) + 0.5 * (LOG_2PI + 1.0) + np.log(sigma)


@dataclass(frozen=True)
class LogNormalStats:
    mu: float
    sigma: float

    @property
    def mode(self) -> float:
        return float(lognormal_mode(self.mu, self.sigma))

    @property
    def entropy(self) -> float:
        return float(lognormal_entropy(self.mu, self.sigma))

    def moment(self, a: float) -> float:
        return float(lognormal_moment(self.mu, self.sigma, a))


def lognormal_stats(p: GaussianParams) -> LogNormalStats:
    """Summary statistics of X where log X ~ N(p.mu, p.sigma^2)."""
    return LogNormalStats(float(p.mu), float(p.sigma))


# -- Inverse-Gamma ----------------------------------------------------------

class InvGammaMoments(NamedTuple):
    e_inv: float | np.ndarray
    e_log: float | np.ndarray


def invgamma_logpdf(x, p: InvGammaParams):
    x = np.asarray(x, dtype=float)
    if not np.all(x > 0):
        raise DomainError(f"inverse-Gamma support is x > 0, got {x!r}")
    a, b = p.shape, p.rate
    out = a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x
    return out if np.ndim(out) else float(out)


def invgamma_moments(p: InvGammaParams) -> InvGammaMoments:
    """E[1/X] and E[log X]."""
    return InvGammaMoments(p.shape / p.rate, np.log(p.rate) - digamma(p.shape))


def invgamma_entropy(p: InvGammaParams):
    a, b = p.shape, p.rate
    return a + np.log(b) + gammaln(a) - (1.0 + a) * digamma(a)


def invgamma_sample(p: InvGammaParams, size, rng: np.random.Generator):
    # X ~ IG(a, b)  <=>  1/X ~ Gamma(a, scale=1/b)
    return 1.0 / rng.gamma(p.shape, 1.0 / np.asarray(p.rate), size=size)


# -- Half-Cauchy ------------------------------------------------------------

def halfcauchy_cdf(x, b: float):
    return 2.0 / np.pi * np.arctan(np.asarray(x) / b)


def halfcauchy_hierarchy_sample(b: float, n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw half-Cauchy(0, b) variates through the inverse-Gamma hierarchy.

    kappa ~ IG(1/2, 1/b^2), a^2 | kappa ~ IG(1/2, 1/kappa), return a.
    The hierarchy is on the square of the variable; only that form has a
    half-Cauchy marginal.
    """
    _check_positive("b", b)
    if n < 1:
        raise DomainError(f"n must be >= 1, got {n}")
    kappa = invgamma_sample(InvGammaParams(0.5, 1.0 / b**2), n, rng)
    a_sq = 1.0 / rng.gamma(0.5, kappa)
    return np.sqrt(a_sq)
