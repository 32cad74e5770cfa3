"""Probability heads: truncated Gaussian and categorical.

Both families provide sampling, log-probability and analytic gradients of
the log-probability with respect to the distribution parameters, which is
all the score-function machinery in the trainer needs. Array variants
(suffix _arr) operate elementwise on parameter/value arrays and back the
scalar API.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax, ndtr, ndtri, softmax

from .errors import DomainError, NumericError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)
_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def _phi(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * z * z)


def tg_mass_arr(mu, sigma, lo, hi):
    """Phi((hi-mu)/sigma) - Phi((lo-mu)/sigma), evaluated on the stable side."""
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    z = np.where(a > 0.0, ndtr(-a) - ndtr(-b), ndtr(b) - ndtr(a))
    if np.any(z <= 0.0):
        raise NumericError(
            "truncated-Gaussian normalizer underflowed; the mean is too far "
            "outside the bounds — widen sigma or move mu")
    return z


def tg_logpdf_arr(mu, sigma, lo, hi, x):
    z = (x - mu) / sigma
    return (-0.5 * z * z - _LOG_SQRT_2PI - np.log(sigma)
            - np.log(tg_mass_arr(mu, sigma, lo, hi)))


def tg_grad_logpdf_arr(mu, sigma, lo, hi, x):
    """Elementwise (d/dmu, d/dsigma) of tg_logpdf_arr."""
    a = (lo - mu) / sigma
    b = (hi - mu) / sigma
    z = (x - mu) / sigma
    mass = tg_mass_arr(mu, sigma, lo, hi)
    pa, pb = _phi(a), _phi(b)
    d_mu = z / sigma + (pb - pa) / (sigma * mass)
    d_sigma = (z * z - 1.0) / sigma + (b * pb - a * pa) / (sigma * mass)
    return d_mu, d_sigma


def tg_sample_arr(mu, sigma, lo, hi, u):
    """Inverse-CDF transform of uniforms u in [0, 1)."""
    a = (lo - mu) / sigma
    mass = tg_mass_arr(mu, sigma, lo, hi)
    x = mu + sigma * ndtri(ndtr(a) + u * mass)
    # ndtri saturates at +/-inf when its argument rounds to 0 or 1
    return np.clip(x, lo, hi)


@dataclass(frozen=True)
class TruncGauss:
    """Gaussian restricted to [lo, hi], renormalized."""

    mu: float
    sigma: float
    lo: float
    hi: float

    def __post_init__(self):
        if not (self.sigma > 0.0):
            raise DomainError(f"sigma must be positive, got {self.sigma}")
        if not (self.lo < self.hi):
            raise DomainError(f"need lo < hi, got [{self.lo}, {self.hi}]")


def _check_support(d, x):
    if not (d.lo <= x <= d.hi):
        raise DomainError(f"x={x} outside support [{d.lo}, {d.hi}]")


def tg_logpdf(d, x):
    """log density at x; raises DomainError outside [lo, hi]."""
    _check_support(d, x)
    return float(tg_logpdf_arr(d.mu, d.sigma, d.lo, d.hi, x))


def tg_sample(d, rng):
    """Inverse-CDF sample, robust under narrow truncation."""
    return float(tg_sample_arr(d.mu, d.sigma, d.lo, d.hi, rng.random()))


def tg_grad_logpdf(d, x):
    """Analytic (d/dmu, d/dsigma) of tg_logpdf at x."""
    _check_support(d, x)
    d_mu, d_sigma = tg_grad_logpdf_arr(d.mu, d.sigma, d.lo, d.hi, x)
    return float(d_mu), float(d_sigma)


def tg_mean(d):
    """Closed-form mean (used by reporting, not by training)."""
    a = (d.lo - d.mu) / d.sigma
    b = (d.hi - d.mu) / d.sigma
    mass = tg_mass_arr(d.mu, d.sigma, d.lo, d.hi)
    return float(d.mu + d.sigma * (_phi(a) - _phi(b)) / mass)


@dataclass(frozen=True)
class Categorical:
    """K-way distribution parameterized by unnormalized logits."""

    logits: tuple

    def __post_init__(self):
        logits = np.asarray(self.logits, dtype=np.float64)
        if logits.ndim != 1 or logits.size < 1:
            raise DomainError("logits must be a non-empty vector")
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits")
        object.__setattr__(self, "logits", tuple(float(v) for v in logits))

    @classmethod
    def from_probs(cls, probs):
        p = np.asarray(probs, dtype=np.float64)
        if np.any(p < 0.0) or abs(p.sum() - 1.0) > 1e-12:
            raise DomainError("probs must be nonnegative and sum to 1")
        return cls(tuple(np.log(np.maximum(p, 1e-300))))

    @property
    def k(self):
        return len(self.logits)

    @property
    def probs(self):
        return softmax(np.asarray(self.logits))


def cat_logpmf(d, k):
    if not 0 <= k < d.k:
        raise DomainError(f"category {k} out of range [0, {d.k})")
    return float(log_softmax(np.asarray(d.logits))[k])


def cat_sample(d, rng):
    u = rng.random()
    c = np.cumsum(d.probs)
    return int(np.searchsorted(c, u, side="right").clip(0, d.k - 1))


def cat_grad_logits(d, k):
    """Gradient of log p_k with respect to the logits: onehot(k) - p."""
    if not 0 <= k < d.k:
        raise DomainError(f"category {k} out of range [0, {d.k})")
    g = -d.probs
    g[k] += 1.0
    return g
