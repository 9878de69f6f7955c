"""Log-location-scale lifetime distributions (Weibull and lognormal).

Everything is parameterized by location ``mu`` (log-years) and scale
``sigma``.  For the Weibull, ``eta = exp(mu)`` and ``beta = 1 / sigma``.
All functions broadcast over numpy arrays, including array-valued
parameters, so one call can evaluate a whole bootstrap ensemble.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = [
    "Family",
    "LocationScaleParams",
    "ConditionalLife",
    "standard_cdf",
    "standard_quantile",
    "cdf",
    "sf",
    "logsf",
    "pdf",
    "logpdf",
    "quantile",
    "hazard",
    "conditional_cdf",
    "conditional_quantile",
]


class Family(str, enum.Enum):
    WEIBULL = "weibull"
    LOGNORMAL = "lognormal"

    @classmethod
    def parse(cls, value: "str | Family") -> "Family":
        if isinstance(value, Family):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown distribution family {value!r}") from None


@dataclass(frozen=True)
class LocationScaleParams:
    """Location ``mu`` and scale ``sigma``; either may be an array."""

    mu: float | np.ndarray
    sigma: float | np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise ValueError("sigma must be finite and > 0")

    @classmethod
    def from_weibull(cls, eta, beta) -> "LocationScaleParams":
        eta = np.asarray(eta, dtype=float)
        beta = np.asarray(beta, dtype=float)
        if np.any(eta <= 0) or np.any(beta <= 0):
            raise ValueError("eta and beta must be > 0")
        return cls(_unwrap(np.log(eta)), _unwrap(1.0 / beta))

    @property
    def eta(self):
        return np.exp(self.mu)

    @property
    def beta(self):
        return 1.0 / np.asarray(self.sigma)

    def scaled(self, factor: float) -> "LocationScaleParams":
        """Parameters of ``factor * T``."""
        return LocationScaleParams(np.asarray(self.mu) + np.log(factor), self.sigma)


def _unwrap(x):
    x = np.asarray(x)
    return float(x) if x.ndim == 0 else x


# -- standardized (mu=0, sigma=1) building blocks --------------------------


def standard_cdf(family: Family, z):
    family = Family.parse(family)
    z = np.asarray(z, dtype=float)
    if family is Family.WEIBULL:
        with np.errstate(over="ignore"):
            return -np.expm1(-np.exp(z))
    return special.ndtr(z)


def standard_logsf(family: Family, z):
    family = Family.parse(family)
    z = np.asarray(z, dtype=float)
    if family is Family.WEIBULL:
        # overflow to -inf is the intended saturation
        with np.errstate(over="ignore"):
            return -np.exp(z)
    return special.log_ndtr(-z)


def standard_logpdf(family: Family, z):
    family = Family.parse(family)
    z = np.asarray(z, dtype=float)
    if family is Family.WEIBULL:
        with np.errstate(over="ignore"):
            return z - np.exp(z)
    return -0.5 * z * z - 0.5 * np.log(2.0 * np.pi)


def standard_quantile(family: Family, p):
    family = Family.parse(family)
    p = np.asarray(p, dtype=float)
    if family is Family.WEIBULL:
        return np.log(-np.log1p(-p))
    return special.ndtri(p)


def standard_isf_log(family: Family, log_s):
    """Standardized z with ``log(1 - Phi(z)) == log_s`` (``log_s <= 0``)."""
    family = Family.parse(family)
    log_s = np.asarray(log_s, dtype=float)
    if family is Family.WEIBULL:
        return np.log(-log_s)
    return -special.ndtri_exp(log_s)


# -- validation -------------------------------------------------------------


def _check_time(t, strict: bool):
    t = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t)):
        raise ValueError("time must be finite")
    if strict and np.any(t <= 0):
        raise ValueError("time must be > 0")
    if np.any(t < 0):
        raise ValueError("time must be >= 0")
    return t


def _check_prob(p):
    p = np.asarray(p, dtype=float)
    if np.any(~(p > 0) | ~(p < 1)):
        raise ValueError("probability must lie strictly inside (0, 1)")
    return p


def _z(params: LocationScaleParams, t):
    with np.errstate(divide="ignore"):
        return (np.log(t) - np.asarray(params.mu)) / np.asarray(params.sigma)


# -- public distribution functions -----------------------------------------


def cdf(family: Family, params: LocationScaleParams, t):
    """F(t); ``F(0) == 0``."""
    t = _check_time(t, strict=False)
    return _unwrap(standard_cdf(family, _z(params, t)))


def logsf(family: Family, params: LocationScaleParams, t):
    """log(1 - F(t)); stays finite far into the upper tail."""
    t = _check_time(t, strict=False)
    return _unwrap(standard_logsf(family, _z(params, t)))


def sf(family: Family, params: LocationScaleParams, t):
    return _unwrap(np.exp(logsf(family, params, t)))


def logpdf(family: Family, params: LocationScaleParams, t):
    t = _check_time(t, strict=True)
    sigma = np.asarray(params.sigma)
    return _unwrap(standard_logpdf(family, _z(params, t)) - np.log(sigma * t))


def pdf(family: Family, params: LocationScaleParams, t):
    """f(t) = phi(z) / (sigma t)."""
    return _unwrap(np.exp(logpdf(family, params, t)))


def quantile(family: Family, params: LocationScaleParams, p):
    p = _check_prob(p)
    z = standard_quantile(family, p)
    return _unwrap(np.exp(np.asarray(params.mu) + np.asarray(params.sigma) * z))


def hazard(family: Family, params: LocationScaleParams, t):
    """f(t) / (1 - F(t)), computed in log space.

    Raises ``ValueError`` where the survivor function underflows to zero
    even on the log scale.
    """
    t = _check_time(t, strict=True)
    ls = np.asarray(logsf(family, params, t))
    if np.any(np.isneginf(ls)):
        raise ValueError("F(t) is numerically 1; hazard undefined")
    return _unwrap(np.exp(np.asarray(logpdf(family, params, t)) - ls))


@dataclass(frozen=True)
class ConditionalLife:
    """Lifetime distribution of a unit known to have survived to ``current_age``."""

    family: Family
    params: LocationScaleParams
    current_age: float

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        age = np.asarray(self.current_age, dtype=float)
        if np.any(~np.isfinite(age)) or np.any(age < 0):
            raise ValueError("current_age must be finite and >= 0")
        if np.any(np.isneginf(self.log_survival)):
            raise ValueError("F(current_age) is numerically 1; unit beyond model support")

    @property
    def log_survival(self):
        return logsf(self.family, self.params, self.current_age)


def conditional_cdf(cl: ConditionalLife, t):
    """F(t | T > t_i) = 1 - S(t) / S(t_i) for ``t >= t_i``."""
    t = _check_time(t, strict=False)
    if np.any(t < np.asarray(cl.current_age)):
        raise ValueError("t must be >= current_age")
    diff = np.asarray(logsf(cl.family, cl.params, t)) - np.asarray(cl.log_survival)
    out = -np.expm1(np.minimum(diff, 0.0))
    # no conditioning at age 0: return the unconditional cdf bit for bit
    out = np.where(np.asarray(cl.current_age) == 0, cdf(cl.family, cl.params, t), out)
    return _unwrap(out)


def conditional_quantile(cl: ConditionalLife, p):
    """Inverse of :func:`conditional_cdf`; closed form for both families."""
    p = _check_prob(p)
    target = np.asarray(cl.log_survival) + np.log1p(-p)
    z = standard_isf_log(cl.family, target)
    t = np.exp(np.asarray(cl.params.mu) + np.asarray(cl.params.sigma) * z)
    return _unwrap(np.maximum(t, np.asarray(cl.current_age)))
