"""Cumulative fleet failure forecasts.

The number of failures by a future date is a sum of independent,
non-identical Bernoulli indicators (a Poisson-binomial variable).  Its cdf
is evaluated either exactly, by convolution, or with the skewness-corrected
normal approximation

    F(k) ~= G((k + 0.5 - mu) / sd),  G(x) = Phi(x) + gamma (1 - x^2) phi(x) / 6,

clamped to [0, 1] and made nondecreasing in ``k`` by a running maximum.
"""

from __future__ import annotations

import calendar
import csv
import datetime as dt
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import special

from .data import years_between
from .distributions import Family, standard_logsf

__all__ = [
    "EXACT_THRESHOLD",
    "RiskUnit",
    "RiskSet",
    "ForecastGrid",
    "PopulationForecast",
    "conditional_fail_prob",
    "poisson_binomial_pmf",
    "exact_poisson_binomial_cdf",
    "poisson_binomial_moments",
    "volkova_cdf",
    "volkova_cdf_table",
    "invert_cdf",
    "forecast",
    "subset_forecast",
]

EXACT_THRESHOLD = 2000


# -- Poisson-binomial law ---------------------------------------------------


def _check_rhos(rhos) -> np.ndarray:
    r = np.asarray(rhos, dtype=float)
    if np.any(~((r >= 0) & (r <= 1))):
        raise ValueError("probabilities must lie in [0, 1]")
    return r


def poisson_binomial_pmf(rhos, exact_threshold: int = EXACT_THRESHOLD) -> np.ndarray:
    """pmf over k = 0..n by p_i(k) = p_{i-1}(k)(1 - r_i) + p_{i-1}(k - 1) r_i.

    A 2-d ``rhos`` of shape (B, n) gives a (B, n + 1) table, one row per
    probability vector.
    """
    r = _check_rhos(rhos)
    n = r.shape[-1]
    if n > exact_threshold:
        raise ValueError(f"n = {n} exceeds the exact threshold {exact_threshold}")
    lead = r.shape[:-1]
    pmf = np.zeros(lead + (n + 1,))
    pmf[..., 0] = 1.0
    for i in range(n):
        ri = r[..., i, None]
        head = pmf[..., : i + 1].copy()
        pmf[..., : i + 1] = head * (1.0 - ri)
        pmf[..., 1 : i + 2] += head * ri
    return pmf


def exact_poisson_binomial_cdf(rhos, exact_threshold: int = EXACT_THRESHOLD) -> np.ndarray:
    return np.minimum(np.cumsum(poisson_binomial_pmf(rhos, exact_threshold), axis=-1), 1.0)


def poisson_binomial_moments(rhos):
    """Mean, standard deviation and skewness from the closed-form sums."""
    r = _check_rhos(rhos)
    mean = r.sum(axis=-1)
    var = (r * (1 - r)).sum(axis=-1)
    third = (r * (1 - r) * (1 - 2 * r)).sum(axis=-1)
    sd = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        gamma = np.where(sd > 0, third / np.where(sd > 0, sd, 1.0) ** 3, 0.0)
    return mean, sd, gamma


def _volkova_from_moments(mean, sd, gamma, kmax: int) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    sd = np.asarray(sd, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    k = np.arange(kmax + 1, dtype=float)
    safe = np.where(sd > 0, sd, 1.0)
    x = (k + 0.5 - mean[..., None]) / safe[..., None]
    # the correction term underflows to 0 long before |x| = 40
    xs = np.where(np.abs(x) < 40.0, x, 0.0)
    corr = np.where(np.abs(x) < 40.0, (1 - xs * xs) * np.exp(-0.5 * xs * xs) / np.sqrt(2 * np.pi) / 6, 0.0)
    with np.errstate(over="ignore", invalid="ignore"):
        g = special.ndtr(x) + np.nan_to_num(gamma[..., None] * corr, nan=0.0)
    g = np.clip(g, 0.0, 1.0)
    # sd == 0 means every indicator is 0 or 1: K equals the mean exactly
    g = np.where((sd > 0)[..., None], g, (k + 0.5 > mean[..., None]).astype(float))
    return np.maximum.accumulate(g, axis=-1)


def volkova_cdf_table(rhos, kmax: int | None = None) -> np.ndarray:
    """Monotonized skewness-corrected approximation for k = 0..kmax (default n)."""
    r = _check_rhos(rhos)
    mean, sd, gamma = poisson_binomial_moments(r)
    return _volkova_from_moments(mean, sd, gamma, r.shape[-1] if kmax is None else kmax)


def volkova_cdf(rhos, k):
    """Approximate P(K <= k); ``k`` may be an integer or an integer array."""
    r = _check_rhos(rhos)
    k = np.asarray(k)
    n = r.shape[-1]
    table = volkova_cdf_table(r)
    out = np.where(k < 0, 0.0, table[..., np.clip(k, 0, n)])
    return float(out) if out.ndim == 0 else out


def invert_cdf(table, u_lower, u_upper) -> tuple:
    """Integer bounds rounded outward.

    lower = max{k : F(k) <= u_lower} (0 if none), upper = min{k : F(k) >= u_upper}
    (n if none).
    """
    table = np.asarray(table, dtype=float)
    n = table.size - 1
    below = np.flatnonzero(table <= u_lower)
    lower = int(below[-1]) if below.size else 0
    # never beyond the point where the cdf reaches 1
    full = np.flatnonzero(table >= 1.0)
    if full.size:
        lower = min(lower, int(full[0]))
    above = np.flatnonzero(table >= u_upper)
    upper = int(above[0]) if above.size else n
    return lower, max(lower, upper)


# -- risk set and grid ------------------------------------------------------


@dataclass(frozen=True)
class RiskUnit:
    """A unit that can fail during the forecast window.

    ``entry_offset`` is the number of years after the forecast start at
    which the unit enters service (0 for units already in service); it
    enters with age ``current_age`` (0 for new units).
    """

    serial: str
    group: str
    covariates: dict
    current_age: float
    entry_offset: float = 0.0
    predict_group: str = ""

    @property
    def manufacturer(self):
        return self.covariates.get("manufacturer", "")


@dataclass(frozen=True)
class RiskSet:
    units: tuple

    def __post_init__(self):
        if not self.units:
            raise ValueError("empty risk set")

    @property
    def size(self) -> int:
        return len(self.units)

    @classmethod
    def from_observations(cls, obs, entries: Sequence = ()) -> "RiskSet":
        units = [
            RiskUnit(o.serial, o.predict_group or o.group, dict(o.covariates), o.age, 0.0, o.predict_group or o.group)
            for o in obs
            if o.delta == 0
        ]
        return cls(tuple(units) + tuple(entries))

    def filter(self, groups=None, manufacturers=None) -> "RiskSet":
        units = tuple(
            u
            for u in self.units
            if (groups is None or u.predict_group in groups) and (manufacturers is None or u.manufacturer in manufacturers)
        )
        return RiskSet(units)


def _month_end(year: int, month: int) -> dt.date:
    return dt.date(year, month, calendar.monthrange(year, month)[1])


@dataclass(frozen=True)
class ForecastGrid:
    """The start date followed by ``horizon`` successive month ends."""

    start: dt.date
    horizon: int = 120
    dates: tuple = field(init=False)

    def __post_init__(self):
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")
        dates = [self.start]
        y, m = self.start.year, self.start.month
        while len(dates) <= self.horizon:
            d = _month_end(y, m)
            if d > dates[-1]:
                dates.append(d)
            m += 1
            if m == 13:
                y, m = y + 1, 1
        object.__setattr__(self, "dates", tuple(dates))

    @classmethod
    def until(cls, start: dt.date, end: dt.date) -> "ForecastGrid":
        """Month ends from ``start`` up to and including the last one <= ``end``."""
        months = (end.year - start.year) * 12 + (end.month - start.month) + 1
        grid = cls(start, max(months, 0))
        keep = tuple(d for d in grid.dates if d <= end)
        object.__setattr__(grid, "dates", keep)
        object.__setattr__(grid, "horizon", len(keep) - 1)
        return grid

    @property
    def elapsed_years(self) -> np.ndarray:
        return np.array([years_between(self.start, d) for d in self.dates])


def conditional_fail_prob(family: Family, mu, sigma, current_age, horizon_age):
    """rho = F(t_w | t_i) = 1 - S(t_w) / S(t_i) for ``t_w >= t_i``."""
    family = Family.parse(family)
    mu, sigma = np.asarray(mu, dtype=float), np.asarray(sigma, dtype=float)
    t0 = np.asarray(current_age, dtype=float)
    tw = np.asarray(horizon_age, dtype=float)
    if np.any(tw < t0):
        raise ValueError("horizon age before current age")
    with np.errstate(divide="ignore", invalid="ignore"):
        s0 = standard_logsf(family, (np.log(t0) - mu) / sigma)
        sw = standard_logsf(family, (np.log(tw) - mu) / sigma)
        rho = -np.expm1(np.minimum(sw - s0, 0.0))
    # a unit already beyond the model's support fails with certainty
    rho = np.where(np.isneginf(s0), 1.0, rho)
    rho = np.where(tw == t0, 0.0, rho)
    rho = np.clip(np.nan_to_num(rho, nan=1.0), 0.0, 1.0)
    return float(rho) if rho.ndim == 0 else rho


# -- forecasts --------------------------------------------------------------


@dataclass
class PopulationForecast:
    dates: tuple
    n_at_risk: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    gamma: np.ndarray
    naive: dict
    calibrated: dict
    calibration_quantiles: dict
    levels: tuple
    method: str
    risk_set_size: int
    groups: tuple = ()

    @property
    def point(self) -> np.ndarray:
        return self.mu

    def to_csv(self) -> str:
        out = io.StringIO()
        w = csv.writer(out, lineterminator="\n")
        primary = self.levels[0]
        header = ["date", "n_at_risk", "mu_K", "sigma_K", "gamma_K", "naive_lo", "naive_hi"]
        for lv in self.levels:
            tag = f"cal{round(lv * 100):d}"
            header += [f"{tag}_lo", f"{tag}_hi"]
        w.writerow(header)
        for j, d in enumerate(self.dates):
            row = [
                d.isoformat(), int(self.n_at_risk[j]),
                repr(float(self.mu[j])), repr(float(self.sigma[j])), repr(float(self.gamma[j])),
                int(self.naive[primary][0][j]), int(self.naive[primary][1][j]),
            ]
            for lv in self.levels:
                row += [int(self.calibrated[lv][0][j]), int(self.calibrated[lv][1][j])]
            w.writerow(row)
        return out.getvalue()

    def summary(self) -> dict:
        last = len(self.dates) - 1
        return {
            "risk_set_size": self.risk_set_size,
            "groups": list(self.groups),
            "method": self.method,
            "start": self.dates[0].isoformat(),
            "end": self.dates[-1].isoformat(),
            "final_mu_K": float(self.mu[last]),
            "final_calibrated": {str(lv): [int(self.calibrated[lv][0][last]), int(self.calibrated[lv][1][last])] for lv in self.levels},
        }


def _check_pair(fit, ensemble):
    base = ensemble.base_fit
    if base.spec.as_dict() != fit.spec.as_dict() or list(base.names) != list(fit.names) or not np.array_equal(base.theta, fit.theta):
        raise ValueError("bootstrap ensemble was not built from this fit")


def _horizon_ages(units, elapsed):
    age0 = np.array([u.current_age for u in units], dtype=float)
    offset = np.array([u.entry_offset for u in units], dtype=float)
    active = elapsed >= offset
    tw = age0 + np.maximum(elapsed - offset, 0.0)
    return age0, tw, active


def _cdf_tables(rho, method: str, kmax: int):
    if method == "exact":
        cdf = exact_poisson_binomial_cdf(rho)
        if kmax + 1 <= cdf.shape[-1]:
            return cdf[..., : kmax + 1]
        pad = np.ones(cdf.shape[:-1] + (kmax + 1 - cdf.shape[-1],))
        return np.concatenate([cdf, pad], axis=-1)
    return volkova_cdf_table(rho, kmax)


def forecast(riskset: RiskSet, fit, ensemble, grid: ForecastGrid, levels=(0.90,), seed: int = 0,
             method: str = "volkova", exact_threshold: int = EXACT_THRESHOLD) -> PopulationForecast:
    """Point forecast, plug-in and bootstrap-calibrated pointwise bands.

    For each grid date ``j`` the simulation uses ``SeedSequence(seed,
    spawn_key=(j,))``: one K* per replicate from the plug-in failure
    probabilities, mapped through that replicate's cdf to U*.  The lower and
    upper tail quantiles of U* are then inverted in the plug-in cdf with
    outward integer rounding.
    """
    if method not in ("volkova", "exact"):
        raise ValueError("method must be 'volkova' or 'exact'")
    if not grid.dates:
        raise ValueError("empty forecast grid")
    if ensemble is not None:
        _check_pair(fit, ensemble)
    levels = tuple(float(lv) for lv in (levels if np.ndim(levels) else [levels]))
    units = riskset.units
    n = len(units)
    if method == "exact" and n > exact_threshold:
        raise ValueError(f"risk set of {n} units exceeds the exact threshold {exact_threshold}")
    family = fit.spec.family
    mu_hat, sig_hat = fit.unit_params(units)
    if ensemble is not None:
        mu_b, sig_b = ensemble.unit_params(units)
        B = mu_b.shape[0]
    elapsed = grid.elapsed_years
    nd = len(grid.dates)
    res = {k: np.zeros(nd) for k in ("mu", "sigma", "gamma")}
    n_at = np.zeros(nd, dtype=int)
    naive = {lv: (np.zeros(nd, dtype=int), np.zeros(nd, dtype=int)) for lv in levels}
    cal = {lv: (np.zeros(nd, dtype=int), np.zeros(nd, dtype=int)) for lv in levels}
    cq = {lv: (np.zeros(nd), np.zeros(nd)) for lv in levels}
    for j in range(nd):
        age0, tw, active = _horizon_ages(units, elapsed[j])
        n_at[j] = int(active.sum())
        rho = np.where(active, conditional_fail_prob(family, mu_hat, sig_hat, age0, tw), 0.0)
        m, s, g = poisson_binomial_moments(rho)
        res["mu"][j], res["sigma"][j], res["gamma"][j] = m, s, g
        table = _cdf_tables(rho, method, n)
        for lv in levels:
            a = (1 - lv) / 2
            lo, hi = invert_cdf(table, a, 1 - a)
            naive[lv][0][j], naive[lv][1][j] = lo, hi
        if ensemble is None:
            for lv in levels:
                cal[lv][0][j], cal[lv][1][j] = naive[lv][0][j], naive[lv][1][j]
            continue
        rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(j,)))
        k_star = (rng.random((B, n)) < rho).sum(axis=1)
        rho_b = np.where(active, conditional_fail_prob(family, mu_b, sig_b, age0, tw), 0.0)
        kmax = int(k_star.max())
        tables_b = _cdf_tables(rho_b, method, kmax)
        u_star = np.take_along_axis(tables_b, k_star[:, None], axis=1)[:, 0]
        for lv in levels:
            a = (1 - lv) / 2
            u_l, u_u = np.quantile(u_star, [a, 1 - a])
            cq[lv][0][j], cq[lv][1][j] = u_l, u_u
            lo, hi = invert_cdf(table, u_l, u_u)
            cal[lv][0][j], cal[lv][1][j] = lo, hi
    return PopulationForecast(
        dates=tuple(grid.dates),
        n_at_risk=n_at,
        mu=res["mu"],
        sigma=res["sigma"],
        gamma=res["gamma"],
        naive=naive,
        calibrated=cal,
        calibration_quantiles=cq,
        levels=levels,
        method=method,
        risk_set_size=n,
        groups=tuple(sorted({u.predict_group for u in units})),
    )


def subset_forecast(riskset: RiskSet, fit, ensemble, grid: ForecastGrid, levels=(0.90,), seed: int = 0,
                    groups=None, manufacturers=None, **kwargs) -> PopulationForecast:
    """:func:`forecast` on the units matching ``groups`` and/or ``manufacturers``."""
    return forecast(riskset.filter(groups, manufacturers), fit, ensemble, grid, levels, seed, **kwargs)
