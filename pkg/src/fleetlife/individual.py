"""Remaining-life prediction intervals for individual units in service."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from .distributions import ConditionalLife, LocationScaleParams, conditional_quantile, logsf, quantile

__all__ = [
    "IntervalSpec",
    "LifePrediction",
    "naive_interval",
    "calibrate_interval",
    "predict_fleet",
    "predictions_csv",
    "predictions_plot_json",
    "unit_seed",
    "MIN_REPLICATES",
]

MIN_REPLICATES = 100
IMMINENT_QUANTILE = 0.999


@dataclass(frozen=True)
class IntervalSpec:
    level: float = 0.90
    alpha_l: float | None = None
    alpha_u: float | None = None

    def __post_init__(self):
        if not (0 <= self.level < 1):
            raise ValueError("level must lie in [0, 1)")
        alpha = 1.0 - self.level
        lo = alpha / 2 if self.alpha_l is None else self.alpha_l
        hi = alpha / 2 if self.alpha_u is None else self.alpha_u
        if lo <= 0 or hi <= 0 or abs(lo + hi - alpha) > 1e-12:
            raise ValueError("alpha_l and alpha_u must be positive and sum to 1 - level")
        object.__setattr__(self, "alpha_l", lo)
        object.__setattr__(self, "alpha_u", hi)

    @property
    def probabilities(self) -> tuple:
        return self.alpha_l, 1.0 - self.alpha_u


@dataclass(frozen=True)
class LifePrediction:
    serial: str
    current_age: float
    naive: tuple
    calibrated: tuple
    calibration_quantiles: tuple
    group: str = ""
    flags: tuple = field(default=())


def naive_interval(cl: ConditionalLife, spec: IntervalSpec) -> tuple:
    """Plug-in interval: conditional quantiles at alpha_l and 1 - alpha_u."""
    lo, hi = conditional_quantile(cl, np.array(spec.probabilities))
    return float(lo), float(hi)


def unit_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed), spawn_key=(int(index),))


def _clip_open(u):
    eps = 1e-15
    return np.clip(u, eps, 1.0 - eps)


def calibrate_interval(cl: ConditionalLife, replicate_params: LocationScaleParams, spec: IntervalSpec,
                       sim_seed, serial: str = "", group: str = "") -> LifePrediction:
    """Bootstrap-calibrated interval for one unit.

    ``replicate_params`` holds the unit's (mu, sigma) under every bootstrap
    replicate (arrays of length B).  One future failure age is drawn per
    replicate from the plug-in conditional distribution, mapped through the
    replicate's conditional cdf, and the empirical tail quantiles of those
    values replace the nominal tail probabilities.
    """
    mu = np.atleast_1d(np.asarray(replicate_params.mu, dtype=float))
    sigma = np.atleast_1d(np.asarray(replicate_params.sigma, dtype=float))
    B = mu.size
    if B < MIN_REPLICATES:
        raise ValueError(f"ensemble too small for calibration: B = {B} < {MIN_REPLICATES}")
    rng = np.random.default_rng(sim_seed)
    t_star = conditional_quantile(cl, rng.uniform(size=B))
    star = LocationScaleParams(mu, sigma)
    with np.errstate(invalid="ignore"):
        diff = logsf(cl.family, star, t_star) - logsf(cl.family, star, cl.current_age)
    u_star = -np.expm1(np.minimum(diff, 0.0))
    # a replicate under which the unit is already beyond support carries no information
    u_star = u_star[np.isfinite(u_star)]
    u_l, u_u = np.quantile(u_star, spec.probabilities)
    u_l, u_u = _clip_open(np.array([u_l, u_u]))
    lo, hi = conditional_quantile(cl, np.array([u_l, u_u]))
    flags = []
    if cl.current_age > quantile(cl.family, cl.params, IMMINENT_QUANTILE):
        flags.append("imminent-risk")
    return LifePrediction(
        serial=serial,
        current_age=float(cl.current_age),
        naive=naive_interval(cl, spec),
        calibrated=(float(lo), float(hi)),
        calibration_quantiles=(float(u_l), float(u_u)),
        group=group,
        flags=tuple(flags),
    )


def predict_fleet(obs, fit, ensemble, spec: IntervalSpec, seed: int) -> list:
    """Intervals for every unit still in service, ranked by calibrated lower endpoint.

    Unit ``i`` (in input order among the at-risk units) simulates with
    ``SeedSequence(seed, spawn_key=(i,))``.
    """
    at_risk = [o for o in obs if o.delta == 0]
    if not at_risk:
        return []
    mu_hat, sigma_hat = fit.unit_params(at_risk)
    mu_b, sigma_b = ensemble.unit_params(at_risk)
    family = fit.spec.family
    out = []
    for i, o in enumerate(at_risk):
        cl = ConditionalLife(family, LocationScaleParams(float(mu_hat[i]), float(sigma_hat[i])), o.age)
        pred = calibrate_interval(
            cl,
            LocationScaleParams(mu_b[:, i], sigma_b[:, i]),
            spec,
            unit_seed(seed, i),
            serial=o.serial,
            group=o.predict_group or o.group,
        )
        out.append(pred)
    out.sort(key=lambda p: (p.calibrated[0], p.serial))
    return out


def predictions_csv(preds) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["serial", "group", "age", "naive_lo", "naive_hi", "cal_lo", "cal_hi", "flags"])
    for p in preds:
        w.writerow([
            p.serial, p.group, repr(p.current_age),
            repr(p.naive[0]), repr(p.naive[1]), repr(p.calibrated[0]), repr(p.calibrated[1]),
            ";".join(p.flags),
        ])
    return out.getvalue()


def predictions_plot_json(preds, level: float) -> str:
    doc = {
        "x_axis": {"label": "Years", "scale": "log"},
        "level": level,
        "units": [
            {
                "serial": p.serial,
                "group": p.group,
                "current_age": p.current_age,
                "naive": list(p.naive),
                "calibrated": list(p.calibrated),
                "flags": list(p.flags),
            }
            for p in preds
        ],
    }
    return json.dumps(doc, indent=1, sort_keys=True)
