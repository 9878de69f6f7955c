"""Product-limit estimation for left-truncated right-censored ages.

With exact failure ages the self-consistent (Turnbull) estimate reduces to
a product over failure ages with a risk set that only admits a truncated
unit strictly after its entry age.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .distributions import Family, standard_quantile

__all__ = ["StepEstimate", "PlotPoints", "ltrc_product_limit", "plot_points", "step_csv", "points_csv"]


@dataclass(frozen=True)
class StepEstimate:
    jump_times: np.ndarray
    cdf_values: np.ndarray
    risk_counts: np.ndarray
    failure_counts: np.ndarray
    warnings: tuple = ()

    def survival_at(self, t):
        """Right-continuous S(t); 1 before the first jump."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.jump_times, t, side="right")
        s = np.r_[1.0, 1.0 - self.cdf_values]
        return s[idx]

    def cdf_at(self, t):
        return 1.0 - self.survival_at(t)


@dataclass(frozen=True)
class PlotPoints:
    x: np.ndarray
    y: np.ndarray
    probability: np.ndarray
    notes: tuple = field(default=())


def ltrc_product_limit(obs, quiet: bool = False) -> StepEstimate:
    """S(t) = prod over failure ages a_j <= t of (1 - d_j / n_j).

    ``n_j`` counts units with entry age < a_j <= outcome age, where entry
    is ``tau_L`` for truncated units and 0 otherwise.  Ties at a failure
    age form one jump; a unit censored at a failure age is still at risk.
    """
    obs = list(obs)
    if not obs:
        raise ValueError("no observations")
    age = np.array([o.age for o in obs], dtype=float)
    delta = np.array([o.delta for o in obs], dtype=bool)
    entry = np.array([o.entry_age for o in obs], dtype=float)
    notes = []
    if all(o.nu == 0 for o in obs):
        notes.append("all observations are truncated; the estimate is not consistent")
    times, d = np.unique(age[delta], return_counts=True)
    if times.size == 0:
        notes.append("no failures; estimate is flat")
    # units with age < a all have entry < a, so they cancel out of the first count
    n = np.searchsorted(np.sort(entry), times, side="left") - np.searchsorted(np.sort(age), times, side="left")
    surv = np.cumprod(1.0 - d / n)
    cdf = np.clip(1.0 - surv, 0.0, 1.0)
    if not quiet:
        for note in notes:
            warnings.warn(note, stacklevel=2)
    return StepEstimate(times, np.maximum.accumulate(cdf) if cdf.size else cdf, n, d, tuple(notes))


def plot_points(est: StepEstimate, family: Family) -> PlotPoints:
    """Probability-plot coordinates at each failure age.

    The plotting probability is the midpoint of the cdf step; ``y`` is the
    standardized quantile of the family (``log(-log(1 - p))`` for Weibull).
    """
    if est.jump_times.size == 0:
        raise ValueError("estimate has no jumps")
    family = Family.parse(family)
    before = np.r_[0.0, est.cdf_values[:-1]]
    mid = 0.5 * (before + est.cdf_values)
    keep = (mid > 0) & (mid < 1)
    notes = tuple(f"dropped point at age {a:g}: plotting probability {p:g}" for a, p in zip(est.jump_times[~keep], mid[~keep]))
    p = mid[keep]
    return PlotPoints(np.log(est.jump_times[keep]), standard_quantile(family, p), p, notes)


def step_csv(est: StepEstimate) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["age", "cdf", "risk", "failures"])
    for row in zip(est.jump_times, est.cdf_values, est.risk_counts, est.failure_counts):
        w.writerow([repr(float(row[0])), repr(float(row[1])), int(row[2]), int(row[3])])
    return out.getvalue()


def points_csv(points: PlotPoints) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["x", "y", "probability"])
    for x, y, p in zip(points.x, points.y, points.probability):
        w.writerow([repr(float(x)), repr(float(y)), repr(float(p))])
    return out.getvalue()
