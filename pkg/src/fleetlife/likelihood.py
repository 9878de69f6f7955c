"""Left-truncated, right-censored maximum likelihood with stratified regression.

A model is a set of strata.  Each stratum has its own location regression
on categorical covariates (treatment contrasts) and belongs to one shape
class; all strata in a class share a single ``sigma``.  The optimizer works
on unconstrained coordinates: location coefficients and ``log(sigma)``.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special, stats

from .distributions import (
    Family,
    standard_logpdf,
    standard_logsf,
    standard_quantile,
)
from .data import LifetimeObservation

__all__ = [
    "ModelSpec",
    "TermCoding",
    "ParameterVector",
    "FitResult",
    "FitError",
    "DegenerateFitError",
    "WaldInterval",
    "LRTest",
    "loglikelihood",
    "fit_mle",
    "wald_intervals",
    "log_scale_interval",
    "lr_statistic",
    "lr_test",
    "LTRCProblem",
]

GTOL = 1e-6
FTOL = 1e-10
HEAVY_TRUNCATION = 0.9


class FitError(RuntimeError):
    pass


class DegenerateFitError(FitError):
    """A shape class (or stratum) carries no failures, so the MLE is meaningless."""


@dataclass(frozen=True)
class ModelSpec:
    family: Family
    strata: tuple
    location_formula: Mapping[str, tuple] = field(default_factory=dict)
    shape_classes: Mapping[str, tuple] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "family", Family.parse(self.family))
        strata = tuple(self.strata)
        if not strata or len(set(strata)) != len(strata):
            raise ValueError("strata must be a non-empty list of distinct labels")
        object.__setattr__(self, "strata", strata)
        formula = {s: tuple(self.location_formula.get(s, ())) for s in strata}
        unknown = set(self.location_formula) - set(strata)
        if unknown:
            raise ValueError(f"location_formula names strata not in the model: {sorted(unknown)}")
        object.__setattr__(self, "location_formula", formula)
        classes = dict(self.shape_classes) or {s: (s,) for s in strata}
        classes = {k: tuple(v) for k, v in classes.items()}
        members = [s for v in classes.values() for s in v]
        if sorted(members) != sorted(strata):
            raise ValueError("every stratum must appear in exactly one shape class")
        object.__setattr__(self, "shape_classes", classes)

    @classmethod
    def per_stratum(cls, family, strata) -> "ModelSpec":
        """Intercept-only strata, each with its own shape."""
        return cls(family, tuple(strata))

    def class_of(self, stratum: str) -> str:
        for name, members in self.shape_classes.items():
            if stratum in members:
                return name
        raise KeyError(stratum)

    def drop_term(self, stratum: str, term: str) -> "ModelSpec":
        formula = dict(self.location_formula)
        formula[stratum] = tuple(t for t in formula[stratum] if t != term)
        return ModelSpec(self.family, self.strata, formula, self.shape_classes)

    def with_family(self, family) -> "ModelSpec":
        return ModelSpec(family, self.strata, self.location_formula, self.shape_classes)

    def is_nested_in(self, other: "ModelSpec") -> bool:
        """True when ``self`` is a restriction of ``other``."""
        if self.family is not other.family or set(self.strata) != set(other.strata):
            return False
        if any(not set(self.location_formula[s]) <= set(other.location_formula[s]) for s in self.strata):
            return False
        return all(
            any(set(fine) <= set(coarse) for coarse in self.shape_classes.values())
            for fine in other.shape_classes.values()
        )

    def as_dict(self) -> dict:
        return {
            "family": self.family.value,
            "strata": list(self.strata),
            "location_formula": {k: list(v) for k, v in self.location_formula.items()},
            "shape_classes": {k: list(v) for k, v in self.shape_classes.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(d["family"], tuple(d["strata"]), d.get("location_formula", {}), d.get("shape_classes", {}))


@dataclass(frozen=True)
class TermCoding:
    """Treatment coding of one categorical term; ``baseline`` gets no column."""

    term: str
    baseline: str
    levels: tuple

    def as_dict(self):
        return {"term": self.term, "baseline": self.baseline, "levels": list(self.levels)}


def _code_terms(spec: ModelSpec, obs: Sequence[LifetimeObservation]) -> dict:
    coding = {}
    for s in spec.strata:
        members = [o for o in obs if o.group == s]
        terms = []
        for term in spec.location_formula[s]:
            counts = Counter(o.covariates.get(term) for o in members)
            if None in counts:
                raise ValueError(f"covariate {term!r} missing for some units of stratum {s!r}")
            # most frequent level is the baseline; ties broken alphabetically
            ordered = sorted(counts, key=lambda lv: (-counts[lv], lv))
            terms.append(TermCoding(term, ordered[0], tuple(sorted(ordered[1:]))))
        coding[s] = tuple(terms)
    return coding


def _param_names(spec: ModelSpec, coding: Mapping[str, tuple]) -> list:
    names = []
    for s in spec.strata:
        names.append(f"{s}:(Intercept)")
        for tc in coding[s]:
            names.extend(f"{s}:{tc.term}[{lv}]" for lv in tc.levels)
    names.extend(f"log_sigma:{c}" for c in spec.shape_classes)
    return names


@dataclass(frozen=True)
class ParameterVector:
    """Location coefficients per stratum and ``log(sigma)`` per shape class."""

    coefficients: Mapping[str, np.ndarray]
    log_sigmas: Mapping[str, float]

    def to_array(self, spec: ModelSpec) -> np.ndarray:
        parts = [np.asarray(self.coefficients[s], dtype=float) for s in spec.strata]
        parts.append(np.array([self.log_sigmas[c] for c in spec.shape_classes], dtype=float))
        return np.concatenate(parts)

    @classmethod
    def from_array(cls, theta, spec: ModelSpec, coding: Mapping[str, tuple]) -> "ParameterVector":
        theta = np.asarray(theta, dtype=float)
        coefs, i = {}, 0
        for s in spec.strata:
            k = 1 + sum(len(tc.levels) for tc in coding[s])
            coefs[s] = theta[i:i + k].copy()
            i += k
        sig = {c: float(theta[i + j]) for j, c in enumerate(spec.shape_classes)}
        if i + len(sig) != theta.size:
            raise ValueError("parameter array does not match the model layout")
        return cls(coefs, sig)


def design_matrix(
    spec: ModelSpec, coding: Mapping[str, tuple], obs: Sequence[LifetimeObservation], key: str = "group"
):
    """Location design matrix and shape-class index for ``obs``.

    ``key`` selects which stratum label to use: ``group`` for fitting,
    ``predict_group`` for prediction of reassigned units.
    """
    offsets, p = {}, 0
    for s in spec.strata:
        offsets[s] = p
        p += 1 + sum(len(tc.levels) for tc in coding[s])
    class_index = {c: j for j, c in enumerate(spec.shape_classes)}
    X = np.zeros((len(obs), p))
    cls = np.empty(len(obs), dtype=int)
    for i, o in enumerate(obs):
        s = getattr(o, key) or o.group
        if s not in offsets:
            raise ValueError(f"{o.serial}: stratum {s!r} is not part of the model")
        col = offsets[s]
        X[i, col] = 1.0
        col += 1
        for tc in coding[s]:
            level = o.covariates.get(tc.term)
            if level in tc.levels:
                X[i, col + tc.levels.index(level)] = 1.0
            elif level != tc.baseline:
                raise ValueError(f"{o.serial}: level {level!r} of {tc.term!r} not seen when fitting {s!r}")
            col += len(tc.levels)
        cls[i] = class_index[spec.class_of(s)]
    return X, cls


def _standard_derivs(family: Family, z, kind: str):
    """Value, first and second derivative in z of log phi (kind='pdf') or log(1-Phi)."""
    if family is Family.WEIBULL:
        ez = np.exp(z)
        if kind == "pdf":
            return z - ez, 1.0 - ez, -ez
        return -ez, -ez, -ez
    if kind == "pdf":
        return standard_logpdf(family, z), -z, -np.ones_like(z)
    logsf = special.log_ndtr(-z)
    lam = np.exp(standard_logpdf(family, z) - logsf)
    return logsf, -lam, -lam * (lam - z)


class LTRCProblem:
    """Pre-processed arrays for repeated likelihood evaluation on one dataset."""

    def __init__(self, spec: ModelSpec, obs: Sequence[LifetimeObservation], weights=None, coding=None):
        obs = list(obs)
        if not obs:
            raise ValueError("no observations to fit")
        self.spec = spec
        self.obs = obs
        self.coding = coding if coding is not None else _code_terms(spec, obs)
        self.names = _param_names(spec, self.coding)
        self.X, self.cls = design_matrix(spec, self.coding, obs)
        self.n_coef = self.X.shape[1]
        self.n_class = len(spec.shape_classes)
        self.E = np.zeros((len(obs), self.n_class))
        self.E[np.arange(len(obs)), self.cls] = 1.0
        age = np.array([o.age for o in obs], dtype=float)
        self.delta = np.array([o.delta for o in obs], dtype=bool)
        self.trunc = np.array([o.nu == 0 for o in obs], dtype=bool)
        tau = np.array([o.tau_L if o.nu == 0 else np.nan for o in obs], dtype=float)
        if np.any(self.delta & (age <= 0)):
            raise ValueError("failure with age <= 0")
        if np.any(self.trunc & ~(tau < age)):
            raise ValueError("truncation age must be below the observed age")
        with np.errstate(divide="ignore"):
            self.log_age = np.log(age)
        # tau_L == 0 gives log(0) = -inf, z = -inf and a zero truncation term
        self.tau_idx = np.flatnonzero(self.trunc & (tau > 0))
        self.log_tau = np.log(tau[self.tau_idx])
        self.set_weights(weights)

    def set_weights(self, weights):
        if weights is None:
            self.w = np.ones(len(self.obs))
        else:
            w = np.asarray(weights, dtype=float)
            if w.shape != (len(self.obs),) or np.any(~(w > 0)) or np.any(~np.isfinite(w)):
                raise ValueError("weights must be positive, finite and aligned with the observations")
            self.w = w
        self.n_eff = float(self.w.sum())

    @property
    def n_params(self) -> int:
        return self.n_coef + self.n_class

    def _mu_s(self, theta):
        theta = np.asarray(theta, dtype=float)
        mu = self.X @ theta[: self.n_coef]
        s = theta[self.n_coef:][self.cls]
        return mu, s

    def contributions(self, theta) -> np.ndarray:
        """Per-observation log-likelihood terms (unweighted)."""
        mu, s = self._mu_s(theta)
        sigma = np.exp(s)
        fam = self.spec.family
        z = (self.log_age - mu) / sigma
        ll = np.where(
            self.delta,
            standard_logpdf(fam, z) - s - self.log_age,
            standard_logsf(fam, z),
        )
        j = self.tau_idx
        if j.size:
            ll[j] -= standard_logsf(fam, (self.log_tau - mu[j]) / sigma[j])
        return ll

    def loglik(self, theta) -> float:
        with np.errstate(over="ignore", invalid="ignore", divide="ignore", under="ignore"):
            v = float(self.w @ self.contributions(theta))
        return v if np.isfinite(v) else -np.inf

    def _derivs(self, theta):
        mu, s = self._mu_s(theta)
        sigma = np.exp(s)
        fam = self.spec.family
        z = (self.log_age - mu) / sigma
        n = len(z)
        q1 = np.empty(n)
        q2 = np.empty(n)
        d = self.delta
        _, q1[d], q2[d] = _standard_derivs(fam, z[d], "pdf")
        _, q1[~d], q2[~d] = _standard_derivs(fam, z[~d], "sf")
        a = -q1 / sigma
        c = -z * q1 - d
        A = q2 / sigma**2
        B = (q1 + z * q2) / sigma
        C = z * q1 + z * z * q2
        j = self.tau_idx
        if j.size:
            zt = (self.log_tau - mu[j]) / sigma[j]
            _, t1, t2 = _standard_derivs(fam, zt, "sf")
            a[j] -= -t1 / sigma[j]
            c[j] -= -zt * t1
            A[j] -= t2 / sigma[j] ** 2
            B[j] -= (t1 + zt * t2) / sigma[j]
            C[j] -= zt * t1 + zt * zt * t2
        return a, c, A, B, C

    def gradient(self, theta) -> np.ndarray:
        a, c, *_ = self._derivs(theta)
        w = self.w
        return np.concatenate([self.X.T @ (w * a), self.E.T @ (w * c)])

    def hessian(self, theta) -> np.ndarray:
        """Analytic Hessian of the weighted log-likelihood."""
        _, _, A, B, C = self._derivs(theta)
        w = self.w
        X, E = self.X, self.E
        hmm = (X * (w * A)[:, None]).T @ X
        hms = (X * (w * B)[:, None]).T @ E
        hss = (E * (w * C)[:, None]).T @ E
        return np.block([[hmm, hms], [hms.T, hss]])

    def fd_hessian(self, theta) -> np.ndarray:
        """Central finite differences of the analytic gradient."""
        theta = np.asarray(theta, dtype=float)
        p = theta.size
        H = np.empty((p, p))
        for k in range(p):
            h = 1e-5 * (1.0 + abs(theta[k]))
            up, dn = theta.copy(), theta.copy()
            up[k] += h
            dn[k] -= h
            H[:, k] = (self.gradient(up) - self.gradient(dn)) / (2 * h)
        return 0.5 * (H + H.T)

    def scaled_gradient_norm(self, theta) -> float:
        return float(np.max(np.abs(self.gradient(theta)))) / max(self.n_eff, 1.0)


@dataclass
class FitResult:
    spec: ModelSpec
    coding: Mapping[str, tuple]
    names: list
    theta: np.ndarray
    loglik: float
    covariance: np.ndarray
    converged: bool
    iterations: int
    gradient_norm: float
    method: str = "newton"
    n_obs: int = 0
    n_failures: dict = field(default_factory=dict)
    diagnostics: list = field(default_factory=list)

    @property
    def estimate(self) -> ParameterVector:
        return ParameterVector.from_array(self.theta, self.spec, self.coding)

    @property
    def n_params(self) -> int:
        return self.theta.size

    @property
    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))

    def unit_params(self, obs: Sequence[LifetimeObservation], thetas=None, key: str = "predict_group"):
        """Location and scale for each unit; with ``thetas`` of shape (B, p) the result is (B, n)."""
        X, cls = design_matrix(self.spec, self.coding, obs, key=key)
        th = self.theta if thetas is None else np.asarray(thetas, dtype=float)
        coef = th[..., : X.shape[1]]
        mu = coef @ X.T
        sigma = np.exp(th[..., X.shape[1]:][..., cls])
        return mu, sigma

    def as_dict(self) -> dict:
        return {
            "spec": self.spec.as_dict(),
            "coding": {s: [tc.as_dict() for tc in v] for s, v in self.coding.items()},
            "names": list(self.names),
            "theta": [float(x) for x in self.theta],
            "loglik": float(self.loglik),
            "covariance": [[float(x) for x in row] for row in self.covariance],
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.gradient_norm),
            "method": self.method,
            "n_obs": int(self.n_obs),
            "n_failures": dict(self.n_failures),
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        coding = {
            s: tuple(TermCoding(t["term"], t["baseline"], tuple(t["levels"])) for t in v)
            for s, v in d["coding"].items()
        }
        return cls(
            spec=ModelSpec.from_dict(d["spec"]),
            coding=coding,
            names=list(d["names"]),
            theta=np.array(d["theta"], dtype=float),
            loglik=float(d["loglik"]),
            covariance=np.array(d["covariance"], dtype=float).reshape(len(d["theta"]), len(d["theta"])),
            converged=bool(d["converged"]),
            iterations=int(d["iterations"]),
            gradient_norm=float(d["gradient_norm"]),
            method=d.get("method", "newton"),
            n_obs=int(d.get("n_obs", 0)),
            n_failures=dict(d.get("n_failures", {})),
            diagnostics=list(d.get("diagnostics", [])),
        )

    def report(self, level: float = 0.95) -> dict:
        """JSON-ready summary on both the (mu, sigma) and (eta, beta) scales."""
        se = self.standard_errors
        out = {
            "family": self.spec.family.value,
            "spec": self.spec.as_dict(),
            "loglik": float(self.loglik),
            "n_params": self.n_params,
            "n_obs": self.n_obs,
            "n_failures": dict(self.n_failures),
            "parameters": [
                {"name": n, "estimate": float(t), "se": float(e)} for n, t, e in zip(self.names, self.theta, se)
            ],
            "convergence": {
                "converged": bool(self.converged),
                "iterations": int(self.iterations),
                "scaled_gradient_norm": float(self.gradient_norm),
                "method": self.method,
            },
            "diagnostics": list(self.diagnostics),
        }
        try:
            out["intervals"] = {
                name: iv.as_dict() for name, iv in wald_intervals(self, level).items()
            }
            out["interval_level"] = level
        except FitError as exc:
            out["intervals"] = None
            out["interval_error"] = str(exc)
        return out


def _fitting_obs(spec: ModelSpec, obs):
    fit_obs = [o for o in obs if o.in_fit]
    stray = sorted({o.group for o in fit_obs if o.group not in spec.strata})
    if stray:
        raise ValueError(f"observations from strata outside the model: {stray}")
    return fit_obs


def loglikelihood(spec: ModelSpec, params, obs: Sequence[LifetimeObservation], weights=None, coding=None) -> float:
    """Weighted LTRC log-likelihood.

    ``params`` is a :class:`ParameterVector` or a flat array in model
    layout. Every observation must belong to a stratum of ``spec``.
    """
    stray = sorted({o.group for o in obs if o.group not in spec.strata})
    if stray:
        raise ValueError(f"observations from strata outside the model: {stray}")
    problem = LTRCProblem(spec, obs, weights, coding=coding)
    theta = params.to_array(spec) if isinstance(params, ParameterVector) else np.asarray(params, dtype=float)
    if theta.size != problem.n_params:
        raise ValueError("parameter vector does not match the model layout")
    with np.errstate(over="ignore", invalid="ignore"):
        return float(problem.w @ problem.contributions(theta))


def _plot_start(family: Family, obs) -> tuple:
    """(mu, sigma) from a least-squares line through probability-plot points."""
    from .nonparametric import ltrc_product_limit, plot_points

    logs = np.log([o.age for o in obs if o.age > 0] or [1.0])
    fallback = (float(np.mean(logs)), float(np.std(logs)) if np.std(logs) > 0.05 else 1.0)
    try:
        pts = plot_points(ltrc_product_limit(obs, quiet=True), family)
    except ValueError:
        return fallback
    if len(pts.x) < 2 or np.ptp(pts.x) == 0:
        if len(pts.x) == 1:
            return float(pts.x[0] - fallback[1] * pts.y[0]), fallback[1]
        return fallback
    slope, intercept = np.polyfit(pts.x, pts.y, 1)
    if not (slope > 0.05 and slope < 50):
        return fallback
    sigma = 1.0 / slope
    return float(-intercept * sigma), float(sigma)


def initial_theta(problem: LTRCProblem) -> np.ndarray:
    spec = problem.spec
    groups = np.array([o.group for o in problem.obs])
    intercepts, log_sig = {}, {}
    for s in spec.strata:
        members = [o for o, g in zip(problem.obs, groups) if g == s]
        mu0, sig0 = _plot_start(spec.family, members)
        intercepts[s] = mu0
        log_sig[s] = math.log(sig0)
    coefs = {}
    for s in spec.strata:
        k = 1 + sum(len(tc.levels) for tc in problem.coding[s])
        coefs[s] = np.r_[intercepts[s], np.zeros(k - 1)]
    sigs = {c: float(np.mean([log_sig[s] for s in members])) for c, members in spec.shape_classes.items()}
    return ParameterVector(coefs, sigs).to_array(spec)


def _newton(problem: LTRCProblem, theta0, max_iter: int = 100):
    """Damped Newton ascent; returns (theta, loglik, iterations, converged)."""
    theta = np.asarray(theta0, dtype=float).copy()
    ll = problem.loglik(theta)
    if not np.isfinite(ll):
        return theta, ll, 0, False
    scale = max(problem.n_eff, 1.0)
    for it in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            g = problem.gradient(theta)
            H = problem.hessian(theta)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            return theta, ll, it, False
        gnorm = np.max(np.abs(g)) / scale
        if gnorm < GTOL * 1e-3:
            return theta, ll, it, True
        negH = -H
        lam = 0.0
        p = negH.shape[0]
        diag_scale = np.maximum(np.abs(np.diag(negH)), 1e-8)
        for _ in range(30):
            try:
                L = np.linalg.cholesky(negH + lam * np.diag(diag_scale))
                break
            except np.linalg.LinAlgError:
                lam = max(2 * lam, 1e-4)
        else:
            return theta, ll, it, False
        step = np.linalg.solve(L.T, np.linalg.solve(L, g))
        t = 1.0
        improved = False
        for _ in range(40):
            cand = theta + t * step
            ll_new = problem.loglik(cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                improved = True
                break
            t *= 0.5
        if not improved:
            return theta, ll, it, gnorm < GTOL
        rel = abs(ll_new - ll) / max(1.0, abs(ll))
        theta, ll = cand, ll_new
        if rel < FTOL and problem.scaled_gradient_norm(theta) < GTOL:
            return theta, ll, it, True
    return theta, ll, max_iter, problem.scaled_gradient_norm(theta) < GTOL


def _fallback(problem: LTRCProblem, theta0):
    """Quasi-Newton, then derivative-free search, each polished by Newton."""
    scale = max(problem.n_eff, 1.0)

    def f(th):
        v = problem.loglik(th)
        return -v / scale if np.isfinite(v) else 1e300

    def jac(th):
        with np.errstate(over="ignore", invalid="ignore"):
            g = -problem.gradient(th) / scale
        return np.where(np.isfinite(g), g, 0.0)

    res = optimize.minimize(f, theta0, jac=jac, method="BFGS", options={"gtol": GTOL, "maxiter": 2000})
    theta, ll, it, ok = _newton(problem, res.x)
    if ok:
        return theta, ll, it + res.nit, True, "bfgs"
    res = optimize.minimize(
        f, theta0, method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000, "maxfev": 40000}
    )
    theta, ll, it, ok = _newton(problem, res.x)
    return theta, ll, it + res.nit, ok, "nelder-mead"


def _check_failures(problem: LTRCProblem) -> dict:
    spec = problem.spec
    groups = [o.group for o in problem.obs]
    counts = {s: 0 for s in spec.strata}
    for g, d in zip(groups, problem.delta):
        counts[g] += int(d)
    for c, members in spec.shape_classes.items():
        if sum(counts[s] for s in members) == 0:
            raise DegenerateFitError(f"shape class {c!r} has no failures; cannot estimate its shape")
    for s in spec.strata:
        if counts[s] == 0:
            raise DegenerateFitError(f"stratum {s!r} has no failures; its location is not identifiable")
    return counts


def fit_problem(problem: LTRCProblem, init=None, compute_covariance: bool = True) -> FitResult:
    counts = _check_failures(problem)
    starts = []
    if init is not None:
        starts.append(np.asarray(init.to_array(problem.spec) if isinstance(init, ParameterVector) else init, dtype=float))
    starts.append(initial_theta(problem))
    theta, ll, it, ok, method = starts[0], -np.inf, 0, False, "newton"
    for start in starts:
        theta, ll, it, ok = _newton(problem, start)
        method = "newton"
        if not ok:
            theta, ll, it, ok, method = _fallback(problem, start)
        if ok:
            break
    diagnostics = []
    groups = np.array([o.group for o in problem.obs])
    for s in problem.spec.strata:
        frac = float(np.mean(problem.trunc[groups == s]))
        if frac > HEAVY_TRUNCATION:
            diagnostics.append(f"heavy truncation: {frac:.0%} of stratum {s!r} is left truncated")
    p = theta.size
    cov = np.full((p, p), np.nan)
    if compute_covariance and ok:
        info = -problem.fd_hessian(theta)
        try:
            np.linalg.cholesky(info)
            cov = np.linalg.inv(info)
            cov = 0.5 * (cov + cov.T)
        except np.linalg.LinAlgError:
            diagnostics.append("observed information is not positive definite")
    return FitResult(
        spec=problem.spec,
        coding=problem.coding,
        names=list(problem.names),
        theta=theta,
        loglik=float(ll),
        covariance=cov,
        converged=bool(ok),
        iterations=int(it),
        gradient_norm=problem.scaled_gradient_norm(theta),
        method=method,
        n_obs=len(problem.obs),
        n_failures=counts,
        diagnostics=diagnostics,
    )


def fit_mle(spec: ModelSpec, obs: Sequence[LifetimeObservation], weights=None, init=None,
            compute_covariance: bool = True) -> FitResult:
    """Maximize the LTRC likelihood over the in-fit observations of ``spec``'s strata.

    A fit that fails to converge is returned with ``converged=False``.
    Shape classes or strata without failures raise :class:`DegenerateFitError`.
    """
    obs = list(obs)
    keep = [i for i, o in enumerate(obs) if o.in_fit]
    fit_obs = _fitting_obs(spec, obs)
    if weights is not None:
        weights = np.asarray(weights, dtype=float)
        if weights.shape != (len(obs),):
            raise ValueError("weights must align with the observations")
        weights = weights[keep]
    problem = LTRCProblem(spec, fit_obs, weights)
    return fit_problem(problem, init=init, compute_covariance=compute_covariance)


# -- intervals and tests ----------------------------------------------------


@dataclass(frozen=True)
class WaldInterval:
    estimate: float
    se: float
    lower: float
    upper: float

    def as_dict(self):
        return {"estimate": self.estimate, "se": self.se, "lower": self.lower, "upper": self.upper}


def log_scale_interval(estimate: float, se: float, level: float = 0.95) -> tuple:
    """Positivity-preserving Wald interval: exp(log(est) +- z * se / est)."""
    if not (0 < level < 1):
        raise ValueError("level must lie in (0, 1)")
    z = stats.norm.ppf(0.5 + level / 2)
    half = z * se / estimate
    return estimate * math.exp(-half), estimate * math.exp(half)


def wald_intervals(fit: FitResult, level: float = 0.95) -> dict:
    """Wald intervals on the reporting scale.

    Coefficients get symmetric intervals.  ``eta`` values (one per stratum
    and per non-baseline level) and the shape ``beta`` / scale ``sigma``
    are built on the log scale and exponentiated.
    """
    cov = np.asarray(fit.covariance, dtype=float)
    if not np.all(np.isfinite(cov)) or np.any(np.diag(cov) < 0):
        raise FitError("covariance is singular or unavailable")
    if not (0 < level < 1):
        raise ValueError("level must lie in (0, 1)")
    z = float(stats.norm.ppf(0.5 + level / 2))
    theta = fit.theta
    out = {}

    def linear(c):
        est = float(c @ theta)
        se = float(math.sqrt(max(c @ cov @ c, 0.0)))
        return est, se

    for j, name in enumerate(fit.names):
        c = np.zeros_like(theta)
        c[j] = 1.0
        est, se = linear(c)
        out[name] = WaldInterval(est, se, est - z * se, est + z * se)

    def positive(name, c, sign=1.0):
        est, se = linear(sign * c)
        out[name] = WaldInterval(math.exp(est), math.exp(est) * se, math.exp(est - z * se), math.exp(est + z * se))

    col = 0
    for s in fit.spec.strata:
        base = col
        c = np.zeros_like(theta)
        c[base] = 1.0
        suffix = ",".join(f"{tc.term}={tc.baseline}" for tc in fit.coding[s])
        positive(f"eta[{s}{'|' + suffix if suffix else ''}]", c)
        col += 1
        for tc in fit.coding[s]:
            for lv in tc.levels:
                c = np.zeros_like(theta)
                c[base] = 1.0
                c[col] = 1.0
                positive(f"eta[{s}|{tc.term}={lv}]", c)
                col += 1
    for j, cname in enumerate(fit.spec.shape_classes):
        c = np.zeros_like(theta)
        c[col + j] = 1.0
        positive(f"sigma[{cname}]", c)
        positive(f"beta[{cname}]", c, sign=-1.0)
    return out


@dataclass(frozen=True)
class LRTest:
    statistic: float
    df: int
    p_value: float

    def as_dict(self):
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value}


def lr_statistic(loglik_full: float, loglik_reduced: float, df: int, tol: float = 1e-6) -> LRTest:
    stat = 2.0 * (loglik_full - loglik_reduced)
    if stat < -tol * max(1.0, abs(loglik_full)):
        raise FitError(f"negative likelihood-ratio statistic {stat:.6g}; the full fit did not reach its maximum")
    stat = max(stat, 0.0)
    if df < 0:
        raise ValueError("degrees of freedom must be >= 0")
    p = 1.0 if df == 0 or stat == 0 else float(stats.chi2.sf(stat, df))
    return LRTest(stat, int(df), p)


def lr_test(full: FitResult, reduced: FitResult) -> LRTest:
    if not reduced.spec.is_nested_in(full.spec):
        raise ValueError("reduced model is not nested in the full model")
    df = full.n_params - reduced.n_params
    if df < 0:
        raise ValueError("reduced model has more parameters than the full model")
    return lr_statistic(full.loglik, reduced.loglik, df)

