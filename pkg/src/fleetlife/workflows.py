"""End-to-end pipelines behind the command-line tool.

Every command returns a mapping of output file name to text.  The caller
writes them and adds ``manifest.json``; nothing except the manifest carries
a timestamp, so repeated runs with the same inputs and seeds produce
byte-identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import hashlib
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bootstrap import BootstrapEnsemble, WeightLaw, run_bootstrap
from .config import ConfigError, PipelineConfig
from .data import DataError, derive_observations, parse_fleet_csv, stratify, years_between
from .individual import IntervalSpec, predict_fleet, predictions_csv, predictions_plot_json
from .likelihood import FitError, FitResult, ModelSpec, fit_mle, lr_test
from .nonparametric import ltrc_product_limit, plot_points, points_csv, step_csv
from .population import ForecastGrid, RiskSet, RiskUnit, forecast
from .simulation import CoverageConfig, coverage_study, generate_fleet, scenario_from_config

__all__ = [
    "StaleArtifactError",
    "Inputs",
    "load_inputs",
    "resolve_spec",
    "run_hash",
    "cmd_fit",
    "cmd_bootstrap",
    "cmd_predict",
    "cmd_backtest",
    "cmd_sensitivity",
    "cmd_simulate",
    "dumps",
]

MANIFEST = "manifest.json"


class StaleArtifactError(DataError):
    pass


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True, allow_nan=False, default=_default) + "\n"


def _default(x):
    if isinstance(x, (dt.date, dt.datetime)):
        return x.isoformat()
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"not serializable: {type(x).__name__}")


def _nan_safe(x):
    if isinstance(x, float) and not np.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _nan_safe(v) for k, v in x.items()}
    if isinstance(x, list):
        return [_nan_safe(v) for v in x]
    return x


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- inputs -----------------------------------------------------------------


@dataclass
class Inputs:
    config: PipelineConfig
    records: list
    obs: list
    report: dict
    data_digest: str

    @property
    def hash(self) -> str:
        return run_hash(self.config, self.data_digest)


def run_hash(config: PipelineConfig, data_digest: str) -> str:
    return hashlib.sha256(f"{config.digest()}:{data_digest}".encode()).hexdigest()


def load_inputs(data_path, config: PipelineConfig, study=None) -> Inputs:
    raw = Path(data_path).read_bytes()
    records = parse_fleet_csv(raw)
    study = config.study if study is None else study
    obs, rep = derive_observations(records, study, return_report=True)
    obs = stratify(obs, study)
    return Inputs(config, records, obs, rep.as_dict(), hashlib.sha256(raw).hexdigest())


def resolve_spec(config: PipelineConfig, obs, family) -> ModelSpec:
    """Model from the ``[model]`` table; strata default to every fitted group."""
    m = config.model
    present = sorted({o.group for o in obs if o.in_fit})
    strata = tuple(m.strata) if m.strata else tuple(present)
    missing = sorted(set(strata) - set(present))
    if missing:
        raise DataError(f"model strata without fitted units: {missing}")
    formula = {s: v for s, v in m.location_formula.items() if s in strata}
    classes = m.shape_classes or {}
    if classes:
        covered = {s for v in classes.values() for s in v}
        classes = {k: tuple(s for s in v if s in strata) for k, v in classes.items()}
        classes = {k: v for k, v in classes.items() if v}
        for s in strata:
            if s not in covered:
                classes[s] = (s,)
    try:
        return ModelSpec(family, strata, formula, classes)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _fit_obs(spec: ModelSpec, obs):
    return [o for o in obs if o.in_fit and o.group in spec.strata]


def _require_converged(fit: FitResult, what: str):
    if not fit.converged:
        raise FitError(f"{what}: optimizer did not converge (scaled gradient {fit.gradient_norm:.3g})")


# -- fit --------------------------------------------------------------------


def _fit_block(spec: ModelSpec, obs, level: float) -> tuple:
    fit_obs = _fit_obs(spec, obs)
    fit = fit_mle(spec, fit_obs)
    _require_converged(fit, f"{spec.family.value} model")
    block = _nan_safe(fit.report(level))
    groups = {}
    for s in spec.strata:
        sub = ModelSpec.per_stratum(spec.family, [s])
        gfit = fit_mle(sub, [o for o in fit_obs if o.group == s])
        _require_converged(gfit, f"group {s}")
        groups[s] = _nan_safe(gfit.report(level))
    tests = []
    for s in spec.strata:
        for term in spec.location_formula[s]:
            reduced = fit_mle(spec.drop_term(s, term), fit_obs, init=None)
            _require_converged(reduced, f"reduced model without {term} in {s}")
            tests.append({"hypothesis": f"no {term} effect in {s}", "full_loglik": fit.loglik,
                          "reduced_loglik": reduced.loglik, **lr_test(fit, reduced).as_dict()})
    if any(len(v) > 1 for v in spec.shape_classes.values()):
        separate = ModelSpec(spec.family, spec.strata, spec.location_formula)
        sep = fit_mle(separate, fit_obs)
        _require_converged(sep, "separate-shape model")
        tests.append({"hypothesis": "shared shape classes", "full_loglik": sep.loglik,
                      "reduced_loglik": fit.loglik, **lr_test(sep, fit).as_dict()})
    block["group_fits"] = groups
    block["lr_tests"] = tests
    return fit, block


def cmd_fit(inputs: Inputs, families=None, level: float = 0.95) -> dict:
    cfg = inputs.config
    families = families or cfg.model.families
    outputs, fits, blocks = {}, {}, {}
    for fam in families:
        spec = resolve_spec(cfg, inputs.obs, fam)
        fit, block = _fit_block(spec, inputs.obs, level)
        fits[fam.value] = fit.as_dict()
        blocks[fam.value] = block
        for s in spec.strata:
            est = ltrc_product_limit([o for o in inputs.obs if o.in_fit and o.group == s], quiet=True)
            if est.jump_times.size:
                outputs[f"plotpoints_{fam.value}_{s}.csv"] = points_csv(plot_points(est, fam))
    notes = []
    for s in sorted({o.group for o in inputs.obs if o.in_fit}):
        est = ltrc_product_limit([o for o in inputs.obs if o.in_fit and o.group == s], quiet=True)
        outputs[f"nonparametric_{s}.csv"] = step_csv(est)
        notes.extend(f"{s}: {n}" for n in est.warnings)
    report = {
        "manifest": MANIFEST,
        "config_hash": inputs.hash,
        "families": blocks,
        "loglik": {f: b["loglik"] for f, b in blocks.items()},
        "derivation": inputs.report,
        "nonparametric_notes": notes,
    }
    outputs["fit_report.json"] = dumps(report)
    outputs["fit.json"] = dumps({"manifest": MANIFEST, "config_hash": inputs.hash, "primary": families[0].value, "fits": _nan_safe(fits)})
    return outputs


def load_fit(path, expected_hash: str | None = None, family: str | None = None) -> FitResult:
    doc = json.loads(Path(path).read_text())
    if expected_hash is not None and doc.get("config_hash") != expected_hash:
        raise StaleArtifactError(f"{path}: fit artifact was made from different data or config")
    fam = family or doc["primary"]
    if fam not in doc["fits"]:
        raise StaleArtifactError(f"{path}: no {fam} fit in the artifact")
    d = dict(doc["fits"][fam])
    d["covariance"] = [[np.nan if x is None else x for x in row] for row in d["covariance"]]
    return FitResult.from_dict(d)


# -- bootstrap --------------------------------------------------------------


def cmd_bootstrap(inputs: Inputs, fit: FitResult, seed: int, jobs: int = 1) -> dict:
    cfg = inputs.config
    ens = run_bootstrap(
        fit.spec, _fit_obs(fit.spec, inputs.obs), WeightLaw.parse(cfg.bootstrap.weight_law),
        cfg.bootstrap.replicates, seed, base_fit=fit, jobs=jobs, config_hash=inputs.hash,
    )
    doc = _nan_safe(ens.as_dict())
    doc["manifest"] = MANIFEST
    return {"ensemble.json": dumps(doc)}


def load_ensemble(path, expected_hash: str | None = None) -> BootstrapEnsemble:
    doc = json.loads(Path(path).read_text())
    if expected_hash is not None and doc.get("config_hash") != expected_hash:
        raise StaleArtifactError(f"{path}: ensemble was made from different data or config")
    bf = doc["base_fit"]
    bf["covariance"] = [[np.nan if x is None else x for x in row] for row in bf["covariance"]]
    return BootstrapEnsemble.from_dict(doc)


# -- predict ----------------------------------------------------------------


def _slug(label: str) -> str:
    return "".join(c if c.isalnum() or c in "._-" else "_" for c in label)


def cmd_predict(inputs: Inputs, fit: FitResult, ens: BootstrapEnsemble, seed: int, levels=None) -> dict:
    cfg = inputs.config
    levels = tuple(levels or cfg.predict.levels)
    pred_obs = [o for o in inputs.obs if o.predict_group in fit.spec.strata]
    preds = predict_fleet(pred_obs, fit, ens, IntervalSpec(levels[0]), seed)
    outputs = {
        "predictions_individual.csv": predictions_csv(preds),
        "predictions_plot.json": predictions_plot_json(preds, levels[0]) + "\n",
    }
    riskset = RiskSet.from_observations(pred_obs)
    grid = ForecastGrid(cfg.study.data_freeze, cfg.predict.horizon_months)
    kw = dict(method=cfg.predict.method, exact_threshold=cfg.predict.exact_threshold)
    combined = forecast(riskset, fit, ens, grid, levels, seed, **kw)
    outputs["forecast_combined.csv"] = combined.to_csv()
    summary = {"combined": combined.summary(), "groups": {}, "manufacturers": {}}
    for g in sorted({u.predict_group for u in riskset.units}):
        fc = forecast(riskset.filter(groups={g}), fit, ens, grid, levels, seed, **kw)
        outputs[f"forecast_group_{_slug(g)}.csv"] = fc.to_csv()
        summary["groups"][g] = fc.summary()
    for m in sorted({u.manufacturer for u in riskset.units}):
        fc = forecast(riskset.filter(manufacturers={m}), fit, ens, grid, levels, seed, **kw)
        outputs[f"forecast_manufacturer_{_slug(m)}.csv"] = fc.to_csv()
        summary["manufacturers"][m] = fc.summary()
    summary.update(
        manifest=MANIFEST,
        config_hash=inputs.hash,
        levels=list(levels),
        n_individual=len(preds),
        imminent_risk=[p.serial for p in preds if "imminent-risk" in p.flags],
    )
    outputs["predict_summary.json"] = dumps(summary)
    return outputs


# -- backtest ---------------------------------------------------------------


def default_pseudo_freeze(study, fraction: float = 0.6) -> dt.date:
    span = (study.data_freeze - study.truncation_epoch).days
    return study.truncation_epoch + dt.timedelta(days=int(round(fraction * span)))


def _np_fraction(estimates: dict, units, elapsed) -> np.ndarray:
    """Mean over entered units of 1 - S(t_w) / S(t_i), S the product-limit estimate."""
    out = np.zeros(len(elapsed))
    for j, e in enumerate(elapsed):
        total, n = 0.0, 0
        for u in units:
            if e < u.entry_offset:
                continue
            est = estimates[u.predict_group]
            s0 = float(est.survival_at(u.current_age))
            sw = float(est.survival_at(u.current_age + (e - u.entry_offset)))
            total += 1.0 if s0 <= 0 else 1.0 - sw / s0
            n += 1
        out[j] = total / n if n else 0.0
    return out


def cmd_backtest(inputs: Inputs, data_path, pseudo_freeze: dt.date | None, seed: int, jobs: int = 1, level: float = 0.90) -> dict:
    cfg = inputs.config
    study = cfg.study
    pf = pseudo_freeze or default_pseudo_freeze(study)
    if not (study.truncation_epoch < pf <= study.data_freeze):
        raise DataError(f"pseudo-freeze {pf} must lie after {study.truncation_epoch} and not after {study.data_freeze}")
    doc = {"manifest": MANIFEST, "config_hash": inputs.hash, "pseudo_freeze": pf.isoformat(),
           "data_freeze": study.data_freeze.isoformat(), "level": level, "notes": []}
    if pf == study.data_freeze:
        doc["notes"].append("degenerate holdout window: pseudo-freeze equals the data freeze")
        doc["dates"] = []
        return {"backtest.json": dumps(doc)}
    early = [r for r in inputs.records if r.install_date <= pf]
    view = study.replace(data_freeze=pf)
    obs_pf = stratify(derive_observations(early, view), view)
    spec = resolve_spec(cfg, obs_pf, cfg.model.families[0])
    fit_obs = _fit_obs(spec, obs_pf)
    fit = fit_mle(spec, fit_obs)
    _require_converged(fit, "pre-freeze fit")
    ens = run_bootstrap(spec, fit_obs, WeightLaw.parse(cfg.bootstrap.weight_law), cfg.bootstrap.replicates,
                        seed, base_fit=fit, jobs=jobs)
    full = {o.serial: o for o in inputs.obs}
    entries = []
    for r in inputs.records:
        if r.install_date > pf and r.serial in full:
            o = full[r.serial]
            if o.predict_group in spec.strata:
                entries.append(RiskUnit(o.serial, o.predict_group, dict(o.covariates), 0.0,
                                        years_between(pf, r.install_date), o.predict_group))
    at_risk = [o for o in obs_pf if o.predict_group in spec.strata]
    riskset = RiskSet.from_observations(at_risk, entries)
    grid = ForecastGrid.until(pf, study.data_freeze)
    fc = forecast(riskset, fit, ens, grid, (level,), seed, method=cfg.predict.method,
                  exact_threshold=cfg.predict.exact_threshold)
    estimates = {
        g: ltrc_product_limit([o for o in inputs.obs if o.in_fit and o.group == g], quiet=True)
        for g in sorted({u.predict_group for u in riskset.units})
    }
    elapsed = grid.elapsed_years
    nonpar = _np_fraction(estimates, riskset.units, elapsed)
    # realized failures among the risk set, from the full records
    fail_at = []
    for u in riskset.units:
        o = full.get(u.serial)
        if o is not None and o.delta == 1:
            fail_at.append(u.entry_offset + o.age - u.current_age)
    fail_at = np.sort(np.array(fail_at))
    realized = np.searchsorted(fail_at, elapsed, side="right")
    n_at = np.maximum(fc.n_at_risk, 1)
    lo, hi = (np.asarray(b) / n_at for b in fc.calibrated[level])
    width = hi - lo
    inside = (nonpar >= lo - 1e-12) & (nonpar <= hi + 1e-12)
    rows = []
    for j, d in enumerate(grid.dates):
        rows.append({
            "date": d.isoformat(), "n_at_risk": int(fc.n_at_risk[j]),
            "predicted_fraction": float(fc.mu[j] / n_at[j]),
            "band_lo": float(lo[j]), "band_hi": float(hi[j]),
            "nonparametric_fraction": float(nonpar[j]),
            "realized_fraction": float(realized[j] / n_at[j]),
        })
    doc.update(
        dates=rows,
        n_entries=len(entries),
        risk_set_size=riskset.size,
        fit=_nan_safe(fit.report()),
        nonparametric_inside_fraction=float(inside[1:].mean()) if len(inside) > 1 else 1.0,
        realized_inside_fraction=float(((realized / n_at >= lo) & (realized / n_at <= hi))[1:].mean()) if len(inside) > 1 else 1.0,
        band_width_decreases=int(np.sum(np.diff(width) < -1e-12)),
    )
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    keys = list(rows[0])
    w.writerow(keys)
    for r in rows:
        w.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])
    return {"backtest.json": dumps(doc), "backtest.csv": out.getvalue()}


# -- sensitivity ------------------------------------------------------------


def cmd_sensitivity(inputs: Inputs, data_path, axis: str, seed: int, jobs: int = 1,
                    cutting_years=None, families=None, level: float = 0.90) -> dict:
    """One forecast per perturbation with deltas against the configured baseline.

    The family axis refits and re-bootstraps each family (calibrated bands);
    the cutting-year axis re-stratifies and reports point and plug-in forecasts.
    """
    cfg = inputs.config
    grid = ForecastGrid(cfg.study.data_freeze, cfg.predict.horizon_months)
    kw = dict(method=cfg.predict.method, exact_threshold=cfg.predict.exact_threshold)
    variants = {}
    if axis == "family":
        from .distributions import Family

        fams = [Family.parse(f) for f in (families or ("weibull", "lognormal"))]
        baseline = cfg.model.families[0].value
        if baseline not in [f.value for f in fams]:
            fams.insert(0, cfg.model.families[0])
        for fam in fams:
            try:
                spec = resolve_spec(cfg, inputs.obs, fam)
                fit_obs = _fit_obs(spec, inputs.obs)
                fit = fit_mle(spec, fit_obs)
                _require_converged(fit, f"{fam.value} fit")
                ens = run_bootstrap(spec, fit_obs, WeightLaw.parse(cfg.bootstrap.weight_law),
                                    cfg.bootstrap.replicates, seed, base_fit=fit, jobs=jobs)
                rs = RiskSet.from_observations([o for o in inputs.obs if o.predict_group in spec.strata])
                fc = forecast(rs, fit, ens, grid, (level,), seed, **kw)
                variants[fam.value] = {"loglik": fit.loglik, "mu_K": fc.mu.tolist(),
                                       "cal_lo": fc.calibrated[level][0].tolist(), "cal_hi": fc.calibrated[level][1].tolist()}
            except (FitError, DataError, ValueError) as exc:
                variants[fam.value] = {"error": f"{type(exc).__name__}: {exc}"}
    elif axis == "cutting_year":
        years = list(cutting_years or [cfg.study.cutting_year])
        installs = [r.install_date.year for r in inputs.records]
        bad = [y for y in years if not (min(installs) <= y <= max(installs))]
        if bad:
            raise DataError(f"cutting year(s) {bad} outside install years {min(installs)}-{max(installs)}")
        baseline = str(cfg.study.cutting_year)
        if cfg.study.cutting_year not in years:
            years.insert(0, cfg.study.cutting_year)
        for y in years:
            try:
                study = cfg.study.replace(cutting_year=int(y))
                obs = stratify(derive_observations(inputs.records, study), study)
                spec = resolve_spec(dataclasses.replace(cfg, study=study), obs, cfg.model.families[0])
                fit = fit_mle(spec, _fit_obs(spec, obs))
                _require_converged(fit, f"cutting year {y}")
                rs = RiskSet.from_observations([o for o in obs if o.predict_group in spec.strata])
                fc = forecast(rs, fit, None, grid, (level,), seed, **kw)
                variants[str(y)] = {"loglik": fit.loglik, "mu_K": fc.mu.tolist(),
                                    "naive_lo": fc.naive[level][0].tolist(), "naive_hi": fc.naive[level][1].tolist()}
            except (FitError, DataError, ValueError) as exc:
                variants[str(y)] = {"error": f"{type(exc).__name__}: {exc}"}
    else:
        raise ConfigError(f"unknown sensitivity axis {axis!r}")
    if "error" in variants.get(baseline, {}):
        raise FitError(f"baseline variant failed: {variants[baseline]['error']}")
    base_mu = np.array(variants[baseline]["mu_K"])
    for v in variants.values():
        if "mu_K" in v:
            delta = np.array(v["mu_K"]) - base_mu
            v["delta_mu_K"] = delta.tolist()
            v["final_mu_K"] = v["mu_K"][-1]
            v["final_delta"] = float(delta[-1])
    doc = {"manifest": MANIFEST, "config_hash": inputs.hash, "axis": axis, "baseline": baseline,
           "dates": [d.isoformat() for d in grid.dates], "level": level, "variants": variants}
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    names = [k for k, v in variants.items() if "mu_K" in v]
    w.writerow(["date"] + [f"mu_K[{k}]" for k in names])
    for j, d in enumerate(grid.dates):
        w.writerow([d.isoformat()] + [repr(float(variants[k]["mu_K"][j])) for k in names])
    return {f"sensitivity_{axis}.json": dumps(doc), f"sensitivity_{axis}.csv": out.getvalue()}


# -- simulate ---------------------------------------------------------------


COVERAGE_KEYS = tuple(f.name for f in dataclasses.fields(CoverageConfig))


def cmd_simulate(config: PipelineConfig, seed: int | None = None, jobs: int = 1) -> dict:
    from .data import write_fleet_csv

    sc = scenario_from_config(config)
    if seed is not None:
        sc = sc.replace(seed=int(seed))
    fleet = generate_fleet(sc)
    outputs = {"fleet.csv": write_fleet_csv(fleet.records)}
    truth = {"manifest": MANIFEST, "scenario": sc.as_dict(), "discarded_unobservable": fleet.discarded,
             "n_records": len(fleet.records)}
    outputs["truth.json"] = dumps(truth)
    cov = (config.scenario or {}).get("coverage")
    if cov:
        extra = set(cov) - set(COVERAGE_KEYS)
        if extra:
            raise ConfigError(f"unknown key(s) in [scenario.coverage]: {', '.join(sorted(extra))}")
        cc = CoverageConfig(**{**cov, "seed": int(cov.get("seed", sc.seed)), "jobs": jobs})
        rep = coverage_study(sc, cc)
        doc = json.loads(rep.to_json())
        doc["config"].pop("jobs", None)
        doc["manifest"] = MANIFEST
        outputs["coverage.json"] = dumps(doc)
        outputs["coverage.csv"] = rep.to_csv()
    return outputs
