"""Study and pipeline configuration files (TOML).

Top-level keys are the :class:`StudyConfig` fields.  Optional tables:

``[model]``      family (weibull | lognormal | both), strata, location_formula,
                 shape_classes
``[bootstrap]``  replicates, weight_law
``[predict]``    levels, horizon_months, method, exact_threshold
``[scenario]``   simulation settings, read by :mod:`fleetlife.simulation`

Unknown keys are rejected so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .data import DEFAULT_MERGE_RULES, StudyConfig
from .distributions import Family

__all__ = ["ConfigError", "ModelConfig", "BootstrapConfig", "PredictConfig", "PipelineConfig", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


STUDY_KEYS = (
    "data_freeze", "truncation_epoch", "cutting_year", "early_failure_exclusion_years",
    "group_merge_rules", "fit_exclusions", "prediction_reassignments",
)


@dataclass(frozen=True)
class ModelConfig:
    family: str = "weibull"
    strata: tuple | None = None
    location_formula: dict = field(default_factory=dict)
    shape_classes: dict | None = None

    @property
    def families(self) -> tuple:
        if self.family == "both":
            return (Family.WEIBULL, Family.LOGNORMAL)
        return (Family.parse(self.family),)


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 2000
    weight_law: str = "GammaUnit"


@dataclass(frozen=True)
class PredictConfig:
    levels: tuple = (0.90, 0.95)
    horizon_months: int = 120
    method: str = "volkova"
    exact_threshold: int = 2000


@dataclass(frozen=True)
class PipelineConfig:
    study: StudyConfig
    model: ModelConfig = ModelConfig()
    bootstrap: BootstrapConfig = BootstrapConfig()
    predict: PredictConfig = PredictConfig()
    scenario: dict | None = None
    raw: dict = field(default_factory=dict, compare=False)

    def digest(self) -> str:
        """Stable hash of the resolved settings."""
        payload = json.dumps(_jsonable(self.raw), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (dt.date, dt.datetime)):
        return x.isoformat()
    return x


def _date(value, key):
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError:
        raise ConfigError(f"{key}: not an ISO date: {value!r}") from None


def _check_keys(table: dict, allowed, where: str):
    extra = sorted(set(table) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def _merge_rules(value):
    rules = []
    for item in value:
        if isinstance(item, dict):
            _check_keys(item, ("sources", "label"), "group_merge_rules")
            rules.append((tuple(item["sources"]), str(item["label"])))
        else:
            src, dst = item
            rules.append((tuple(src), str(dst)))
    return tuple(rules)


def parse_config(doc: dict) -> PipelineConfig:
    tables = ("model", "bootstrap", "predict", "scenario")
    _check_keys(doc, STUDY_KEYS + tables, "config")
    if "data_freeze" not in doc:
        raise ConfigError("data_freeze is required")
    study = {"data_freeze": _date(doc["data_freeze"], "data_freeze")}
    if "truncation_epoch" in doc:
        study["truncation_epoch"] = _date(doc["truncation_epoch"], "truncation_epoch")
    if "cutting_year" in doc:
        study["cutting_year"] = int(doc["cutting_year"])
    if "early_failure_exclusion_years" in doc:
        v = doc["early_failure_exclusion_years"]
        # 0 or a negative value disables the exclusion
        study["early_failure_exclusion_years"] = float(v) if v and float(v) > 0 else None
    study["group_merge_rules"] = _merge_rules(doc.get("group_merge_rules", DEFAULT_MERGE_RULES))
    study["fit_exclusions"] = frozenset(doc.get("fit_exclusions", ()))
    study["prediction_reassignments"] = dict(doc.get("prediction_reassignments", {}))
    try:
        study_cfg = StudyConfig(**study)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    m = doc.get("model", {})
    _check_keys(m, ("family", "strata", "location_formula", "shape_classes"), "[model]")
    family = str(m.get("family", "weibull")).lower()
    if family != "both":
        try:
            Family.parse(family)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    model = ModelConfig(
        family=family,
        strata=tuple(m["strata"]) if "strata" in m else None,
        location_formula={k: tuple(v) for k, v in m.get("location_formula", {}).items()},
        shape_classes={k: tuple(v) for k, v in m["shape_classes"].items()} if "shape_classes" in m else None,
    )

    b = doc.get("bootstrap", {})
    _check_keys(b, ("replicates", "weight_law"), "[bootstrap]")
    boot = BootstrapConfig(replicates=int(b.get("replicates", 2000)), weight_law=str(b.get("weight_law", "GammaUnit")))
    if boot.replicates < 1:
        raise ConfigError("bootstrap.replicates must be >= 1")

    p = doc.get("predict", {})
    _check_keys(p, ("levels", "horizon_months", "method", "exact_threshold"), "[predict]")
    pred = PredictConfig(
        levels=tuple(float(x) for x in p.get("levels", (0.90, 0.95))),
        horizon_months=int(p.get("horizon_months", 120)),
        method=str(p.get("method", "volkova")),
        exact_threshold=int(p.get("exact_threshold", 2000)),
    )
    if pred.method not in ("volkova", "exact"):
        raise ConfigError(f"predict.method must be volkova or exact, not {pred.method!r}")
    if not pred.levels or any(not (0 < lv < 1) for lv in pred.levels):
        raise ConfigError("predict.levels must lie in (0, 1)")
    return PipelineConfig(study_cfg, model, boot, pred, doc.get("scenario"), raw=doc)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(doc)
