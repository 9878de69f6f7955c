"""Fleet records, derived left-truncated/right-censored observations, strata."""

from __future__ import annotations

import csv
import dataclasses
import datetime as dt
import io
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

__all__ = [
    "DataError",
    "RawRecord",
    "LifetimeObservation",
    "StudyConfig",
    "DerivationReport",
    "DAYS_PER_YEAR",
    "FLEET_COLUMNS",
    "years_between",
    "parse_fleet_csv",
    "write_fleet_csv",
    "derive_observations",
    "stratify",
    "write_observations_csv",
    "read_observations_csv",
]

DAYS_PER_YEAR = 365.25
FLEET_COLUMNS = ("serial", "manufacturer", "install_date", "fail_date", "insulation", "cooling")
INSULATION_LEVELS = ("d55", "d65")
COOLING_LEVELS = ("NINE", "NIFE", "FIFE")
UNKNOWN = "unknown"
DEFAULT_MERGE_RULES = ((("MC_New", "ME_New", "Other_New"), "MC.ME.Other_New"),)


class DataError(ValueError):
    """Invalid input data; carries the offending row number when known."""

    def __init__(self, message: str, row: int | None = None):
        self.row = row
        super().__init__(f"row {row}: {message}" if row is not None else message)


@dataclass(frozen=True)
class RawRecord:
    serial: str
    manufacturer: str
    install_date: dt.date
    fail_date: dt.date | None
    insulation: str = UNKNOWN
    cooling: str = UNKNOWN

    @property
    def failed(self) -> bool:
        return self.fail_date is not None


@dataclass(frozen=True)
class LifetimeObservation:
    """One unit's age data.

    ``age`` is the failure age when ``delta == 1`` and the censoring age
    otherwise.  ``nu == 0`` marks a left-truncated unit, entering the
    sample at age ``tau_L``.
    """

    serial: str
    age: float
    delta: int
    nu: int
    tau_L: float | None
    covariates: dict = field(default_factory=dict)
    group: str = ""
    install_date: dt.date | None = None
    predict_group: str = ""
    in_fit: bool = True
    flags: tuple = ()

    def __post_init__(self):
        if self.delta not in (0, 1) or self.nu not in (0, 1):
            raise DataError(f"{self.serial}: delta and nu must be 0 or 1")
        if not (self.age >= 0 and self.age < float("inf")):
            raise DataError(f"{self.serial}: age must be finite and >= 0")
        if self.nu == 0:
            if self.tau_L is None or not self.tau_L >= 0 or not self.age > self.tau_L:
                raise DataError(f"{self.serial}: truncated unit needs 0 <= tau_L < age")
        elif self.tau_L is not None:
            raise DataError(f"{self.serial}: tau_L given for an untruncated unit")

    @property
    def entry_age(self) -> float:
        return self.tau_L if self.nu == 0 else 0.0

    @property
    def manufacturer(self) -> str:
        return self.covariates.get("manufacturer", "")


@dataclass(frozen=True)
class StudyConfig:
    data_freeze: dt.date
    truncation_epoch: dt.date = dt.date(1980, 1, 1)
    cutting_year: int = 1987
    # failures younger than this are flagged and left out of fitting; None disables
    early_failure_exclusion_years: float | None = 5.0
    group_merge_rules: tuple = DEFAULT_MERGE_RULES
    fit_exclusions: frozenset = frozenset()
    prediction_reassignments: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.truncation_epoch > self.data_freeze:
            raise ValueError("truncation_epoch must not be after data_freeze")
        rules = tuple((tuple(src), str(dst)) for src, dst in self.group_merge_rules)
        object.__setattr__(self, "group_merge_rules", rules)
        object.__setattr__(self, "fit_exclusions", frozenset(self.fit_exclusions))
        object.__setattr__(self, "prediction_reassignments", dict(self.prediction_reassignments))

    def replace(self, **changes) -> "StudyConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class DerivationReport:
    n_records: int = 0
    dropped_unobservable: list = field(default_factory=list)
    early_failures: list = field(default_factory=list)
    zero_age: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_dropped_unobservable": len(self.dropped_unobservable),
            "dropped_unobservable": list(self.dropped_unobservable),
            "early_failures": list(self.early_failures),
            "zero_age": list(self.zero_age),
        }


def years_between(start: dt.date, end: dt.date) -> float:
    return (end - start).days / DAYS_PER_YEAR


# -- CSV ingest -------------------------------------------------------------


def _normalize_category(value: str, levels: Sequence[str], name: str, row: int) -> str:
    v = (value or "").strip()
    for level in levels:
        if v.lower() == level.lower():
            return level
    if v and v.lower() != UNKNOWN:
        warnings.warn(f"row {row}: unrecognized {name} {v!r} mapped to 'unknown'", stacklevel=3)
    return UNKNOWN


def _parse_date(value: str, column: str, row: int) -> dt.date:
    try:
        return dt.date.fromisoformat(value.strip())
    except ValueError:
        raise DataError(f"malformed {column} {value!r}", row) from None


def parse_fleet_csv(source) -> list[RawRecord]:
    """Parse the canonical fleet CSV from text, bytes, a path-like or a file."""
    if isinstance(source, bytes):
        source = source.decode("utf-8-sig")
    if isinstance(source, str):
        handle = io.StringIO(source)
    elif hasattr(source, "read"):
        handle = source
    else:
        with open(source, newline="", encoding="utf-8-sig") as fh:
            return parse_fleet_csv(fh.read())

    reader = csv.DictReader(handle)
    header = [h.strip() for h in (reader.fieldnames or [])]
    missing = [c for c in FLEET_COLUMNS if c not in header]
    if missing:
        raise DataError(f"missing required column(s): {', '.join(missing)}", 1)
    extra = [c for c in header if c not in FLEET_COLUMNS]
    if extra:
        raise DataError(f"unexpected column(s): {', '.join(extra)}", 1)
    reader.fieldnames = header

    records: list[RawRecord] = []
    seen: dict[str, int] = {}
    for row_no, row in enumerate(reader, start=2):
        if not any((v or "").strip() for v in row.values()):
            continue
        serial = (row["serial"] or "").strip()
        if not serial:
            raise DataError("empty serial", row_no)
        if serial in seen:
            raise DataError(f"duplicate serial {serial!r} (first seen at row {seen[serial]})", row_no)
        seen[serial] = row_no
        manufacturer = (row["manufacturer"] or "").strip()
        if not manufacturer:
            raise DataError("empty manufacturer", row_no)
        install = _parse_date(row["install_date"] or "", "install_date", row_no)
        fail_raw = (row["fail_date"] or "").strip()
        fail = _parse_date(fail_raw, "fail_date", row_no) if fail_raw else None
        if fail is not None and fail < install:
            raise DataError(f"fail_date {fail} precedes install_date {install}", row_no)
        records.append(
            RawRecord(
                serial=serial,
                manufacturer=manufacturer,
                install_date=install,
                fail_date=fail,
                insulation=_normalize_category(row["insulation"], INSULATION_LEVELS, "insulation", row_no),
                cooling=_normalize_category(row["cooling"], COOLING_LEVELS, "cooling", row_no),
            )
        )
    return records


def write_fleet_csv(records: Iterable[RawRecord]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(FLEET_COLUMNS)
    for r in records:
        writer.writerow([
            r.serial,
            r.manufacturer,
            r.install_date.isoformat(),
            r.fail_date.isoformat() if r.fail_date else "",
            r.insulation,
            r.cooling,
        ])
    return out.getvalue()


# -- derivation and stratification -----------------------------------------


def derive_observations(records: Sequence[RawRecord], cfg: StudyConfig, return_report: bool = False):
    """Turn calendar records into ages relative to the freeze and the epoch.

    Failures after ``cfg.data_freeze`` are censored at the freeze.  Units
    that failed before the truncation epoch could never have been recorded
    and are dropped.
    """
    report = DerivationReport(n_records=len(records))
    obs: list[LifetimeObservation] = []
    freeze, epoch = cfg.data_freeze, cfg.truncation_epoch
    for r in records:
        if r.install_date > freeze:
            raise DataError(f"{r.serial}: installed {r.install_date}, after data_freeze {freeze}")
        truncated = r.install_date < epoch
        failed = r.fail_date is not None and r.fail_date <= freeze
        if failed and (r.fail_date < epoch or (truncated and r.fail_date == epoch)):
            report.dropped_unobservable.append(r.serial)
            continue
        end = r.fail_date if failed else freeze
        age = years_between(r.install_date, end)
        if failed and age <= 0:
            raise DataError(f"{r.serial}: failure at age 0")
        flags = []
        in_fit = True
        if not failed and age == 0:
            flags.append("zero_age")
            report.zero_age.append(r.serial)
        limit = cfg.early_failure_exclusion_years
        if failed and limit is not None and age < limit:
            flags.append("early_failure")
            report.early_failures.append(r.serial)
            in_fit = False
        obs.append(
            LifetimeObservation(
                serial=r.serial,
                age=age,
                delta=int(failed),
                nu=0 if truncated else 1,
                tau_L=years_between(r.install_date, epoch) if truncated else None,
                covariates={
                    "manufacturer": r.manufacturer,
                    "insulation": r.insulation,
                    "cooling": r.cooling,
                },
                install_date=r.install_date,
                in_fit=in_fit,
                flags=tuple(flags),
            )
        )
    return (obs, report) if return_report else obs


def _merged_label(label: str, rules) -> list[str]:
    lineage = [label]
    for sources, target in rules:
        if lineage[-1] in sources:
            lineage.append(target)
    return lineage


def stratify(obs: Sequence[LifetimeObservation], cfg: StudyConfig) -> list[LifetimeObservation]:
    """Assign manufacturer x Old/New groups, merges, exclusions, reassignments.

    The ``subgroup`` covariate keeps the label one merge step below the
    final group (e.g. ``MA_New`` inside a merged ``New`` stratum) so that
    regressions can contrast the merged components.
    """
    years = [o.install_date.year for o in obs if o.install_date is not None]
    if years and not (min(years) <= cfg.cutting_year <= max(years)):
        raise DataError(
            f"cutting_year {cfg.cutting_year} outside observed install years {min(years)}-{max(years)}"
        )
    out = []
    for o in obs:
        if o.install_date is None:
            raise DataError(f"{o.serial}: install_date required for stratification")
        era = "Old" if o.install_date.year < cfg.cutting_year else "New"
        lineage = _merged_label(f"{o.manufacturer}_{era}", cfg.group_merge_rules)
        group = lineage[-1]
        covariates = dict(o.covariates)
        covariates["subgroup"] = lineage[-2] if len(lineage) > 1 else group
        in_fit = o.in_fit and group not in cfg.fit_exclusions
        predict_group = group
        if group in cfg.fit_exclusions:
            if group not in cfg.prediction_reassignments:
                raise DataError(f"{o.serial}: group {group!r} is excluded from the fit and has no reassignment")
            predict_group = cfg.prediction_reassignments[group]
        out.append(dataclasses.replace(o, group=group, predict_group=predict_group, covariates=covariates, in_fit=in_fit))
    return out


# -- observation CSV round trip --------------------------------------------

OBS_COLUMNS = (
    "serial", "install_date", "age", "delta", "nu", "tau_L", "manufacturer", "insulation",
    "cooling", "subgroup", "group", "predict_group", "in_fit", "flags",
)


def write_observations_csv(obs: Iterable[LifetimeObservation]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(OBS_COLUMNS)
    for o in obs:
        cov = o.covariates
        writer.writerow([
            o.serial,
            o.install_date.isoformat() if o.install_date else "",
            repr(o.age),
            o.delta,
            o.nu,
            "" if o.tau_L is None else repr(o.tau_L),
            cov.get("manufacturer", ""),
            cov.get("insulation", ""),
            cov.get("cooling", ""),
            cov.get("subgroup", ""),
            o.group,
            o.predict_group,
            int(o.in_fit),
            ";".join(o.flags),
        ])
    return out.getvalue()


def read_observations_csv(text: str) -> list[LifetimeObservation]:
    obs = []
    for row in csv.DictReader(io.StringIO(text)):
        cov = {k: row[k] for k in ("manufacturer", "insulation", "cooling") if row[k] != ""}
        if row["subgroup"]:
            cov["subgroup"] = row["subgroup"]
        obs.append(
            LifetimeObservation(
                serial=row["serial"],
                age=float(row["age"]),
                delta=int(row["delta"]),
                nu=int(row["nu"]),
                tau_L=float(row["tau_L"]) if row["tau_L"] else None,
                covariates=cov,
                group=row["group"],
                install_date=dt.date.fromisoformat(row["install_date"]) if row["install_date"] else None,
                predict_group=row["predict_group"],
                in_fit=bool(int(row["in_fit"])),
                flags=tuple(f for f in row["flags"].split(";") if f),
            )
        )
    return obs
