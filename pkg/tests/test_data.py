import datetime as dt
import warnings

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fleetlife.data import (
    DataError,
    RawRecord,
    StudyConfig,
    derive_observations,
    parse_fleet_csv,
    read_observations_csv,
    stratify,
    write_fleet_csv,
    write_observations_csv,
    years_between,
)

HEADER = "serial,manufacturer,install_date,fail_date,insulation,cooling\n"
D = dt.date


def rec(serial, mfr, install, fail=None, ins="d55", cool="NINE"):
    return RawRecord(serial, mfr, install, fail, ins, cool)


def study(**kw):
    kw.setdefault("data_freeze", D(2008, 3, 1))
    kw.setdefault("early_failure_exclusion_years", None)
    return StudyConfig(**kw)


# -- parsing ------------------------------------------------------------------

def test_parse_failed_and_censored_rows():
    text = HEADER + "X1,MA,1995-06-01,2004-03-15,d65,FIFE\nX2,MB,1959-01-01,,d55,NINE\n"
    r1, r2 = parse_fleet_csv(text)
    assert r1 == RawRecord("X1", "MA", D(1995, 6, 1), D(2004, 3, 15), "d65", "FIFE")
    assert r2.fail_date is None and not r2.failed
    assert r2.insulation == "d55" and r2.cooling == "NINE"


def test_fail_before_install_names_row():
    text = HEADER + "X1,MA,1995-06-01,,d65,FIFE\nX2,MA,1995-06-01,1990-01-01,d65,FIFE\n"
    with pytest.raises(DataError) as info:
        parse_fleet_csv(text)
    assert info.value.row == 3
    assert "row 3" in str(info.value)


@pytest.mark.parametrize(
    "body, fragment",
    [
        ("X1,MA,1995-13-01,,d65,FIFE\n", "install_date"),
        ("X1,MA,1995-06-01,,d65,FIFE\nX1,MA,1996-06-01,,d65,FIFE\n", "duplicate"),
        ("X1,,1995-06-01,,d65,FIFE\n", "manufacturer"),
        (",MA,1995-06-01,,d65,FIFE\n", "serial"),
        ("X1,MA,1995-06-01,2001-02-30,d65,FIFE\n", "fail_date"),
    ],
)
def test_bad_rows_rejected(body, fragment):
    with pytest.raises(DataError, match=fragment):
        parse_fleet_csv(HEADER + body)


def test_missing_and_extra_columns():
    with pytest.raises(DataError, match="cooling"):
        parse_fleet_csv("serial,manufacturer,install_date,fail_date,insulation\n")
    with pytest.raises(DataError, match="colour"):
        parse_fleet_csv(HEADER.strip() + ",colour\n")


def test_unknown_category_warns_and_maps_to_unknown():
    with pytest.warns(UserWarning, match="insulation"):
        (r,) = parse_fleet_csv(HEADER + "X1,MA,1995-06-01,,d99,fife\n")
    assert r.insulation == "unknown"
    assert r.cooling == "FIFE"


def test_blank_category_is_silent_unknown():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        (r,) = parse_fleet_csv(HEADER + "X1,MA,1995-06-01,,,\n")
    assert (r.insulation, r.cooling) == ("unknown", "unknown")


def test_parse_accepts_bytes_with_bom_and_paths(tmp_path):
    text = HEADER + "X1,MA,1995-06-01,,d65,FIFE\n"
    assert parse_fleet_csv(("﻿" + text).encode()) == parse_fleet_csv(text)
    p = tmp_path / "fleet.csv"
    p.write_text(text)
    assert parse_fleet_csv(p) == parse_fleet_csv(text)


# -- derivation ---------------------------------------------------------------

def test_truncated_censored_unit():
    (o,) = derive_observations([rec("A", "MA", D(1970, 1, 1))], study())
    assert (o.nu, o.delta) == (0, 0)
    # day counts: 3652 and 13939 days
    assert o.tau_L == pytest.approx(3652 / 365.25, abs=1e-12)
    assert o.tau_L == pytest.approx(10.0, abs=2e-3)
    assert o.age == pytest.approx(13939 / 365.25, abs=1e-12)
    assert o.age == pytest.approx(38.16, abs=5e-3)


def test_untruncated_failure_age():
    (o,) = derive_observations([rec("A", "MA", D(1995, 6, 1), D(2004, 3, 15))], study())
    assert (o.nu, o.delta, o.tau_L) == (1, 1, None)
    assert o.age == pytest.approx(3210 / 365.25, abs=1e-12)
    assert round(o.age, 2) == 8.79


def test_pre_epoch_failure_dropped():
    obs, report = derive_observations(
        [rec("A", "MA", D(1975, 1, 1), D(1978, 1, 1)), rec("B", "MA", D(1975, 1, 1))],
        study(),
        return_report=True,
    )
    assert [o.serial for o in obs] == ["B"]
    assert report.dropped_unobservable == ["A"]
    assert report.as_dict()["n_dropped_unobservable"] == 1


def test_failure_after_freeze_is_censored_at_freeze():
    (o,) = derive_observations([rec("A", "MA", D(1990, 1, 1), D(2009, 1, 1))], study())
    assert o.delta == 0
    assert o.age == pytest.approx(years_between(D(1990, 1, 1), D(2008, 3, 1)))


def test_install_after_freeze_rejected():
    with pytest.raises(DataError, match="after data_freeze"):
        derive_observations([rec("A", "MA", D(2009, 1, 1))], study())


def test_zero_age_censored_unit_flagged():
    obs, report = derive_observations([rec("A", "MA", D(2008, 3, 1))], study(), return_report=True)
    assert obs[0].age == 0.0 and "zero_age" in obs[0].flags
    assert report.zero_age == ["A"]


def test_early_failures_flagged_and_left_out():
    records = [rec("A", "MA", D(2000, 1, 1), D(2002, 1, 1)), rec("B", "MA", D(1990, 1, 1), D(2002, 1, 1))]
    obs = derive_observations(records, study(early_failure_exclusion_years=5.0))
    assert [o.in_fit for o in obs] == [False, True]
    assert "early_failure" in obs[0].flags
    obs = derive_observations(records, study(early_failure_exclusion_years=None))
    assert all(o.in_fit for o in obs)


def test_epoch_after_freeze_rejected():
    with pytest.raises(ValueError):
        StudyConfig(data_freeze=D(1979, 1, 1))


# -- stratification -----------------------------------------------------------

def test_stratify_groups_merges_and_reassignment():
    records = [
        rec("c", "MC", D(1984, 5, 1)),
        rec("e", "ME", D(1990, 5, 1)),
        rec("d", "MD", D(1975, 5, 1)),
        rec("a", "MA", D(1980, 5, 1)),
    ]
    cfg = study(fit_exclusions={"MD_Old"}, prediction_reassignments={"MD_Old": "MA_Old"})
    out = {o.serial: o for o in stratify(derive_observations(records, cfg), cfg)}
    assert out["c"].group == "MC_Old"
    assert out["e"].group == "MC.ME.Other_New"
    assert out["e"].covariates["subgroup"] == "ME_New"
    assert out["d"].group == "MD_Old" and not out["d"].in_fit
    assert out["d"].predict_group == "MA_Old"
    assert out["a"].in_fit and out["a"].predict_group == "MA_Old"


def test_exclusion_without_reassignment_is_an_error():
    records = [rec("d", "MD", D(1975, 5, 1)), rec("a", "MA", D(1990, 5, 1))]
    cfg = study(fit_exclusions={"MD_Old"})
    with pytest.raises(DataError, match="reassignment"):
        stratify(derive_observations(records, cfg), cfg)


def test_cutting_year_outside_install_range():
    records = [rec("a", "MA", D(1975, 5, 1)), rec("b", "MA", D(1980, 5, 1))]
    cfg = study(cutting_year=1995)
    with pytest.raises(DataError, match="cutting_year"):
        stratify(derive_observations(records, cfg), cfg)


# -- properties ---------------------------------------------------------------

dates = st.dates(min_value=D(1950, 1, 1), max_value=D(2008, 3, 1))


@st.composite
def fleets(draw):
    n = draw(st.integers(1, 25))
    out = []
    for i in range(n):
        install = draw(dates)
        fail = draw(st.one_of(st.none(), st.dates(min_value=install + dt.timedelta(days=1), max_value=D(2015, 1, 1))))
        out.append(rec(
            f"S{i}",
            draw(st.sampled_from(["MA", "MB", "MC", "ME", "Other"])),
            install,
            fail,
            draw(st.sampled_from(["d55", "d65", "unknown"])),
            draw(st.sampled_from(["NINE", "NIFE", "FIFE", "unknown"])),
        ))
    return out


@settings(max_examples=60, deadline=None)
@given(fleets())
def test_fleet_csv_round_trip(records):
    assert parse_fleet_csv(write_fleet_csv(records)) == records


@settings(max_examples=60, deadline=None)
@given(fleets())
def test_truncation_indicator_matches_epoch(records):
    cfg = study()
    for o in derive_observations(records, cfg):
        assert (o.nu == 0) == (o.install_date < cfg.truncation_epoch)
        if o.nu == 0:
            assert 0 <= o.tau_L < o.age


@settings(max_examples=60, deadline=None)
@given(fleets(), st.integers(1950, 2008))
def test_strata_partition_units(records, cutting):
    obs = derive_observations(records, study())
    years = [o.install_date.year for o in obs] or [cutting]
    cutting = min(max(cutting, min(years)), max(years))
    cfg = study(cutting_year=cutting)
    groups = stratify(obs, cfg)
    assert sorted(o.serial for o in groups) == sorted(o.serial for o in obs)
    assert all(o.group for o in groups)
    # changing the cutting year only relabels units
    other = stratify(obs, cfg.replace(cutting_year=min(years)))
    for a, b in zip(groups, other):
        assert (a.serial, a.age, a.delta, a.nu, a.tau_L) == (b.serial, b.age, b.delta, b.nu, b.tau_L)


@settings(max_examples=40, deadline=None)
@given(fleets())
def test_observation_csv_round_trip(records):
    obs = derive_observations(records, study())
    cfg = study(cutting_year=min([o.install_date.year for o in obs] or [1987]))
    obs = stratify(obs, cfg)
    assert read_observations_csv(write_observations_csv(obs)) == obs
