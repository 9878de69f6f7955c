import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from fleetlife.cli import run
from fleetlife.data import write_fleet_csv
from fleetlife.simulation import generate_fleet, reference_scenario

REFERENCE = Path(__file__).resolve().parents[1] / "configs" / "reference.toml"


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.toml"
    cfg.write_text(REFERENCE.read_text().replace("replicates = 2000", "replicates = 200"))
    data = root / "fleet.csv"
    data.write_text(write_fleet_csv(generate_fleet(reference_scenario()).records))
    return root, cfg, data


@pytest.fixture(scope="module")
def pipeline(work):
    root, cfg, data = work
    out = root / "run"
    args = ["--config", str(cfg), "--data", str(data), "--out", str(out), "--seed", "5"]
    for cmd in ("fit", "bootstrap", "predict"):
        assert run([cmd, *args]) == 0
    return out


def error_of(out):
    return json.loads((out / "error.json").read_text())


def test_no_command_is_usage_error(capsys):
    assert run([]) == 1
    assert json.loads(capsys.readouterr().err.splitlines()[0])["exit_code"] == 1


def test_missing_config_is_usage_error(tmp_path, work):
    assert run(["fit", "--data", str(work[2]), "--out", str(tmp_path)]) == 1
    assert "--config" in error_of(tmp_path)["message"]


def test_bad_config_exit_1(tmp_path, work):
    bad = tmp_path / "bad.toml"
    bad.write_text("data_freeze = 2008-03-31\nbogus = 1\n")
    assert run(["fit", "--config", str(bad), "--data", str(work[2]), "--out", str(tmp_path)]) == 1
    assert error_of(tmp_path)["error"] == "ConfigError"


def test_missing_data_file_exit_2(tmp_path, work):
    assert run(["fit", "--config", str(work[1]), "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 2


def test_malformed_csv_exit_2(tmp_path, work):
    p = tmp_path / "bad.csv"
    p.write_text("serial,install_date\nA,not-a-date\n")
    assert run(["fit", "--config", str(work[1]), "--data", str(p), "--out", str(tmp_path)]) == 2
    assert error_of(tmp_path)["error"] == "DataError"


def test_zero_failure_group_exit_3(tmp_path, work):
    text = work[2].read_text().splitlines()
    header = text[0].split(",")
    fd = header.index("fail_date")
    rows = [line.split(",") for line in text[1:]]
    for r in rows:
        r[fd] = ""
    p = tmp_path / "nofail.csv"
    p.write_text("\n".join([text[0]] + [",".join(r) for r in rows]) + "\n")
    assert run(["fit", "--config", str(work[1]), "--data", str(p), "--out", str(tmp_path)]) == 3
    err = error_of(tmp_path)
    assert err["exit_code"] == 3 and "MA_" in err["message"]


def test_strict_requires_seed(tmp_path, work):
    assert run(["bootstrap", "--strict", "--config", str(work[1]), "--data", str(work[2]), "--out", str(tmp_path)]) == 1


def test_bad_thread_env(tmp_path, work, monkeypatch):
    monkeypatch.setenv("FLEETLIFE_THREADS", "many")
    assert run(["fit", "--config", str(work[1]), "--data", str(work[2]), "--out", str(tmp_path)]) == 1


def test_pipeline_outputs(pipeline):
    names = {p.name for p in pipeline.iterdir()}
    assert {"fit.json", "fit_report.json", "ensemble.json", "predictions_individual.csv", "predictions_plot.json",
            "forecast_combined.csv", "predict_summary.json", "manifest.json"} <= names
    manifest = json.loads((pipeline / "manifest.json").read_text())
    assert manifest["command"] == "predict" and manifest["seeds"] == {"master": 5}
    assert set(manifest["outputs"]) <= names
    rows = list(csv.DictReader(io.StringIO((pipeline / "predictions_individual.csv").read_text())))
    lowers = [float(r["cal_lo"]) for r in rows]
    assert lowers == sorted(lowers)
    report = json.loads((pipeline / "fit_report.json").read_text())
    (test,) = report["families"]["weibull"]["lr_tests"]
    assert test["hypothesis"] == "no insulation effect in MA_Old"


def test_group_forecasts_sum_to_combined(pipeline):
    def mu(name):
        return np.array([float(r["mu_K"]) for r in csv.DictReader(io.StringIO((pipeline / name).read_text()))])

    total = mu("forecast_group_MA_Old.csv") + mu("forecast_group_MA_New.csv")
    assert np.allclose(total, mu("forecast_combined.csv"), rtol=1e-10)
    assert np.allclose(mu("forecast_manufacturer_MA.csv"), mu("forecast_combined.csv"), rtol=1e-10)


def test_stale_artifact_detected(tmp_path, work, pipeline):
    changed = tmp_path / "changed.toml"
    changed.write_text(work[1].read_text().replace("cutting_year = 1987", "cutting_year = 1988"))
    code = run(["predict", "--config", str(changed), "--data", str(work[2]), "--out", str(tmp_path),
                "--fit", str(pipeline / "fit.json"), "--ensemble", str(pipeline / "ensemble.json")])
    assert code == 2
    assert error_of(tmp_path)["error"] == "StaleArtifactError"


def test_degenerate_backtest(tmp_path, work):
    assert run(["backtest", "--config", str(work[1]), "--data", str(work[2]), "--out", str(tmp_path),
                "--pseudo-freeze", "2008-03-31"]) == 0
    doc = json.loads((tmp_path / "backtest.json").read_text())
    assert doc["dates"] == [] and "degenerate" in doc["notes"][0]


def test_backtest_bands(tmp_path, work):
    assert run(["backtest", "--config", str(work[1]), "--data", str(work[2]), "--out", str(tmp_path), "--seed", "2"]) == 0
    doc = json.loads((tmp_path / "backtest.json").read_text())
    assert doc["n_entries"] > 0
    assert doc["band_width_decreases"] > 0  # entries join mid-window, so the relative band is not monotone
    for r in doc["dates"]:
        assert 0 <= r["band_lo"] <= r["band_hi"] <= 1


def test_sensitivity_cutting_years(tmp_path, work):
    assert run(["sensitivity", "--config", str(work[1]), "--data", str(work[2]), "--out", str(tmp_path),
                "--axis", "cutting_year", "--cutting-years", "1984-1990"]) == 0
    doc = json.loads((tmp_path / "sensitivity_cutting_year.json").read_text())
    assert list(doc["variants"]) == [str(y) for y in range(1984, 1991)]
    assert doc["variants"]["1987"]["final_delta"] == 0.0


def test_sensitivity_family(tmp_path, work):
    assert run(["sensitivity", "--config", str(work[1]), "--data", str(work[2]), "--out", str(tmp_path), "--seed", "1"]) == 0
    doc = json.loads((tmp_path / "sensitivity_family.json").read_text())
    v = doc["variants"]
    assert set(v) == {"weibull", "lognormal"} and v["weibull"]["final_delta"] == 0.0
    # lognormal hazard eventually decreases, so its long-horizon count does not exceed the Weibull fit
    assert v["lognormal"]["final_mu_K"] <= v["weibull"]["final_mu_K"]


def test_simulate_deterministic_and_echoes_scenario(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["simulate", "--scenario", str(REFERENCE), "--out", str(a)]) == 0
    assert run(["simulate", "--scenario", str(REFERENCE), "--out", str(b)]) == 0
    assert (a / "fleet.csv").read_bytes() == (b / "fleet.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["scenario"]["seed"] == 20080331
    truth = json.loads((a / "truth.json").read_text())
    assert truth["n_records"] == len((a / "fleet.csv").read_text().splitlines()) - 1
    assert run(["simulate", "--scenario", str(REFERENCE), "--out", str(b), "--seed", "9"]) == 0
    assert (a / "fleet.csv").read_bytes() != (b / "fleet.csv").read_bytes()


def test_family_override(tmp_path, work):
    assert run(["fit", "--config", str(work[1]), "--data", str(work[2]), "--out", str(tmp_path), "--family", "both"]) == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert set(doc["fits"]) == {"weibull", "lognormal"} and doc["primary"] == "weibull"
