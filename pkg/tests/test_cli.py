import csv
import hashlib
import json
import math

import numpy as np
import pytest

import regcal.cli as cli
from regcal.cli import main, parse_spec_text
from regcal.datagen import build_scenario, read_cohort_csv, read_table
from regcal.estimators import ALL_STRATEGIES, EstimateRecord, Strategy
from regcal.linmod import read_fit_csv
from regcal.simharness import METRIC_COLUMNS, read_metrics_csv, read_records_csv, write_metrics_csv, write_records_csv


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- generate ---------------------------------------------------------------


def test_generate_default_layout(tmp_path):
    out = tmp_path / "c.csv"
    assert main(["generate", "--scenario", "beta_cryptoxanthin", "--seed", "7", "--out", str(out)]) == 0
    c = read_cohort_csv(out)
    assert len(c) == 16_415
    assert np.isfinite(c.x_biomarker).sum() == 476
    assert np.isfinite(c.x_biomarker_repeat).sum() == 95


def test_generate_override_and_determinism(tmp_path):
    a, b, c = tmp_path / "a.csv", tmp_path / "b.csv", tmp_path / "c.csv"
    args = ["generate", "--scenario", "folate", "--n-cohort", "100", "--n-substudy", "40", "--n-reliability", "10"]
    assert main([*args, "--seed", "3", "--out", str(a)]) == 0
    assert main([*args, "--seed", "3", "--out", str(b)]) == 0
    assert main([*args, "--seed", "4", "--out", str(c)]) == 0
    assert len(a.read_text().splitlines()) == 101
    assert sha(a) == sha(b) != sha(c)


def test_generate_unknown_scenario(tmp_path, capsys):
    assert main(["generate", "--scenario", "nosuch", "--out", str(tmp_path / "x.csv")]) == 2
    assert "nosuch" in capsys.readouterr().err


def test_generate_from_scenario_file(tmp_path):
    spec = tmp_path / "s.txt"
    spec.write_text("base = lycopene\nn_cohort = 50\nn_substudy = 20\nn_reliability = 5\n")
    out = tmp_path / "c.csv"
    assert main(["generate", "--scenario", str(spec), "--lambda0-mode", "literal", "--out", str(out)]) == 0
    assert len(read_cohort_csv(out)) == 50


def test_generate_invalid_override(tmp_path, capsys):
    assert main(["generate", "--scenario", "folate", "--n-substudy", "10", "--n-reliability", "20", "--out", str(tmp_path / "x.csv")]) == 2
    assert "error" in capsys.readouterr().err


# -- simulate ---------------------------------------------------------------


SIM = ["simulate", "--scenario", "folate", "--sims", "2", "--boot", "50", "--seed", "7"]


def test_simulate_outputs_and_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main([*SIM, "--out", str(a)]) == 0
    assert main([*SIM, "--out", str(b)]) == 0
    m = rows(a / "metrics.csv")
    assert [r["strategy"] for r in m] == [s.value for s in ALL_STRATEGIES]
    assert list(m[0]) == list(METRIC_COLUMNS)
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "records.csv").read_bytes() == (b / "records.csv").read_bytes()
    assert len(rows(a / "records.csv")) == 2 * 6
    man = json.loads((a / "manifest.json").read_text())
    assert man["master_seed"] == 7 and man["lambda0_mode"] == "auto"
    assert man["lambda0_used"] == man["scenario"]["lambda0"] != 1600
    assert {"regcal", "python", "numpy"} <= set(man["versions"])
    assert "TRUTH" in (a / "metrics.txt").read_text()


def test_simulate_literal_lambda0(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate", "--scenario", "lycopene", "--sims", "1", "--strategies", "TRUTH", "--lambda0-mode", "literal", "--out", str(out)]) == 0
    assert json.loads((out / "manifest.json").read_text())["lambda0_used"] == 2000


def test_simulate_unknown_scenario(tmp_path, capsys):
    assert main(["simulate", "--scenario", "nosuch", "--sims", "1", "--out", str(tmp_path)]) == 2
    assert "nosuch" in capsys.readouterr().err


@pytest.mark.parametrize(
    "extra",
    [["--sims", "0"], ["--boot", "49"], ["--strategies", "TRUTH,BOGUS"], ["--workers", "0"]],
)
def test_simulate_config_errors(tmp_path, extra):
    assert main(["simulate", "--scenario", "folate", "--sims", "1", "--boot", "60", *extra, "--out", str(tmp_path)]) == 2


def test_simulate_small_boot_ok_without_calibrated(tmp_path):
    args = ["simulate", "--scenario", "folate", "--sims", "1", "--boot", "10", "--strategies", "TRUTH,NAIVE_SELFREPORT"]
    assert main([*args, "--out", str(tmp_path)]) == 0


def test_simulate_quality_gate(tmp_path, monkeypatch):
    def fake(scenario, n, settings, **kw):
        out = []
        for i in range(n):
            ok = EstimateRecord(Strategy.TRUTH, -0.4, 0.1, -0.6, -0.2, "wald", 10, True, i)
            bad = EstimateRecord.failed(Strategy.TRUTH, 10, "x", i)
            out.append(bad if i % 5 == 0 else ok)
        return out

    monkeypatch.setattr(cli, "run_simulation", fake)
    code = main(["simulate", "--scenario", "folate", "--sims", "10", "--strategies", "TRUTH", "--out", str(tmp_path)])
    assert code == 3
    assert (tmp_path / "metrics.csv").exists()


def test_usage_error_is_2():
    with pytest.raises(SystemExit) as e:
        main(["simulate"])
    assert e.value.code == 2


# -- analyze ----------------------------------------------------------------


@pytest.fixture(scope="module")
def cohort_csv(tmp_path_factory):
    d = tmp_path_factory.mktemp("cohort")
    out = d / "c.csv"
    args = ["generate", "--scenario", "beta_cryptoxanthin", "--n-cohort", "4000", "--n-substudy", "4000", "--n-reliability", "1000"]
    assert main([*args, "--seed", "12", "--out", str(out)]) == 0
    return out


def test_analyze_end_to_end(cohort_csv, tmp_path):
    spec = tmp_path / "spec.txt"
    spec.write_text(
        "response = x_biomarker\nterms = ['x_star', 'age', 'bmi']\noptimism_boot = 10\n"
        "geomean_adjusters = {'age': 46.1}\ngeomean_group = 'in_reliability'\n"
    )
    out = tmp_path / "an"
    assert main(["analyze", str(cohort_csv), str(spec), "--out", str(out)]) == 0
    r2 = rows(out / "r2_family.csv")[0]
    target = build_scenario("beta_cryptoxanthin").r2_target
    # sampling SD of R^2 at n = 4000 is about 2 R (1 - R^2) / sqrt(n) = 0.008
    assert float(r2["r2"]) == pytest.approx(target, abs=0.03)
    assert float(r2["prentice_r2"]) == pytest.approx(float(r2["r2"]) / float(r2["icc_used"]))
    assert float(r2["r2_new_2"]) < float(r2["r2_new_4"]) < float(r2["prentice_r2"])
    fit = read_fit_csv(out / "calibration_fit.csv")
    assert [t for t, *_ in fit] == ["Intercept", "x_star", "age", "bmi"]
    assert "x_star" in {r["term"] for r in rows(out / "stepwise.csv") if r["selected"] == "1"}
    assert "R2 stepwise" in (out / "stepwise.txt").read_text()
    gm = rows(out / "geomeans.csv")
    assert [g["group"] for g in gm] == ["0", "1"]
    dup = rows(out / "duplicates.csv")[0]
    assert int(dup["n_pairs"]) == 1000
    assert 0.8 < float(dup["icc"]) < 0.95
    assert (out / "optimism.csv").exists()


def test_analyze_missing_age(tmp_path, capsys):
    p = tmp_path / "c.csv"
    p.write_text("x_biomarker,x_star,bmi,in_substudy\n1,2,3,1\n")
    spec = tmp_path / "s.txt"
    spec.write_text("response = x_biomarker\nterms = ['x_star', 'age', 'bmi']\n")
    assert main(["analyze", str(p), str(spec), "--out", str(tmp_path / "o")]) == 2
    assert "age" in capsys.readouterr().err


def test_analyze_with_exact_duplicates_file(cohort_csv, tmp_path):
    dup = tmp_path / "dups.csv"
    lines = ["analyte,id,replicate_index,value"]
    for analyte in ("folate", "b12"):
        for i in range(1, 6):
            lines += [f"{analyte},{i},1,{i * 1.5}", f"{analyte},{i},2,{i * 1.5}"]
    dup.write_text("\n".join(lines) + "\n")
    spec = tmp_path / "s.txt"
    spec.write_text("terms = ['x_star', 'age', 'bmi']\noptimism_boot = 0\nduplicates = 'dups.csv'\n")
    out = tmp_path / "o"
    assert main(["analyze", str(cohort_csv), str(spec), "--out", str(out)]) == 0
    got = rows(out / "duplicates.csv")
    assert [float(r["cv_percent"]) for r in got] == [0.0, 0.0]


def test_parse_spec_text():
    spec = parse_spec_text("# c\nresponse = x_biomarker\nj_list = [2, 3]\nicc = 0.9\n")
    assert spec == {"response": "x_biomarker", "j_list": [2, 3], "icc": 0.9}


# -- reliability ------------------------------------------------------------


def test_reliability_command(tmp_path, capsys):
    p = tmp_path / "d.csv"
    p.write_text("analyte,id,replicate_index,value\n" + "".join(f"a,{i},1,{i}\na,{i},2,{i + 0.5}\n" for i in range(1, 8)))
    out = tmp_path / "r.csv"
    assert main(["reliability", str(p), "--out", str(out)]) == 0
    r = rows(out)[0]
    assert r["analyte"] == "a" and int(r["n_pairs"]) == 7 and float(r["icc"]) == pytest.approx(1.0)
    assert "ICC" in capsys.readouterr().out


def test_reliability_schema_error(tmp_path, capsys):
    p = tmp_path / "d.csv"
    p.write_text("analyte,id,value\n")
    assert main(["reliability", str(p)]) == 2
    assert "replicate_index" in capsys.readouterr().err


def test_reliability_missing_file(tmp_path):
    assert main(["reliability", str(tmp_path / "nope.csv")]) == 2


# -- round trips ------------------------------------------------------------


def test_emitted_csvs_roundtrip(tmp_path):
    out = tmp_path / "o"
    assert main([*SIM, "--sims", "1", "--out", str(out)]) == 0
    write_metrics_csv(read_metrics_csv(out / "metrics.csv"), tmp_path / "m.csv")
    write_records_csv(read_records_csv(out / "records.csv"), tmp_path / "r.csv")
    assert (tmp_path / "m.csv").read_bytes() == (out / "metrics.csv").read_bytes()
    assert (tmp_path / "r.csv").read_bytes() == (out / "records.csv").read_bytes()
    for v in read_table(out / "metrics.csv")["mean_pct_bias"]:
        assert float(repr(float(v))) == float(v) and math.isfinite(float(v))
