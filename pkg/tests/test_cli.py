import csv
import json

import numpy as np
import pytest

from deepvar.backtest import BacktestReport
from deepvar.cli import DataError, ingest_csv, main

REPORT_FIELDS = {"estimator", "alpha", "n", "m", "exceed_count", "exception_rate", "er_percent",
                 "mean_score", "score_x10000", "score_x100", "substitutions", "runtime_seconds",
                 "risk_series", "secured_series", "targets", "labels"}


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


@pytest.fixture
def iid_csv(tmp_path):
    rng = np.random.default_rng(0)
    rows = ["date,port1,port2"] + [f"2000-01-{i:04d},{v:.6f},{w:.6f}" for i, (v, w) in
                                    enumerate(rng.normal(0, 1.0, (1500, 2)))]
    return write(tmp_path / "ff.csv", "\n".join(rows) + "\n")


class TestIngest:
    def test_percent_conversion(self, tmp_path):
        p = write(tmp_path / "a.csv", "date,r\n2001-01,1.0\n2001-02,-0.5\n")
        s = ingest_csv(p, "r", percent_flag=True)
        np.testing.assert_allclose(s.values, [0.01, -0.005])
        assert s.labels == ("2001-01", "2001-02")
        np.testing.assert_allclose(ingest_csv(p, "r", False).values, [1.0, -0.5])

    def test_missing_column_names_available(self, tmp_path):
        p = write(tmp_path / "a.csv", "date,x,y\n1,2,3\n")
        with pytest.raises(DataError, match="available columns: date, x, y"):
            ingest_csv(p, "z")

    def test_non_numeric_row_number(self, tmp_path):
        p = write(tmp_path / "a.csv", "date,r\n1,0.1\n2,abc\n")
        with pytest.raises(DataError, match="row 3"):
            ingest_csv(p, "r")

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            ingest_csv(tmp_path / "none.csv", "r")

    def test_length_preserved(self, tmp_path):
        body = "\n".join(f"{i},{(i % 7) - 3}" for i in range(7500))
        s = ingest_csv(write(tmp_path / "b.csv", "date,r\n" + body + "\n"), "r")
        assert len(s) == 7500 and s.values[4] == 0.01


class TestSimulate:
    def test_preset_file(self, tmp_path):
        out = tmp_path / "s.csv"
        assert main(["simulate", "--preset", "garch11n", "--seed", "1", "--out", str(out)]) == 0
        rows = list(csv.reader(out.open()))
        assert rows[0] == ["index", "x", "sigma"]
        assert len(rows) == 7501
        assert all(float(r[2]) > 0 for r in rows[1:])

    def test_byte_identical(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        for p in (a, b):
            main(["simulate", "--preset", "garch21t", "--length", "300", "--seed", "5", "--out", str(p)])
        assert a.read_bytes() == b.read_bytes()

    def test_length_zero_is_usage_error(self, tmp_path):
        assert main(["simulate", "--preset", "garch11n", "--length", "0", "--out", str(tmp_path / "x")]) == 2

    def test_custom_spec(self, tmp_path):
        out = tmp_path / "c.csv"
        rc = main(["simulate", "--omega", "1e-4", "--alphas", "0", "--betas", "0", "--length", "10",
                   "--out", str(out)])
        assert rc == 0
        assert {r["sigma"] for r in csv.DictReader(out.open())} == {"0.01"}

    def test_missing_spec_is_usage_error(self, tmp_path):
        assert main(["simulate", "--out", str(tmp_path / "x")]) == 2

    def test_invalid_spec_is_domain_error(self, tmp_path, capsys):
        rc = main(["simulate", "--omega", "1e-4", "--alphas", "0.5", "--betas", "0.6", "--out", str(tmp_path / "x")])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestBacktest:
    def test_csv_two_estimators(self, iid_csv, tmp_path):
        out, series = tmp_path / "r.json", tmp_path / "s.csv"
        rc = main(["backtest", "--csv", str(iid_csv), "--column", "port1", "--estimators", "emp,u",
                   "--segment", "all", "--n", "50", "--out", str(out), "--series-out", str(series)])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc["percent_flag"] is True
        assert [e["estimator"] for e in doc["estimators"]] == ["emp", "u"]
        for e in doc["estimators"]:
            assert REPORT_FIELDS <= set(e)
            assert e["m"] == 1450
            rep = BacktestReport.from_dict(e)
            er, s = rep.recompute()
            assert abs(1e4 * s - e["score_x10000"]) <= 1e-8
            assert e["er_percent"] == pytest.approx(100 * er, abs=1e-12)
        rows = list(csv.DictReader(series.open()))
        assert len(rows) == 1450 and rows[0]["label"] == "2000-01-0050"

    def test_unknown_estimator(self, tmp_path, capsys):
        rc = main(["backtest", "--preset", "garch11n", "--estimators", "emp,xyz", "--out", str(tmp_path / "r")])
        assert rc == 2
        assert "valid ids" in capsys.readouterr().err

    def test_true_var_needs_simulation(self, iid_csv, tmp_path):
        rc = main(["backtest", "--csv", str(iid_csv), "--column", "port1", "--estimators", "true",
                   "--out", str(tmp_path / "r.json")])
        assert rc == 1

    def test_config_file_and_override(self, tmp_path):
        cfg = write(tmp_path / "c.cfg", "# run\npreset = garch11n\nlength = 1200\nn = 50\nestimators = emp,u\nalpha=0.01\n")
        out = tmp_path / "r.json"
        assert main(["backtest", "--config", str(cfg), "--alpha", "0.05", "--out", str(out)]) == 0
        doc = json.loads(out.read_text())
        assert doc["alpha"] == 0.05
        assert doc["m"] == 120 - 50
        assert doc["source"]["length"] == 1200

    def test_deterministic_report(self, tmp_path):
        args = ["backtest", "--preset", "garch11n", "--length", "1500", "--estimators", "emp,norm,u,true"]
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        main(args + ["--out", str(a)])
        main(args + ["--out", str(b)])
        strip = lambda d: [{k: v for k, v in e.items() if k != "runtime_seconds"} for e in d["estimators"]]
        assert strip(json.loads(a.read_text())) == strip(json.loads(b.read_text()))


class TestTrainPlot:
    def test_train_load_plotdata(self, tmp_path):
        model = tmp_path / "m.bin"
        common = ["--preset", "garch11n", "--length", "1000", "--n", "20", "--alpha", "0.05"]
        assert main(["train", *common, "--epochs", "2", "--calibration-runs", "1", "--model-out", str(model)]) == 0
        report = tmp_path / "r.json"
        assert main(["backtest", *common, "--estimators", "lstm,emp", "--model", str(model),
                     "--out", str(report)]) == 0
        from deepvar.core import SplitPlan, WindowPlan, make_windows
        from deepvar.garch import PRESETS, simulate
        from deepvar.lstm import load_params, var_lstm

        x, _ = simulate(PRESETS["garch11n"], 1000, seed=0)
        W, _ = make_windows(x, WindowPlan.covering(*SplitPlan().segments(1000)["test"], 20))
        params = load_params(model)
        doc = json.loads(report.read_text())
        lstm = doc["estimators"][0]
        np.testing.assert_allclose(lstm["risk_series"], [var_lstm(w, params) for w in W], rtol=1e-13)

        plot = tmp_path / "p.csv"
        assert main(["plotdata", "--report", str(report), "--out", str(plot)]) == 0
        rows = list(csv.DictReader(plot.open()))
        assert len(rows) == 2 * doc["m"]
        first = [r for r in rows if r["estimator"] == "lstm"]
        np.testing.assert_array_equal([float(r["neg_risk"]) for r in first], -np.asarray(lstm["risk_series"]))
        assert int(first[0]["index"]) == 900 + 20

    def test_model_alpha_mismatch(self, tmp_path):
        model = tmp_path / "m.bin"
        main(["train", "--preset", "garch11n", "--length", "600", "--n", "10", "--epochs", "1",
              "--calibration-runs", "1", "--model-out", str(model)])
        rc = main(["backtest", "--preset", "garch11n", "--length", "600", "--n", "10", "--alpha", "0.01",
                   "--estimators", "lstm", "--model", str(model), "--out", str(tmp_path / "r.json")])
        assert rc == 1

    def test_corrupt_model(self, tmp_path, capsys):
        bad = write(tmp_path / "bad.bin", "garbage")
        rc = main(["backtest", "--preset", "garch11n", "--estimators", "lstm", "--model", str(bad),
                   "--out", str(tmp_path / "r.json")])
        assert rc == 1
        assert "not a deepvar LSTM model" in capsys.readouterr().err

    def test_plotdata_bad_report(self, tmp_path):
        assert main(["plotdata", "--report", str(write(tmp_path / "r.json", "{}")), "--out", str(tmp_path / "p")]) == 1


class TestExperiment:
    def test_layout_and_single_repetition(self, tmp_path, capsys):
        out, table = tmp_path / "e.json", tmp_path / "e.txt"
        rc = main(["experiment", "--preset", "garch11n", "--length", "1000", "--alpha", "0.05", "--n", "20",
                   "--repetitions", "1", "--test-length", "60", "--estimators", "true,emp,u,garch,lstm",
                   "--epochs", "1", "--calibration-runs", "1", "--garch-restarts", "0",
                   "--out", str(out), "--table-out", str(table)])
        assert rc == 0
        doc = json.loads(out.read_text())
        rows = doc["summary"]["estimators"]
        assert list(rows) == ["true_var", "emp", "u", "garch_n", "lstm"]
        assert all(r["er_sd"] == 0 and r["score_sd"] == 0 for r in rows.values())
        assert doc["summary"]["B_ER"] in (0.0, 100.0)
        text = table.read_text()
        assert "B_ER" in text and "garch_n" in text
        assert text.strip() in capsys.readouterr().out
