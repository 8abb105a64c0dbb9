import json
import math
from pathlib import Path

import numpy as np
import pytest

from deepvar.backtest import (
    BacktestReport,
    canonical_id,
    make_estimator,
    resample_experiment,
    run_backtest,
    summarize,
)
from deepvar.core import InvalidInputError, ReturnSeries, WindowPlan
from deepvar.estimators import var_empirical, var_gaussian_unbiased
from deepvar.garch import PRESETS, GarchState, conditional_sigmas, simulate, var_true
from deepvar.lstm import LSTMVaR

import oracles

G11 = PRESETS["garch11n"]


def fake_report(name, er, score):
    return BacktestReport(name, 0.05, 10, 1, 0, er, score, np.zeros(1), np.zeros(1), np.zeros(1))


class TestIds:
    def test_aliases(self):
        assert canonical_id("garch-n") == "garch_n"
        assert canonical_id("true") == "true_var"
        assert canonical_id("garch") == "garch"

    def test_unknown_lists_valid(self):
        with pytest.raises(InvalidInputError, match="valid ids: emp"):
            canonical_id("nope")

    def test_make_estimator(self):
        assert make_estimator("u", 0.01).alpha == 0.01
        assert make_estimator("garch_t", 0.01, p=2).noise == "student_t"
        with pytest.raises(InvalidInputError):
            make_estimator("lstm", 0.05)
        with pytest.raises(InvalidInputError):
            make_estimator("true_var", 0.05)


class TestRunBacktest:
    def test_constant_series(self):
        rep = run_backtest(np.full(40, 0.02), WindowPlan(10, 30), "emp", 0.05)
        np.testing.assert_array_equal(rep.risk_series, -0.02)
        np.testing.assert_array_equal(rep.secured_series, 0.0)
        assert rep.exception_rate == 0.0 and rep.mean_score == 0.0

    def test_windows_use_exactly_n_observations(self):
        x = np.random.default_rng(0).standard_normal(80)
        plan = WindowPlan(20, 50, offset=5)
        rep = run_backtest(x, plan, "u", 0.05)
        for i in (0, 17, 49):
            w = x[5 + i:5 + i + 20]
            assert rep.risk_series[i] == pytest.approx(var_gaussian_unbiased(w, 0.05), rel=1e-12)
            assert rep.targets[i] == x[5 + i + 20]

    def test_report_invariants(self):
        x = np.random.default_rng(1).standard_normal(300)
        rep = run_backtest(x, WindowPlan(30, 270), "emp", 0.05)
        assert rep.exception_rate == rep.exceed_count / rep.m
        np.testing.assert_array_equal(rep.secured_series, rep.targets + rep.risk_series)
        er, s = rep.recompute()
        assert er == rep.exception_rate
        assert abs(s - rep.mean_score) <= 1e-12
        assert rep.mean_score == pytest.approx(oracles.brute_mean_score(rep.risk_series, rep.targets, 0.05), rel=1e-12)
        assert rep.risk_series[3] == var_empirical(x[3:33], 0.05)

    def test_true_var_uses_target_sigma(self):
        x, sig = simulate(G11, 200, seed=2)
        rep = run_backtest(x, WindowPlan(50, 150), "true_var", 0.01, true_sigma=sig, true_spec=G11)
        np.testing.assert_allclose(rep.risk_series, var_true(sig[50:], 0.01), rtol=1e-15)
        with pytest.raises(InvalidInputError):
            run_backtest(x, WindowPlan(50, 150), "true_var", 0.01)

    def test_lstm_requires_training(self):
        with pytest.raises(InvalidInputError):
            run_backtest(np.zeros(30), WindowPlan(10, 20), LSTMVaR(), 0.05)

    def test_labels_follow_targets(self):
        s = ReturnSeries(np.arange(12.0), labels=[f"d{i}" for i in range(12)])
        rep = run_backtest(s, WindowPlan(4, 8), "emp", 0.05)
        assert rep.labels == [f"d{i}" for i in range(4, 12)]

    def test_substitution_counted(self):
        x, _ = simulate(G11, 120, seed=3)
        x = x.copy()
        x[30:90] = 0.01  # windows fully inside this stretch are degenerate
        rep = run_backtest(x, WindowPlan(40, 80), "garch_n", 0.05, n_restarts=1)
        assert rep.substitutions >= 1
        assert rep.m == 80 and np.all(np.isfinite(rep.risk_series))


class TestSerialization:
    def test_round_trip(self):
        x = np.random.default_rng(4).standard_normal(200)
        rep = run_backtest(x, WindowPlan(25, 175), "norm", 0.05)
        d = json.loads(json.dumps(rep.to_dict()))
        back = BacktestReport.from_dict(d)
        er, s = back.recompute()
        assert abs(er - d["exception_rate"]) <= 1e-12
        assert abs(s - d["mean_score"]) <= 1e-12
        assert d["score_x10000"] == pytest.approx(1e4 * s, rel=1e-12)
        assert d["er_percent"] == pytest.approx(100 * er, rel=1e-12)

    def test_schema_matches_golden(self):
        golden = json.loads((Path(__file__).parent / "golden" / "report_schema.json").read_text())
        rep = run_backtest(np.linspace(-1, 1, 30), WindowPlan(10, 20), "emp", 0.05)
        d = rep.to_dict()
        assert list(d) == golden["report_fields"]
        d.pop("runtime_seconds")
        assert json.loads(json.dumps(d)) == golden["report"]


class TestSummary:
    def test_sd_zero_for_single_repetition(self):
        s = summarize({"emp": [fake_report("emp", 0.04, 1e-3)]}, 0.05)
        assert s["estimators"]["emp"]["er_sd"] == 0.0
        assert s["B_ER"] is None

    def test_best_counts_strict_and_exclude_benchmark(self):
        reps = {
            "true_var": [fake_report("t", 0.05, 0.5e-3)] * 3,
            "emp": [fake_report("e", 0.07, 1.0e-3), fake_report("e", 0.06, 1e-3), fake_report("e", 0.06, 2e-3)],
            "lstm": [fake_report("l", 0.055, 0.9e-3), fake_report("l", 0.06, 1e-3), fake_report("l", 0.07, 3e-3)],
        }
        s = summarize(reps, 0.05)
        # wins once, ties once (not a win), loses once; true_var would beat lstm but is ignored
        assert s["B_ER"] == pytest.approx(100 / 3)
        assert s["B_S"] == pytest.approx(100 / 3)
        assert s["estimators"]["emp"]["er_sd"] == pytest.approx(np.std([0.07, 0.06, 0.06], ddof=1))


class TestResample:
    def test_layout_and_determinism(self):
        x, sig = simulate(G11, 600, seed=5)
        kw = dict(estimators=("true_var", "emp", "u"), history_sigma=sig, seed=9)
        r1 = resample_experiment(G11, x, 50, 0.05, 3, 120, **kw)
        r2 = resample_experiment(G11, x, 50, 0.05, 3, 120, **kw)
        assert set(r1.reports) == {"true_var", "emp", "u"}
        assert all(len(v) == 3 and v[0].m == 70 for v in r1.reports.values())
        assert r1.summary == r2.summary
        # independent continuations differ
        assert r1.reports["emp"][0].mean_score != r1.reports["emp"][1].mean_score

    def test_continuation_starts_from_history_state(self):
        x, sig = simulate(G11, 400, seed=6)
        r = resample_experiment(G11, x, 20, 0.05, 1, 40, ("true_var",), history_sigma=sig, seed=1)
        path = conditional_sigmas(G11, x, sig[0])
        np.testing.assert_allclose(path[:-1], sig, rtol=1e-12)
        # replay the single continuation from the end-of-history state
        first_sigma = math.sqrt(G11.omega + 0.17 * x[-1] ** 2 + 0.8 * sig[-1] ** 2)
        cx, csig = simulate(G11, 40, burn_in=0, seed=np.random.SeedSequence(1).spawn(1)[0],
                            state=GarchState.from_path(G11, x, sig))
        assert csig[0] == pytest.approx(first_sigma, rel=1e-14)
        np.testing.assert_allclose(r.reports["true_var"][0].risk_series, var_true(csig[20:], 0.05), rtol=1e-14)

    def test_m_for_250_window_layout(self):
        x, sig = simulate(G11, 300, seed=7)
        r = resample_experiment(G11, x, 250, 0.01, 1, 750, ("true_var",), history_sigma=sig)
        assert r.reports["true_var"][0].m == 500

    def test_bad_arguments(self):
        with pytest.raises(InvalidInputError):
            resample_experiment(G11, np.zeros(10) + 0.01, 50, 0.05, 1, 40, ("emp",))
