import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepvar.core import InvalidInputError, std_normal_quantile
from deepvar.garch import (
    PRESETS,
    DegenerateInputError,
    GarchSpec,
    GarchState,
    GarchVaR,
    InvalidSpecError,
    _garch_normal_risk,
    _garch_t_risk,
    conditional_sigmas,
    fit_qmle,
    garch_loglik,
    innovation_quantile,
    next_sigma,
    simulate,
    var_garch_normal,
    var_garch_t,
    var_true,
    variance_recursion,
)

import oracles

G11 = GarchSpec(4e-6, (0.17,), (0.8,))


def loop_recursion(omega, alphas, betas, x2_hist, s2_hist, x2_new):
    """Plain-loop variance recursion used as an oracle for the filter version."""
    x2 = list(x2_hist)
    s2 = list(s2_hist)
    out = []
    for t in range(len(x2_new) + 1):
        v = omega
        v += sum(a * x2[-1 - i] for i, a in enumerate(alphas))
        v += sum(b * s2[-1 - j] for j, b in enumerate(betas))
        out.append(v)
        s2.append(v)
        if t < len(x2_new):
            x2.append(x2_new[t])
    return np.array(out)


class TestSpec:
    def test_presets(self):
        assert sorted(PRESETS) == sorted(f"garch{p}1{t}" for p in "1234" for t in "nt")
        for name, spec in PRESETS.items():
            assert spec.omega == 4e-6
            assert spec.q == 1 and spec.p == int(name[5])
            assert spec.noise == ("normal" if name.endswith("n") else "student_t")
            assert spec.nu == (5.0 if name.endswith("t") else None)
            spec.check_simulation_restriction()
        assert PRESETS["garch21n"].alphas == (0.12, 0.05)
        assert PRESETS["garch41t"].alphas == (0.12, 0.05, 0.05, 0.05)

    @pytest.mark.parametrize("kw", [
        dict(omega=1e-6, alphas=(0.5,), betas=(0.5,)),
        dict(omega=-1e-6, alphas=(0.1,), betas=(0.8,)),
        dict(omega=1e-6, alphas=(), betas=(0.8,)),
        dict(omega=1e-6, alphas=(0.1,), betas=(0.8,), noise="student_t", nu=2.0),
        dict(omega=1e-6, alphas=(0.1,), betas=(0.8,), noise="student_t"),
        dict(omega=1e-6, alphas=(0.1,), betas=(0.8,), noise="laplace"),
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSpecError):
            GarchSpec(**kw)

    def test_simulation_restriction_includes_omega(self):
        spec = GarchSpec(0.2, (0.1,), (0.75,))
        with pytest.raises(InvalidSpecError):
            simulate(spec, 10)

    def test_unconditional_variance(self):
        assert math.sqrt(G11.unconditional_variance) == pytest.approx(0.011547, abs=1e-6)


class TestRecursion:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 30), st.randoms())
    def test_filter_matches_loop(self, p, q, steps, rnd):
        alphas = [rnd.uniform(0, 0.3 / p) for _ in range(p)]
        betas = [rnd.uniform(0, 0.6 / q) for _ in range(q)]
        x2h = [rnd.uniform(0, 2) for _ in range(p)]
        s2h = [rnd.uniform(0.1, 2) for _ in range(q)]
        x2n = [rnd.uniform(0, 3) for _ in range(steps)]
        got = variance_recursion(0.05, alphas, betas, x2h, s2h, x2n)
        np.testing.assert_allclose(got, loop_recursion(0.05, alphas, betas, x2h, s2h, x2n), rtol=1e-12)

    def test_next_sigma_example(self):
        s = next_sigma(G11, [0.01], 0.012)
        assert s == pytest.approx(math.sqrt(1.362e-4), rel=1e-12)
        assert s == pytest.approx(0.011671, abs=1e-6)

    def test_next_sigma_white_noise(self):
        spec = GarchSpec(1e-4, (0.0,), (0.0,))
        for x in ([0.3], [5.0, -2.0, 0.1]):
            assert next_sigma(spec, x, 0.7) == pytest.approx(0.01, rel=1e-14)

    def test_simulated_sigmas_satisfy_recursion(self):
        for spec in (G11, PRESETS["garch41t"], PRESETS["garch31n"]):
            x, sig = simulate(spec, 500, burn_in=0, seed=5)
            cs = conditional_sigmas(spec, x, sig[0])
            # pre-sample x^2 = sigma_init^2 matches the stationary start only for p = 1,
            # so compare after the first p steps
            np.testing.assert_allclose(cs[spec.p:-1], sig[spec.p:], rtol=1e-12)

    def test_conditional_sigmas_length_and_positivity(self):
        x, sig = simulate(G11, 100, seed=1)
        cs = conditional_sigmas(G11, x, sig[0])
        assert cs.size == 101 and np.all(cs > 0)

    def test_continuation_from_state(self):
        x, sig = simulate(G11, 300, seed=2)
        state = GarchState.from_path(G11, x, sig)
        x2, sig2 = simulate(G11, 5, burn_in=0, seed=9, state=state)
        expected = math.sqrt(G11.omega + 0.17 * x[-1] ** 2 + 0.8 * sig[-1] ** 2)
        assert sig2[0] == pytest.approx(expected, rel=1e-14)


class TestSimulate:
    def test_long_run_std(self):
        x, sig = simulate(G11, 10**6, seed=11)
        assert np.std(x) / math.sqrt(G11.unconditional_variance) == pytest.approx(1.0, abs=0.02)
        assert np.all(sig > 0)

    def test_white_noise(self):
        spec = GarchSpec(1e-4, (0.0,), (0.0,))
        x, sig = simulate(spec, 20000, seed=3)
        np.testing.assert_allclose(sig, 0.01, rtol=1e-14)
        assert np.std(x) == pytest.approx(0.01, rel=0.03)

    def test_t_innovations_have_unit_variance(self):
        spec = GarchSpec(1e-4, (0.0,), (0.0,), "student_t", 5.0)
        x, _ = simulate(spec, 200000, seed=4)
        assert np.std(x) == pytest.approx(0.01, rel=0.03)

    def test_determinism(self):
        a = simulate(PRESETS["garch21t"], 1000, seed=42)
        b = simulate(PRESETS["garch21t"], 1000, seed=42)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])

    @pytest.mark.parametrize("length, burn", [(0, 10), (5, -1)])
    def test_bad_lengths(self, length, burn):
        with pytest.raises(InvalidInputError):
            simulate(G11, length, burn)


class TestQmle:
    def test_white_noise_unconditional_variance(self):
        x = np.random.default_rng(7).normal(0, 0.02, 2000)
        fit = fit_qmle(x)
        uncond = fit.spec.unconditional_variance
        assert uncond == pytest.approx(np.var(x, ddof=1), rel=0.10)

    def test_scale_equivariance(self):
        x, _ = simulate(G11, 400, seed=8)
        r1 = var_garch_normal(x, 0.01)
        r2 = var_garch_normal(7.5 * x, 0.01)
        assert r2 == pytest.approx(7.5 * r1, rel=1e-5)

    def test_sigma_path_matches_loglik(self):
        x, _ = simulate(G11, 300, seed=12)
        fit = fit_qmle(x)
        assert fit.loglik == pytest.approx(garch_loglik(fit.spec, x), rel=1e-10)
        assert np.all(fit.sigma_path > 0) and fit.next_sigma > 0
        manual = math.sqrt(fit.spec.omega + fit.spec.alphas[0] * x[-1] ** 2
                           + fit.spec.betas[0] * fit.sigma_path[-1] ** 2)
        assert fit.next_sigma == pytest.approx(manual, rel=1e-12)

    def test_student_t_fit_and_restarts(self):
        x, _ = simulate(PRESETS["garch11t"], 3000, seed=13)
        fit = fit_qmle(x, noise="student_t", n_restarts=2)
        assert fit.spec.nu > 2.05 and fit.n_starts == 3
        assert fit.spec.persistence < 1

    def test_higher_order(self):
        x, _ = simulate(PRESETS["garch31n"], 3000, seed=14)
        fit = fit_qmle(x, p=3, q=1)
        assert len(fit.spec.alphas) == 3 and fit.spec.persistence < 1

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            fit_qmle(np.full(50, 0.01))
        with pytest.raises(InvalidInputError):
            fit_qmle(np.ones(3))

    def test_warm_start_never_worse(self):
        x, _ = simulate(G11, 250, seed=15)
        cold = fit_qmle(x)
        warm = fit_qmle(x, warm_start=cold.spec)
        assert warm.loglik >= cold.loglik - 1e-9


class TestVaR:
    def test_garch_normal_example(self):
        oracle = 0.011671 * math.sqrt(251 / 250) * -oracles.t_quantile(0.01, 249)
        assert oracles.t_quantile(0.01, 249) == pytest.approx(-2.3414, abs=1e-4)
        assert _garch_normal_risk(0.011671, 250, 0.01) == pytest.approx(oracle, rel=1e-10)
        # the hand product 0.011671 * 1.0019980 * 2.3414 is 0.027381
        assert oracle == pytest.approx(0.027381, abs=1e-6)

    def test_garch_t_example(self):
        oracle = 0.01 * math.sqrt(3 / 5) * -oracles.t_quantile(0.05, 5)
        assert _garch_t_risk(0.01, 5.0, 0.05) == pytest.approx(oracle, rel=1e-10)
        assert oracle == pytest.approx(0.015608, abs=1e-6)

    def test_median_is_zero(self):
        x, _ = simulate(G11, 200, seed=16)
        assert var_garch_normal(x, 0.5) == 0.0
        assert var_garch_t(x, 0.5, n_restarts=1) == 0.0

    def test_t_factor_limit(self):
        assert innovation_quantile(0.01, "student_t", 1e5) == pytest.approx(std_normal_quantile(0.01), abs=1e-3)

    def test_true_var_examples(self):
        assert var_true(1.0, 0.05) == pytest.approx(1.6449, abs=1e-4)
        # 0.011671 * 2.326348 = 0.027151
        assert var_true(0.011671, 0.01) == pytest.approx(-0.011671 * oracles.normal_quantile(0.01), rel=1e-12)
        assert var_true(0.011671, 0.01) == pytest.approx(0.027151, abs=1e-6)
        assert var_true(0.3, 0.5) == 0.0
        assert var_true(0.3, 0.5, "student_t", 5.0) == 0.0
        with pytest.raises(InvalidInputError):
            var_true(1.0, 0.05, "student_t")

    def test_true_var_vectorised(self):
        np.testing.assert_allclose(var_true([1.0, 2.0], 0.05), [var_true(1.0, 0.05), var_true(2.0, 0.05)])


class TestGarchVaR:
    def test_matches_function_form(self):
        x, _ = simulate(G11, 160, seed=17)
        W = np.lib.stride_tricks.sliding_window_view(x[:-1], 150)[:3]
        est = GarchVaR(alpha=0.01, warm_start=False).fit(W)
        expected = [var_garch_normal(w, 0.01) for w in W]
        np.testing.assert_allclose(est.predict(W), expected, rtol=1e-12)
        assert est.n_substitutions_ == 0

    def test_carry_forward_on_degenerate_window(self):
        x, _ = simulate(G11, 60, seed=18)
        W = np.vstack([x[:50], np.full(50, 0.01), x[5:55]])
        est = GarchVaR(alpha=0.05).fit(W)
        risks = est.predict(W)
        assert est.n_substitutions_ == 1
        assert risks[1] == risks[0]
        assert est.failures_[0][0] == 1

    def test_first_window_fallback(self):
        W = np.vstack([np.full(50, 0.02), np.random.default_rng(0).normal(0, 0.01, 50)])
        risks = GarchVaR(alpha=0.05).fit(W).predict(W)
        assert risks[0] == pytest.approx(-0.02)
