import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rampmeter.algediff import DiffConfig, derivative_stream
from rampmeter.fd_estim import (
    EstimatorConfig,
    FDEstimator,
    SampleRejected,
    chain_rule_derivative,
    estimate_a,
    estimate_K,
    estimate_rho_c,
    estimate_vf,
    log_derivative,
    run_estimator,
)
from rampmeter.harness import synthetic_detector_stream
from rampmeter.traffic_model import FundamentalDiagram, equilibrium_speed

FD = FundamentalDiagram(110.0, 30.0, 2.0)
OMEGA = 2 * math.pi / 3600.0


def analytic(fd, rho):
    """Closed-form V, V_rho, W, W_rho of May's diagram (independent oracle)."""
    K = 1.0 / (fd.a * fd.rho_c**fd.a)
    V = fd.v_f * math.exp(-K * rho**fd.a)
    W = -K * fd.a * rho ** (fd.a - 1)
    W_rho = -K * fd.a * (fd.a - 1) * rho ** (fd.a - 2)
    return V, W * V, W, W_rho


class TestChainRule:
    def test_examples(self):
        assert chain_rule_derivative(-2.0, 1.0) == -2.0
        assert chain_rule_derivative(0.0, 5.0) == 0.0

    @pytest.mark.parametrize("rho_dot", [0.0, 0.5, -0.3])
    def test_stationary_density_rejected(self, rho_dot):
        with pytest.raises(SampleRejected) as exc:
            chain_rule_derivative(1.0, rho_dot)
        assert exc.value.reason == "rho_dot_small"

    def test_from_time_derivatives_of_a_sinusoid(self):
        t = np.arange(0, 4 * 3600, 20.0)
        rho = 20 + 10 * np.sin(OMEGA * t)
        v = equilibrium_speed(FD, rho)
        cfg = DiffConfig()
        pairs = zip(derivative_stream(t, rho, cfg), derivative_stream(t, v, cfg))
        checked = 0
        for r, s in pairs:
            if r is None:
                continue
            rho_dot_true = 10 * OMEGA * math.cos(OMEGA * r.t_ref)
            if abs(rho_dot_true) < 0.3 * 10 * OMEGA:
                continue  # near a zero crossing of the density rate
            V_rho = chain_rule_derivative(s.d1 * 3600, r.d1 * 3600)
            rho_true = 20 + 10 * math.sin(OMEGA * r.t_ref)
            V_rho_true = analytic(FD, rho_true)[1]
            assert V_rho == pytest.approx(V_rho_true, rel=0.05)
            checked += 1
        assert checked > 300


class TestLogDerivative:
    def test_example(self):
        assert log_derivative(100.0, -2.0) == pytest.approx(-0.02)

    def test_at_critical_density(self):
        V, V_rho, _, _ = analytic(FD, 30.0)
        assert log_derivative(V, V_rho) == pytest.approx(-1 / 30, rel=1e-12)

    @pytest.mark.parametrize("rho", [1.0, 10.0, 45.0, 90.0])
    def test_constant_for_linear_exponent(self, rho):
        fd = FundamentalDiagram(100.0, 25.0, 1.0)
        V, V_rho, _, _ = analytic(fd, rho)
        assert log_derivative(V, V_rho) == pytest.approx(-1 / 25, rel=1e-12)

    def test_nonnegative_rejected(self):
        with pytest.raises(SampleRejected) as exc:
            log_derivative(100.0, 0.5)
        assert exc.value.reason == "w_nonnegative"


class TestAlgebra:
    def test_a_is_one_for_constant_w(self):
        assert estimate_a(20.0, -0.04, 0.0) == 1.0

    def test_a_for_quadratic_exponent(self):
        # a = 2: W = -rho/900, so W_rho / W = 1 / rho
        W, W_rho = -20.0 / 900, -1.0 / 900
        assert estimate_a(20.0, W, W_rho) == pytest.approx(2.0, rel=1e-12)

    def test_a_guards(self):
        with pytest.raises(SampleRejected) as exc:
            estimate_a(20.0, -1e-5, 0.0)
        assert exc.value.reason == "w_small"
        with pytest.raises(SampleRejected) as exc:
            estimate_a(20.0, -0.01, -0.01)  # a = 21
        assert exc.value.reason == "a_out_of_band"

    def test_K_examples(self):
        assert estimate_K(30.0, -1 / 30, 2.0) == pytest.approx(1 / 1800, rel=1e-12)
        assert estimate_K(12.0, -1 / 40, 1.0) == pytest.approx(1 / 40, rel=1e-12)

    def test_K_independent_of_density(self):
        Ks = [estimate_K(r, analytic(FD, r)[2], 2.0) for r in np.linspace(2, 80, 40)]
        np.testing.assert_allclose(Ks, FD.K, rtol=1e-12)

    def test_rho_c_examples(self):
        assert estimate_rho_c(1 / 1800, 2.0) == pytest.approx(30.0, rel=1e-12)
        assert estimate_rho_c(1 / 37, 1.0) == pytest.approx(37.0, rel=1e-12)

    def test_vf_examples(self):
        assert estimate_vf(88.0, 0.0, 1 / 1800, 2.0) == 88.0
        V = equilibrium_speed(FD, 30.0)
        assert V == pytest.approx(66.71, abs=1e-2)
        assert estimate_vf(V, 30.0, 1 / 1800, 2.0) == pytest.approx(110.0, rel=1e-12)

    @settings(max_examples=300)
    @given(st.floats(20, 150), st.floats(10, 60), st.floats(0.6, 6), st.floats(0.5, 100))
    def test_round_trip_identity(self, v_f, rho_c, a, rho):
        fd = FundamentalDiagram(v_f, rho_c, a)
        V, V_rho, _, _ = analytic(fd, rho)
        if V < 1e-200:
            return
        W = log_derivative(V, V_rho)
        W_rho = -fd.K * a * (a - 1) * rho ** (a - 2)
        a_est = 1.0 + rho * W_rho / W  # unguarded form of estimate_a
        K = estimate_K(rho, W, a_est)
        got = (estimate_vf(V, rho, K, a_est), estimate_rho_c(K, a_est), a_est)
        np.testing.assert_allclose(got, (v_f, rho_c, a), rtol=1e-9)


def _truth_err(final, fd):
    a, K, rho_c, v_f = final
    return np.abs(np.array([v_f, rho_c, a]) - [fd.v_f, fd.rho_c, fd.a]) / [fd.v_f, fd.rho_c, fd.a]


class TestPipeline:
    def test_noise_free_sinusoid(self):
        t, rho, v = synthetic_detector_stream(FD, 86400.0)
        res = run_estimator(t, rho, v)
        assert np.all(_truth_err(res.final(), FD) < 0.01)

    def test_noisy_five_days(self):
        t, rho, v = synthetic_detector_stream(FD, 5 * 86400.0, speed_noise=0.05, seed=1)
        cfg = EstimatorConfig(window=600, window_w=1200, median_len=500)
        res = run_estimator(t, rho, v, cfg)
        assert len(t) == 21600
        assert np.all(_truth_err(res.final(), FD) < 0.10)

    def test_constant_density(self):
        t = np.arange(0, 7200, 20.0)
        rho = np.full(len(t), 25.0)
        res = run_estimator(t, rho, equilibrium_speed(FD, rho))
        assert res.accepted == 0
        assert res.final() is None
        assert res.rejection_rate == 1.0
        assert res.records[-1].uninformative

    def test_other_diagram(self):
        fd = FundamentalDiagram(95.0, 40.0, 1.5)
        t, rho, v = synthetic_detector_stream(fd, 86400.0, mean=30.0, amplitude=15.0)
        assert np.all(_truth_err(run_estimator(t, rho, v).final(), fd) < 0.02)

    def test_scale_covariance(self):
        t, rho, v = synthetic_detector_stream(FD, 20000.0, speed_noise=0.02, seed=4)
        base = run_estimator(t, rho, v).final()
        # a power-of-two scale keeps every floating-point operation exact
        scaled = run_estimator(t, rho, 2.0 * v).final()
        assert scaled[:3] == pytest.approx(base[:3], rel=1e-12)
        assert scaled[3] == pytest.approx(2.0 * base[3], rel=1e-12)
        other = run_estimator(t, rho, 1.37 * v).final()
        assert other[:3] == pytest.approx(base[:3], rel=1e-9)
        assert other[3] == pytest.approx(1.37 * base[3], rel=1e-9)

    def test_guard_on_density_rate(self):
        t, rho, v = synthetic_detector_stream(FD, 20000.0)
        res = run_estimator(t, rho, v, EstimatorConfig(eps_rho_dot=1e9))
        assert res.accepted == 0
        assert all(r.rejected for r in res.records)
        assert np.all(np.isnan([r.a_pub for r in res.records]))

    def test_guard_on_log_derivative_sign(self):
        # speed rising with density is inconsistent with any May diagram
        t = np.arange(0, 20000, 20.0)
        rho = 20 + 10 * np.sin(OMEGA * t)
        res = run_estimator(t, rho, 50 + rho)
        assert res.accepted == 0
        assert res.rejections.get("w_nonnegative", 0) > 0

    def test_published_only_from_valid_samples(self):
        t, rho, v = synthetic_detector_stream(FD, 30000.0, speed_noise=0.05, seed=2)
        est = FDEstimator()
        last = (math.nan,) * 4
        for ti, r, s in zip(t, rho, v):
            rec = est.push(ti, r, s)
            pub = (rec.a_pub, rec.K_pub, rec.rho_c_pub, rec.v_f_pub)
            if rec.rejected:
                # a rejected sample never changes the published estimate
                np.testing.assert_array_equal(pub, last)
            else:
                assert 0.5 <= rec.a_raw <= 8.0
                assert rec.rho_c_pub > 0 and rec.v_f_pub > 0
            last = pub

    def test_monotone_refinement(self):
        t, rho, v = synthetic_detector_stream(FD, 3 * 86400.0)
        cfg = EstimatorConfig(median_len=10**6)
        errs = []
        for hours in (6, 24, 72):
            k = int(hours * 3600 / 20)
            errs.append(np.max(_truth_err(run_estimator(t[:k], rho[:k], v[:k], cfg).final(), FD)))
        # periodic excitation: later medians may coincide up to rounding
        assert errs[1] <= errs[0] + 1e-12
        assert errs[2] <= errs[1] + 1e-12

    def test_missing_samples_restart_stages(self):
        t, rho, v = synthetic_detector_stream(FD, 20000.0)
        rho = rho.copy()
        rho[300] = math.nan
        res = run_estimator(t, rho, v)
        assert res.records[300].reason == "missing"
        assert res.records[301].reason == "warmup"
        assert np.all(_truth_err(res.final(), FD) < 0.02)
