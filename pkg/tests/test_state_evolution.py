import math

import numpy as np
import pytest

import oracles
from mlvamp.engine import EngineOptions, run
from mlvamp.errors import MlvampError
from mlvamp.network import build_synthetic_network, sample_trajectory
from mlvamp.state_evolution import (
    LayerStatistics,
    compute_tau0,
    error_input,
    error_linear,
    error_nonlinear,
    error_observed_linear,
    predicted_nmse_db,
    run_se,
    stats_from_network,
    tau_mean_chain,
)

RELU_STAT = LayerStatistics(kind="nonlinear", activation="relu", noise_var=0.0)


def linear_stat(s, n_in, n_out, nu, b_bar=None, b_mean=0.0):
    return LayerStatistics(kind="linear", n_in=n_in, n_out=n_out,
                           s=np.asarray(s, float),
                           b_bar=np.zeros(n_out) if b_bar is None else b_bar,
                           nu=nu, b_mean=b_mean)


class TestTau0:
    def test_unit_gaussian_input(self):
        stats = [linear_stat(np.ones(4), 4, 4, math.inf)]
        assert compute_tau0(stats)[0] == 1.0

    def test_relu_on_standard_normal(self):
        stats = [linear_stat(np.ones(4), 4, 4, math.inf),
                 LayerStatistics(kind="nonlinear", activation="relu",
                                 noise_var=0.0, n_in=4, n_out=4),
                 linear_stat(np.ones(4), 4, 4, 1.0)]
        tau = compute_tau0(stats)
        assert tau[1] == pytest.approx(1.0)
        assert tau[2] == pytest.approx(0.5)

    def test_linear_layer_matches_mc(self):
        net = build_synthetic_network([20, 100, 500, 784], 0.4, 10.0, 30.0, 300, 0)
        stats = stats_from_network(net)
        tau, mean = tau_mean_chain(stats)
        # Monte-Carlo of the scalar limit model for variable 1 (first linear)
        rng = np.random.default_rng(0)
        n = 10**6
        stat = stats[0]
        s_out = stat.s_padded(stat.n_out)
        idx = rng.integers(0, stat.n_out, n)
        q = s_out[idx] * rng.normal(0, math.sqrt(tau[0]), n) + stat.b_bar[idx]
        est = np.mean(q**2)
        se = np.std(q**2) / math.sqrt(n)
        assert abs(est - tau[1]) < 3 * se

    def test_mean_chain_matches_simulation(self):
        # second moments and componentwise means of the sampled layers track
        # the scalar chain at the wide layers
        net = build_synthetic_network([50, 300, 1000], 0.4, 5.0, 25.0, 400, 1)
        tau, mean = tau_mean_chain(stats_from_network(net))
        moms = np.mean([[np.mean(z**2) for z in sample_trajectory(net, s).z[:4]]
                        for s in range(20)], axis=0)
        means = np.mean([[np.mean(z) for z in sample_trajectory(net, s).z[:4]]
                         for s in range(20)], axis=0)
        for ell in (1, 2, 3):
            assert moms[ell] == pytest.approx(tau[ell], rel=0.1)
            assert means[ell] == pytest.approx(mean[ell], abs=0.08)

    def test_unbounded_singular_values_rejected(self):
        stats = [linear_stat([np.inf], 2, 2, 1.0)]
        with pytest.raises(MlvampError):
            compute_tau0(stats)


class TestErrorFunctions:
    def test_input_endpoint(self):
        assert error_input(0.0) == 1.0
        assert error_input(3.0) == pytest.approx(0.25)

    def test_identity_channel_closed_form(self):
        stat = LayerStatistics(kind="nonlinear", activation="identity", noise_var=0.0)
        ep, em, _ = error_nonlinear(stat, 2.0, 3.0, 1.0)
        assert ep == pytest.approx(1 / 5.0, rel=1e-10)
        assert em == pytest.approx(1 / 5.0, rel=1e-10)

    def test_relu_matches_mc_chain(self):
        gp, gm, tau = 1.0, 1.0, 1.0
        ep, em, _ = error_nonlinear(RELU_STAT, gp, gm, tau)
        rng = np.random.default_rng(0)
        n = 10**6
        rp = rng.normal(0, math.sqrt(tau - 1 / gp), n)
        z = rp + rng.normal(0, math.sqrt(1 / gp), n)
        zo = np.maximum(z, 0)
        rm = zo + rng.normal(0, math.sqrt(1 / gm), n)
        from mlvamp.scalar_denoiser import ScalarChannel, denoise_middle
        res = denoise_middle(ScalarChannel("relu", 0.0), rp, rm, gp, gm)
        mse_out = (res.mean_out - zo) ** 2
        mse_in = (res.mean_in - z) ** 2
        assert abs(ep - np.mean(mse_out)) < 3 * np.std(mse_out) / math.sqrt(n)
        assert abs(em - np.mean(mse_in)) < 3 * np.std(mse_in) / math.sqrt(n)

    def test_rplus_variance_clamp_flagged(self):
        _, _, clamped = error_nonlinear(RELU_STAT, 0.5, 1.0, 1.0)  # tau < 1/gp
        assert clamped

    def test_linear_zero_singulars_decoupled(self):
        stat = linear_stat(np.zeros(3), 3, 3, nu=4.0)
        ep, em = error_linear(stat, 2.0, 3.0)
        assert em == pytest.approx(0.5)
        assert ep == pytest.approx(1 / 7.0)

    def test_linear_hard_constraint(self):
        stat = linear_stat(np.ones(3), 3, 3, nu=math.inf)
        ep, em = error_linear(stat, 2.0, 3.0)
        assert ep == pytest.approx(0.2)
        assert em == pytest.approx(0.2)

    def test_measurement_layer_matches_mc(self):
        # E- averages over the input-side spectrum (784 with zero padding),
        # E+ over the output-side spectrum (300, all nonzero); the MC oracle
        # simulates the scalar channel on each population separately
        from mlvamp.linear_denoiser import component_solve

        net = build_synthetic_network([20, 100, 500, 784], 0.4, 10.0, 30.0, 300, 0)
        stat = stats_from_network(net)[-1]
        gp, gm = 3.0, 0.7
        ep, em = error_linear(stat, gp, gm)
        rng = np.random.default_rng(1)
        n = 10**6

        def mc(side_dim):
            s_pad = stat.s_padded(side_dim)
            s = s_pad[rng.integers(0, side_dim, n)]
            p0 = rng.normal(0, 1, n) / math.sqrt(gp)
            q0 = s * p0 + rng.normal(0, 1, n) / math.sqrt(stat.nu)
            rm = q0 + rng.normal(0, 1, n) / math.sqrt(gm)
            cs = component_solve(np.zeros(n), rm, s, np.zeros(n), gp, gm, stat.nu)
            return (cs.g_minus - p0) ** 2, (cs.g_plus - q0) ** 2

        err_in, _ = mc(stat.n_in)
        _, err_out = mc(stat.n_out)
        assert abs(em - np.mean(err_in)) < 3 * np.std(err_in) / math.sqrt(n)
        assert abs(ep - np.mean(err_out)) < 3 * np.std(err_out) / math.sqrt(n)

    def test_observed_linear_formula(self):
        stat = linear_stat(np.array([1.0, 2.0]), 3, 2, nu=4.0)
        val = error_observed_linear(stat, 2.0)
        expect = np.mean([1 / (2 + 4 * 1), 1 / (2 + 4 * 4), 1 / 2])
        assert val == pytest.approx(expect, rel=1e-12)

    def test_observed_linear_needs_finite_nu(self):
        with pytest.raises(MlvampError):
            error_observed_linear(linear_stat(np.ones(2), 2, 2, math.inf), 1.0)

    def test_errors_nonincreasing_in_precisions(self):
        for stat in (RELU_STAT,
                     LayerStatistics(kind="nonlinear", activation="identity",
                                     noise_var=0.1)):
            last_p = last_m = np.inf
            for g in [0.1, 0.5, 2.0, 8.0, 50.0]:
                ep, em, _ = error_nonlinear(stat, g, g, 12.0)
                assert ep <= last_p + 1e-12 and em <= last_m + 1e-12
                last_p, last_m = ep, em
        stat = linear_stat(np.linspace(0.2, 2, 5), 5, 5, nu=3.0)
        last_p = last_m = np.inf
        for g in [0.1, 1.0, 10.0]:
            ep, em = error_linear(stat, g, g)
            assert ep <= last_p and em <= last_m
            last_p, last_m = ep, em


class TestRunSe:
    def test_eta_identity_exact(self):
        net = oracles.make_gaussian_chain(16, seed=1, n_pairs=1)
        se = run_se(stats_from_network(net), 8)
        for rec in se.records:
            assert np.array_equal(rec.eta, rec.gamma_plus + rec.gamma_minus)

    def test_requires_iterations(self):
        net = oracles.make_gaussian_chain(4, seed=0)
        with pytest.raises(MlvampError):
            run_se(stats_from_network(net), 0)

    def test_gaussian_chain_parity_with_engine(self):
        # on a Gaussian chain both recursions are closed-form and identical
        net = oracles.make_gaussian_chain(64, seed=3, n_pairs=2)
        opts = EngineOptions(max_iter=8)
        se = run_se(stats_from_network(net), 8, opts)
        traj = sample_trajectory(net, 0)
        recs = run(net, traj.z[-1], opts)
        for eng_rec, se_rec in zip(recs, se.records):
            assert np.allclose(eng_rec.gamma_plus, se_rec.gamma_plus, rtol=1e-10)
            assert np.allclose(eng_rec.gamma_minus, se_rec.gamma_minus, rtol=1e-10)

    def test_se_fixed_point_matches_dense_variances_smoke(self):
        # small-N smoke version of the dimension-extrapolated acceptance check
        net = oracles.make_gaussian_chain(256, seed=5, n_pairs=1)
        se = run_se(stats_from_network(net), 40)
        traj = sample_trajectory(net, 1)
        _, avg_vars = oracles.gaussian_chain_posterior(net, traj.z[-1])
        for ell in range(net.n_layers):
            pred = 1.0 / se.records[-1].eta[ell]
            assert pred == pytest.approx(avg_vars[ell], rel=0.10)

    def test_paper_config_runs_clean(self):
        net = build_synthetic_network([20, 100, 500, 784], 0.4, 10.0, 30.0, 300, 0)
        se = run_se(stats_from_network(net), 10,
                    EngineOptions(damping=0.85))
        assert se.clamp_total == 0
        curve = [r.nmse_db[0] for r in se.records]
        assert curve[0] == pytest.approx(0.0, abs=1e-9)
        assert curve[-1] < -20
        # trajectory decreasing then flat
        assert all(b <= a + 1e-6 for a, b in zip(curve, curve[1:]))


class TestPredictedNmse:
    def test_no_information(self):
        net = oracles.make_gaussian_chain(4, seed=0)
        se = run_se(stats_from_network(net), 1)
        # forward half 1 at layer 0 has eta = 1/tau0 exactly (pure prior)
        assert predicted_nmse_db(se, 0, 1) == pytest.approx(0.0, abs=1e-9)

    def test_decade_arithmetic(self):
        net = oracles.make_gaussian_chain(4, seed=0)
        se = run_se(stats_from_network(net), 1)
        se.records[0].eta[0] = 100.0 / se.tau0[0]
        assert predicted_nmse_db(se, 0, 1) == pytest.approx(-20.0)
