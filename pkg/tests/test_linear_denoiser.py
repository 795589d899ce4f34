import math

import numpy as np
import pytest

import oracles
from mlvamp.errors import MlvampError
from mlvamp.linear_denoiser import (
    component_solve,
    component_variances,
    denoise_linear,
    denoise_linear_observed,
)
from mlvamp.network import LinearStage, haar_orthogonal, svd_decompose_stage


def random_stage(rng, n_out=8, n_in=12, nu=3.0):
    W = rng.normal(size=(n_out, n_in))
    return svd_decompose_stage(W, rng.normal(size=n_out), nu)


class TestComponentSolve:
    def test_s_zero_decouples(self):
        cs = component_solve(0.7, -0.4, 0.0, 1.1, 2.0, 3.0, 5.0)
        assert cs.g_minus == pytest.approx(0.7, rel=1e-12)
        assert cs.g_plus == pytest.approx((3.0 * -0.4 + 5.0 * 1.1) / 8.0, rel=1e-12)

    def test_hard_constraint_average(self):
        cs = component_solve(1.0, 3.0, 1.0, 0.0, 2.0, 2.0, math.inf)
        assert cs.g_minus == pytest.approx(2.0, rel=1e-12)
        assert cs.g_plus == pytest.approx(2.0, rel=1e-12)

    def test_matches_explicit_2x2_inverse(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            u_in, u_out, b = rng.normal(size=3)
            s = rng.uniform(0, 3)
            gp, gm, nu = rng.uniform(0.1, 5, size=3)
            P = np.array([[gp + nu * s * s, -nu * s], [-nu * s, gm + nu]])
            d = np.array([gp * u_in - nu * s * b, gm * u_out + nu * b])
            ref = np.linalg.solve(P, d)
            cov = np.linalg.inv(P)
            cs = component_solve(u_in, u_out, s, b, gp, gm, nu)
            assert cs.g_minus == pytest.approx(ref[0], abs=1e-12, rel=1e-12)
            assert cs.g_plus == pytest.approx(ref[1], abs=1e-12, rel=1e-12)
            assert cs.d_minus == pytest.approx(gp * cov[0, 0], rel=1e-12)
            assert cs.d_plus == pytest.approx(gm * cov[1, 1], rel=1e-12)
            assert 0 < cs.d_minus < 1 and 0 < cs.d_plus < 1

    def test_deterministic_limit_matches_large_nu(self):
        # finite-nu solve approaches the exact constrained branch as nu grows
        # (nu kept moderate: the 2x2 determinant cancels catastrophically at
        # huge nu, which is why the nu = inf branch exists)
        cs_inf = component_solve(0.3, 1.2, 0.8, 0.1, 1.5, 2.5, math.inf)
        cs_big = component_solve(0.3, 1.2, 0.8, 0.1, 1.5, 2.5, 1e8)
        assert cs_inf.g_minus == pytest.approx(cs_big.g_minus, rel=1e-6)
        assert cs_inf.g_plus == pytest.approx(cs_big.g_plus, rel=1e-6)
        assert cs_inf.d_plus == pytest.approx(cs_big.d_plus, rel=1e-6)

    def test_singular_rejected(self):
        with pytest.raises(MlvampError):
            component_solve(0.0, 0.0, 1.0, 0.0, 0.0, 0.0, math.inf)


class TestDenoiseLinear:
    def test_identity_stage_symmetric_average(self):
        n = 6
        st = LinearStage(v_out=np.eye(n), v_in=np.eye(n), s=np.ones(n),
                         b=np.zeros(n), nu=math.inf)
        rng = np.random.default_rng(1)
        rp, rm = rng.normal(size=n), rng.normal(size=n)
        res = denoise_linear(st, rp, rm, 2.0, 2.0)
        assert np.allclose(res.z_hat_minus, 0.5 * (rp + rm), atol=1e-12)
        assert np.allclose(res.z_hat_plus, 0.5 * (rp + rm), atol=1e-12)

    def test_matches_dense_joint_solve(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            st = random_stage(rng, n_out=8, n_in=12, nu=float(rng.uniform(0.5, 8)))
            rp, rm = rng.normal(size=12), rng.normal(size=8)
            gp, gm = rng.uniform(0.1, 5, size=2)
            res = denoise_linear(st, rp, rm, gp, gm)
            zi, zo, vi, vo = oracles.dense_joint_linear_solve(
                st.to_dense(), st.b, st.nu, rp, rm, gp, gm)
            assert np.allclose(res.z_hat_minus, zi, rtol=1e-8, atol=1e-10)
            assert np.allclose(res.z_hat_plus, zo, rtol=1e-8, atol=1e-10)
            assert res.var_in_mean == pytest.approx(vi, rel=1e-8)
            assert res.var_out_mean == pytest.approx(vo, rel=1e-8)

    def test_deterministic_matches_constrained_solve(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            st = random_stage(rng, n_out=7, n_in=5, nu=math.inf)
            rp, rm = rng.normal(size=5), rng.normal(size=7)
            gp, gm = rng.uniform(0.2, 4, size=2)
            res = denoise_linear(st, rp, rm, gp, gm)
            zi, zo = oracles.dense_constrained_linear_solve(
                st.to_dense(), st.b, rp, rm, gp, gm)
            assert np.allclose(res.z_hat_minus, zi, rtol=1e-8, atol=1e-10)
            assert np.allclose(res.z_hat_plus, zo, rtol=1e-8, atol=1e-10)

    def test_alphas_in_unit_interval(self):
        rng = np.random.default_rng(4)
        for _ in range(30):
            st = random_stage(rng, n_out=6, n_in=9, nu=float(rng.uniform(0.5, 20)))
            res = denoise_linear(st, rng.normal(size=9), rng.normal(size=6),
                                 float(10**rng.uniform(-2, 2)),
                                 float(10**rng.uniform(-2, 2)))
            assert 0 < res.alpha_minus < 1
            assert 0 < res.alpha_plus < 1

    def test_finite_difference_divergence(self):
        # <d z_hat+ / d r-> in transformed coordinates matches alpha+
        rng = np.random.default_rng(5)
        st = random_stage(rng, n_out=10, n_in=6, nu=2.0)
        rp, rm = rng.normal(size=6), rng.normal(size=10)
        gp, gm = 1.3, 0.7
        eps = 1e-6
        res = denoise_linear(st, rp, rm, gp, gm)
        fd = np.zeros(10)
        for n in range(10):
            e = np.zeros(10)
            e[n] = eps
            zp = denoise_linear(st, rp, rm + st.v_out @ e, gp, gm).z_hat_plus
            zm = denoise_linear(st, rp, rm - st.v_out @ e, gp, gm).z_hat_plus
            fd[n] = (st.v_out.T @ (zp - zm))[n] / (2 * eps)
        assert np.mean(fd) == pytest.approx(res.alpha_plus, rel=1e-6)

    def test_orthogonal_invariance(self):
        # same s, b_bar and transformed inputs => same componentwise outputs
        rng = np.random.default_rng(6)
        s = rng.uniform(0.2, 2.0, 5)
        b_bar = rng.normal(size=7)
        u_in, u_out = rng.normal(size=5), rng.normal(size=7)
        gp, gm, nu = 1.1, 2.2, 3.0
        outs = []
        for seed in (1, 2):
            r = np.random.default_rng(seed)
            v_out = haar_orthogonal(7, r)
            v_in = haar_orthogonal(5, r)
            st = LinearStage(v_out=v_out, v_in=v_in, s=s,
                             b=v_out @ b_bar, nu=nu)
            rp = v_in.T @ u_in
            rm = v_out @ u_out
            res = denoise_linear(st, rp, rm, gp, gm)
            outs.append((v_in @ res.z_hat_minus, v_out.T @ res.z_hat_plus,
                         res.alpha_minus, res.alpha_plus))
        assert np.allclose(outs[0][0], outs[1][0], atol=1e-10)
        assert np.allclose(outs[0][1], outs[1][1], atol=1e-10)
        assert outs[0][2] == pytest.approx(outs[1][2], rel=1e-12)

    def test_dimension_mismatch_rejected(self):
        rng = np.random.default_rng(0)
        st = random_stage(rng)
        with pytest.raises(ValueError):
            denoise_linear(st, np.zeros(3), np.zeros(8), 1.0, 1.0)


class TestDenoiseLinearObserved:
    def test_noiseless_identity_recovers_y(self):
        n = 5
        st = LinearStage(v_out=np.eye(n), v_in=np.eye(n), s=np.ones(n),
                         b=np.zeros(n), nu=1e12)
        y = np.arange(n, dtype=float)
        res = denoise_linear_observed(st, y, np.zeros(n), 1.0)
        assert np.max(np.abs(res.z_hat_minus - y)) < 1e-4

    def test_prior_pin(self):
        rng = np.random.default_rng(1)
        st = random_stage(rng, n_out=6, n_in=4, nu=2.0)
        rp = rng.normal(size=4)
        res = denoise_linear_observed(st, rng.normal(size=6), rp, 1e12)
        assert np.max(np.abs(res.z_hat_minus - rp)) < 1e-6

    def test_matches_ridge_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            st = random_stage(rng, n_out=8, n_in=12, nu=float(rng.uniform(0.5, 6)))
            y, rp = rng.normal(size=8), rng.normal(size=12)
            gp = float(rng.uniform(0.2, 4))
            res = denoise_linear_observed(st, y, rp, gp)
            ref = oracles.ridge_solve(st.to_dense(), st.b, st.nu, y, rp, gp)
            assert np.allclose(res.z_hat_minus, ref, rtol=1e-8, atol=1e-10)

    def test_requires_finite_noise(self):
        rng = np.random.default_rng(3)
        st = random_stage(rng, nu=math.inf)
        with pytest.raises(MlvampError):
            denoise_linear_observed(st, np.zeros(8), np.zeros(12), 1.0)


class TestComponentVariances:
    def test_matches_inverse_diagonal(self):
        s = np.array([0.0, 0.5, 2.0])
        gp, gm, nu = 1.2, 0.8, 3.0
        vi, vo = component_variances(s, gp, gm, nu)
        for i, si in enumerate(s):
            P = np.array([[gp + nu * si * si, -nu * si], [-nu * si, gm + nu]])
            cov = np.linalg.inv(P)
            assert vi[i] == pytest.approx(cov[0, 0], rel=1e-12)
            assert vo[i] == pytest.approx(cov[1, 1], rel=1e-12)
