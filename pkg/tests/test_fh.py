import numpy as np
import pytest

from saekit import fh
from saekit.errors import ColumnMismatch, SingularDesign, ZeroTotalVariance

import oracles
from conftest import random_fh_instance


class TestGlsBeta:
    def test_equal_variances_reduce_to_ols(self, rng):
        D = 10
        x = np.column_stack([np.ones(D), rng.normal(size=D)])
        y = rng.normal(size=D)
        inp = fh.FhInput(y, x, np.full(D, 0.03))
        beta = fh.gls_beta(inp, 0.0)
        ols = np.linalg.lstsq(x, y, rcond=None)[0]
        assert np.allclose(beta, ols, atol=1e-12)

    def test_intercept_only_identity_v_gives_mean(self):
        y = np.array([0.2, 0.4, 0.6, 0.8])
        inp = fh.FhInput(y, np.ones((4, 1)), np.full(4, 0.5))
        beta = fh.gls_beta(inp, 0.5)
        assert beta[0] == pytest.approx(y.mean())

    def test_matches_normal_equations_oracle(self, rng):
        D, p = 12, 3
        x = np.column_stack([np.ones(D), rng.normal(size=(D, p - 1))])
        y = rng.normal(size=D)
        s2e = rng.uniform(0.01, 0.1, D)
        inp = fh.FhInput(y, x, s2e)
        s2u = 0.02
        assert np.allclose(fh.gls_beta(inp, s2u),
                           oracles.gls_by_inversion(y, x, s2u + s2e), atol=1e-10)

    def test_rank_deficient_design_rejected(self, rng):
        x = np.ones((6, 2))  # duplicated intercept
        with pytest.raises(SingularDesign):
            fh.FhInput(rng.normal(size=6), x, np.full(6, 0.1))

    def test_zero_total_variance(self):
        inp = fh.FhInput(np.arange(4.0), np.ones((4, 1)), np.full(4, 0.1))
        with pytest.raises(ZeroTotalVariance):
            fh.gls_beta(inp, -0.1)


def balanced_instance(rng, sd_u=0.1):
    y = np.array([0.3, 0.5, 0.9]) + rng.normal(0, sd_u, 3)
    return fh.FhInput(y, np.ones((3, 1)), np.full(3, 0.01))


class TestFitMl:
    def test_zero_variance_truth_truncates(self):
        rng = np.random.default_rng(2)
        D = 200
        x = np.column_stack([np.ones(D), rng.normal(size=D)])
        beta = np.array([0.4, 0.1])
        s2e = rng.uniform(0.01, 0.05, D)
        y = x @ beta + rng.normal(0, np.sqrt(s2e))  # theta = X beta exactly
        fit = fh.fit_ml(fh.FhInput(y, x, s2e))
        assert fit.sigma2_u <= 1e-6

    def test_zero_variance_truth_mean_near_zero(self):
        # across replicates the estimate concentrates at the boundary
        rng = np.random.default_rng(2)
        D = 200
        x = np.column_stack([np.ones(D), rng.normal(size=D)])
        beta = np.array([0.4, 0.1])
        s2e = rng.uniform(0.01, 0.05, D)
        est = []
        for _ in range(50):
            y = x @ beta + rng.normal(0, np.sqrt(s2e))
            est.append(fh.fit_ml(fh.FhInput(y, x, s2e)).sigma2_u)
        assert np.median(est) == 0.0
        assert np.mean(est) < 0.05 * np.mean(s2e)

    def test_balanced_closed_form(self, rng):
        inp = balanced_instance(rng)
        fit = fh.fit_ml(inp)
        sse = np.sum((inp.y - inp.y.mean()) ** 2)
        closed = max(0.0, sse / 3 - 0.01)
        assert fit.sigma2_u == pytest.approx(closed, abs=1e-8)
        grid = oracles.fh_grid_optimum(inp.y, inp.x, inp.sigma2_e, "ML")
        assert fit.sigma2_u == pytest.approx(grid, abs=1e-4)

    def test_simulation_recovery_anemia_scale(self):
        # operating point sigma2_u = 0.00682
        truth = 0.00682
        rng = np.random.default_rng(42)
        D = 200
        x = np.column_stack([np.ones(D), rng.normal(0, 1, D)])
        beta = np.array([0.5, 0.05])
        s2e = rng.uniform(0.002, 0.01, D)
        est = []
        for _ in range(500):
            y = x @ beta + rng.normal(0, np.sqrt(truth), D) + rng.normal(0, np.sqrt(s2e))
            est.append(fh.fit_ml(fh.FhInput(y, x, s2e)).sigma2_u)
        assert abs(np.mean(est) - truth) < 0.10 * truth


class TestFitReml:
    def test_empty_design_rejected(self):
        with pytest.raises((SingularDesign, ValueError)):
            fh.FhInput(np.arange(3.0), np.empty((3, 0)), np.full(3, 0.1))

    def test_balanced_matches_grid_oracle(self, rng):
        inp = balanced_instance(rng)
        fit = fh.fit_reml(inp)
        grid = oracles.fh_grid_optimum(inp.y, inp.x, inp.sigma2_e, "REML")
        assert fit.sigma2_u == pytest.approx(grid, abs=1e-4)

    def test_reml_less_biased_than_ml(self):
        truth = 0.02
        rng = np.random.default_rng(7)
        D, p = 30, 5
        x = np.column_stack([np.ones(D), rng.normal(size=(D, p - 1))])
        beta = rng.normal(0, 0.3, p)
        s2e = rng.uniform(0.01, 0.04, D)
        ml_est, reml_est = [], []
        for _ in range(500):
            y = x @ beta + rng.normal(0, np.sqrt(truth), D) + rng.normal(0, np.sqrt(s2e))
            inp = fh.FhInput(y, x, s2e)
            ml_est.append(fh.fit_ml(inp).sigma2_u)
            reml_est.append(fh.fit_reml(inp).sigma2_u)
        assert abs(np.mean(reml_est) - truth) < abs(np.mean(ml_est) - truth)

    def test_p_projection_idempotent_at_optimum(self, rng):
        inp = random_fh_instance(rng, D=10, p=3)
        fit = fh.fit_reml(inp)
        v = np.diag(fit.sigma2_u + inp.sigma2_e)
        vinv = np.linalg.inv(v)
        x = inp.x
        p_mat = vinv - vinv @ x @ np.linalg.inv(x.T @ vinv @ x) @ x.T @ vinv
        assert np.allclose(p_mat @ v @ p_mat, p_mat, atol=1e-8)


class TestFitMoments:
    def test_zero_residuals_truncate(self):
        x = np.column_stack([np.ones(5), np.arange(5.0)])
        y = x @ np.array([0.3, 0.1])  # exact fit
        fit = fh.fit_moments(fh.FhInput(y, x, np.full(5, 0.02)))
        assert fit.sigma2_u == 0.0

    def test_intercept_only_matches_arithmetic(self, rng):
        D = 5
        y = rng.uniform(0.2, 0.8, D)
        s2e = rng.uniform(0.005, 0.02, D)
        fit = fh.fit_moments(fh.FhInput(y, np.ones((D, 1)), s2e))
        # independent arithmetic: h_i = 1/D for the intercept-only design
        resid = y - y.mean()
        expected = max(0.0, sum(resid[i] ** 2 - s2e[i] * (1 - 1 / D)
                                for i in range(D)) / (D - 1))
        assert fit.sigma2_u == pytest.approx(expected, rel=1e-12)

    def test_simulation_recovery(self):
        truth = 0.00812  # operating point
        rng = np.random.default_rng(11)
        D = 200
        x = np.column_stack([np.ones(D), rng.normal(size=D)])
        beta = np.array([0.6, -0.05])
        s2e = rng.uniform(0.002, 0.012, D)
        est = []
        for _ in range(400):
            y = x @ beta + rng.normal(0, np.sqrt(truth), D) + rng.normal(0, np.sqrt(s2e))
            est.append(fh.fit_moments(fh.FhInput(y, x, s2e)).sigma2_u)
        assert abs(np.mean(est) - truth) < 0.15 * truth


class TestFitFhIterative:
    def test_defining_equation_residual(self, rng):
        inp = random_fh_instance(rng, D=12, p=2, sigma2_u=0.05)
        fit = fh.fit_fh_iterative(inp)
        if fit.sigma2_u > 0:
            beta = fh.gls_beta(inp, fit.sigma2_u)
            r = inp.y - inp.x @ beta
            lhs = np.sum(r**2 / (fit.sigma2_u + inp.sigma2_e))
            assert abs(lhs - (inp.D - inp.p)) < 1e-10 * (inp.D - inp.p) + 1e-10

    def test_truncation_branch(self):
        x = np.column_stack([np.ones(6), np.arange(6.0)])
        y = x @ np.array([0.3, 0.05]) + 1e-4  # tiny residuals, big variances
        fit = fh.fit_fh_iterative(fh.FhInput(y, x, np.full(6, 0.5)))
        assert fit.sigma2_u == 0.0

    def test_matches_bisection_oracle(self, rng):
        inp = random_fh_instance(rng, D=8, p=2, sigma2_u=0.04)
        fit = fh.fit_fh_iterative(inp)
        root = oracles.fh_iterative_bisect(inp.y, inp.x, inp.sigma2_e)
        assert fit.sigma2_u == pytest.approx(root, abs=1e-6)


def manual_fit(inp, s2u):
    beta = fh.gls_beta(inp, s2u)
    gamma = s2u / (s2u + inp.sigma2_e) if s2u > 0 else np.zeros(inp.D)
    return fh.FhFit(beta, s2u, "REML", None, gamma, True, 0)


class TestEblup:
    def test_zero_sigma_u_gives_synthetic(self, rng):
        inp = random_fh_instance(rng, D=10)
        fit = manual_fit(inp, 0.0)
        rows = fh.eblup(inp, fit)
        synth = inp.x @ fit.beta
        assert np.allclose([r.value for r in rows], synth)
        assert all(r.gamma == 0.0 for r in rows)

    def test_zero_sampling_variance_gives_direct(self, rng):
        D = 8
        x = np.column_stack([np.ones(D), rng.normal(size=D)])
        s2e = np.concatenate([[0.0], rng.uniform(0.01, 0.05, D - 1)])
        y = rng.uniform(0.2, 0.8, D)
        inp = fh.FhInput(y, x, s2e, max_zero_var=1)
        fit = manual_fit(inp, 0.02)
        rows = fh.eblup(inp, fit)
        assert rows[0].value == pytest.approx(y[0])
        assert rows[0].gamma == pytest.approx(1.0)

    def test_midpoint_when_gamma_half(self, rng):
        D = 6
        c = 0.02
        x = np.column_stack([np.ones(D), rng.normal(size=D)])
        y = rng.uniform(0.2, 0.8, D)
        inp = fh.FhInput(y, x, np.full(D, c))
        fit = manual_fit(inp, c)  # sigma2_u == sigma2_i -> gamma = 1/2
        rows = fh.eblup(inp, fit)
        synth = inp.x @ fit.beta
        assert np.allclose([r.value for r in rows], (y + synth) / 2)

    def test_convex_combination_bounds(self, rng):
        inp = random_fh_instance(rng, D=15, p=3)
        fit = fh.fit_reml(inp)
        synth = inp.x @ fit.beta
        for i, r in enumerate(fh.eblup(inp, fit)):
            lo = min(inp.y[i], synth[i]) - 1e-12
            hi = max(inp.y[i], synth[i]) + 1e-12
            assert lo <= r.value <= hi
            assert 0.0 <= r.gamma <= 1.0
            assert r.mse > 0 and r.mse_method == "g1g2"


class TestSyntheticPredict:
    def test_training_row_equals_its_synthetic_part(self, rng):
        inp = random_fh_instance(rng, D=10)
        fit = fh.fit_reml(inp)
        rows = fh.synthetic_predict(inp.x[:1], fit)
        assert rows[0].value == pytest.approx(float(inp.x[0] @ fit.beta))
        assert rows[0].kind == "synthetic" and rows[0].gamma == 0.0

    def test_intercept_only_all_equal(self, rng):
        y = rng.uniform(0, 1, 8)
        inp = fh.FhInput(y, np.ones((8, 1)), np.full(8, 0.02))
        fit = fh.fit_reml(inp)
        rows = fh.synthetic_predict(np.ones((5, 1)), fit)
        assert len({r.value for r in rows}) == 1

    def test_matches_loop_oracle(self, rng):
        inp = random_fh_instance(rng, D=12, p=3)
        fit = fh.fit_reml(inp)
        x_out = rng.normal(size=(10, 3))
        x_out[:, 0] = 1.0
        rows = fh.synthetic_predict(x_out, fit)
        for i, r in enumerate(rows):
            manual = sum(x_out[i, j] * fit.beta[j] for j in range(3))
            assert r.value == pytest.approx(manual, rel=1e-12)

    def test_column_mismatch(self, rng):
        inp = random_fh_instance(rng, D=10, p=2)
        fit = fh.fit_reml(inp)
        with pytest.raises(ColumnMismatch):
            fh.synthetic_predict(np.ones((3, 4)), fit)


class TestInvariants:
    @pytest.mark.parametrize("method", [fh.ML, fh.REML, fh.MOMENTS, fh.FH_ITERATIVE])
    def test_translation_invariance(self, method, rng):
        for _ in range(5):
            inp = random_fh_instance(rng, D=12, p=3, sigma2_u=0.03)
            base = fh.fit(inp, method).sigma2_u
            neg = fh.fit(fh.FhInput(-inp.y, inp.x, inp.sigma2_e), method).sigma2_u
            a = rng.normal(0, 0.5, inp.p)
            shifted = fh.fit(
                fh.FhInput(inp.y - inp.x @ a, inp.x, inp.sigma2_e), method).sigma2_u
            assert neg == pytest.approx(base, abs=1e-8)
            assert shifted == pytest.approx(base, abs=1e-8)

    @pytest.mark.parametrize("method", [fh.ML, fh.REML])
    def test_score_matches_finite_differences(self, method, rng):
        for _ in range(10):
            inp = random_fh_instance(rng, D=15, p=3)
            s = float(rng.uniform(0.001, 0.1))
            eps = 1e-6 * max(s, 1e-3)
            num = (fh.profile_loglik(inp, s + eps, method)
                   - fh.profile_loglik(inp, s - eps, method)) / (2 * eps)
            ana = fh.profile_score(inp, s, method)
            assert ana == pytest.approx(num, rel=1e-5, abs=1e-7)

    @pytest.mark.parametrize("method", [fh.ML, fh.REML])
    def test_optimum_is_stationary_or_boundary(self, method, rng):
        for _ in range(5):
            inp = random_fh_instance(rng, D=20, p=3, sigma2_u=0.03)
            fit = fh.fit(inp, method)
            score = fh.profile_score(inp, fit.sigma2_u, method)
            if fit.sigma2_u == 0.0:
                assert score <= 0.0  # gradient points inward at the boundary
            else:
                assert abs(score) < 1e-5 * (1 + abs(fit.loglik))
