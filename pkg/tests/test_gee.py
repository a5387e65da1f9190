import itertools
import warnings

import numpy as np
import pytest
from scipy.special import expit

from conftest import make_trial
from oracles import (dense_duration_weight, dense_lambda, gee_lmm_difference, random_selection)
from swedge.data_model import TrialData
from swedge.design import SelectionStructure, TreatmentEffectSpec, expected_h, h_indicator
from swedge.gcomp import build_stacked
from swedge.gee import (LinkSpec, RobustnessWarning, WorkingCorrelation, duration_weight_matrix,
                        estimate_estimands_gee, fit_gee, g_compute_mu, lambda_weight,
                        lambda_weights, moment_correlations)
from swedge.lmm import FitError, fit_lmm


def quiet_fit(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RobustnessWarning)
        return fit_gee(*args, **kw)


class TestLinkAndCorrelation:
    def test_canonical_pairs(self):
        assert LinkSpec("logit").variance(np.array([0.25]))[0] == pytest.approx(0.1875)
        assert LinkSpec("log").variance(np.array([3.0]))[0] == 3.0
        np.testing.assert_allclose(LinkSpec("identity").variance(np.array([5.0])), [1.0])

    def test_independence_pins_rho(self):
        c = WorkingCorrelation("independence")
        assert (c.rho1, c.rho2) == (0.0, 0.0)
        assert c.estimated == ()
        with pytest.raises(ValueError):
            WorkingCorrelation("independence", 0.1, 0.0)

    def test_within_period_pins_rho1(self):
        c = WorkingCorrelation("within-period")
        assert c.rho1 == 0.0 and c.estimated == ("rho2",)
        with pytest.raises(ValueError):
            WorkingCorrelation("within-period", 0.2, 0.1)

    def test_nested_estimated_unless_fixed(self):
        assert WorkingCorrelation("nested").estimated == ("rho1", "rho2")
        assert WorkingCorrelation("nested", 0.1, 0.05).estimated == ()


class TestMomentCorrelations:
    def test_perfect_correlation(self):
        sizes = np.array([[2, 3], [3, 1]])
        cluster = np.repeat([0, 1], sizes.sum(axis=1))
        period = np.concatenate([np.repeat([1, 2], s) for s in sizes])
        r = np.where(cluster == 0, 1.0, -1.0)
        rho1, rho2, has_cross = moment_correlations(r, cluster, period, sizes, dispersion=1.0)
        assert (rho1, rho1 + rho2, rho2) == pytest.approx((1.0, 1.0, 0.0))
        assert has_cross

    def test_independent_residuals(self):
        rng = np.random.default_rng(5)
        sizes = rng.integers(5, 10, size=(400, 3))
        cluster = np.repeat(np.arange(400), sizes.sum(axis=1))
        period = np.concatenate([np.repeat([1, 2, 3], s) for s in sizes])
        r = rng.normal(size=cluster.size)
        rho1, rho2, _ = moment_correlations(r, cluster, period, sizes)
        assert abs(rho1) < 0.01 and abs(rho2) < 0.02

    def test_matches_pair_enumeration(self, rng):
        sizes = np.array([[2, 3, 1], [3, 0, 2]])
        cluster = np.repeat([0, 1], sizes.sum(axis=1))
        period = np.concatenate([np.repeat([1, 2, 3], s) for s in sizes])
        r = rng.normal(size=cluster.size)
        cross, within = [], []
        for a, b in itertools.combinations(range(r.size), 2):
            if cluster[a] != cluster[b]:
                continue
            (within if period[a] == period[b] else cross).append(r[a] * r[b])
        phi = np.mean(r ** 2)
        rho1, rho2, _ = moment_correlations(r, cluster, period, sizes)
        assert rho1 == pytest.approx(np.mean(cross) / phi, rel=1e-12)
        assert rho1 + rho2 == pytest.approx(np.mean(within) / phi, rel=1e-12)

    def test_single_period_has_no_cross_pairs(self):
        sizes = np.array([[3], [2]])
        cluster = np.repeat([0, 1], [3, 2])
        rho1, _, has_cross = moment_correlations(np.ones(5), cluster, np.ones(5, int), sizes)
        assert rho1 == 0.0 and not has_cross


class TestFit:
    def test_identity_gee_equals_lmm(self, rng):
        for k in range(20):
            data = make_trial(rng, I=int(rng.integers(8, 16)), J=int(rng.integers(3, 6)))
            structure = ["constant", "duration", "period", "saturated"][k % 4]
            assert gee_lmm_difference(data, structure) < 1e-8

    def test_independence_logistic_matches_glm(self, rng):
        sm = pytest.importorskip("statsmodels.api")
        data = make_trial(rng, I=18, J=3, binary=True, n_range=(5, 10))
        fit = fit_gee(data, TreatmentEffectSpec("saturated", 3), "independence", "logit")
        Q, y = fit.design.Q, fit.design.y
        ref = sm.GLM(y, Q, family=sm.families.Binomial()).fit(tol=1e-14)
        np.testing.assert_allclose(fit.beta, ref.params, atol=1e-8)

    def test_zero_rho_equals_pooled_equations(self, rng):
        data = make_trial(rng, I=12, J=3)
        spec = TreatmentEffectSpec("constant", 3)
        a = fit_gee(data, spec, WorkingCorrelation("nested", 0.0, 0.0), "identity")
        b = fit_gee(data, spec, "independence", "identity")
        np.testing.assert_allclose(a.beta, b.beta, atol=1e-12)
        Q, y = b.design.Q, b.design.y
        np.testing.assert_allclose(b.beta, np.linalg.lstsq(Q, y, rcond=None)[0], atol=1e-10)

    def test_estimated_rho_solves_moment_equations(self, rng):
        data = make_trial(rng, I=20, J=4, tau=0.8, kappa=0.5)
        fit = fit_gee(data, TreatmentEffectSpec("constant", 4), "nested", "identity")
        assert fit.param_names[-3:] == ["phi", "rho1", "rho2"]
        np.testing.assert_allclose(fit.scores.sum(axis=0), 0.0, atol=1e-8)
        assert fit.rho[0] > 0
        assert fit.conditions == ("II",)

    def test_robustness_warning(self, rng):
        data = make_trial(rng, I=18, J=3, binary=True, n_range=(5, 10))
        with pytest.warns(RobustnessWarning):
            fit = fit_gee(data, TreatmentEffectSpec("constant", 3), "nested", "logit")
        assert fit.conditions == ()

    def test_conditions_recorded(self, rng):
        data = make_trial(rng, I=12, J=3, binary=True, n_range=(5, 10))
        fit = fit_gee(data, TreatmentEffectSpec("constant", 3), "independence", "logit")
        # individual-level covariates rule out condition III
        assert fit.conditions == ("I",)
        fit = quiet_fit(data.select_covariates([]), TreatmentEffectSpec("constant", 3),
                        "within-period", "logit")
        assert "III" in fit.conditions


class TestGComputation:
    def test_identity_difference_is_shift(self, rng):
        data = make_trial(rng, I=12, J=3)
        fit = fit_gee(data, TreatmentEffectSpec("constant", 3))
        for j in (1, 2, 3):
            assert g_compute_mu(fit, j, 0.7) - g_compute_mu(fit, j, 0.0) == pytest.approx(0.7, abs=1e-12)

    def test_logit_without_covariates(self, rng):
        data = make_trial(rng, I=12, J=3, binary=True, n_range=(5, 10)).select_covariates([])
        fit = fit_gee(data, TreatmentEffectSpec("period", 3), "independence", "logit")
        for j in (1, 2):
            assert g_compute_mu(fit, j, 0.4) == pytest.approx(expit(fit.beta[j - 1] + 0.4), abs=1e-14)

    def test_binary_covariate_enumeration(self):
        # three clusters, two periods, one binary covariate; period 2 is dropped
        cluster = np.array([0, 0, 0, 0, 0, 1, 1, 1, 1, 2, 2, 2, 2])
        period = np.array([1, 1, 1, 1, 2, 1, 1, 1, 2, 1, 1, 1, 2])
        x = np.array([1, 0, 1, 0, 1, 0, 1, 0, 0, 1, 0, 1, 1], dtype=float)[:, None]
        y = np.array([1, 0, 0, 1, 1, 0, 1, 1, 0, 0, 0, 1, 1], dtype=float)
        data = TrialData(cluster, period, y, {0: 1, 1: 2, 2: 2}, x=x, covariate_names=["x"],
                         n_periods=2)
        fit = fit_gee(data, TreatmentEffectSpec("period", 2), "independence", "logit")
        b0, bx = fit.beta[0], fit.beta[-1]
        retained = x[period == 1, 0]
        expected = np.mean([expit(b0 + 0.5 + bx * v) for v in retained])
        assert g_compute_mu(fit, 1, 0.5) == pytest.approx(expected, abs=1e-14)

    def test_unretained_period(self, rng):
        data = make_trial(rng, I=12, J=3)
        fit = fit_gee(data, TreatmentEffectSpec("period", 3))
        with pytest.raises(ValueError):
            g_compute_mu(fit, 3)

    def test_identity_constant_collapses_to_coefficient(self, rng):
        data = make_trial(rng, I=16, J=4)
        fit = fit_gee(data, TreatmentEffectSpec("constant", 4), "nested", "identity")
        rep = estimate_estimands_gee(fit)
        assert rep.components[0].estimate == pytest.approx(fit.beta[4], abs=1e-10)

    @pytest.mark.parametrize("structure", ["duration", "period", "saturated"])
    def test_identity_components_equal_coefficients(self, rng, structure):
        data = make_trial(rng, I=16, J=4)
        fit = fit_gee(data, TreatmentEffectSpec(structure, 4))
        rep = estimate_estimands_gee(fit)
        np.testing.assert_allclose([r.estimate for r in rep.components],
                                   fit.beta[fit.design.treatment_slice()], atol=1e-10)

    def test_saturated_difference_components(self, rng):
        data = make_trial(rng, I=18, J=3, binary=True, n_range=(5, 10))
        fit = fit_gee(data, TreatmentEffectSpec("saturated", 3), "independence", "logit")
        rep = estimate_estimands_gee(fit)
        for k, (j, d) in enumerate(fit.spec.pairs()):
            b = fit.beta[fit.design.treatment_slice()][k]
            want = g_compute_mu(fit, j, b) - g_compute_mu(fit, j, 0.0)
            assert rep.components[k].estimate == pytest.approx(want, abs=1e-10)

    def test_lmm_ratio_scale(self, rng):
        data = make_trial(rng, I=16, J=3, effect=0.5)
        fit = fit_lmm(data, TreatmentEffectSpec("period", 3), "nested")
        from swedge.lmm import extract_estimands
        rep = extract_estimands(fit, scale="rr")
        for k, row in enumerate(rep.components):
            j = k + 1
            b = fit.treatment[k]
            mu1, mu0 = g_compute_mu(fit, j, b), g_compute_mu(fit, j, 0.0)
            assert row.estimate == pytest.approx(mu1 / mu0, rel=1e-10)
            assert row.ci_lo < row.estimate < row.ci_hi


class TestStacked:
    @pytest.mark.parametrize("structure,scale,link", [
        ("constant", "difference", "logit"),
        ("duration", "difference", "logit"),
        ("period", "rr", "log"),
        ("saturated", "or", "logit"),
    ])
    def test_rows_vanish_at_solution(self, rng, structure, scale, link):
        data = make_trial(rng, I=18, J=3, binary=True, n_range=(5, 10), effect=0.3)
        fit = quiet_fit(data, TreatmentEffectSpec(structure, 3), "nested", link)
        st = build_stacked(fit, scale)
        np.testing.assert_allclose(st.rows().sum(axis=0), 0.0, atol=1e-8)
        assert np.all(np.isfinite(st.estimate_cov))

    def test_lmm_stack_vanishes(self, rng):
        data = make_trial(rng, I=16, J=4)
        fit = fit_lmm(data, TreatmentEffectSpec("duration", 4), "nested")
        st = build_stacked(fit, "difference")
        np.testing.assert_allclose(st.rows().sum(axis=0), 0.0, atol=1e-8)

    def test_ratio_scale_needs_period_structure(self, rng):
        data = make_trial(rng, I=18, J=3, binary=True, n_range=(5, 10))
        fit = fit_gee(data, TreatmentEffectSpec("constant", 3), "independence", "logit")
        with pytest.raises(ValueError, match="period or saturated"):
            estimate_estimands_gee(fit, scale="or")

    def test_zero_control_mean_under_risk_ratio(self, rng):
        data = make_trial(rng, I=12, J=3)
        y = np.where(data.period > 0, 0.0, 1.0)
        labels = np.array(data.cluster_labels)
        zero = TrialData(labels[data.cluster_index], data.period, y,
                         dict(zip(labels, data.adoption)), n_periods=3)
        fit = fit_gee(zero, TreatmentEffectSpec("period", 3))
        with pytest.raises((ValueError, FitError)):
            estimate_estimands_gee(fit, scale="rr")


class TestLambdaWeights:
    def test_independence(self, rng):
        ps = np.array([0.2, 0.5, 0.9, 1.0])
        sizes = rng.integers(1, 30, size=(5, 4))
        np.testing.assert_array_equal(lambda_weights(sizes, ps, 0.0, 0.0),
                                      np.broadcast_to(ps * (1 - ps), (5, 4)))

    def test_last_period_is_zero(self, rng):
        for _ in range(50):
            J = int(rng.integers(2, 6))
            ps = np.r_[np.sort(rng.uniform(size=J - 1)), 1.0]
            sizes = rng.integers(0, 20, size=(3, J))
            lam = lambda_weights(sizes, ps, rng.uniform(0, 0.5), rng.uniform(0, 0.5))
            assert np.all(lam[:, -1] == 0.0)

    def test_two_period_example(self):
        assert lambda_weight([10, 10], [0.5, 1.0], 0.1, 0.0, 1) == pytest.approx(1 / 6, abs=1e-15)

    def test_dense_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            J = int(rng.integers(2, 6))
            ps = np.r_[np.sort(rng.uniform(size=J - 1)), 1.0]
            sizes = rng.integers(0, 7, size=J)
            r1, r2 = rng.uniform(0, 0.5, size=2)
            got = lambda_weights(sizes, ps, r1, r2)
            want = dense_lambda(sizes, ps, r1, r2)
            mask = sizes > 0
            np.testing.assert_allclose(got[mask], want[mask], atol=1e-10)

    def test_sizes_probability_mismatch(self):
        with pytest.raises(ValueError):
            lambda_weights([1, 2, 3], [0.5, 1.0], 0.1, 0.1)


class TestDurationWeights:
    def test_independence_collapse(self, rng):
        J = 4
        p = np.array([0.1, 0.2, 0.3, 0.4])
        n = rng.integers(1, 10, size=J)
        for z, d in itertools.product(range(1, J + 1), range(1, J + 1)):
            sel = np.diag((z == np.arange(1, J + 1) - d + 1).astype(float))
            want = (h_indicator(z, J) - expected_h(p, J)).T @ np.diag(n) @ sel
            np.testing.assert_allclose(duration_weight_matrix(z, n, p, 0.0, 0.0, d), want,
                                       atol=1e-14)

    def test_columns_before_duration_vanish(self, rng):
        J = 5
        p = np.full(J, 0.2)
        n = rng.integers(1, 10, size=J)
        for z, d in itertools.product(range(1, J + 1), range(1, J + 1)):
            W = duration_weight_matrix(z, n, p, 0.1, 0.05, d)
            assert np.all(W[:, :d - 1] == 0.0)

    def test_dense_kronecker_oracle(self):
        rng = np.random.default_rng(13)
        for _ in range(60):
            J = int(rng.integers(2, 5))
            sel = random_selection(rng, J, int(rng.integers(1, 6)))
            if sel.sizes.sum() == 0:
                continue
            p = rng.dirichlet(np.ones(J))
            r1, r2 = rng.uniform(0, 0.4, size=2)
            z, d = int(rng.integers(1, J + 1)), int(rng.integers(1, J + 1))
            np.testing.assert_allclose(duration_weight_matrix(z, sel.sizes, p, r1, r2, d),
                                       dense_duration_weight(z, sel, p, r1, r2, d), atol=1e-10)

    def test_invariant_to_who_enrolls(self, rng):
        J, pop = 3, 6
        p = np.array([0.3, 0.3, 0.4])
        sel = random_selection(rng, J, pop)
        perm = SelectionStructure([rng.permutation(pop)[:e.size] for e in sel.enrolled], pop)
        a = dense_duration_weight(2, sel, p, 0.2, 0.1, 1)
        b = dense_duration_weight(2, perm, p, 0.2, 0.1, 1)
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_array_equal(duration_weight_matrix(2, sel.sizes, p, 0.2, 0.1, 1),
                                      duration_weight_matrix(2, perm.sizes, p, 0.2, 0.1, 1))
