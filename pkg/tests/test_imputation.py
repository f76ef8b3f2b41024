import math
import warnings

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from truncmeta.imputation import (
    CLTWarning,
    Method,
    complete_null_cdf,
    impute_mean,
    mean_expected_statistic,
    mean_impute_statistic,
    mean_null_cdf,
    mean_null_cdf_full,
    method_pvalue,
    multiple_impute_statistic,
    multiple_null_cdf,
    multiple_null_cdf_full,
    single_impute_statistic,
    truncated_moments,
)
from truncmeta.model import StudyPanel, Transform, group_thresholds
from truncmeta.numerics import make_rng

F, S = Transform.FISHER, Transform.STOUFFER
ALPHAS = [0.001, 0.005, 0.01, 0.05, 0.1, 0.5]


def quad_moments(transform, alpha):
    """Mean and variance of T(U) on (0, alpha) and (alpha, 1) by mpmath quadrature."""
    mpmath.mp.dps = 30
    f = (lambda u: -2 * mpmath.log(u)) if transform is F else (lambda u: mpmath.sqrt(2) * mpmath.erfinv(2 * u - 1))
    a = mpmath.mpf(alpha)
    out = []
    for lo, hi in ((0, a), (a, 1)):
        m1 = mpmath.quad(f, [lo, hi]) / (hi - lo)
        m2 = mpmath.quad(lambda u: f(u) ** 2, [lo, hi]) / (hi - lo)
        out += [float(m1), float(m2 - m1 * m1)]
    mpmath.mp.dps = 15
    return out


def hand_mixture_cdf(transform, k1, weights, shifts, variances, t):
    """Mixture of (k1-study null) + N(shift, var), integrated with scipy quad."""
    total = 0.0
    for w, c, v in zip(weights, shifts, variances):
        if v == 0.0:
            if transform is F:
                total += w * (stats.chi2.cdf(t - c, 2 * k1) if k1 else float(t >= c))
            else:
                total += w * (stats.norm.cdf((t - c) / math.sqrt(k1)) if k1 else float(t >= c))
        elif transform is S:
            total += w * stats.norm.cdf((t - c) / math.sqrt(k1 + v))
        elif k1 == 0:
            total += w * stats.norm.cdf((t - c) / math.sqrt(v))
        else:
            dens = lambda a: stats.chi2.pdf(a, 2 * k1) * stats.norm.cdf((t - c - a) / math.sqrt(v))
            total += w * integrate.quad(dens, 0, np.inf, limit=200, epsabs=1e-13)[0]
    return total


class TestMoments:
    @pytest.mark.parametrize("alpha", ALPHAS)
    @pytest.mark.parametrize("transform", [F, S])
    def test_match_quadrature(self, transform, alpha):
        m = truncated_moments(transform, alpha)
        q = quad_moments(transform, alpha)
        assert [m.mu_w, m.var_w, m.mu_v, m.var_v] == pytest.approx(q, abs=1e-8)

    def test_fisher_reference(self):
        m = truncated_moments(F, 0.05)
        assert m.mu_w == pytest.approx(7.991465, abs=1e-5)
        assert m.mu_v == pytest.approx(1.684660, abs=1e-5)
        # the listed 2.011155 disagrees with both the closed form and quadrature
        assert m.var_v == pytest.approx(quad_moments(F, 0.05)[3], abs=1e-10)
        assert m.var_v == pytest.approx(2.0112107, abs=1e-6)

    @pytest.mark.parametrize("alpha", ALPHAS + [1e-9, 0.999])
    def test_fisher_var_w_is_exactly_four(self, alpha):
        assert truncated_moments(F, alpha).var_w == 4.0

    def test_stouffer_reference(self):
        m = truncated_moments(S, 0.05)
        assert m.mu_w == pytest.approx(-2.062713, abs=1e-4)
        assert m.mu_v == pytest.approx(0.108564, abs=1e-4)

    def test_overall_mean_recovered(self):
        for a in ALPHAS:
            m = truncated_moments(F, a)
            assert a * m.mu_w + (1 - a) * m.mu_v == pytest.approx(2.0, abs=1e-12)
            m = truncated_moments(S, a)
            assert a * m.mu_w + (1 - a) * m.mu_v == pytest.approx(0.0, abs=1e-12)

    def test_bad_alpha(self):
        with pytest.raises(ValueError):
            truncated_moments(F, 1.0)


class TestMeanImputation:
    def test_imputed_values(self):
        panel = StudyPanel.from_values([0.3], censored=[(1, 0.05), (0, 0.05)])
        assert impute_mean(panel) == [0.3, 0.025, 0.525]

    def test_fisher_single_threshold_cdf(self):
        null = mean_null_cdf(F, 0, group_thresholds([0.05]))
        assert null.evaluate(1.0) == 0.0
        assert null.evaluate(5.0) == pytest.approx(0.95, abs=1e-15)
        assert null.evaluate(8.0) == 1.0
        locs, mass = null.atoms()
        assert locs == pytest.approx([-2 * math.log(0.525), -2 * math.log(0.025)], abs=1e-12)
        assert mass == pytest.approx([0.95, 0.05])

    def test_stouffer_single_threshold_atoms(self):
        locs, mass = mean_null_cdf(S, 0, group_thresholds([0.05])).atoms()
        assert locs == pytest.approx([-1.959964, 0.062707], abs=1e-6)
        assert mass == pytest.approx([0.05, 0.95])

    def test_no_censoring_is_complete_null(self):
        t = np.linspace(0, 25, 40)
        assert np.array_equal(mean_null_cdf(F, 4, group_thresholds([])).evaluate(t),
                              complete_null_cdf(F, 4).evaluate(t))

    @pytest.mark.parametrize("transform", [F, S])
    def test_matches_hand_mixture(self, transform):
        th = [0.01, 0.05, 0.05]
        null = mean_null_cdf(transform, 2, group_thresholds(th))
        # oracle: enumerate indicator vectors directly
        weights, shifts = [], []
        for bits in np.ndindex(2, 2, 2):
            w, c = 1.0, 0.0
            for b, a in zip(bits, th):
                w *= a if b else 1 - a
                p = a / 2 if b else (1 + a) / 2
                c += -2 * math.log(p) if transform is F else stats.norm.ppf(p)
            weights.append(w)
            shifts.append(c)
        for t in np.linspace(-6, 30, 25) if transform is F else np.linspace(-8, 5, 25):
            assert null.evaluate(t) == pytest.approx(
                hand_mixture_cdf(transform, 2, weights, shifts, [0.0] * 8, t), abs=1e-12)

    @pytest.mark.parametrize("transform", [F, S])
    def test_grouped_equals_full(self, transform):
        rng = np.random.default_rng(17)
        for _ in range(8):
            th = list(rng.choice([0.001, 0.01, 0.05, 0.2], size=rng.integers(1, 8)))
            k1 = int(rng.integers(0, 4))
            g, f = mean_null_cdf(transform, k1, group_thresholds(th)), mean_null_cdf_full(transform, k1, th)
            t = np.linspace(-10, 40, 101)
            assert np.max(np.abs(g.evaluate(t) - f.evaluate(t))) < 1e-12

    def test_expected_statistic_reference(self):
        assert mean_expected_statistic(F, 0, group_thresholds([0.05])) == pytest.approx(1.593166, abs=1e-5)
        assert mean_expected_statistic(S, 0, group_thresholds([0.05])) == pytest.approx(-0.038427, abs=1e-5)
        assert mean_expected_statistic(F, 3, group_thresholds([])) == 6.0

    def test_expected_statistic_monte_carlo(self):
        th = [0.001, 0.01, 0.05]
        rng = np.random.default_rng(2)
        p = rng.random((200000, 5))
        below = p[:, 2:] < th
        a = np.array(th)
        imputed = np.where(below, a / 2, (1 + a) / 2)
        full = np.hstack([p[:, :2], imputed])
        stat = np.sum(-2 * np.log(full), axis=1)
        expected = mean_expected_statistic(F, 2, group_thresholds(th))
        assert abs(stat.mean() - expected) < 4 * stat.std() / math.sqrt(stat.size)
        assert expected < 2 * 5

    def test_statistic_lands_on_atom(self):
        null = mean_null_cdf(F, 0, group_thresholds([0.05, 0.05, 0.01]))
        locs, _ = null.atoms()
        seen = set()
        for bits in np.ndindex(2, 2, 2):
            panel = StudyPanel.from_values([], censored=list(zip(bits, [0.05, 0.05, 0.01])))
            seen.add(mean_impute_statistic(panel, F))
        assert seen <= set(locs.tolist())

    def test_enumeration_cap(self):
        with pytest.raises(ValueError, match="cap"):
            mean_null_cdf(F, 0, group_thresholds(list(np.linspace(0.01, 0.3, 30))), cap=1000)


class TestPvalues:
    def test_indicator_one_atom(self):
        null = mean_null_cdf(F, 0, group_thresholds([0.05]))
        panel = StudyPanel.from_values([], censored=[(1, 0.05)])
        t = mean_impute_statistic(panel, F)
        assert t == pytest.approx(7.377759, abs=1e-6)
        assert method_pvalue(t, null) == pytest.approx(0.05, abs=1e-15)

    def test_minimal_atom_has_pvalue_one(self):
        null = mean_null_cdf(F, 0, group_thresholds([0.05, 0.01]))
        assert null.pvalue(null.atoms()[0].min()) == pytest.approx(1.0, abs=1e-15)

    def test_stouffer_complete_center(self):
        assert method_pvalue(0.0, complete_null_cdf(S, 2)) == 0.5

    def test_transform_mismatch(self):
        with pytest.raises(ValueError):
            method_pvalue(1.0, complete_null_cdf(S, 2), F)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from([0.001, 0.01, 0.05, 0.3]), min_size=0, max_size=5),
           st.integers(0, 3), st.sampled_from([F, S]),
           st.sampled_from(["mean", "multiple"]))
    def test_cdf_properties(self, th, k1, transform, kind):
        if k1 == 0 and not th:
            return
        groups = group_thresholds(th)
        null = mean_null_cdf(transform, k1, groups) if kind == "mean" else \
            multiple_null_cdf(transform, k1, groups, 50)
        t = np.linspace(-25, 60, 301)
        cdf = null.evaluate(t)
        assert np.all((cdf >= 0) & (cdf <= 1))
        assert np.all(np.diff(cdf) >= -1e-12)
        assert np.allclose(null.evaluate_left(t) + null.survival(t), 1.0, atol=1e-12)


class TestSingleImputation:
    def test_no_censoring_equals_complete(self):
        from truncmeta.model import combine_complete

        panel = StudyPanel.from_values([0.2, 0.6])
        assert single_impute_statistic(panel, F, make_rng(0)) == combine_complete(F, [0.2, 0.6])

    def test_range_forced_by_interval(self):
        panel = StudyPanel.from_values([], censored=[(1, 0.5)])
        rng = make_rng(5)
        for _ in range(200):
            t, _ = single_impute_statistic(panel, F, rng)
            assert t > -2 * math.log(0.5)

    def test_null_is_chi_square(self):
        rng = np.random.default_rng(9)
        n = 100000
        th = np.array([0.01, 0.05])
        p = rng.random((n, 3))
        stats_ = np.empty(n)
        draw_rng = make_rng(4)
        for i in range(n):
            panel = StudyPanel.from_values([p[i, 0]], censored=[(int(p[i, 1] < 0.01), 0.01),
                                                                (int(p[i, 2] < 0.05), 0.05)])
            stats_[i] = single_impute_statistic(panel, F, draw_rng)[0]
        assert stats.kstest(stats_, stats.chi2(6).cdf).statistic < 0.006


class TestMultipleImputation:
    def test_no_censoring_equals_complete(self):
        panel = StudyPanel.from_values([0.2, 0.6])
        assert multiple_impute_statistic(panel, F, 50, make_rng(0)) == pytest.approx(
            -2 * math.log(0.2) - 2 * math.log(0.6))

    def test_large_d_converges_to_truncated_mean(self):
        d = 20000
        panel = StudyPanel.from_values([], censored=[(1, 0.05)])
        t = multiple_impute_statistic(panel, F, d, make_rng(3))
        assert abs(t - 7.991465) < 3 * math.sqrt(4 / d)

    def test_d_one_matches_single(self):
        panel = StudyPanel.from_values([0.4], censored=[(1, 0.05), (0, 0.01)])
        single = single_impute_statistic(panel, S, make_rng(12))[0]
        assert multiple_impute_statistic(panel, S, 1, make_rng(12)) == single

    def test_fisher_no_observed_closed_form(self):
        null = multiple_null_cdf(F, 0, group_thresholds([0.05]), 50)
        m = truncated_moments(F, 0.05)
        for t in (1.0, 1.7, 2.5, 7.5, 8.0, 9.0):
            expected = (0.05 * stats.norm.cdf((t - 7.991465) / math.sqrt(4 / 50))
                        + 0.95 * stats.norm.cdf((t - 1.684660) / math.sqrt(m.var_v / 50)))
            assert null.evaluate(t) == pytest.approx(expected, abs=1e-6)

    def test_stouffer_centered_component(self):
        m = truncated_moments(S, 0.05)
        null = multiple_null_cdf(S, 1, group_thresholds([0.05]), 50)
        # the indicator-0 component alone is centred at mu_V
        comp = null.weights.argmax()
        assert null.shifts[comp] == pytest.approx(m.mu_v)
        z = (m.mu_v - null.shifts[comp]) / math.sqrt(1 + null.variances[comp])
        assert stats.norm.cdf(z) == 0.5

    @pytest.mark.parametrize("transform", [F, S])
    def test_matches_hand_mixture(self, transform):
        th = [0.01, 0.05]
        null = multiple_null_cdf(transform, 2, group_thresholds(th), 40)
        moms = [truncated_moments(transform, a) for a in th]
        weights, means, variances = [], [], []
        for bits in np.ndindex(2, 2):
            w, mu, var = 1.0, 0.0, 0.0
            for b, a, m in zip(bits, th, moms):
                w *= a if b else 1 - a
                mu += m.mu_w if b else m.mu_v
                var += (m.var_w if b else m.var_v) / 40
            weights.append(w)
            means.append(mu)
            variances.append(var)
        grid = np.linspace(0.5, 35, 12) if transform is F else np.linspace(-7, 4, 12)
        for t in grid:
            assert null.evaluate(t) == pytest.approx(
                hand_mixture_cdf(transform, 2, weights, means, variances, t), abs=1e-9)
            assert null.survival(t) == pytest.approx(1 - null.evaluate(t), abs=1e-9)

    @pytest.mark.parametrize("transform", [F, S])
    def test_grouped_equals_full(self, transform):
        rng = np.random.default_rng(23)
        for _ in range(5):
            th = list(rng.choice([0.001, 0.01, 0.05], size=rng.integers(1, 7)))
            k1 = int(rng.integers(0, 3))
            g = multiple_null_cdf(transform, k1, group_thresholds(th), 50)
            f = multiple_null_cdf_full(transform, k1, th, 50)
            t = np.linspace(-10, 40, 41)
            assert np.max(np.abs(g.evaluate(t) - f.evaluate(t))) < 1e-12

    def test_montecarlo_convolution_agrees(self):
        g = group_thresholds([0.01, 0.05])
        quad = multiple_null_cdf(F, 2, g, 50)
        mc = multiple_null_cdf(F, 2, g, 50, convolution="montecarlo")
        t = np.linspace(1, 30, 30)
        assert np.max(np.abs(quad.evaluate(t) - mc.evaluate(t))) < 3e-3

    def test_small_d_warns(self):
        with pytest.warns(CLTWarning):
            multiple_null_cdf(F, 1, group_thresholds([0.05]), 10)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            multiple_null_cdf(F, 1, group_thresholds([0.05]), 30)
        with pytest.raises(ValueError):
            multiple_null_cdf(F, 1, group_thresholds([0.05]), 0)

    def test_no_censoring_is_complete_null(self):
        t = np.linspace(-5, 5, 21)
        assert np.array_equal(multiple_null_cdf(S, 3, group_thresholds([]), 50).evaluate(t),
                              complete_null_cdf(S, 3).evaluate(t))


def test_method_enum_values():
    assert [m.value for m in Method] == ["complete", "available", "mean", "single", "multiple"]
