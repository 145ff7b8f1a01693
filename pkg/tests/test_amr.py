import math

import numpy as np
import pytest

from sbwdiag.amr import (
    METAL_POOR_BRANCH,
    SENSITIVITY_LABEL,
    AmrCurve,
    AmrError,
    AmrFit,
    binned_amr,
    curve_crossings,
    fit_amr,
    fixed_feh_delta,
    group_delta_by_feh,
    ols_line,
    slope_diff,
    threshold_crossings,
)

from conftest import make_catalog


def linear_catalog(n=400, slope=-2.0, intercept=6.0, noise=0.0, seed=0, lo=-1.2, hi=0.4):
    rng = np.random.default_rng(seed)
    feh = rng.uniform(lo, hi, n)
    age = intercept + slope * feh + noise * rng.standard_normal(n)
    return make_catalog(feh=feh, age_infer=age)


def curve(centers, medians, robust=None, width=0.5):
    n = len(centers)
    robust = robust or [True] * n
    keys = tuple(int(round(c / width - 0.5)) for c in centers)
    return AmrCurve(width, keys, tuple(centers), tuple(medians), (30,) * n, (math.nan,) * n,
                    (math.nan,) * n, tuple(robust))


class TestBinned:
    def test_constant_ages(self):
        cat = make_catalog(feh=np.linspace(-1, 0.3, 200), age_infer=np.full(200, 5.0))
        c = binned_amr(cat, b=200)
        occupied = [i for i, n in enumerate(c.counts) if n]
        assert all(c.medians[i] == 5.0 for i in occupied)
        assert all(c.ci_low[i] == c.ci_high[i] == 5.0 for i in occupied if c.counts[i] > 1)

    def test_linear_relation(self):
        cat = make_catalog(feh=np.linspace(-1.0, 0.3, 1301), age_infer=10 + 2 * np.linspace(-1.0, 0.3, 1301))
        c = binned_amr(cat, bin_width=0.1, b=200)
        for x, m, n in zip(c.bin_centers, c.medians, c.counts):
            if n > 50:
                assert abs(m - (10 + 2 * x)) <= 0.5 * 2 * 0.1

    def test_contiguous_and_empty_bins(self):
        cat = make_catalog(feh=[-0.95, -0.94, 0.05], age_infer=[5, 6, 7])
        c = binned_amr(cat, b=200)
        assert list(c.keys) == list(range(c.keys[0], c.keys[-1] + 1))
        assert c.counts[0] == 2 and c.counts[-1] == 1 and sum(c.counts) == 3
        assert 0 in c.counts
        assert np.allclose(np.diff(c.bin_centers), 0.1)
        assert c.bin_centers[0] == -0.95

    def test_robust_threshold(self):
        cat = make_catalog(feh=np.r_[np.full(10, -0.55), np.full(30, -0.45)],
                           age_infer=np.linspace(1.0, 12.0, 40))
        c = binned_amr(cat, b=200)
        assert dict(zip(c.counts, c.robust)) == {10: False, 30: True}

    def test_order_and_duplication(self):
        cat = linear_catalog(noise=1.0, seed=2)
        perm = np.random.default_rng(0).permutation(len(cat))
        a = binned_amr(cat, b=200).medians
        b = binned_amr(make_catalog(feh=cat.column("feh")[perm], age_infer=cat.column("age_infer")[perm]), b=200).medians
        c = binned_amr(make_catalog(feh=np.tile(cat.column("feh"), 2),
                                    age_infer=np.tile(cat.column("age_infer"), 2)), b=200).medians
        assert np.array_equal(a, b, equal_nan=True) and np.array_equal(a, c, equal_nan=True)

    def test_errors(self):
        cat = linear_catalog()
        with pytest.raises(AmrError):
            binned_amr(cat, bin_width=0)
        with pytest.raises(AmrError):
            binned_amr(make_catalog(feh=[np.nan], age_infer=[1.0]))

    def test_rows(self):
        rows = binned_amr(linear_catalog(), b=200).rows()
        assert set(rows[0]) == {"feh_center", "median", "count", "ci_low", "ci_high", "robust"}


class TestFit:
    def test_exact_line(self):
        f = fit_amr(linear_catalog(), b=200)
        assert f.slope_a == pytest.approx(-2.0, abs=1e-12)
        assert f.intercept_b == pytest.approx(6.0, abs=1e-12)
        assert f.slope_se == pytest.approx(0.0, abs=1e-9)
        assert f.n == 400

    def test_two_points(self):
        with pytest.raises(AmrError, match="at least 3"):
            fit_amr(make_catalog(feh=[0.0, 0.1], age_infer=[1.0, 2.0]), b=200)

    def test_rank_deficient(self):
        with pytest.raises(AmrError):
            fit_amr(make_catalog(feh=[0.1, 0.1, 0.1], age_infer=[1.0, 2.0, 3.0]), b=200)

    def test_noisy_recovery(self):
        hits = 0
        for seed in range(20):
            f = fit_amr(linear_catalog(n=800, slope=-3.29, intercept=8.0, noise=1.5, seed=seed),
                        b=300, seed=seed)
            assert f.slope_se > 0
            hits += abs(f.slope_a + 3.29) <= 2 * f.slope_se
        assert hits >= 17

    def test_range_restriction(self):
        cat = linear_catalog(n=1000)
        f = fit_amr(cat, feh_range=METAL_POOR_BRANCH, b=200)
        feh = cat.column("feh")
        assert f.n == int(np.sum((feh >= -1.0) & (feh < -0.5)))
        assert f.feh_range == METAL_POOR_BRANCH

    def test_closed_form(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=12), rng.normal(size=12)
        a, b = ols_line(x, y)
        xm, ym = x.mean(), y.mean()
        ref = np.sum((x - xm) * (y - ym)) / np.sum((x - xm) ** 2)
        assert a == pytest.approx(ref, rel=1e-10)
        assert b == pytest.approx(ym - ref * xm, rel=1e-10)


class TestSlopeDiff:
    def fit(self, a, se, rng=(-1.0, -0.5)):
        return AmrFit(a, 0.0, se, 100, rng)

    def test_identical(self):
        f = self.fit(-3.0, 0.2)
        r = slope_diff(f, f)
        assert r.delta == 0 and r.z == 0

    def test_paper_significances(self):
        s = 0.17 / math.sqrt(2)
        r = slope_diff(self.fit(-3.29, s), self.fit(-1.86, s))
        assert r.delta == pytest.approx(1.43)
        assert r.z == pytest.approx(8.4, abs=0.05)
        s = 0.20 / math.sqrt(2)
        r = slope_diff(self.fit(-2.0, s), self.fit(-1.65, s))
        assert r.z == pytest.approx(1.7, abs=0.1)
        assert r.p_two_sided == pytest.approx(0.08, abs=0.005)

    def test_mismatched_ranges(self):
        with pytest.raises(AmrError):
            slope_diff(self.fit(1, 0.1), self.fit(1, 0.1, (-1.0, 0.0)))

    def test_paired(self):
        cat = linear_catalog(n=600, slope=-3.0, noise=1.0, seed=4)
        a1 = cat.column("age_infer")
        a2 = a1 + 0.5 * cat.column("feh")   # slope shifted by exactly +0.5
        f1 = fit_amr(cat, a1, b=200)
        f2 = fit_amr(cat, a2, b=200)
        r = slope_diff(f1, f2, "paired", cat, a1, a2, b=200)
        assert r.delta == pytest.approx(0.5, abs=1e-9)
        assert r.se < 1e-9 or r.z > 100
        ind = slope_diff(f1, f2)
        assert ind.se > 0.05
        same = slope_diff(f1, f1, "paired", cat, a1, a1, b=200)
        assert same.delta == 0

    def test_paired_needs_inputs(self):
        f = self.fit(1, 0.1)
        with pytest.raises(AmrError):
            slope_diff(f, f, "paired")
        with pytest.raises(AmrError):
            slope_diff(f, f, "other")


class TestFixedFeh:
    def test_offset(self):
        cat = linear_catalog(n=2000, noise=1.0, seed=5)
        a1 = cat.column("age_infer")
        r = fixed_feh_delta(cat, (-0.55, -0.45), a1, a1 - 0.73, b=200)
        assert r.delta == pytest.approx(-0.73, abs=1e-12)
        r0 = fixed_feh_delta(cat, (-0.55, -0.45), a1, a1, b=200)
        assert r0.delta == 0

    def test_errors(self):
        cat = make_catalog(feh=[-0.5, 0.2, 0.25], age_infer=[1.0, 2.0, 3.0])
        a = cat.column("age_infer")
        with pytest.raises(AmrError, match="fewer than 2"):
            fixed_feh_delta(cat, (-0.55, -0.45), a, a, b=200)
        with pytest.raises(AmrError, match="no records"):
            fixed_feh_delta(cat, (-2.0, -1.5), a, a, b=200)

    def test_independent_mode(self):
        cat = linear_catalog(n=2000, noise=1.0, seed=5)
        a1 = cat.column("age_infer")
        a2 = a1 + 0.4
        a2[::3] = np.nan
        r = fixed_feh_delta(cat, (-0.6, -0.4), a1, a2, mode="independent", b=200)
        assert r.delta == pytest.approx(0.4, abs=0.3) and r.se > 0


class TestGroupDelta:
    def groups(self, seed, shift=0.0, n=600):
        rng = np.random.default_rng(seed)
        feh = rng.uniform(-1.0, 0.3, 2 * n)
        age = 8 - 2 * feh + rng.normal(0, 1.0, 2 * n)
        high = np.arange(n)
        sel = high[(feh[high] >= -0.5) & (feh[high] < -0.4)]
        age[sel] += shift
        cat = make_catalog(feh=feh, age_infer=age)
        return cat, cat.ids[:n], cat.ids[n:]

    def test_injected_bin(self):
        cat, hi, lo = self.groups(1, shift=0.55, n=3000)
        bins = group_delta_by_feh(cat, hi, lo, b=300)
        target = [g for g in bins if math.isclose(g.feh_lo, -0.5)][0]
        assert target.delta == pytest.approx(0.55, abs=0.2)
        assert target.ci_low > 0
        assert target.feh_center == pytest.approx(-0.45)

    def test_empty_side_flagged(self):
        cat = make_catalog(feh=[-0.55, -0.52, -0.45, 0.05, 0.06], age_infer=[1, 2, 3, 4, 5])
        bins = group_delta_by_feh(cat, cat.ids[:2], cat.ids[2:], b=200)
        first = bins[0]
        assert first.n_low == 0 and math.isnan(first.delta) and not first.robust

    def test_errors(self):
        cat = make_catalog(feh=[0.1, 0.2], age_infer=[1.0, 2.0])
        with pytest.raises(AmrError):
            group_delta_by_feh(cat, [], cat.ids, b=200)
        with pytest.raises(AmrError):
            group_delta_by_feh(cat, cat.ids, cat.ids, b=200)

    @pytest.mark.slow
    def test_null_coverage(self):
        covered = total = 0
        for seed in range(100):
            cat, hi, lo = self.groups(seed)
            for g in group_delta_by_feh(cat, hi, lo, b=200, seed=seed):
                if g.robust:
                    total += 1
                    covered += g.ci_low <= 0 <= g.ci_high
        assert total > 500 and covered / total >= 0.90


class TestCrossings:
    def test_interpolation(self):
        assert curve_crossings(curve([-1.0, -0.5], [9, 7]), 8.0) == [pytest.approx(-0.75)]

    def test_none_and_two(self):
        assert curve_crossings(curve([-1.0, -0.5, 0.0], [12, 11, 10]), 8.0) == []
        assert len(curve_crossings(curve([-1.0, -0.5, 0.0, 0.5], [9, 7, 9, 10]), 8.0)) == 2

    def test_non_robust_bins_ignored(self):
        c = curve([-1.0, -0.5, 0.0], [9, 5, 9], robust=[True, False, True])
        assert curve_crossings(c, 8.0) == []

    def test_report(self):
        r = threshold_crossings(curve([-1.0, -0.5], [9, 7]), curve([-1.0, -0.5], [8.5, 6.5]), 8.0)
        assert r.differences == (pytest.approx(-0.125),)
        assert r.label == SENSITIVITY_LABEL
        with pytest.raises(AmrError):
            threshold_crossings(curve([-1.0], [9]), curve([-1.0], [9], width=0.1))
