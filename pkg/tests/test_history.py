import math

import numpy as np
import pytest

from sbwdiag.catalog import QualityCuts
from sbwdiag.history import (
    DEFAULT_AGE_GRID,
    TRACERS,
    HistoryError,
    bias_strata_check,
    cff_curve,
    compare_histories,
    history_summary,
    matched_positions,
    quality_selection_check,
    quantile_strata_check,
    tracer_rows,
    tracer_rows_masked,
)
from sbwdiag.injection import (
    HQ_EXPERIMENT_CUTS,
    SimConfig,
    exchangeable_age_pairs,
    run_injection,
    selection_experiment_catalog,
    stretched_age_pairs,
    synth_catalog,
)
from sbwdiag.sbw import reclassify

from conftest import make_catalog


class TestSummary:
    def test_cff_count(self):
        assert dict(cff_curve([2, 4, 6, 8], [5.0]))[5.0] == 0.5

    def test_cff_grid_rules(self):
        c = cff_curve([1.0, 3.0, 3.0, 9.0])
        assert c[0] == (0.0, 1.0)
        assert dict(c)[3.0] == 0.75   # ages >= tau
        fr = [f for _, f in c]
        assert all(x >= y for x, y in zip(fr, fr[1:]))
        with pytest.raises(HistoryError):
            cff_curve([1.0], [2.0, 1.0])

    def test_dt_form(self):
        assert history_summary([0, 1, 2, 3, 4]).dt_form == 2.0

    def test_f_old_strict(self):
        assert history_summary([5, 11, 12, 9]).f_old == 0.5
        assert history_summary([10.0, 10.0]).f_old == 0.0

    def test_peak(self):
        s = history_summary([1.1, 1.2, 1.3, 6.0, 6.1])
        assert s.peak_age == 1.25
        # tie between [1.0, 1.5) and [6.0, 6.5) goes to the lower bin
        assert history_summary([1.1, 1.2, 6.0, 6.1]).peak_age == 1.25

    def test_fields(self):
        s = history_summary([3.0, 4.0, 5.0], age_source="seismo", sample_label="x")
        assert (s.n, s.age_source, s.sample_label) == (3, "seismo", "x")
        assert len(s.cff) == len(DEFAULT_AGE_GRID)
        assert s.tracer("f_old") == s.f_old

    def test_errors(self):
        with pytest.raises(HistoryError):
            history_summary([])
        with pytest.raises(HistoryError):
            history_summary([1.0, math.nan])

    def test_masked_rows_match_plain(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(0.5, 13, (5, 40))
        keep = rng.random((5, 40)) < 0.6
        masked = tracer_rows_masked(x, keep)
        for r in range(5):
            assert np.allclose(masked[r], tracer_rows(x[r][keep[r]][None, :])[0], rtol=0, atol=1e-12)
        keep[2] = False
        assert np.all(np.isnan(tracer_rows_masked(x, keep)[2]))


class TestCompare:
    def test_identical(self):
        a, _ = exchangeable_age_pairs(n=500)
        r = compare_histories(a, a.copy(), b_reps=200)
        for t in TRACERS:
            assert r.results[t].delta == 0 and r.results[t].z == 0

    def test_stretched_dt_form(self):
        a, b = stretched_age_pairs()
        r = compare_histories(a, b, b_reps=500, seed=1)
        assert r.first.dt_form == pytest.approx(3.04, abs=0.15)
        d = r.results["dt_form"]
        assert d.delta == pytest.approx(0.51, abs=0.10) and d.z > 3

    def test_sign_is_b_minus_a(self):
        a = np.linspace(1, 11, 201)
        r = compare_histories(a, a + 1.0, b_reps=200)
        assert r.results["peak_age"].delta == pytest.approx(1.0, abs=0.5)
        assert r.results["f_old"].delta > 0

    def test_peak_shift(self):
        rng = np.random.default_rng(4)
        a = np.clip(9.1 + 0.8 * rng.standard_normal(2834), 0.1, 20)
        b = a - 3.1
        r = compare_histories(a, b, b_reps=200)
        assert r.results["peak_age"].delta == pytest.approx(-3.1, abs=0.5)

    def test_independent_and_rows(self):
        a, b = exchangeable_age_pairs(n=800, seed=2)
        r = compare_histories(a, b[:700], "independent", b_reps=200)
        assert r.mode == "independent"
        assert [row["tracer"] for row in r.rows()] == list(TRACERS)
        assert set(r.rows()[0]) >= {"tracer", "delta", "se", "z", "p"}

    def test_errors(self):
        with pytest.raises(HistoryError, match="equal lengths"):
            compare_histories([1, 2, 3], [1, 2], b_reps=200)
        with pytest.raises(HistoryError):
            compare_histories([1, 2], [1, 2], mode="other", b_reps=200)
        with pytest.raises(HistoryError):
            compare_histories([1, 2], [1, 2], b_reps=10)

    def test_worker_invariance(self):
        a, b = exchangeable_age_pairs(n=400)
        r1 = compare_histories(a, b, b_reps=300, seed=3)
        r2 = compare_histories(a, b, b_reps=300, seed=3, workers=2)
        assert r1.results == r2.results


class TestQualityCheck:
    def test_hq_is_everything(self):
        cat = make_catalog(snr=np.full(50, 400.0), plx_snr=np.full(50, 90.0),
                           age_infer=np.linspace(1, 12, 50))
        r = quality_selection_check(cat, QualityCuts(100, 10), b_reps=200)
        for t in TRACERS:
            assert r.results[t].delta == 0 and r.results[t].se == 0

    def test_sign_std_minus_hq(self):
        cat = selection_experiment_catalog(n=3000, confounding=0.0, seed=1)
        r = quality_selection_check(cat, HQ_EXPERIMENT_CUTS, b_reps=200)
        assert r.first.sample_label == "hq" and r.second.sample_label == "std"
        assert r.results["dt_form"].delta == pytest.approx(r.second.dt_form - r.first.dt_form)

    def test_coupling_detected(self):
        cat = selection_experiment_catalog(n=6000, confounding=0.0, coupling_bias=1.5, seed=2)
        r = quality_selection_check(cat, HQ_EXPERIMENT_CUTS, b_reps=300)
        assert r.results["f_old"].z > 3

    def test_matched_rules(self):
        cat = make_catalog(age_seismo=[3.0, math.nan, 5.0])
        assert matched_positions(cat, "infer", "both_ages").tolist() == [0, 2]
        assert matched_positions(cat, "infer", "all").tolist() == [0, 1, 2]
        with pytest.raises(HistoryError):
            matched_positions(cat, "infer", "cem")

    def test_empty_hq(self):
        cat = make_catalog(snr=np.full(10, 30.0))
        with pytest.raises(HistoryError, match="HQ"):
            quality_selection_check(cat, QualityCuts(100, 10), b_reps=200)

    @pytest.mark.slow
    def test_null_rate(self):
        ok = 0
        for seed in range(100):
            cat = selection_experiment_catalog(n=2000, confounding=0.0, seed=seed)
            r = quality_selection_check(cat, HQ_EXPERIMENT_CUTS, b_reps=200, seed=seed)
            ok += all(abs(r.results[t].z) < 2 for t in TRACERS if math.isfinite(r.results[t].z))
        assert ok >= 90


class TestBiasStrata:
    def config(self, amp, seed=0):
        profile = [[1.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
        return SimConfig(n_per_cell=200, grid_dims=(3, 3), bias_amp=amp, bias_profile=profile,
                         noise_profile=1.5, seed=seed, bootstrap_reps=200)

    def test_coupled_bias_detected(self):
        cfg = self.config(1.5)
        res = run_injection(cfg)
        cat = synth_catalog(cfg)
        r = bias_strata_check(cat, res.diags, b_reps=300)
        assert r.first.sample_label == "low_bias"
        assert r.results["f_old"].z > 3 and r.results["f_old"].delta > 0

    def test_all_low_is_error(self):
        cfg = self.config(1.5)
        res = run_injection(cfg)
        low = reclassify(res.diags, tau=1e9)
        with pytest.raises(HistoryError, match="high-bias"):
            bias_strata_check(synth_catalog(cfg), low, b_reps=200)

    def test_null_quantile_split(self):
        zs = []
        for seed in range(5):
            cfg = self.config(0.0, seed)
            res = run_injection(cfg)
            r = quantile_strata_check(synth_catalog(cfg), res.diags, b_reps=200, seed=seed)
            zs.extend(abs(r.results[t].z) for t in TRACERS)
        assert np.mean(np.array(zs) < 2) >= 0.8
