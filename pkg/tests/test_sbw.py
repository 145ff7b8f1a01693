import math
from dataclasses import replace

import numpy as np
import pytest

from sbwdiag.grid import GridSpec, cells_for
from sbwdiag.injection import SimConfig, robustness_fixture_config, run_injection
from sbwdiag.robustness import jaccard
from sbwdiag.sbw import (
    DEGENERATE,
    HIGH_BIAS,
    INSUFFICIENT_N,
    LOW_BIAS,
    CellDiagnostic,
    DiagnosticError,
    cell_formation_time,
    classify,
    delta_tform,
    r_tilde,
    reclassify,
    s_metric,
    sbw_map_internal,
    sbw_map_truth,
    sigma_alt_map,
)

from conftest import make_catalog


def _cell(delta, sigma, valid=True):
    return CellDiagnostic(0, 0, 100, delta, sigma, abs(delta) / sigma, LOW_BIAS, "truth_anchored", valid)


def _ranks(x):
    r = np.empty(len(x))
    r[np.argsort(x, kind="stable")] = np.arange(len(x))
    return r


def _spearman(a, b):
    return float(np.corrcoef(_ranks(a), _ranks(b))[0, 1])


def two_cell_catalog(offset=0.8, noise=2.0, n_cell=200, n_ref=4000, seed=0):
    """Cell (0, 0) carries the offset; cell (1, 0) is the unbiased HQ block."""
    rng = np.random.default_rng(seed)
    n = n_cell + n_ref
    snr = np.concatenate([rng.uniform(1, 99, n_cell), rng.uniform(101, 199, n_ref)])
    age = 8.0 + noise * rng.standard_normal(n)
    age[:n_cell] += offset
    cat = make_catalog(snr=snr, age_infer=np.clip(age, 0.01, 20))
    spec = GridSpec((0, 100, 200), (0, 100), n_min=50, strategy="fixed")
    return cat, (spec, cells_for(cat, spec))


class TestScalars:
    def test_cell_formation_time(self):
        assert cell_formation_time([4, 6, 8], "median") == 6
        assert cell_formation_time([4, 6, 8], "mean") == 6
        assert cell_formation_time([1, 2, 10], "median") == 2
        assert cell_formation_time([1, 2, 10], "mean") == pytest.approx(13 / 3)
        with pytest.raises(DiagnosticError):
            cell_formation_time([], "median")

    def test_delta_tform(self):
        assert delta_tform(9.0, 8.5) == 0.5
        assert delta_tform(7.0, 7.0) == 0
        assert delta_tform(8.0, 9.0) == -1.0

    def test_s_metric(self):
        assert s_metric(0.9, 0.2) == pytest.approx(4.5)
        assert s_metric(0.7, 1e-9) is None
        with pytest.raises(DiagnosticError):
            s_metric(0.7, -0.1)

    def test_paper_bias_magnitude_classifies_high(self):
        for delta in (0.5, 0.75, 1.0):
            s = s_metric(delta, delta / 3.2)
            assert s >= 3 and classify(s) == HIGH_BIAS

    def test_classify(self):
        assert classify(3.2, 3) == HIGH_BIAS
        assert classify(2.99, 3) == LOW_BIAS
        assert classify(3.0, 3) == HIGH_BIAS

    def test_r_tilde(self):
        cells = [_cell(0.5, 0.4), _cell(1.0, 0.5), _cell(-1.5, 0.6)]
        assert r_tilde(cells) == pytest.approx(2.0)
        assert r_tilde([_cell(0.0, 0.3), _cell(0.0, 0.2)]) == 0
        assert r_tilde([_cell(0.6, 0.3)]) == pytest.approx(2.0)
        with pytest.raises(DiagnosticError):
            r_tilde([_cell(0.6, 0.3, valid=False)])
        assert r_tilde([_cell(0.6, 0.3, valid=False)], include_all=True) == pytest.approx(2.0)


class TestInternalMap:
    def test_self_reference(self):
        rng = np.random.default_rng(3)
        cat = make_catalog(snr=rng.uniform(1, 99, 300), age_infer=rng.uniform(2, 12, 300))
        spec = GridSpec((0, 100), (0, 100), n_min=50, strategy="fixed")
        d = sbw_map_internal(cat, (spec, cells_for(cat, spec)), cat, b=200, seed=0)
        assert d.cells[0].delta == 0
        assert d.cells[0].classification == LOW_BIAS

    def test_offset_cell_detected(self):
        # one sample's bootstrap SE of a median scatters by ~20%; the oracle holds on average
        sig, s, high = [], [], 0
        for seed in range(30):
            cat, grid = two_cell_catalog(seed=seed)
            hq = cat.subset(cat.column("snr") > 100)
            d = sbw_map_internal(cat, grid, hq, b=1000, seed=seed)
            c = d.cell(0, 0)
            sig.append(c.sigma_cell)
            s.append(c.s)
            high += c.classification == HIGH_BIAS
            assert d.cell(1, 0).classification == LOW_BIAS
        expected_sigma = 1.2533 * 2.0 / math.sqrt(200)
        assert np.mean(sig) == pytest.approx(expected_sigma, rel=0.10)
        assert 3.0 <= np.mean(s) <= 6.5
        assert high >= 24

    def test_insufficient_n(self):
        cat, grid = two_cell_catalog(n_cell=20)
        hq = cat.subset(cat.column("snr") > 100)
        c = sbw_map_internal(cat, grid, hq, b=200, seed=0).cell(0, 0)
        assert c.classification == INSUFFICIENT_N
        assert math.isnan(c.s) and not c.valid

    def test_empty_reference(self):
        cat, grid = two_cell_catalog()
        with pytest.raises(DiagnosticError):
            sbw_map_internal(cat, grid, cat.subset([]), b=200)

    def test_per_cell_reference(self):
        cat, grid = two_cell_catalog()
        hq = cat.subset(cat.column("snr") > 100)
        d = sbw_map_internal(cat, grid, hq, b=200, seed=0, reference="per_cell")
        assert d.cell(0, 0).classification == INSUFFICIENT_N
        assert d.cell(1, 0).delta == 0


class TestTruthMap:
    def test_identity(self):
        rng = np.random.default_rng(0)
        a = rng.uniform(1, 12, 400)
        cat = make_catalog(snr=rng.uniform(0, 200, 400), age_infer=a, age_seismo=a)
        spec = GridSpec((0, 100, 200), (0, 100), n_min=50)
        d = sbw_map_truth(cat, (spec, cells_for(cat, spec)), b=200)
        assert all(c.delta == 0 for c in d.cells)
        assert all(c.classification == DEGENERATE for c in d.cells)

    def test_needs_seismo(self):
        cat, grid = two_cell_catalog()
        with pytest.raises(DiagnosticError):
            sbw_map_truth(cat, grid, b=200)

    def test_n_counts_only_stars_with_both_ages(self):
        a = np.linspace(1, 10, 100)
        seismo = np.where(np.arange(100) % 2 == 0, a, np.nan)
        cat = make_catalog(snr=np.linspace(1, 99, 100), age_infer=a + 0.5, age_seismo=seismo)
        spec = GridSpec((0, 100), (0, 100), n_min=10)
        d = sbw_map_truth(cat, (spec, cells_for(cat, spec)), b=200)
        assert d.cells[0].n == 50
        assert d.cells[0].delta == pytest.approx(0.5)

    @pytest.fixture(scope="class")
    @classmethod
    def injected(cls):
        levels = np.array([0.0, 0.5, 1.0])
        out = []
        for seed in range(12):
            rng = np.random.default_rng(100 + seed)
            prof = rng.choice(levels, size=(5, 5))
            cfg = SimConfig(n_per_cell=150, grid_dims=(5, 5), bias_amp=1.0,
                            bias_profile=prof.tolist(), noise_profile=1.5, sfh_spreads=(2.0,),
                            seed=seed, bootstrap_reps=400)
            out.append((prof, run_injection(cfg, keep_replicates=True).diags))
        return out

    def test_recovery_within_two_se(self, injected):
        hits = total = 0
        for prof, d in injected:
            for c in d.cells:
                total += 1
                hits += abs(c.delta - prof[c.i, c.j]) <= 2 * c.sigma_cell
        assert hits / total >= 0.93

    def test_high_s_owes_to_delta(self, injected):
        s = np.concatenate([[c.s for c in d.cells] for _, d in injected])
        ad = np.concatenate([[abs(c.delta) for c in d.cells] for _, d in injected])
        inv = np.concatenate([[1 / c.sigma_cell for c in d.cells] for _, d in injected])
        assert _spearman(s, ad) > _spearman(s, inv)

    @pytest.mark.parametrize("seed", range(3))
    def test_sigma_alt_overlap_on_fixture(self, seed):
        d = run_injection(robustness_fixture_config(seed), keep_replicates=True).diags
        assert d.high_cells()
        for kind in ("iqr_se", "mad_se"):
            assert jaccard(d.high_cells(), sigma_alt_map(d, kind).high_cells()) >= 0.7


class TestSigmaAlt:
    def test_normal_replicates_agree(self):
        cat, grid = two_cell_catalog()
        hq = cat.subset(cat.column("snr") > 100)
        d = sbw_map_internal(cat, grid, hq, "mean", b=2000, seed=2, keep_replicates=True)
        for kind in ("iqr_se", "mad_se"):
            alt = sigma_alt_map(d, kind)
            assert alt.cell(0, 0).s == pytest.approx(d.cell(0, 0).s, rel=0.15)
            assert alt.sigma_kind == kind

    def test_constant_replicates_degenerate(self):
        a = np.full(100, 5.0)
        cat = make_catalog(snr=np.linspace(1, 99, 100), age_infer=a + 1, age_seismo=a)
        spec = GridSpec((0, 100), (0, 100), n_min=10)
        d = sbw_map_truth(cat, (spec, cells_for(cat, spec)), b=200, keep_replicates=True)
        for kind in ("sd", "iqr_se", "mad_se"):
            assert sigma_alt_map(d, kind).cells[0].classification == DEGENERATE

    def test_requires_replicates(self):
        cat, grid = two_cell_catalog()
        d = sbw_map_internal(cat, grid, cat, b=200)
        with pytest.raises(DiagnosticError):
            sigma_alt_map(d, "iqr_se")


class TestInvariants:
    def _diags(self, scale=1.0, sign=1.0, tau=3.0):
        rng = np.random.default_rng(8)
        a = rng.uniform(2, 12, 600)
        off = np.where(np.arange(600) < 300, 0.9, 0.0)
        inf = a + sign * off + rng.normal(0, 1.5, 600)
        snr = np.concatenate([np.full(300, 50.0), np.full(300, 150.0)])
        cat = make_catalog(snr=snr, age_infer=np.clip(inf, 0.05, 19.5) * scale,
                           age_seismo=a * scale)
        spec = GridSpec((0, 100, 200), (0, 100), n_min=50)
        return sbw_map_truth(cat, (spec, cells_for(cat, spec)), b=300, seed=5, tau=tau)

    def test_scaling_leaves_s(self):
        base, scaled = self._diags(), self._diags(scale=0.5)
        for c0, c1 in zip(base.cells, scaled.cells):
            assert c1.delta == pytest.approx(0.5 * c0.delta)
            assert c1.sigma_cell == pytest.approx(0.5 * c0.sigma_cell)
            assert c1.s == pytest.approx(c0.s)

    def test_tau_monotone(self):
        d = self._diags()
        for tau in (1.0, 2.0, 5.0, 10.0):
            hi = reclassify(d, tau=tau)
            higher = reclassify(d, tau=tau * 1.5)
            assert higher.high_cells() <= hi.high_cells()

    def test_reclassify_n_min(self):
        d = self._diags()
        strict = reclassify(d, n_min=1000)
        assert all(c.classification == INSUFFICIENT_N for c in strict.cells)
        assert math.isnan(strict.r_tilde)

    def test_sign_flip(self):
        d = self._diags()
        flipped = [replace(c, delta=-c.delta) for c in d.cells]
        assert r_tilde(flipped) == pytest.approx(d.r_tilde)
        for c in d.cells:
            assert s_metric(-c.delta, c.sigma_cell) == pytest.approx(c.s)

    def test_rows_and_arrays(self):
        d = self._diags()
        rows = d.rows()
        assert [(r["i"], r["j"]) for r in rows] == [(0, 0), (1, 0)]
        assert d.as_array("s").shape == (2, 1)
        assert d.high_cells() == {(0, 0)}
        assert d.high_positions().tolist() == list(range(300))
