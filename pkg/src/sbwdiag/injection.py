"""Synthetic catalogs and injection-recovery experiments.

The inference surrogate stands in for a black-box age pipeline::

    a_infer = (1 - lam) a_true + lam prior_mean + amp * profile + eps

with per-cell shrinkage ``lam``, bias multiplier ``profile`` and noise SD.
The asteroseismic age of a synthetic star is its true age.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .catalog import AGE_MAX, Catalog, QualityCuts
from .grid import GridSpec, cells_for
from .sbw import DEFAULT_TAU, HIGH_BIAS, GridDiagnostics, sbw_map_truth
from .stats import DEFAULT_REPLICATES, derive_seed, make_rng

AGE_FLOOR = 1e-3
Profile = Union[float, Sequence[Sequence[float]]]


class SimConfigError(ValueError):
    pass


def _profile(value, dims: tuple[int, int], name: str) -> tuple[tuple[float, ...], ...]:
    rows, cols = dims
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        arr = np.full(dims, float(arr))
    if arr.shape != dims:
        raise SimConfigError(f"{name} has shape {arr.shape}, grid is {dims}")
    if not np.all(np.isfinite(arr)):
        raise SimConfigError(f"{name} has non-finite entries")
    return tuple(tuple(float(v) for v in row) for row in arr)


@dataclass(frozen=True)
class SimConfig:
    n_per_cell: int = 200
    grid_dims: tuple[int, int] = (4, 4)
    sfh_means: tuple[float, ...] = (8.0,)
    sfh_spreads: tuple[float, ...] = (2.5,)
    sfh_weights: tuple[float, ...] = (1.0,)
    bias_amp: float = 0.0
    bias_profile: Profile = 1.0
    shrink_profile: Profile = 0.0
    prior_mean: float = 8.0
    noise_profile: Profile = 2.0
    seed: int = 0
    snr_range: tuple[float, float] = (20.0, 300.0)
    plxsnr_range: tuple[float, float] = (5.0, 100.0)
    # [Fe/H] = feh_ref + feh_slope * (a_true - 8 Gyr) + N(0, feh_scatter)
    feh_ref: float = -0.2
    feh_slope: float = -0.06
    feh_scatter: float = 0.15
    jitter: bool = True
    n_min: int = 50
    bootstrap_reps: int = DEFAULT_REPLICATES
    tau: float = DEFAULT_TAU
    stat: str = "median"

    def __post_init__(self):
        dims = tuple(int(d) for d in self.grid_dims)
        if len(dims) != 2 or min(dims) < 1:
            raise SimConfigError(f"grid_dims must be two positive ints, got {self.grid_dims}")
        object.__setattr__(self, "grid_dims", dims)
        for name in ("sfh_means", "sfh_spreads", "sfh_weights", "snr_range", "plxsnr_range"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        k = len(self.sfh_means)
        if k == 0 or len(self.sfh_spreads) != k or len(self.sfh_weights) != k:
            raise SimConfigError("sfh means, spreads and weights must have equal non-zero length")
        if any(w < 0 for w in self.sfh_weights) or not math.isclose(sum(self.sfh_weights), 1.0, abs_tol=1e-9):
            raise SimConfigError("sfh weights must be non-negative and sum to 1")
        if any(s < 0 for s in self.sfh_spreads):
            raise SimConfigError("sfh spreads must be >= 0")
        if any(not (0 < m <= AGE_MAX) for m in self.sfh_means):
            raise SimConfigError("sfh means must lie in (0, 20] Gyr")
        for name in ("bias_profile", "shrink_profile", "noise_profile"):
            object.__setattr__(self, name, _profile(getattr(self, name), dims, name))
        lam = np.asarray(self.shrink_profile)
        if np.any(lam < 0) or np.any(lam > 1):
            raise SimConfigError("shrink_profile entries must be in [0, 1]")
        if np.any(np.asarray(self.noise_profile) < 0):
            raise SimConfigError("noise_profile entries must be >= 0")
        if self.n_per_cell < 1:
            raise SimConfigError("n_per_cell must be >= 1")
        for name in ("snr_range", "plxsnr_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo < hi):
                raise SimConfigError(f"{name} must satisfy 0 <= lo < hi")
        if self.feh_scatter < 0:
            raise SimConfigError("feh_scatter must be >= 0")
        if self.seed < 0:
            raise SimConfigError("seed must be >= 0")

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)

    @property
    def quality_edges(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        rows, cols = self.grid_dims
        snr = tuple(float(v) for v in np.linspace(*self.snr_range, rows + 1))
        plx = tuple(float(v) for v in np.linspace(*self.plxsnr_range, cols + 1))
        return snr, plx


@dataclass(frozen=True)
class SimResult:
    diags: GridDiagnostics
    r_tilde: float
    sbw_fraction: float
    sbw_event: bool
    n_clipped: int
    config_echo: SimConfig


def _draw_true_ages(cfg: SimConfig, n: int, rng: np.random.Generator) -> np.ndarray:
    """Mixture draws truncated to (0, 20] Gyr by rejection."""
    means = np.asarray(cfg.sfh_means)
    spreads = np.asarray(cfg.sfh_spreads)
    out = np.empty(n)
    filled = 0
    while filled < n:
        m = n - filled
        comp = rng.choice(means.size, size=m, p=np.asarray(cfg.sfh_weights))
        a = means[comp] + spreads[comp] * rng.standard_normal(m)
        a = a[(a > 0) & (a <= AGE_MAX)]
        out[filled:filled + a.size] = a
        filled += a.size
    return out


def _surrogate_mean(a_true: np.ndarray, cell: tuple[int, int], config: SimConfig) -> np.ndarray:
    i, j = cell
    lam = config.shrink_profile[i][j]
    return (1.0 - lam) * a_true + lam * config.prior_mean + config.bias_amp * config.bias_profile[i][j]


def inference_surrogate(a_true, cell: tuple[int, int], config: SimConfig,
                        rng: np.random.Generator | None = None) -> np.ndarray:
    """Quality-coupled age estimate for stars of one cell, clipped to (0, 20]."""
    i, j = cell
    sd = config.noise_profile[i][j]
    a = np.asarray(a_true, dtype=float)
    out = _surrogate_mean(a, cell, config)
    if sd > 0:
        if rng is None:
            raise SimConfigError("a random generator is required when noise > 0")
        out = out + sd * rng.standard_normal(a.shape)
    return np.clip(out, AGE_FLOOR, AGE_MAX)


def synth_catalog_with_stats(config: SimConfig) -> tuple[Catalog, int]:
    """Synthetic catalog plus the number of surrogate outputs that were clipped."""
    rng = make_rng(config.seed, 0)
    rows, cols = config.grid_dims
    snr_edges, plx_edges = config.quality_edges
    n = config.n_per_cell
    ids, cols_out = [], {k: [] for k in (
        "teff", "logg", "feh", "alpha_fe", "snr", "plx", "plx_err",
        "distance", "gal_r", "gal_z", "age_infer", "age_seismo")}
    clipped = 0
    for i in range(rows):
        for j in range(cols):
            a_true = _draw_true_ages(config, n, rng)
            sd = config.noise_profile[i][j]
            noise = sd * rng.standard_normal(n) if sd > 0 else np.zeros(n)
            raw = _surrogate_mean(a_true, (i, j), config) + noise
            clipped += int(np.sum((raw < AGE_FLOOR) | (raw > AGE_MAX)))
            a_inf = np.clip(raw, AGE_FLOOR, AGE_MAX)
            if config.jitter:
                # keep clear of the edges so float round-off cannot move a star
                u = rng.uniform(1e-6, 1 - 1e-6, size=(2, n))
            else:
                u = np.full((2, n), 0.5)
            snr = snr_edges[i] + u[0] * (snr_edges[i + 1] - snr_edges[i])
            psnr = plx_edges[j] + u[1] * (plx_edges[j + 1] - plx_edges[j])
            distance = np.exp(rng.normal(np.log(1.5), 0.4, n))
            plx = 1.0 / distance
            feh = (config.feh_ref + config.feh_slope * (a_true - 8.0)
                   + config.feh_scatter * rng.standard_normal(n))
            cols_out["feh"].append(np.clip(feh, -3.0, 1.0))
            cols_out["alpha_fe"].append(rng.normal(0.1, 0.08, n))
            cols_out["teff"].append(rng.normal(5300.0, 200.0, n))
            cols_out["logg"].append(rng.normal(3.7, 0.15, n))
            cols_out["snr"].append(snr)
            cols_out["plx"].append(plx)
            cols_out["plx_err"].append(plx / psnr)
            cols_out["distance"].append(distance)
            cols_out["gal_r"].append(rng.normal(8.0, 1.5, n))
            cols_out["gal_z"].append(rng.normal(0.0, 0.5, n))
            cols_out["age_infer"].append(a_inf)
            cols_out["age_seismo"].append(a_true)
            ids.extend(f"sim{i:02d}{j:02d}_{k:05d}" for k in range(n))
    cat = Catalog(ids, {k: np.concatenate(v) for k, v in cols_out.items()})
    return cat, clipped


def synth_catalog(config: SimConfig) -> Catalog:
    """Synthetic catalog whose ``age_seismo`` is the true age."""
    return synth_catalog_with_stats(config)[0]


def sim_grid_spec(config: SimConfig) -> GridSpec:
    snr, plx = config.quality_edges
    return GridSpec(snr, plx, config.n_min, "fixed")


def run_injection(config: SimConfig, workers: int = 1, keep_replicates: bool = False) -> SimResult:
    """Build the synthetic catalog and map its truth-anchored significance."""
    cat, clipped = synth_catalog_with_stats(config)
    spec = sim_grid_spec(config)
    cells = cells_for(cat, spec)
    diags = sbw_map_truth(cat, (spec, cells), stat=config.stat, b=config.bootstrap_reps,
                          seed=derive_seed(config.seed, 1), tau=config.tau,
                          keep_replicates=keep_replicates, workers=workers)
    return SimResult(diags, diags.r_tilde, diags.sbw_fraction, diags.sbw_event, clipped, config)


# ---------------------------------------------------------------------------
# phase scan


@dataclass(frozen=True)
class ScanPoint:
    amplitude: float
    amp_index: int
    seed_index: int
    run_seed: int
    r_tilde: float
    sbw_event: bool
    sbw_fraction: float


@dataclass(frozen=True)
class CurveBin:
    r_lo: float
    r_hi: float
    n_runs: int
    event_fraction: float
    cell_fraction: float


@dataclass(frozen=True)
class PhaseScan:
    points: tuple[ScanPoint, ...]
    curve: tuple[CurveBin, ...]
    representatives: dict[float, GridDiagnostics] = field(repr=False)


def run_seed_for(base_seed: int, amp_index: int, seed_index: int) -> int:
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(amp_index, seed_index))
    return int(ss.generate_state(1)[0])


def _scan_one(cfg: SimConfig) -> SimResult:
    return run_injection(cfg)


def transition_curve(points: Sequence[ScanPoint], edges: Sequence[float]) -> tuple[CurveBin, ...]:
    r = np.array([p.r_tilde for p in points])
    ev = np.array([p.sbw_event for p in points], dtype=float)
    fr = np.array([p.sbw_fraction for p in points])
    out = []
    for lo, hi in zip(edges, edges[1:]):
        m = (r >= lo) & (r < hi)
        k = int(m.sum())
        out.append(CurveBin(float(lo), float(hi), k,
                            float(ev[m].mean()) if k else math.nan,
                            float(fr[m].mean()) if k else math.nan))
    return tuple(out)


def curve_is_monotone(curve: Sequence[CurveBin], tol: float = 0.05, min_runs: int = 10) -> bool:
    """Event fraction never drops by more than ``tol`` between populated bins."""
    fr = [b.event_fraction for b in curve if b.n_runs >= min_runs]
    return all(b >= a - tol for a, b in zip(fr, fr[1:]))


def phase_scan(
    base_config: SimConfig,
    amplitudes: Sequence[float],
    seeds_per_amp: int = 20,
    workers: int = 1,
    curve_edges: Sequence[float] | None = None,
) -> PhaseScan:
    """Injection runs over a grid of bias amplitudes and seeds, binned in r_tilde."""
    if len(amplitudes) < 2:
        raise SimConfigError("phase scan needs at least 2 amplitudes")
    if seeds_per_amp < 10:
        raise SimConfigError("phase scan needs at least 10 seeds per amplitude")
    jobs = []
    for a_idx, amp in enumerate(amplitudes):
        for k in range(seeds_per_amp):
            seed = run_seed_for(base_config.seed, a_idx, k)
            jobs.append((a_idx, k, seed, base_config.with_(bias_amp=float(amp), seed=seed)))
    configs = [j[3] for j in jobs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_scan_one, configs, chunksize=4))
    else:
        results = [_scan_one(c) for c in configs]
    points, reps = [], {}
    for (a_idx, k, seed, cfg), res in zip(jobs, results):
        points.append(ScanPoint(cfg.bias_amp, a_idx, k, seed, res.r_tilde, res.sbw_event,
                                res.sbw_fraction))
        if k == 0:
            reps[cfg.bias_amp] = res.diags
    if curve_edges is None:
        top = max((p.r_tilde for p in points if math.isfinite(p.r_tilde)), default=1.0)
        curve_edges = list(np.arange(0.0, math.floor(top / 0.5) * 0.5 + 1.0, 0.5))
    return PhaseScan(tuple(points), transition_curve(points, curve_edges), reps)


def null_calibration(base_config: SimConfig, n_seeds: int = 100, workers: int = 1) -> dict:
    """False-positive behaviour of the harness with the bias switched off."""
    configs = [base_config.with_(bias_amp=0.0, seed=run_seed_for(base_config.seed, 10_000, k))
               for k in range(n_seeds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_scan_one, configs, chunksize=4))
    else:
        results = [_scan_one(c) for c in configs]
    n_valid = sum(len(r.diags.valid_cells) for r in results)
    n_high = sum(sum(c.classification == HIGH_BIAS for c in r.diags.valid_cells) for r in results)
    return {
        "n_seeds": n_seeds,
        "n_valid_cells": n_valid,
        "high_bias_cell_fraction": n_high / n_valid if n_valid else math.nan,
        "sbw_event_fraction": float(np.mean([r.sbw_event for r in results])),
        "mean_r_tilde": float(np.nanmean([r.r_tilde for r in results])),
    }


# ---------------------------------------------------------------------------
# generators for the matching and formation-history experiments

HQ_EXPERIMENT_CUTS = QualityCuts(snr_min=150.0, plx_snr_min=20.0)


def selection_experiment_catalog(
    n: int = 6000,
    confounding: float = 1.5,
    coupling_bias: float = 0.0,
    age_slope: float = -2.5,
    age_scatter: float = 1.0,
    infer_noise: float = 0.5,
    seed: int = 0,
) -> Catalog:
    """HQ/LQ catalog for separating selection effects from quality coupling.

    The HQ probability is logistic in standardized [Fe/H] with strength
    ``confounding``, so HQ stars are more metal-rich and (through the AMR)
    younger.  ``coupling_bias`` is added to the inferred age of every LQ
    star at fixed covariates.  HQ membership follows
    :data:`HQ_EXPERIMENT_CUTS`.
    """
    rng = make_rng(seed, 7)
    feh = np.clip(rng.normal(-0.25, 0.3, n), -1.5, 0.5)
    zf = (feh + 0.25) / 0.3
    hq = rng.uniform(size=n) < 1.0 / (1.0 + np.exp(-confounding * zf))
    a_true = 8.0 + age_slope * (feh + 0.25) + age_scatter * rng.standard_normal(n)
    a_true = np.clip(a_true, 0.1, AGE_MAX)
    snr = np.where(hq, rng.uniform(150, 300, n), rng.uniform(40, 150, n))
    psnr = np.where(hq, rng.uniform(20, 100, n), rng.uniform(5, 20, n))
    distance = np.exp(rng.normal(np.log(1.5), 0.4, n))
    plx = 1.0 / distance
    a_inf = a_true + infer_noise * rng.standard_normal(n) + np.where(hq, 0.0, coupling_bias)
    cols = {
        "teff": rng.normal(5300.0, 200.0, n),
        "logg": rng.normal(3.7, 0.15, n),
        "feh": feh,
        "alpha_fe": np.clip(0.1 - 0.3 * (feh + 0.25) + rng.normal(0, 0.05, n), -0.2, 0.5),
        "snr": snr,
        "plx": plx,
        "plx_err": plx / psnr,
        "distance": distance,
        "gal_r": rng.normal(8.0, 1.5, n),
        "gal_z": rng.normal(0.0, 0.5, n),
        "age_infer": np.clip(a_inf, AGE_FLOOR, AGE_MAX),
        "age_seismo": a_true,
    }
    return Catalog([f"sel{k:06d}" for k in range(n)], cols)


def stretched_age_pairs(n: int = 2834, dt_from: float = 3.04, dt_to: float = 3.55,
                        center: float = 8.0, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Index-aligned age lists whose P75 - P25 widens from ``dt_from`` to ``dt_to``.

    The first list is normal with IQR ``dt_from``; the second is the first
    stretched about its median by ``dt_to / dt_from``.  Both stay in (0, 20].
    """
    rng = make_rng(seed, 11)
    sd = dt_from / 1.349
    a = center + sd * rng.standard_normal(n)
    a = np.clip(a, 0.5, AGE_MAX)
    med = np.median(a)
    b = np.clip(med + (a - med) * (dt_to / dt_from), AGE_FLOOR, AGE_MAX)
    return a, b


def exchangeable_age_pairs(n: int = 2834, noise: float = 0.8, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Two noisy age scales of the same stars with no relative bias."""
    rng = make_rng(seed, 13)
    t = _draw_true_ages(SimConfig(sfh_means=(6.0, 10.0), sfh_spreads=(1.5, 1.5),
                                  sfh_weights=(0.5, 0.5)), n, rng)
    a = np.clip(t + noise * rng.standard_normal(n), AGE_FLOOR, AGE_MAX)
    b = np.clip(t + noise * rng.standard_normal(n), AGE_FLOOR, AGE_MAX)
    return a, b


def robustness_fixture_config(seed: int = 0) -> SimConfig:
    """Injection fixture with spatially coherent biased regions.

    The low-SNR half of the plane and the lowest parallax-precision column
    carry a +1 Gyr offset, so high-S regions span several cells of any
    regrid and their stars can be compared across binnings.
    """
    rows, cols = 4, 4
    profile = [[1.0 if (i < rows // 2 or j == 0) else 0.0 for j in range(cols)] for i in range(rows)]
    return SimConfig(n_per_cell=400, grid_dims=(rows, cols), bias_amp=1.0, bias_profile=profile,
                     noise_profile=2.0, seed=seed)
