"""Empirical formation-history tracers and their paired or independent comparisons.

Conventions:

* CFF(tau) is the fraction of stars with age >= tau, i.e. the fraction
  already formed by lookback time tau.  It is non-increasing in tau.
* dt_form = P75 - P25 of the ages (linear (n-1)q quantile rule).
* peak_age is the histogram mode, bins of ``peak_bin_width`` Gyr from 0.
* f_old is the fraction of ages strictly above ``tau_old``.
* Every comparison reports ``second - first``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .catalog import Catalog, QualityCuts
from .sbw import HIGH_BIAS, LOW_BIAS, GridDiagnostics
from .stats import (
    DEFAULT_REPLICATES,
    MIN_REPLICATES,
    SeedLike,
    SignificanceResult,
    derive_seed,
    histogram_mode_rows,
    quantile_sorted,
    replicate_map,
    replicate_sd,
    significance,
)

TRACERS = ("dt_form", "peak_age", "f_old")
DEFAULT_PEAK_WIDTH = 0.5
DEFAULT_TAU_OLD = 10.0
DEFAULT_AGE_GRID = tuple(0.5 * k for k in range(29))  # 0 .. 14 Gyr


class HistoryError(ValueError):
    pass


@dataclass(frozen=True)
class HistorySummary:
    cff: tuple[tuple[float, float], ...]
    dt_form: float
    peak_age: float
    f_old: float
    n: int
    age_source: str = "infer"
    sample_label: str = ""

    def tracer(self, name: str) -> float:
        return getattr(self, name)


def _clean(ages, what: str = "ages") -> np.ndarray:
    a = np.asarray(ages, dtype=float).ravel()
    if a.size == 0:
        raise HistoryError(f"{what}: empty input")
    if not np.all(np.isfinite(a)):
        raise HistoryError(f"{what}: non-finite entries")
    return a


def tracer_rows(x: np.ndarray, peak_bin_width: float = DEFAULT_PEAK_WIDTH,
                tau_old: float = DEFAULT_TAU_OLD) -> np.ndarray:
    """(dt_form, peak_age, f_old) for every row of a 2-D age array."""
    x = np.atleast_2d(x)
    xs = np.sort(x, axis=1)
    dt = quantile_sorted(xs, 0.75) - quantile_sorted(xs, 0.25)
    peak = histogram_mode_rows(x, peak_bin_width, 0.0)
    f_old = np.mean(x > tau_old, axis=1)
    return np.column_stack([dt, peak, f_old])


def _masked_quantile(xs: np.ndarray, m: np.ndarray, q: float) -> np.ndarray:
    # xs: rows sorted with excluded entries pushed to the end; m: kept count
    h = (m - 1) * q
    lo = np.floor(h).astype(np.int64)
    hi = np.minimum(np.ceil(h).astype(np.int64), m - 1)
    lo, hi = np.maximum(lo, 0), np.maximum(hi, 0)
    a = np.take_along_axis(xs, lo[:, None], axis=1)[:, 0]
    b = np.take_along_axis(xs, hi[:, None], axis=1)[:, 0]
    with np.errstate(invalid="ignore"):  # rows with nothing kept hold inf
        return a + (h - lo) * (b - a)


def tracer_rows_masked(x: np.ndarray, keep: np.ndarray,
                       peak_bin_width: float = DEFAULT_PEAK_WIDTH,
                       tau_old: float = DEFAULT_TAU_OLD) -> np.ndarray:
    """:func:`tracer_rows` restricted to the entries where ``keep`` is true.

    Rows with nothing kept give NaN.
    """
    m = keep.sum(axis=1)
    xs = np.sort(np.where(keep, x, np.inf), axis=1)
    dt = _masked_quantile(xs, m, 0.75) - _masked_quantile(xs, m, 0.25)
    k = np.floor(x / peak_bin_width).astype(np.int64)
    kmin = int(k.min())
    nb = int(k.max()) - kmin + 1
    rows = x.shape[0]
    flat = (np.arange(rows, dtype=np.int64)[:, None] * nb + (k - kmin))[keep]
    counts = np.bincount(flat, minlength=rows * nb).reshape(rows, nb)
    peak = (np.argmax(counts, axis=1) + kmin + 0.5) * peak_bin_width
    with np.errstate(invalid="ignore", divide="ignore"):
        f_old = np.sum((x > tau_old) & keep, axis=1) / m
    out = np.column_stack([dt, peak, f_old])
    out[m == 0] = np.nan
    return out


def cff_curve(ages, age_grid: Sequence[float] = DEFAULT_AGE_GRID) -> tuple[tuple[float, float], ...]:
    a = np.sort(_clean(ages))
    grid = np.asarray(age_grid, dtype=float)
    if grid.size and not np.all(np.diff(grid) > 0):
        raise HistoryError("age grid must be strictly ascending")
    # count of ages >= tau via the left insertion point in the sorted ages
    frac = (a.size - np.searchsorted(a, grid, side="left")) / a.size
    return tuple((float(t), float(f)) for t, f in zip(grid, frac))


def history_summary(
    ages,
    age_grid: Sequence[float] = DEFAULT_AGE_GRID,
    peak_bin_width: float = DEFAULT_PEAK_WIDTH,
    tau_old: float = DEFAULT_TAU_OLD,
    age_source: str = "infer",
    sample_label: str = "",
) -> HistorySummary:
    a = _clean(ages)
    dt, peak, f_old = tracer_rows(a[None, :], peak_bin_width, tau_old)[0]
    return HistorySummary(cff_curve(a, age_grid), float(dt), float(peak), float(f_old),
                          int(a.size), age_source, sample_label)


@dataclass(frozen=True)
class HistoryComparison:
    first: HistorySummary
    second: HistorySummary
    mode: str
    results: dict[str, SignificanceResult]

    def rows(self) -> list[dict]:
        return [{"tracer": t, **self.results[t].as_row()} for t in TRACERS]


def _compare_from_reps(point_a: np.ndarray, point_b: np.ndarray, reps: np.ndarray
                       ) -> dict[str, SignificanceResult]:
    out = {}
    for k, name in enumerate(TRACERS):
        se = replicate_sd(reps[:, k])
        out[name] = significance(float(point_b[k] - point_a[k]), se)
    return out


def compare_histories(
    a,
    b,
    mode: str = "paired",
    b_reps: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    peak_bin_width: float = DEFAULT_PEAK_WIDTH,
    tau_old: float = DEFAULT_TAU_OLD,
    age_grid: Sequence[float] = DEFAULT_AGE_GRID,
    labels: tuple[str, str] = ("a", "b"),
    workers: int = 1,
) -> HistoryComparison:
    """Tracer differences ``b - a`` with bootstrap SEs.

    ``paired`` draws one set of star indices per replicate and recomputes
    both summaries on it; ``independent`` resamples each side on its own.
    """
    xa, xb = _clean(a, "a"), _clean(b, "b")
    if b_reps < MIN_REPLICATES:
        raise HistoryError(f"need at least {MIN_REPLICATES} bootstrap replicates")
    if mode == "paired":
        if xa.size != xb.size:
            raise HistoryError(f"paired mode needs equal lengths, got {xa.size} and {xb.size}")
        n = xa.size

        def block(rng: np.random.Generator, count: int) -> np.ndarray:
            idx = rng.integers(0, n, size=(count, n))
            return (tracer_rows(xb[idx], peak_bin_width, tau_old)
                    - tracer_rows(xa[idx], peak_bin_width, tau_old))
    elif mode == "independent":
        na, nb = xa.size, xb.size

        def block(rng: np.random.Generator, count: int) -> np.ndarray:
            ra = tracer_rows(xa[rng.integers(0, na, size=(count, na))], peak_bin_width, tau_old)
            rb = tracer_rows(xb[rng.integers(0, nb, size=(count, nb))], peak_bin_width, tau_old)
            return rb - ra
    else:
        raise HistoryError(f"unknown mode {mode!r}")
    reps = replicate_map(block, b_reps, seed, workers)
    sa = history_summary(xa, age_grid, peak_bin_width, tau_old, sample_label=labels[0])
    sb = history_summary(xb, age_grid, peak_bin_width, tau_old, sample_label=labels[1])
    pa = np.array([sa.dt_form, sa.peak_age, sa.f_old])
    pb = np.array([sb.dt_form, sb.peak_age, sb.f_old])
    return HistoryComparison(sa, sb, mode, _compare_from_reps(pa, pb, reps))


def matched_positions(catalog: Catalog, age_source: str, matched: str) -> np.ndarray:
    """Rows of the strictly matched star set.

    ``both_ages`` keeps stars carrying inferred and asteroseismic ages;
    ``all`` keeps every star with a finite age from ``age_source``.
    """
    a = catalog.ages(age_source)
    if matched == "both_ages":
        m = np.isfinite(catalog.column("age_infer")) & catalog.has_seismo
    elif matched == "all":
        m = np.isfinite(a)
    else:
        raise HistoryError(f"unknown matched-set rule {matched!r}")
    return np.flatnonzero(m)


def quality_selection_check(
    catalog: Catalog,
    hq_cuts: QualityCuts,
    age_source: str = "infer",
    b_reps: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    matched: str = "all",
    peak_bin_width: float = DEFAULT_PEAK_WIDTH,
    tau_old: float = DEFAULT_TAU_OLD,
    workers: int = 1,
) -> HistoryComparison:
    """Standard sample vs its HQ subset, both on the same matched star set.

    Sign convention: every delta is standard minus HQ (``first`` is the HQ
    summary, ``second`` the standard one).  Each replicate resamples the
    standard sample once and takes the HQ subset from that same resample,
    so the nesting of HQ inside the standard sample is kept.
    """
    pos = matched_positions(catalog, age_source, matched)
    if pos.size == 0:
        raise HistoryError("matched star set is empty")
    ages = catalog.ages(age_source)[pos]
    is_hq = hq_cuts.mask(catalog)[pos]
    if not is_hq.any():
        raise HistoryError("HQ subset of the matched star set is empty")
    if b_reps < MIN_REPLICATES:
        raise HistoryError(f"need at least {MIN_REPLICATES} bootstrap replicates")
    n = ages.size

    def block(rng: np.random.Generator, count: int) -> np.ndarray:
        idx = rng.integers(0, n, size=(count, n))
        x = ages[idx]
        full = tracer_rows(x, peak_bin_width, tau_old)
        return full - tracer_rows_masked(x, is_hq[idx], peak_bin_width, tau_old)

    reps = replicate_map(block, b_reps, seed, workers)
    reps = reps[np.all(np.isfinite(reps), axis=1)]
    s_hq = history_summary(ages[is_hq], age_source=age_source, peak_bin_width=peak_bin_width,
                           tau_old=tau_old, sample_label="hq")
    s_std = history_summary(ages, age_source=age_source, peak_bin_width=peak_bin_width,
                            tau_old=tau_old, sample_label="std")
    p_hq = np.array([s_hq.dt_form, s_hq.peak_age, s_hq.f_old])
    p_std = np.array([s_std.dt_form, s_std.peak_age, s_std.f_old])
    return HistoryComparison(s_hq, s_std, "nested", _compare_from_reps(p_hq, p_std, reps))


def bias_strata_positions(diags: GridDiagnostics) -> tuple[np.ndarray, np.ndarray]:
    """Catalog rows in high-bias cells and in low-bias cells."""
    if not diags.member_positions:
        raise HistoryError("diagnostics carry no member positions")
    parts = {HIGH_BIAS: [], LOW_BIAS: []}
    for c, p in zip(diags.cells, diags.member_positions):
        if c.classification in parts:
            parts[c.classification].append(p)
    out = []
    for label in (HIGH_BIAS, LOW_BIAS):
        ps = parts[label]
        out.append(np.sort(np.concatenate(ps)) if ps else np.empty(0, dtype=np.int64))
    return out[0], out[1]


def bias_strata_check(
    catalog: Catalog,
    diags: GridDiagnostics,
    age_source: str = "infer",
    b_reps: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    peak_bin_width: float = DEFAULT_PEAK_WIDTH,
    tau_old: float = DEFAULT_TAU_OLD,
    workers: int = 1,
) -> HistoryComparison:
    """High-bias minus low-bias tracers (independent resampling).

    Stars in degenerate or insufficient cells belong to neither stratum.
    """
    hi, lo = bias_strata_positions(diags)
    if hi.size == 0:
        raise HistoryError("no stars in high-bias cells")
    if lo.size == 0:
        raise HistoryError("no stars in low-bias cells")
    a = catalog.ages(age_source)
    ah, al = a[hi], a[lo]
    ah, al = ah[np.isfinite(ah)], al[np.isfinite(al)]
    if ah.size == 0 or al.size == 0:
        raise HistoryError(f"a bias stratum has no {age_source} ages")
    cmp = compare_histories(al, ah, "independent", b_reps, seed, peak_bin_width, tau_old,
                            labels=("low_bias", "high_bias"), workers=workers)
    return cmp


def quantile_strata_check(
    catalog: Catalog,
    diags: GridDiagnostics,
    q: float = 0.5,
    age_source: str = "infer",
    b_reps: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    workers: int = 1,
) -> HistoryComparison:
    """Variant of :func:`bias_strata_check` splitting valid cells at the ``q``
    quantile of s instead of at tau."""
    valid = [(c, p) for c, p in zip(diags.cells, diags.member_positions)
             if c.valid and math.isfinite(c.s)]
    if len(valid) < 2:
        raise HistoryError("need at least 2 valid cells")
    s_sorted = np.sort([c.s for c, _ in valid])
    cut = float(quantile_sorted(s_sorted, q))
    hi = [p for c, p in valid if c.s > cut]
    lo = [p for c, p in valid if c.s <= cut]
    if not hi or not lo:
        raise HistoryError("quantile split left a stratum empty")
    a = catalog.ages(age_source)
    ah = a[np.concatenate(hi)]
    al = a[np.concatenate(lo)]
    return compare_histories(al[np.isfinite(al)], ah[np.isfinite(ah)], "independent", b_reps,
                             derive_seed(seed, 0), labels=("low_s", "high_s"), workers=workers)
