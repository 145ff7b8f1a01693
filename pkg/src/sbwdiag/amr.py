"""Age-metallicity relation: binned medians, range-restricted OLS fits and offsets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from .catalog import Catalog
from .stats import (
    DEFAULT_REPLICATES,
    MIN_REPLICATES,
    SeedLike,
    SignificanceResult,
    bin_edge,
    Statistic,
    bootstrap_stat,
    derive_seed,
    paired_bootstrap_diff,
    quantile_sorted,
    replicate_map,
    replicate_sd,
    resolve_statistic,
    significance,
)

DEFAULT_BIN_WIDTH = 0.1
ROBUST_COUNT = 30
METAL_POOR_BRANCH = (-1.0, -0.5)
SENSITIVITY_LABEL = "sensitivity analysis: crossings depend on binning and threshold"

AgesLike = Union[str, Sequence[float], np.ndarray]


class AmrError(ValueError):
    pass


def resolve_ages(catalog: Catalog, ages: AgesLike) -> np.ndarray:
    """``"infer"``/``"seismo"`` or an array aligned with the catalog rows."""
    if isinstance(ages, str):
        try:
            return catalog.ages(ages)
        except (KeyError, ValueError) as exc:
            raise AmrError(str(exc)) from None
    a = np.asarray(ages, dtype=float)
    if a.shape != (len(catalog),):
        raise AmrError(f"ages has shape {a.shape}, expected ({len(catalog)},)")
    return a


def feh_bin_keys(feh: np.ndarray, width: float) -> np.ndarray:
    # The 1e-9 guard keeps values printed on a bin edge in the upper bin.
    return np.floor(np.asarray(feh, float) / width + 1e-9).astype(np.int64)


def _key_seed(seed: SeedLike, key: int) -> tuple[int, ...]:
    return derive_seed(seed, int(key) % 2**32)


def _percentile_ci(reps: np.ndarray) -> tuple[float, float]:
    xs = np.sort(reps[np.isfinite(reps)])
    if xs.size < 2:
        return math.nan, math.nan
    return float(quantile_sorted(xs, 0.025)), float(quantile_sorted(xs, 0.975))


# ---------------------------------------------------------------------------
# binned curve


@dataclass(frozen=True)
class AmrCurve:
    bin_width: float
    keys: tuple[int, ...]
    bin_centers: tuple[float, ...]
    medians: tuple[float, ...]
    counts: tuple[int, ...]
    ci_low: tuple[float, ...]
    ci_high: tuple[float, ...]
    robust: tuple[bool, ...]
    min_count: int = ROBUST_COUNT

    def rows(self) -> list[dict]:
        return [{"feh_center": c, "median": m, "count": n, "ci_low": lo, "ci_high": hi,
                 "robust": int(r)}
                for c, m, n, lo, hi, r in zip(self.bin_centers, self.medians, self.counts,
                                             self.ci_low, self.ci_high, self.robust)]


def binned_amr(
    catalog: Catalog,
    ages: AgesLike = "infer",
    bin_width: float = DEFAULT_BIN_WIDTH,
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    min_count: int = ROBUST_COUNT,
    stat: Union[str, Statistic] = "median",
) -> AmrCurve:
    """Per-bin statistic of age over contiguous fixed-width [Fe/H] bins.

    Empty bins inside the occupied range are carried with count 0.
    """
    if not bin_width > 0:
        raise AmrError("bin_width must be positive")
    a = resolve_ages(catalog, ages)
    feh = catalog.column("feh")
    ok = np.isfinite(a) & np.isfinite(feh)
    if not ok.any():
        raise AmrError("no records with both feh and age")
    statistic = resolve_statistic(stat)
    keys = feh_bin_keys(feh[ok], bin_width)
    vals = a[ok]
    out = {f: [] for f in ("keys", "centers", "med", "n", "lo", "hi", "rob")}
    for k in range(int(keys.min()), int(keys.max()) + 1):
        v = vals[keys == k]
        med = lo = hi = math.nan
        if v.size:
            med = float(statistic(v))
        if v.size >= 2:
            bs = bootstrap_stat(v, statistic, b, _key_seed(seed, k))
            lo, hi = bs.ci_low, bs.ci_high
        out["keys"].append(k)
        out["centers"].append(bin_edge(k + 0.5, bin_width))
        out["med"].append(med)
        out["n"].append(int(v.size))
        out["lo"].append(lo)
        out["hi"].append(hi)
        out["rob"].append(bool(v.size >= min_count))
    return AmrCurve(bin_width, tuple(out["keys"]), tuple(out["centers"]), tuple(out["med"]),
                    tuple(out["n"]), tuple(out["lo"]), tuple(out["hi"]), tuple(out["rob"]),
                    min_count)


# ---------------------------------------------------------------------------
# linear fits


@dataclass(frozen=True)
class AmrFit:
    slope_a: float
    intercept_b: float
    slope_se: float
    n: int
    feh_range: tuple[float, float]
    intercept_se: float = math.nan
    age_label: str = ""


def ols_line(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Closed-form least-squares slope and intercept."""
    if x.size == 0 or np.all(x == x[0]):
        raise AmrError("rank-deficient fit: all feh values are equal")
    xm, ym = x.mean(), y.mean()
    dx = x - xm
    sxx = float(dx @ dx)
    if sxx == 0:   # distinct values so close that the spread underflows
        raise AmrError("rank-deficient fit: feh spread underflows")
    slope = float(dx @ (y - ym)) / sxx
    return slope, float(ym - slope * xm)


def _ols_rows(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    xm = x.mean(axis=1, keepdims=True)
    ym = y.mean(axis=1, keepdims=True)
    dx = x - xm
    sxx = np.einsum("ij,ij->i", dx, dx)
    sxy = np.einsum("ij,ij->i", dx, y - ym)
    varied = np.any(x != x[:, :1], axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        slope = np.where(varied, sxy / np.where(varied, sxx, 1.0), np.nan)
    return slope, ym[:, 0] - slope * xm[:, 0]


def _in_range(feh: np.ndarray, feh_range: tuple[float, float]) -> np.ndarray:
    lo, hi = feh_range
    return (feh >= lo) & (feh < hi)


def _check_range(feh_range) -> tuple[float, float]:
    lo, hi = (float(v) for v in feh_range)
    if not hi > lo:
        raise AmrError(f"empty feh range [{lo}, {hi})")
    return lo, hi


def fit_amr(
    catalog: Catalog,
    ages: AgesLike = "infer",
    feh_range: tuple[float, float] = (-math.inf, math.inf),
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    workers: int = 1,
) -> AmrFit:
    """OLS of age on [Fe/H] for records with feh in ``[lo, hi)``.

    ``slope_se`` is the SD of slopes refit on record-level bootstrap
    resamples; resamples whose feh values all coincide are discarded.
    """
    feh_range = _check_range(feh_range)
    if b < MIN_REPLICATES:
        raise AmrError(f"need at least {MIN_REPLICATES} bootstrap replicates")
    a = resolve_ages(catalog, ages)
    feh = catalog.column("feh")
    m = np.isfinite(a) & np.isfinite(feh) & _in_range(feh, feh_range)
    x, y = feh[m], a[m]
    if x.size < 3:
        raise AmrError(f"need at least 3 records in feh range {feh_range}, got {x.size}")
    slope, icpt = ols_line(x, y)
    n = x.size

    def block(rng: np.random.Generator, count: int) -> np.ndarray:
        idx = rng.integers(0, n, size=(count, n))
        s, c = _ols_rows(x[idx], y[idx])
        return np.column_stack([s, c])

    reps = replicate_map(block, b, seed, workers)
    reps = reps[np.isfinite(reps[:, 0])]
    if reps.shape[0] < 2:
        raise AmrError("bootstrap produced no usable slope replicates")
    label = ages if isinstance(ages, str) else ""
    return AmrFit(slope, icpt, replicate_sd(reps[:, 0]), int(n), feh_range,
                  replicate_sd(reps[:, 1]), label)


def slope_diff(
    fit_1: AmrFit,
    fit_2: AmrFit,
    mode: str = "independent",
    catalog: Catalog | None = None,
    ages_1: AgesLike | None = None,
    ages_2: AgesLike | None = None,
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    workers: int = 1,
) -> SignificanceResult:
    """delta = a_2 - a_1.

    ``independent``: se = sqrt(se_1^2 + se_2^2).  ``paired``: both age
    scales are refit on the same record resample, over records carrying
    both ages; delta is then taken from that common record set.
    """
    if tuple(fit_1.feh_range) != tuple(fit_2.feh_range):
        raise AmrError(f"fits cover different feh ranges: {fit_1.feh_range} vs {fit_2.feh_range}")
    if mode == "independent":
        se = math.hypot(fit_1.slope_se, fit_2.slope_se)
        return significance(fit_2.slope_a - fit_1.slope_a, se)
    if mode != "paired":
        raise AmrError(f"unknown mode {mode!r}")
    if catalog is None or ages_1 is None or ages_2 is None:
        raise AmrError("paired mode needs the catalog and both age arrays")
    if b < MIN_REPLICATES:
        raise AmrError(f"need at least {MIN_REPLICATES} bootstrap replicates")
    a1, a2 = resolve_ages(catalog, ages_1), resolve_ages(catalog, ages_2)
    feh = catalog.column("feh")
    m = np.isfinite(a1) & np.isfinite(a2) & np.isfinite(feh) & _in_range(feh, fit_1.feh_range)
    x, y1, y2 = feh[m], a1[m], a2[m]
    n = x.size
    if n < 3:
        raise AmrError("paired slope difference needs at least 3 records with both ages")
    delta = ols_line(x, y2)[0] - ols_line(x, y1)[0]

    def block(rng: np.random.Generator, count: int) -> np.ndarray:
        idx = rng.integers(0, n, size=(count, n))
        xs = x[idx]
        return _ols_rows(xs, y2[idx])[0] - _ols_rows(xs, y1[idx])[0]

    reps = replicate_map(block, b, seed, workers)
    reps = reps[np.isfinite(reps)]
    return significance(float(delta), replicate_sd(reps))


# ---------------------------------------------------------------------------
# offsets at fixed metallicity


def fixed_feh_delta(
    catalog: Catalog,
    feh_bin: tuple[float, float],
    ages_1: AgesLike,
    ages_2: AgesLike,
    mode: str = "paired",
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    stat: Union[str, Statistic] = "median",
    workers: int = 1,
) -> SignificanceResult:
    """stat(ages_2) - stat(ages_1) over records with feh in ``[lo, hi)``.

    ``paired`` uses records carrying both ages and resamples them jointly;
    ``independent`` uses every finite age on each side separately.
    """
    lo, hi = _check_range(feh_bin)
    a1, a2 = resolve_ages(catalog, ages_1), resolve_ages(catalog, ages_2)
    feh = catalog.column("feh")
    inb = np.isfinite(feh) & _in_range(feh, (lo, hi))
    statistic = resolve_statistic(stat)
    if mode == "paired":
        m = inb & np.isfinite(a1) & np.isfinite(a2)
        if m.sum() == 0:
            raise AmrError(f"no records in feh bin [{lo}, {hi})")
        if m.sum() < 2:
            raise AmrError(f"feh bin [{lo}, {hi}) holds fewer than 2 records")
        return paired_bootstrap_diff(np.column_stack([a2[m], a1[m]]), statistic, b, seed, workers)
    if mode != "independent":
        raise AmrError(f"unknown mode {mode!r}")
    v1, v2 = a1[inb & np.isfinite(a1)], a2[inb & np.isfinite(a2)]
    if v1.size == 0 or v2.size == 0:
        raise AmrError(f"no records in feh bin [{lo}, {hi}) on one side")
    if v1.size < 2 or v2.size < 2:
        raise AmrError(f"feh bin [{lo}, {hi}) holds fewer than 2 records on one side")
    s1 = bootstrap_stat(v1, statistic, b, derive_seed(seed, 1), workers=workers)
    s2 = bootstrap_stat(v2, statistic, b, derive_seed(seed, 2), workers=workers)
    return significance(s2.point - s1.point, math.hypot(s1.se, s2.se))


@dataclass(frozen=True)
class GroupBin:
    feh_lo: float
    feh_hi: float
    n_high: int
    n_low: int
    median_high: float
    median_low: float
    delta: float
    se: float
    ci_low: float
    ci_high: float
    robust: bool

    @property
    def feh_center(self) -> float:
        return 0.5 * (self.feh_lo + self.feh_hi)


def group_delta_by_feh(
    catalog: Catalog,
    high_ids: Iterable[str],
    low_ids: Iterable[str],
    ages: AgesLike = "infer",
    bin_width: float = DEFAULT_BIN_WIDTH,
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    min_count: int = ROBUST_COUNT,
) -> list[GroupBin]:
    """Per-bin median_high - median_low with independent bootstrap CIs.

    A bin where either group is empty has an undefined delta (NaN) and is
    never robust.
    """
    if not bin_width > 0:
        raise AmrError("bin_width must be positive")
    if b < MIN_REPLICATES:
        raise AmrError(f"need at least {MIN_REPLICATES} bootstrap replicates")
    hi_ids, lo_ids = list(high_ids), list(low_ids)
    if not hi_ids or not lo_ids:
        raise AmrError("both groups must be non-empty")
    if set(hi_ids) & set(lo_ids):
        raise AmrError("groups overlap")
    a = resolve_ages(catalog, ages)
    feh = catalog.column("feh")
    sides = []
    for ids in (hi_ids, lo_ids):
        p = catalog.positions(ids)
        p = p[np.isfinite(a[p]) & np.isfinite(feh[p])]
        sides.append((a[p], feh_bin_keys(feh[p], bin_width)))
    all_keys = np.concatenate([sides[0][1], sides[1][1]])
    if all_keys.size == 0:
        raise AmrError("no records with both feh and age")
    out = []
    for k in range(int(all_keys.min()), int(all_keys.max()) + 1):
        vh = sides[0][0][sides[0][1] == k]
        vl = sides[1][0][sides[1][1] == k]
        mh = float(np.median(vh)) if vh.size else math.nan
        ml = float(np.median(vl)) if vl.size else math.nan
        delta = se = lo = hi = math.nan
        if vh.size and vl.size:
            delta = mh - ml

            def block(rng: np.random.Generator, count: int, vh=vh, vl=vl) -> np.ndarray:
                rh = np.median(vh[rng.integers(0, vh.size, size=(count, vh.size))], axis=1)
                rl = np.median(vl[rng.integers(0, vl.size, size=(count, vl.size))], axis=1)
                return rh - rl

            reps = replicate_map(block, b, _key_seed(seed, k))
            se = replicate_sd(reps)
            lo, hi = _percentile_ci(reps)
        out.append(GroupBin(bin_edge(k, bin_width), bin_edge(k + 1, bin_width), int(vh.size), int(vl.size),
                            mh, ml, delta, se, lo, hi,
                            bool(vh.size >= min_count and vl.size >= min_count)))
    return out


# ---------------------------------------------------------------------------
# age-threshold crossings


@dataclass(frozen=True)
class CrossingReport:
    age_thresh: float
    crossings_1: tuple[float, ...]
    crossings_2: tuple[float, ...]
    differences: tuple[float, ...]    # every crossing_2 - crossing_1 combination
    label: str = SENSITIVITY_LABEL


def curve_crossings(curve: AmrCurve, age_thresh: float) -> list[float]:
    """Every [Fe/H] where the robust-bin polyline meets ``age_thresh``."""
    pts = [(c, m) for c, m, r in zip(curve.bin_centers, curve.medians, curve.robust)
           if r and math.isfinite(m)]
    out: list[float] = []
    if pts and pts[0][1] == age_thresh:
        out.append(pts[0][0])
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        d0, d1 = y0 - age_thresh, y1 - age_thresh
        if d1 == 0:
            out.append(x1)
        elif d0 * d1 < 0:
            out.append(x0 + (x1 - x0) * d0 / (d0 - d1))
    return out


def threshold_crossings(curve_1: AmrCurve, curve_2: AmrCurve, age_thresh: float = 8.0
                        ) -> CrossingReport:
    if not math.isclose(curve_1.bin_width, curve_2.bin_width, rel_tol=1e-12):
        raise AmrError("curves use different bin widths")
    c1, c2 = curve_crossings(curve_1, age_thresh), curve_crossings(curve_2, age_thresh)
    diffs = tuple(x2 - x1 for x1 in c1 for x2 in c2)
    return CrossingReport(float(age_thresh), tuple(c1), tuple(c2), diffs)
