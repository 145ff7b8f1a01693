"""Stability of the SBW map under alternative binning, thresholds and estimators.

Each sweep changes one axis of the base configuration at a time.  High-S
regions are compared through the set of stars they contain, which stays
meaningful when the grid itself changes (``n_bins``, ``grid_strategy``);
when the variant shares the base grid the cell-level Jaccard is reported as
well.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .catalog import Catalog, QualityCuts
from .grid import STRATEGIES, build_grid
from .sbw import (
    DEFAULT_TAU,
    HIGH_BIAS,
    SIGMA_KINDS,
    TFORM_STATS,
    GridDiagnostics,
    reclassify,
    sbw_map_internal,
    sbw_map_truth,
    sigma_alt_map,
)
from .stats import DEFAULT_REPLICATES, SeedLike, quantile_sorted

AXES = {
    "n_bins": (5, 6, 7),
    "n_min": (30, 50, 80),
    "sigma_kind": SIGMA_KINDS,
    "tform_stat": TFORM_STATS,
    "n_coarse": (2, 3, 4),
    "grid_strategy": STRATEGIES,
}


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple

    def __post_init__(self):
        if self.axis not in AXES:
            raise SweepError(f"unknown sweep axis {self.axis!r}; choose from {tuple(AXES)}")
        vals = tuple(self.values)
        if not vals:
            raise SweepError(f"sweep over {self.axis} has no values")
        domain = AXES[self.axis]
        if self.axis in ("n_bins", "n_coarse"):
            lo, hi = min(domain), max(domain)
            bad = [v for v in vals if not (isinstance(v, (int, np.integer)) and lo <= v <= hi)]
        else:
            bad = [v for v in vals if v not in domain]
        if bad:
            raise SweepError(f"{self.axis} values {bad} outside {domain}")
        object.__setattr__(self, "values", vals)

    @classmethod
    def parse(cls, text: str) -> "SweepSpec":
        """``axis=v1,v2,...``"""
        if "=" not in text:
            raise SweepError(f"sweep must look like axis=v1,v2 (got {text!r})")
        axis, raw = text.split("=", 1)
        axis = axis.strip()
        items = [v.strip() for v in raw.split(",") if v.strip()]
        if axis in ("n_bins", "n_min", "n_coarse"):
            try:
                vals = tuple(int(v) for v in items)
            except ValueError:
                raise SweepError(f"{axis} values must be integers: {raw!r}") from None
        else:
            vals = tuple(items)
        return cls(axis, vals)


def default_sweeps() -> list[SweepSpec]:
    return [SweepSpec(a, v) for a, v in AXES.items() if a != "n_coarse"]


@dataclass(frozen=True)
class RunParams:
    """Everything that defines one SBW map."""

    mode: str = "truth"              # "truth" or "internal"
    n_bins_snr: int = 6
    n_bins_plx: int = 6
    n_min: int = 50
    strategy: str = "quantile"
    sigma_kind: str = "sd"
    tform_stat: str = "median"
    tau: float = DEFAULT_TAU
    b: int = DEFAULT_REPLICATES
    seed: SeedLike = 0
    hq_cuts: QualityCuts | None = None
    reference: str = "global"

    def variant(self, axis: str, value) -> "RunParams":
        if axis == "n_bins":
            return replace(self, n_bins_snr=int(value), n_bins_plx=int(value))
        if axis == "grid_strategy":
            return replace(self, strategy=value)
        if axis in ("n_min", "sigma_kind", "tform_stat"):
            return replace(self, **{axis: value})
        raise SweepError(f"axis {axis!r} does not vary the SBW map")


def run_map(catalog: Catalog, params: RunParams, workers: int = 1,
            keep_replicates: bool = False) -> GridDiagnostics:
    if params.mode not in ("truth", "internal"):
        raise SweepError(f"unknown mode {params.mode!r}")
    grid = build_grid(catalog, params.n_bins_snr, params.n_bins_plx, params.strategy, params.n_min)
    keep = keep_replicates or params.sigma_kind != "sd"
    if params.mode == "truth":
        diags = sbw_map_truth(catalog, grid, params.tform_stat, params.b, params.seed, params.tau,
                              keep_replicates=keep, workers=workers)
    else:
        if params.hq_cuts is None:
            raise SweepError("internal mode needs HQ cuts")
        hq = catalog.subset(params.hq_cuts.mask(catalog))
        diags = sbw_map_internal(catalog, grid, hq, params.tform_stat, params.b, params.seed,
                                 params.tau, params.reference, keep_replicates=keep,
                                 workers=workers)
    if params.sigma_kind != "sd":
        diags = sigma_alt_map(diags, params.sigma_kind)
    return diags


def jaccard(a, b) -> float:
    """|A & B| / |A | B|, with two empty sets counted as identical."""
    sa, sb = set(a), set(b)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


@dataclass(frozen=True)
class VariantResult:
    variant_id: str
    axis: str
    value: object
    n_high: int
    n_valid: int
    n_high_stars: int
    jaccard_stars: float
    jaccard_cells: float
    r_tilde: float
    abs_delta_high: tuple[float, float, float, float, float]  # min, p25, median, p75, max
    extra: dict = field(default_factory=dict, compare=False)

    def row(self) -> dict:
        lo, q1, med, q3, hi = self.abs_delta_high
        out = {"variant": self.variant_id, "axis": self.axis, "value": self.value,
               "n_high": self.n_high, "n_valid": self.n_valid, "n_high_stars": self.n_high_stars,
               "jaccard_stars": self.jaccard_stars, "jaccard_cells": self.jaccard_cells,
               "r_tilde": self.r_tilde, "absdelta_min": lo, "absdelta_p25": q1,
               "absdelta_median": med, "absdelta_p75": q3, "absdelta_max": hi}
        out.update(self.extra)
        return out


def abs_delta_summary(diags: GridDiagnostics) -> tuple[float, float, float, float, float]:
    vals = np.sort([abs(c.delta) for c in diags.cells if c.classification == HIGH_BIAS])
    if vals.size == 0:
        return (math.nan,) * 5
    return tuple(float(quantile_sorted(vals, q)) for q in (0.0, 0.25, 0.5, 0.75, 1.0))


def _same_grid(a: GridDiagnostics, b: GridDiagnostics) -> bool:
    return (a.spec.snr_edges == b.spec.snr_edges and a.spec.plxsnr_edges == b.spec.plxsnr_edges)


def compare_variant(base: GridDiagnostics, diags: GridDiagnostics, variant_id: str,
                    axis: str, value, catalog: Catalog) -> VariantResult:
    base_stars = catalog.ids[base.high_positions()]
    stars = catalog.ids[diags.high_positions()]
    jc = jaccard(base.high_cells(), diags.high_cells()) if _same_grid(base, diags) else math.nan
    return VariantResult(variant_id, axis, value, len(diags.high_cells()), len(diags.valid_cells),
                         int(stars.size), jaccard(base_stars, stars), jc, diags.r_tilde,
                         abs_delta_summary(diags))


@dataclass(frozen=True)
class RobustnessReport:
    base: GridDiagnostics
    base_params: RunParams
    variants: tuple[VariantResult, ...]

    def rows(self) -> list[dict]:
        return [v.row() for v in self.variants]

    def min_jaccard(self, axes: Sequence[str] | None = None) -> float:
        vals = [v.jaccard_stars for v in self.variants
                if (axes is None or v.axis in axes) and math.isfinite(v.jaccard_stars)]
        return min(vals) if vals else math.nan


def robustness_sweep(
    catalog: Catalog,
    base_params: RunParams,
    sweeps: Sequence[SweepSpec] | None = None,
    workers: int = 1,
    cem_runner=None,
) -> RobustnessReport:
    """Rerun the diagnostic under each sweep value and compare with the base.

    ``n_coarse`` variants do not touch the SBW map; they are evaluated by
    ``cem_runner(n_coarse) -> dict`` and reported with the grid columns
    copied from the base.
    """
    sweeps = default_sweeps() if sweeps is None else list(sweeps)
    base_sd = run_map(catalog, replace(base_params, sigma_kind="sd"), keep_replicates=True)
    base = base_sd if base_params.sigma_kind == "sd" else sigma_alt_map(base_sd, base_params.sigma_kind)
    jobs = []
    for sw in sweeps:
        for v in sw.values:
            jobs.append((sw.axis, v))

    def run(job):
        axis, value = job
        vid = f"{axis}={value}"
        if axis == "n_coarse":
            if cem_runner is None:
                raise SweepError("n_coarse sweep needs a CEM runner")
            r = compare_variant(base, base, vid, axis, value, catalog)
            return replace(r, extra=dict(cem_runner(int(value))))
        if axis == "sigma_kind":
            d = base if value == base_params.sigma_kind else sigma_alt_map(base_sd, value)
        elif axis == "n_min":
            d = reclassify(base, n_min=int(value))
        else:
            d = run_map(catalog, base_params.variant(axis, value))
        return compare_variant(base, d, vid, axis, value, catalog)

    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            variants = list(pool.map(run, jobs))
    else:
        variants = [run(j) for j in jobs]
    return RobustnessReport(base, base_params, tuple(variants))
