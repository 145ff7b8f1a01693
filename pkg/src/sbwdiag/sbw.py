"""Per-cell bias, bootstrap uncertainty and the stable-but-wrong significance map.

Two reference modes are supported:

``internal_ref``
    bias is the cell formation time (median or mean age) minus that of a
    high-quality reference sample.
``truth_anchored``
    bias is the median (or mean) of ``age_infer - age_seismo`` over the cell
    members that carry both ages.

In both modes ``sigma_cell`` is the bootstrap SE of the cell statistic and
``s = |delta| / sigma_cell``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .catalog import Catalog
from .grid import Cell, GridSpec
from .stats import (
    DEFAULT_REPLICATES,
    SeedLike,
    bootstrap_stat,
    derive_seed,
    resolve_statistic,
    robust_scale,
)

DEFAULT_TAU = 3.0
SIGMA_EPS = 1e-6
TFORM_STATS = ("median", "mean")
SIGMA_KINDS = ("sd", "iqr_se", "mad_se")

HIGH_BIAS = "high_bias"
LOW_BIAS = "low_bias"
DEGENERATE = "degenerate"
INSUFFICIENT_N = "insufficient_n"

INTERNAL = "internal_ref"
TRUTH = "truth_anchored"


class DiagnosticError(ValueError):
    pass


@dataclass(frozen=True)
class CellDiagnostic:
    i: int
    j: int
    n: int
    delta: float
    sigma_cell: float
    s: float
    classification: str
    mode: str
    valid: bool
    replicates: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class GridDiagnostics:
    cells: tuple[CellDiagnostic, ...]
    spec: GridSpec
    r_tilde: float
    tau: float
    reference: str
    mode: str
    stat: str = "median"
    sigma_kind: str = "sd"
    member_positions: tuple[np.ndarray, ...] = field(default=(), compare=False, repr=False)

    def cell(self, i: int, j: int) -> CellDiagnostic:
        return self.cells[i * self.spec.shape[1] + j]

    @property
    def valid_cells(self) -> list[CellDiagnostic]:
        return [c for c in self.cells if c.valid]

    def high_cells(self) -> set[tuple[int, int]]:
        return {(c.i, c.j) for c in self.cells if c.classification == HIGH_BIAS}

    def high_positions(self) -> np.ndarray:
        """Catalog positions of every star sitting in a high-bias cell."""
        parts = [self.member_positions[k] for k, c in enumerate(self.cells)
                 if c.classification == HIGH_BIAS]
        return np.sort(np.concatenate(parts)) if parts else np.empty(0, dtype=np.int64)

    @property
    def sbw_fraction(self) -> float:
        valid = self.valid_cells
        if not valid:
            return 0.0
        return sum(c.classification == HIGH_BIAS for c in valid) / len(valid)

    @property
    def sbw_event(self) -> bool:
        return any(c.classification == HIGH_BIAS for c in self.cells)

    def as_array(self, quantity: str) -> np.ndarray:
        rows, cols = self.spec.shape
        return np.array([getattr(c, quantity) for c in self.cells], dtype=float).reshape(rows, cols)

    def rows(self) -> list[dict]:
        out = []
        se, pe = self.spec.snr_edges, self.spec.plxsnr_edges
        for c in self.cells:
            out.append({
                "i": c.i, "j": c.j,
                "snr_lo": se[c.i], "snr_hi": se[c.i + 1],
                "plx_lo": pe[c.j], "plx_hi": pe[c.j + 1],
                "n": c.n, "delta": c.delta, "sigma": c.sigma_cell, "s": c.s,
                "classification": c.classification,
            })
        return out


# ---------------------------------------------------------------------------
# scalar building blocks


def cell_formation_time(ages, stat: str = "median") -> float:
    a = np.asarray(ages, dtype=float)
    if a.size == 0:
        raise DiagnosticError("no ages in cell")
    if stat not in TFORM_STATS:
        raise DiagnosticError(f"formation-time statistic must be one of {TFORM_STATS}")
    return float(resolve_statistic(stat)(a))


def delta_tform(cell_tform: float, ref_tform: float) -> float:
    return float(cell_tform) - float(ref_tform)


def s_metric(delta: float, sigma_cell: float, eps: float = SIGMA_EPS) -> float | None:
    """|delta| / sigma_cell, or ``None`` (degenerate) when sigma_cell <= eps."""
    if sigma_cell < 0:
        raise DiagnosticError(f"negative sigma_cell {sigma_cell}")
    if sigma_cell <= eps:
        return None
    return abs(delta) / sigma_cell


def classify(s: float, tau: float = DEFAULT_TAU) -> str:
    return HIGH_BIAS if s >= tau else LOW_BIAS


def _classification(n: int, n_min: int, delta: float, sigma: float, tau: float,
                    eps: float) -> tuple[float, str]:
    if n < n_min or not math.isfinite(sigma):
        return math.nan, INSUFFICIENT_N
    s = s_metric(delta, sigma, eps)
    if s is None:
        return math.nan, DEGENERATE
    return s, classify(s, tau)


def r_tilde(diags: GridDiagnostics | Sequence[CellDiagnostic], include_all: bool = False) -> float:
    """median |delta| over valid cells divided by mean sigma_cell over valid cells."""
    cells = diags.cells if isinstance(diags, GridDiagnostics) else diags
    if include_all:
        use = [c for c in cells if math.isfinite(c.delta) and math.isfinite(c.sigma_cell)]
    else:
        use = [c for c in cells if c.valid]
    if not use:
        raise DiagnosticError("no valid cells for r_tilde")
    num = float(np.median([abs(c.delta) for c in use]))
    if num == 0.0:
        return 0.0
    den = float(np.mean([c.sigma_cell for c in use]))
    if not den > 0:
        raise DiagnosticError("mean sigma_cell is zero")
    return num / den


# ---------------------------------------------------------------------------
# grid maps


def _diagnose_cells(
    values_per_cell: list[np.ndarray],
    cells: list[Cell],
    ref_per_cell: list[float],
    spec: GridSpec,
    mode: str,
    stat: str,
    b: int,
    seed: SeedLike,
    tau: float,
    keep_replicates: bool,
    eps: float,
    workers: int,
    positions: list[np.ndarray],
    reference: str,
) -> GridDiagnostics:
    if stat not in TFORM_STATS:
        raise DiagnosticError(f"formation-time statistic must be one of {TFORM_STATS}")
    statistic = resolve_statistic(stat)
    out = []
    for cell, vals, ref in zip(cells, values_per_cell, ref_per_cell):
        n = vals.size
        delta = sigma = math.nan
        reps = None
        if n >= 1 and math.isfinite(ref):
            delta = float(statistic(vals)) - ref
        if n >= 2 and math.isfinite(ref):
            bs = bootstrap_stat(vals, statistic, b, derive_seed(seed, cell.i, cell.j),
                                keep_replicates=keep_replicates, workers=workers)
            sigma = bs.se
            reps = bs.replicates
        s, label = _classification(n, spec.n_min, delta, sigma, tau, eps)
        out.append(CellDiagnostic(cell.i, cell.j, n, delta, sigma, s, label, mode,
                                  n >= spec.n_min and math.isfinite(sigma), reps))
    try:
        rt = r_tilde(out)
    except DiagnosticError:
        rt = math.nan
    return GridDiagnostics(tuple(out), spec, rt, tau, reference, mode, stat, "sd",
                           tuple(positions))


def sbw_map_internal(
    catalog: Catalog,
    grid: tuple[GridSpec, list[Cell]],
    hq_ref: Catalog,
    stat: str = "median",
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    tau: float = DEFAULT_TAU,
    reference: str = "global",
    keep_replicates: bool = False,
    eps: float = SIGMA_EPS,
    workers: int = 1,
) -> GridDiagnostics:
    """Bias of each cell's formation time relative to the HQ reference sample.

    ``reference="per_cell"`` compares each cell against the HQ stars that
    fall into the same cell; cells with no HQ members are then marked
    insufficient.
    """
    spec, cells = grid
    if len(hq_ref) == 0:
        raise DiagnosticError("empty HQ reference sample")
    ages = catalog.column("age_infer")
    values = [ages[c.positions] for c in cells]
    if reference == "global":
        ref = cell_formation_time(hq_ref.column("age_infer"), stat)
        refs = [ref] * len(cells)
        desc = f"global HQ {stat} age = {ref!r} Gyr (N={len(hq_ref)})"
    elif reference == "per_cell":
        hq_set = set(hq_ref.ids)
        refs = []
        for c in cells:
            hq_ages = [ages[p] for p in c.positions if catalog.ids[p] in hq_set]
            refs.append(cell_formation_time(hq_ages, stat) if hq_ages else math.nan)
        desc = f"per-cell HQ {stat} age"
    else:
        raise DiagnosticError(f"unknown reference {reference!r}")
    return _diagnose_cells(values, cells, refs, spec, INTERNAL, stat, b, seed, tau,
                           keep_replicates, eps, workers, [c.positions for c in cells], desc)


def sbw_map_truth(
    catalog: Catalog,
    grid: tuple[GridSpec, list[Cell]],
    stat: str = "median",
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    tau: float = DEFAULT_TAU,
    keep_replicates: bool = False,
    eps: float = SIGMA_EPS,
    workers: int = 1,
) -> GridDiagnostics:
    """Cell bias anchored to asteroseismic ages: stat(age_infer - age_seismo).

    Stars without an asteroseismic age are ignored; ``n`` counts the stars
    with both ages.
    """
    spec, cells = grid
    has = catalog.has_seismo
    if not has.any():
        raise DiagnosticError("no records carry both inferred and asteroseismic ages")
    diff = catalog.column("age_infer") - catalog.column("age_seismo")
    positions = [c.positions[has[c.positions]] for c in cells]
    values = [diff[p] for p in positions]
    return _diagnose_cells(values, cells, [0.0] * len(cells), spec, TRUTH, stat, b, seed, tau,
                           keep_replicates, eps, workers, positions,
                           f"asteroseismic ages ({stat} of age_infer - age_seismo)")


def sigma_alt_map(diags: GridDiagnostics, kind: str, eps: float = SIGMA_EPS) -> GridDiagnostics:
    """Recompute sigma and s from the stored replicate distributions."""
    if kind not in SIGMA_KINDS:
        raise DiagnosticError(f"unknown sigma kind {kind!r}")
    out = []
    for c in diags.cells:
        if c.n < 2 or not math.isfinite(c.sigma_cell):
            out.append(c)
            continue
        if c.replicates is None:
            raise DiagnosticError("bootstrap replicates were not retained; rerun with keep_replicates")
        sigma = robust_scale(c.replicates, kind)
        s, label = _classification(c.n, diags.spec.n_min, c.delta, sigma, diags.tau, eps)
        out.append(replace(c, sigma_cell=sigma, s=s, classification=label))
    try:
        rt = r_tilde(out)
    except DiagnosticError:
        rt = math.nan
    return replace(diags, cells=tuple(out), r_tilde=rt, sigma_kind=kind)


def reclassify(diags: GridDiagnostics, tau: float | None = None, n_min: int | None = None,
               eps: float = SIGMA_EPS) -> GridDiagnostics:
    """Re-threshold an existing map without recomputing bootstraps."""
    tau = diags.tau if tau is None else tau
    n_min = diags.spec.n_min if n_min is None else n_min
    spec = replace(diags.spec, n_min=n_min)
    out = []
    for c in diags.cells:
        s, label = _classification(c.n, n_min, c.delta, c.sigma_cell, tau, eps)
        out.append(replace(c, s=s, classification=label,
                           valid=c.n >= n_min and math.isfinite(c.sigma_cell)))
    try:
        rt = r_tilde(out)
    except DiagnosticError:
        rt = math.nan
    return replace(diags, cells=tuple(out), spec=spec, tau=tau, r_tilde=rt)
