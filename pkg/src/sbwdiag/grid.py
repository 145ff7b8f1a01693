"""Binning of the (SNR, parallax precision) plane into quality cells."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .catalog import Catalog, StarRecord, plx_snr
from .stats import quantile_sorted

OUTSIDE = None
DEFAULT_NBINS = 6
DEFAULT_NMIN = 50
STRATEGIES = ("quantile", "fixed")


class GridError(ValueError):
    pass


def _check_edges(edges: tuple[float, ...], axis: str) -> None:
    if len(edges) < 2:
        raise GridError(f"{axis} axis needs at least 2 edges")
    if not all(b > a for a, b in zip(edges, edges[1:])):
        raise GridError(f"{axis} edges must be strictly increasing: {edges}")


@dataclass(frozen=True)
class GridSpec:
    snr_edges: tuple[float, ...]
    plxsnr_edges: tuple[float, ...]
    n_min: int = DEFAULT_NMIN
    strategy: str = "quantile"

    def __post_init__(self):
        object.__setattr__(self, "snr_edges", tuple(float(e) for e in self.snr_edges))
        object.__setattr__(self, "plxsnr_edges", tuple(float(e) for e in self.plxsnr_edges))
        _check_edges(self.snr_edges, "snr")
        _check_edges(self.plxsnr_edges, "plx-snr")
        if self.n_min < 1:
            raise GridError("n_min must be >= 1")
        if self.strategy not in STRATEGIES:
            raise GridError(f"unknown strategy {self.strategy!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.snr_edges) - 1, len(self.plxsnr_edges) - 1

    def to_dict(self) -> dict:
        return {"snr_edges": list(self.snr_edges), "plxsnr_edges": list(self.plxsnr_edges),
                "n_min": self.n_min, "strategy": self.strategy}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(tuple(d["snr_edges"]), tuple(d["plxsnr_edges"]), int(d["n_min"]), d["strategy"])


@dataclass(frozen=True)
class Cell:
    i: int
    j: int
    member_ids: tuple[str, ...] = field(repr=False)
    positions: np.ndarray = field(repr=False, compare=False)
    n_min: int = DEFAULT_NMIN

    @property
    def n(self) -> int:
        return len(self.member_ids)

    @property
    def valid(self) -> bool:
        return self.n >= self.n_min


def axis_index(values: np.ndarray, edges: tuple[float, ...]) -> np.ndarray:
    """Bin index per value; half-open bins, closed last bin, -1 when outside."""
    e = np.asarray(edges)
    v = np.asarray(values, dtype=float)
    k = np.searchsorted(e, v, side="right") - 1
    k = np.where(v == e[-1], len(e) - 2, k)
    bad = (v < e[0]) | (v > e[-1]) | ~np.isfinite(v)
    return np.where(bad, -1, k)


def assign_indices(catalog: Catalog, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized cell indices (i, j) for every record, -1 where outside."""
    i = axis_index(catalog.column("snr"), spec.snr_edges)
    j = axis_index(catalog.plx_snr, spec.plxsnr_edges)
    out = (i < 0) | (j < 0)
    return np.where(out, -1, i), np.where(out, -1, j)


def assign_cell(record: StarRecord, spec: GridSpec) -> tuple[int, int] | None:
    """Cell of one record, or ``None`` when outside the grid."""
    i = int(axis_index(np.array([record.snr]), spec.snr_edges)[0])
    j = int(axis_index(np.array([plx_snr(record)]), spec.plxsnr_edges)[0])
    if i < 0 or j < 0:
        return OUTSIDE
    return i, j


def _axis_edges(values: np.ndarray, n_bins: int, strategy: str, axis: str) -> tuple[float, ...]:
    v = np.sort(values[np.isfinite(values)])
    if v.size == 0:
        raise GridError(f"no finite {axis} values")
    if strategy == "quantile":
        edges = tuple(float(quantile_sorted(v, k / n_bins)) for k in range(n_bins + 1))
        if not all(b > a for a, b in zip(edges, edges[1:])):
            raise GridError(f"too few distinct {axis} values for {n_bins} quantile bins")
        return edges
    lo, hi = float(v[0]), float(v[-1])
    if not hi > lo:
        raise GridError(f"{axis} values are constant; cannot form fixed-width bins")
    return tuple(float(e) for e in np.linspace(lo, hi, n_bins + 1))


def cells_for(catalog: Catalog, spec: GridSpec) -> list[Cell]:
    """Cells in row-major (i, j) order; unoccupied cells included with n = 0."""
    ii, jj = assign_indices(catalog, spec)
    rows, cols = spec.shape
    flat = np.where(ii >= 0, ii * cols + jj, -1)
    order = np.argsort(flat, kind="stable")
    sorted_flat = flat[order]
    cells = []
    for k in range(rows * cols):
        lo, hi = np.searchsorted(sorted_flat, [k, k + 1])
        pos = order[lo:hi]
        cells.append(Cell(k // cols, k % cols, tuple(catalog.ids[pos]), pos, spec.n_min))
    return cells


def build_grid(
    catalog: Catalog,
    n_bins_snr: int = DEFAULT_NBINS,
    n_bins_plx: int = DEFAULT_NBINS,
    strategy: str = "quantile",
    n_min: int = DEFAULT_NMIN,
) -> tuple[GridSpec, list[Cell]]:
    """Edges from the catalog itself (equal-count or equal-width) plus the cells."""
    if len(catalog) == 0:
        raise GridError("cannot build a grid on an empty catalog")
    if n_bins_snr < 2 or n_bins_plx < 2:
        raise GridError("need at least 2 bins per axis")
    if strategy not in STRATEGIES:
        raise GridError(f"unknown strategy {strategy!r}")
    spec = GridSpec(
        _axis_edges(catalog.column("snr"), n_bins_snr, strategy, "snr"),
        _axis_edges(catalog.plx_snr, n_bins_plx, strategy, "plx-snr"),
        n_min,
        strategy,
    )
    return spec, cells_for(catalog, spec)


def outside_count(cells: list[Cell], catalog: Catalog) -> int:
    return len(catalog) - sum(c.n for c in cells)


def write_grid(path: str | Path, spec: GridSpec, cells: list[Cell]) -> None:
    payload = spec.to_dict()
    payload["cells"] = [{"i": c.i, "j": c.j, "n": c.n, "valid": c.valid} for c in cells]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_grid_spec(path: str | Path) -> GridSpec:
    return GridSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
