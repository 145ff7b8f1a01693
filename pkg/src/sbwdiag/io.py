"""Output emission: delimited tables, PPM heatmaps, run manifests, report schema.

Tables carry a ``#``-prefixed preamble with the seed and configuration
digest but never a timestamp, so equal inputs give byte-identical files.
Floats are written with ``repr`` (shortest round-trip form).
"""

from __future__ import annotations

import hashlib
import json
import math
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

MANIFEST_NAME = "manifest.json"
SCHEMA_NAME = "schema.json"


class OutputError(ValueError):
    pass


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        f = float(v)
        if math.isnan(f):
            return "nan"
        return repr(f)
    if isinstance(v, tuple):
        return "-".join(format_value(x) for x in v)
    if v is None:
        return ""
    return str(v)


def write_table(path: str | Path, rows: Sequence[Mapping], columns: Sequence[str] | None = None,
                meta: Mapping[str, object] | None = None, delimiter: str = ",") -> Path:
    """Header row plus one line per mapping; missing keys are written empty."""
    path = Path(path)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    for c in columns:
        if delimiter in c:
            raise OutputError(f"column name {c!r} contains the delimiter")
    lines = [f"# {k}: {format_value(v)}" for k, v in (meta or {}).items()]
    lines.append(delimiter.join(columns))
    for r in rows:
        cells = [format_value(r.get(c)) for c in columns]
        for cell in cells:
            if delimiter in cell:
                raise OutputError(f"value {cell!r} contains the delimiter")
        lines.append(delimiter.join(cells))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


@dataclass
class Table:
    meta: dict[str, str]
    columns: list[str]
    rows: list[dict[str, str]]

    def column(self, name: str) -> list[str]:
        return [r[name] for r in self.rows]

    def floats(self, name: str) -> np.ndarray:
        return np.array([float(x) if x != "" else math.nan for x in self.column(name)])


def read_table(path: str | Path, delimiter: str = ",") -> Table:
    meta: dict[str, str] = {}
    header: list[str] | None = None
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if header is None and line.startswith("#"):
            k, _, v = line[1:].strip().partition(":")
            meta[k.strip()] = v.strip()
            continue
        if header is None:
            header = line.split(delimiter) if line else []
            continue
        parts = line.split(delimiter)
        if len(parts) != len(header):
            raise OutputError(f"{path}: row has {len(parts)} fields, header has {len(header)}")
        rows.append(dict(zip(header, parts)))
    if header is None:
        raise OutputError(f"{path}: no header row")
    return Table(meta, header, rows)


# ---------------------------------------------------------------------------
# heatmaps


def _ramp(t: np.ndarray, stops: Sequence[tuple[float, tuple[int, int, int]]]) -> np.ndarray:
    xs = np.array([s[0] for s in stops])
    cols = np.array([s[1] for s in stops], dtype=float)
    out = np.stack([np.interp(t, xs, cols[:, k]) for k in range(3)], axis=-1)
    return np.round(out).astype(np.uint8)


SEQUENTIAL = ((0.0, (13, 8, 135)), (0.5, (204, 71, 120)), (1.0, (240, 249, 33)))
DIVERGING = ((0.0, (33, 102, 172)), (0.5, (247, 247, 247)), (1.0, (178, 24, 43)))
MISSING_RGB = (128, 128, 128)


def heatmap_rgb(values: np.ndarray, diverging: bool = False) -> np.ndarray:
    """RGB array for a 2-D grid; NaN cells are grey.

    Sequential maps span [min, max]; diverging maps are centred on 0 and
    span [-m, m] with m the largest finite |value|.
    """
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v)
    t = np.zeros_like(v)
    if ok.any():
        if diverging:
            m = float(np.max(np.abs(v[ok])))
            t[ok] = 0.5 if m == 0 else 0.5 + 0.5 * v[ok] / m
        else:
            lo, hi = float(v[ok].min()), float(v[ok].max())
            t[ok] = 0.0 if hi == lo else (v[ok] - lo) / (hi - lo)
    rgb = _ramp(t, DIVERGING if diverging else SEQUENTIAL)
    rgb[~ok] = MISSING_RGB
    return rgb


def write_ppm(path: str | Path, values: np.ndarray, diverging: bool = False,
              cell_px: int = 16) -> Path:
    """Binary P6 image; grid row 0 (lowest SNR) is drawn at the bottom."""
    rgb = heatmap_rgb(values, diverging)[::-1]
    img = np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)
    h, w = img.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())
    return path


def read_ppm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise OutputError(f"{path}: not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------------------
# digests and manifest


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)


def config_digest(settings: Mapping) -> str:
    return hashlib.sha256(canonical_json(settings).encode("utf-8")).hexdigest()


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command_line: str
    config_digest: str
    seed: int
    input_digests: dict[str, str]
    tool_version: str
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))
    outputs: list[str] = field(default_factory=list)
    python: str = field(default_factory=platform.python_version)

    def write(self, directory: str | Path) -> Path:
        path = Path(directory) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def read(cls, directory: str | Path) -> "RunManifest":
        return cls(**json.loads((Path(directory) / MANIFEST_NAME).read_text(encoding="utf-8")))


# ---------------------------------------------------------------------------
# report schema

GRID_COLUMNS = ["i", "j", "snr_lo", "snr_hi", "plx_lo", "plx_hi", "n", "delta", "sigma", "s",
                "classification"]

REPORT_SCHEMA: dict[str, dict] = {
    "validation.csv": {"columns": ["column", "min", "max", "n_present"],
                       "describes": "per-column ranges of the loaded catalog"},
    "grid.json": {"keys": ["snr_edges", "plxsnr_edges", "n_min", "strategy", "cells"],
                  "describes": "grid edges and per-cell occupancy"},
    "sbw_internal.csv": {"columns": GRID_COLUMNS,
                         "describes": "cell bias against the HQ reference"},
    "sbw_truth.csv": {"columns": GRID_COLUMNS,
                      "describes": "cell bias against asteroseismic ages", "optional": True},
    "cem_summary.csv": {"columns": ["quantity", "value"], "describes": "match report"},
    "cem_matched.csv": {"columns": ["id", "group", "stratum", "weight"],
                        "describes": "weighted matched catalog"},
    "cem_bins.csv": {"columns": ["feh_lo", "feh_hi", "n_treated", "n_control", "median_treated",
                                 "median_control", "delta", "se", "ci_low", "ci_high", "z",
                                 "robust"],
                     "describes": "matched age differences per [Fe/H] bin"},
    "amr_curve.csv": {"columns": ["feh_center", "median", "count", "ci_low", "ci_high", "robust"],
                      "describes": "binned age-metallicity relation"},
    "amr_fit.csv": {"columns": ["feh_lo", "feh_hi", "slope_a", "slope_se", "intercept_b", "n"],
                    "describes": "range-restricted OLS fits"},
    "history_cff.csv": {"columns": ["age", "cff"], "describes": "cumulative formation fraction"},
    "history_summary.csv": {"columns": ["sample", "age_source", "n", "dt_form", "peak_age",
                                        "f_old"],
                            "describes": "formation-history tracers"},
    "history_quality.csv": {"columns": ["tracer", "delta", "se", "z", "p"],
                            "describes": "standard minus HQ tracers on the matched set"},
    "history_bias.csv": {"columns": ["tracer", "delta", "se", "z", "p"],
                         "describes": "high-bias minus low-bias tracers", "optional": True},
    "robustness.csv": {"columns": ["variant", "axis", "value", "n_high", "n_valid",
                                   "n_high_stars", "jaccard_stars", "jaccard_cells", "r_tilde",
                                   "absdelta_min", "absdelta_p25", "absdelta_median",
                                   "absdelta_p75", "absdelta_max"],
                       "describes": "SBW map stability per sweep variant"},
}


def write_schema(directory: str | Path) -> Path:
    path = Path(directory) / SCHEMA_NAME
    path.write_text(json.dumps(REPORT_SCHEMA, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def validate_report(directory: str | Path) -> list[str]:
    """Problems found when checking a report directory against its schema."""
    d = Path(directory)
    problems = []
    if not (d / MANIFEST_NAME).is_file():
        problems.append(f"missing {MANIFEST_NAME}")
    schema_path = d / SCHEMA_NAME
    schema = json.loads(schema_path.read_text(encoding="utf-8")) if schema_path.is_file() else REPORT_SCHEMA
    for name, entry in schema.items():
        p = d / name
        if not p.is_file():
            if not entry.get("optional"):
                problems.append(f"missing {name}")
            continue
        if "columns" in entry:
            cols = read_table(p).columns
            if cols[:len(entry["columns"])] != entry["columns"]:
                problems.append(f"{name}: columns {cols} do not start with {entry['columns']}")
        if "keys" in entry:
            keys = set(json.loads(p.read_text(encoding="utf-8")))
            missing = [k for k in entry["keys"] if k not in keys]
            if missing:
                problems.append(f"{name}: missing keys {missing}")
    return problems


def numeric_outputs(directory: str | Path) -> list[Path]:
    """Every table, grid and image in a directory (the manifest excluded)."""
    return sorted(p for p in Path(directory).iterdir()
                  if p.is_file() and p.suffix in (".csv", ".json", ".ppm") and p.name != MANIFEST_NAME)


def iter_rows(items: Iterable) -> list[dict]:
    return [asdict(x) if hasattr(x, "__dataclass_fields__") else dict(x) for x in items]
