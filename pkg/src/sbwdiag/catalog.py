"""Tabular stellar catalogs: loading, validation, quality cuts, HQ/LQ split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np

REQUIRED_FIELDS = ("id", "snr", "plx", "plx_err", "age_infer")
OPTIONAL_FIELDS = ("teff", "logg", "feh", "alpha_fe", "distance", "gal_r", "gal_z", "age_seismo")
NUMERIC_FIELDS = (
    "teff", "logg", "feh", "alpha_fe", "snr", "plx", "plx_err",
    "distance", "gal_r", "gal_z", "age_infer", "age_seismo",
)
AGE_MAX = 20.0
FEH_RANGE = (-3.0, 1.0)


class CatalogError(ValueError):
    """Bad catalog input: missing file or column, unparsable row, bad record."""


class ConfigurationError(ValueError):
    """Inconsistent cut configuration."""


class InvalidRecordError(CatalogError):
    pass


@dataclass(frozen=True)
class StarRecord:
    id: str
    teff: float
    logg: float
    feh: float
    alpha_fe: float
    snr: float
    plx: float
    plx_err: float
    distance: float
    gal_r: float
    gal_z: float
    age_infer: float
    age_seismo: float = math.nan

    @property
    def has_seismo(self) -> bool:
        return not math.isnan(self.age_seismo)


def plx_snr(record: StarRecord) -> float:
    """Parallax precision plx / plx_err."""
    if not record.plx_err > 0:
        raise InvalidRecordError(f"record {record.id}: plx_err must be > 0, got {record.plx_err}")
    return record.plx / record.plx_err


def validate_values(values: Mapping[str, float]) -> str | None:
    """Return a reason string when a row violates record invariants, else None."""
    if not values["plx_err"] > 0:
        return "plx_err must be > 0"
    if not values["snr"] >= 0:
        return "snr must be >= 0"
    for age_field in ("age_infer", "age_seismo"):
        a = values.get(age_field, math.nan)
        if not math.isnan(a) and not (0.0 < a <= AGE_MAX):
            return f"{age_field}={a} outside (0, {AGE_MAX}]"
    feh = values.get("feh", math.nan)
    if not math.isnan(feh) and not (FEH_RANGE[0] <= feh <= FEH_RANGE[1]):
        return f"feh={feh} outside [{FEH_RANGE[0]}, {FEH_RANGE[1]}]"
    return None


def _first_invalid(cols: Mapping[str, np.ndarray]) -> int | None:
    with np.errstate(invalid="ignore"):
        ok = (cols["plx_err"] > 0) & (cols["snr"] >= 0)
        for age_field in ("age_infer", "age_seismo"):
            a = cols[age_field]
            ok &= np.isnan(a) | ((a > 0) & (a <= AGE_MAX))
        feh = cols["feh"]
        ok &= np.isnan(feh) | ((feh >= FEH_RANGE[0]) & (feh <= FEH_RANGE[1]))
    bad = np.flatnonzero(~ok)
    return int(bad[0]) if bad.size else None


class Catalog:
    """Immutable column store of star records in load order.

    Numeric columns are read-only float arrays; absent optional values are NaN.
    """

    __slots__ = ("_ids", "_cols", "_index", "skipped")

    def __init__(self, ids: Sequence[str], columns: Mapping[str, Sequence[float]],
                 skipped: int = 0, validate: bool = True):
        id_arr = np.asarray([str(i) for i in ids], dtype=object)
        n = id_arr.size
        cols: dict[str, np.ndarray] = {}
        for name in NUMERIC_FIELDS:
            if name in columns:
                arr = np.array(columns[name], dtype=float)
                if arr.shape != (n,):
                    raise CatalogError(f"column {name!r} has length {arr.size}, expected {n}")
            else:
                if name in REQUIRED_FIELDS:
                    raise CatalogError(f"missing required column {name!r}")
                arr = np.full(n, np.nan)
            arr.setflags(write=False)
            cols[name] = arr
        id_arr.setflags(write=False)
        index = {k: i for i, k in enumerate(id_arr)}
        if len(index) != n:
            seen: set[str] = set()
            dup = next(k for k in id_arr if k in seen or seen.add(k))
            raise CatalogError(f"duplicate id {dup!r}")
        self._ids = id_arr
        self._cols = cols
        self._index = index
        self.skipped = skipped
        if validate:
            bad = _first_invalid(cols)
            if bad is not None:
                reason = validate_values({k: cols[k][bad] for k in NUMERIC_FIELDS})
                raise InvalidRecordError(f"record {id_arr[bad]}: {reason}")

    # -- basic access --------------------------------------------------------
    def __len__(self) -> int:
        return self._ids.size

    def __iter__(self) -> Iterator[StarRecord]:
        return self.records()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Catalog):
            return NotImplemented
        return (np.array_equal(self._ids, other._ids)
                and all(np.array_equal(self._cols[k], other._cols[k], equal_nan=True)
                        for k in NUMERIC_FIELDS))

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self) -> str:
        return f"Catalog(n={len(self)}, skipped={self.skipped})"

    @property
    def ids(self) -> np.ndarray:
        return self._ids

    def column(self, name: str) -> np.ndarray:
        try:
            return self._cols[name]
        except KeyError:
            raise CatalogError(f"unknown column {name!r}") from None

    def __getitem__(self, name: str) -> np.ndarray:
        return self.column(name)

    @property
    def plx_snr(self) -> np.ndarray:
        return self._cols["plx"] / self._cols["plx_err"]

    @property
    def has_seismo(self) -> np.ndarray:
        return np.isfinite(self._cols["age_seismo"])

    def ages(self, source: str) -> np.ndarray:
        if source == "infer":
            return self._cols["age_infer"]
        if source == "seismo":
            return self._cols["age_seismo"]
        raise CatalogError(f"unknown age source {source!r}")

    def positions(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self._index[str(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise CatalogError(f"id {exc.args[0]!r} not in catalog") from None

    def record(self, i: int) -> StarRecord:
        vals = {k: float(self._cols[k][i]) for k in NUMERIC_FIELDS}
        return StarRecord(id=str(self._ids[i]), **vals)

    def records(self) -> Iterator[StarRecord]:
        for i in range(len(self)):
            yield self.record(i)

    # -- derived catalogs ----------------------------------------------------
    def subset(self, selector) -> "Catalog":
        """Rows picked by a boolean mask or an index array, order preserved."""
        sel = np.asarray(selector)
        if sel.dtype == bool:
            if sel.shape != (len(self),):
                raise CatalogError("mask length does not match catalog")
            idx = np.flatnonzero(sel)
        else:
            idx = sel.astype(np.int64)
        return Catalog(self._ids[idx], {k: v[idx] for k, v in self._cols.items()},
                       validate=False)

    def select_ids(self, ids: Sequence[str]) -> "Catalog":
        return self.subset(np.sort(self.positions(ids)))

    @classmethod
    def from_records(cls, records: Sequence[StarRecord]) -> "Catalog":
        cols = {f.name: [getattr(r, f.name) for r in records] for f in fields(StarRecord)
                if f.name != "id"}
        return cls([r.id for r in records], cols)


# ---------------------------------------------------------------------------
# file I/O


def default_column_map() -> dict[str, str]:
    return {f: f for f in REQUIRED_FIELDS + OPTIONAL_FIELDS}


def _parse_float(text: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    value = float(text)
    if math.isinf(value):
        raise ValueError(f"infinite value {text!r}")
    return value


def load_catalog(
    path: str | Path,
    column_map: Mapping[str, str] | None = None,
    delimiter: str = ",",
    lenient: bool = False,
) -> Catalog:
    """Read a delimited text catalog with a header row.

    ``column_map`` maps record field names to file column names; fields left
    out of the map are taken from identically named columns when present.
    In strict mode the first bad row raises :class:`CatalogError` with its
    line number; in lenient mode bad rows are skipped and counted in
    ``Catalog.skipped``.
    """
    path = Path(path)
    if not path.is_file():
        raise CatalogError(f"catalog file not found: {path}")
    cmap = dict(column_map or {})
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise CatalogError(f"{path}: no header row") from None
        pos = {name: k for k, name in enumerate(header)}
        for fld, col in cmap.items():
            if fld not in REQUIRED_FIELDS + OPTIONAL_FIELDS:
                raise CatalogError(f"column map names unknown field {fld!r}")
            if col not in pos:
                raise CatalogError(f"mapped column {col!r} (for {fld}) not in {path.name}")
        for fld in REQUIRED_FIELDS + OPTIONAL_FIELDS:
            if fld not in cmap and fld in pos:
                cmap[fld] = fld
        missing = [f for f in REQUIRED_FIELDS if f not in cmap]
        if missing:
            raise CatalogError(f"required field(s) {', '.join(missing)} not mapped to any column")

        ids: list[str] = []
        values: dict[str, list[float]] = {f: [] for f in NUMERIC_FIELDS if f in cmap}
        skipped = 0
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            rid = ""
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, got {len(row)}")
                rid = row[pos[cmap["id"]]].strip()
                if not rid:
                    raise ValueError("empty id")
                parsed = {f: _parse_float(row[pos[cmap[f]]]) for f in values}
                for f in REQUIRED_FIELDS[1:]:
                    if math.isnan(parsed[f]):
                        raise ValueError(f"empty or NaN {f}")
                full = {f: parsed.get(f, math.nan) for f in NUMERIC_FIELDS}
                reason = validate_values(full)
                if reason:
                    raise ValueError(reason)
            except ValueError as exc:
                if lenient:
                    skipped += 1
                    continue
                where = f"{path.name} line {lineno}" + (f" (record {rid})" if rid else "")
                raise CatalogError(f"{where}: {exc}") from None
            ids.append(rid)
            for f, v in parsed.items():
                values[f].append(v)
    return Catalog(ids, values, skipped=skipped, validate=False)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_catalog(catalog: Catalog, path: str | Path, delimiter: str = ",",
                  extra: Mapping[str, Sequence] | None = None) -> None:
    """Write with shortest round-trip float repr; NaN becomes an empty field."""
    names = ["id", *NUMERIC_FIELDS]
    extra = dict(extra or {})
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(names + list(extra))
        cols = [catalog.column(k) for k in NUMERIC_FIELDS]
        for i in range(len(catalog)):
            row = [catalog.ids[i]] + [_fmt(c[i]) for c in cols]
            row += [_fmt(v) if isinstance(v, float) else str(v)
                    for v in (extra[k][i] for k in extra)]
            w.writerow(row)


def column_ranges(catalog: Catalog) -> dict[str, tuple[float, float, int]]:
    """Per-column (min, max, n_present) over non-missing values."""
    out = {}
    for name in NUMERIC_FIELDS:
        col = catalog.column(name)
        ok = np.isfinite(col)
        if ok.any():
            out[name] = (float(col[ok].min()), float(col[ok].max()), int(ok.sum()))
        else:
            out[name] = (math.nan, math.nan, 0)
    return out


# ---------------------------------------------------------------------------
# cuts


@dataclass(frozen=True)
class QualityCuts:
    snr_min: float
    plx_snr_min: float
    teff_range: tuple[float, float] = (-math.inf, math.inf)
    logg_range: tuple[float, float] = (-math.inf, math.inf)

    def __post_init__(self):
        for name in ("snr_min", "plx_snr_min"):
            v = getattr(self, name)
            if math.isnan(v) or math.isinf(v):
                raise ConfigurationError(f"{name} must be finite, got {v}")
        for name in ("teff_range", "logg_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigurationError(f"{name} is empty: [{lo}, {hi}]")

    @classmethod
    def open(cls) -> "QualityCuts":
        return cls(-1e300, -1e300)

    def mask(self, catalog: Catalog) -> np.ndarray:
        teff = catalog.column("teff")
        logg = catalog.column("logg")
        m = (catalog.column("snr") >= self.snr_min) & (catalog.plx_snr >= self.plx_snr_min)
        if np.isfinite(self.teff_range).any():
            m &= (teff >= self.teff_range[0]) & (teff <= self.teff_range[1])
        if np.isfinite(self.logg_range).any():
            m &= (logg >= self.logg_range[0]) & (logg <= self.logg_range[1])
        return m


def apply_cuts(catalog: Catalog, cuts: QualityCuts) -> Catalog:
    """Rows passing every cut at once; original order kept.

    A range left at (-inf, inf) does not require the column to be present.
    """
    return catalog.subset(cuts.mask(catalog))


@dataclass(frozen=True)
class QualitySplit:
    hq: Catalog
    lq: Catalog


def select_hq(catalog: Catalog, hq_cuts: QualityCuts, baseline_cuts: QualityCuts | None = None) -> QualitySplit:
    """Split a baseline catalog into its HQ subset and the LQ complement."""
    if baseline_cuts is not None:
        if hq_cuts.snr_min < baseline_cuts.snr_min or hq_cuts.plx_snr_min < baseline_cuts.plx_snr_min:
            raise ConfigurationError("HQ cuts must be at least as strict as the baseline cuts")
    m = hq_cuts.mask(catalog)
    return QualitySplit(hq=catalog.subset(m), lq=catalog.subset(~m))
