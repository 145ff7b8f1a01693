"""INI configuration: column schema, quality cuts, analysis settings, simulation.

Example::

    [input]
    delimiter = ,
    [columns]
    snr = SNR
    age_infer = astroNN_age
    [baseline]
    snr_min = 50
    plx_snr_min = 5
    [hq]
    snr_min = 150
    plx_snr_min = 20
    [inject]
    grid_dims = 4x4
    bias_profile = 1,1,0,0; 1,1,0,0; 0,0,0,0; 0,0,0,0

Profile matrices use ``;`` between rows and ``,`` within a row.  A file
with no section header is read as a single ``[inject]`` section.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from pathlib import Path
from typing import Any

from .catalog import NUMERIC_FIELDS, ConfigurationError, QualityCuts
from .injection import SimConfig

CANONICAL_COLUMNS = ("id",) + NUMERIC_FIELDS
DELIMITERS = {",": ",", "comma": ",", "tab": "\t", "\\t": "\t", ";": ";", "|": "|"}


def read_ini(path: str | Path, default_section: str = "inject") -> configparser.ConfigParser:
    text = Path(path).read_text(encoding="utf-8")
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # column names are case-sensitive
    try:
        cp.read_string(text, source=str(path))
    except configparser.MissingSectionHeaderError:
        cp.read_string(f"[{default_section}]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    return cp


def merged(*parsers: configparser.ConfigParser | None) -> dict[str, dict[str, str]]:
    """Section -> key -> value, later parsers overriding earlier ones."""
    out: dict[str, dict[str, str]] = {}
    for cp in parsers:
        if cp is None:
            continue
        for sec in cp.sections():
            out.setdefault(sec, {}).update(cp[sec])
    return out


def column_map(cfg: dict[str, dict[str, str]]) -> dict[str, str] | None:
    cols = cfg.get("columns")
    if not cols:
        return None
    unknown = [k for k in cols if k not in CANONICAL_COLUMNS]
    if unknown:
        raise ConfigurationError(f"[columns] names unknown fields {unknown}")
    return dict(cols)


def delimiter(cfg: dict[str, dict[str, str]]) -> str:
    raw = cfg.get("input", {}).get("delimiter", ",")
    try:
        return DELIMITERS[raw.strip() or raw]
    except KeyError:
        raise ConfigurationError(f"unsupported delimiter {raw!r}") from None


def _float(sec: str, key: str, raw: str) -> float:
    try:
        return float(raw)
    except ValueError:
        raise ConfigurationError(f"[{sec}] {key} = {raw!r} is not a number") from None


def cuts(cfg: dict[str, dict[str, str]], section: str, required: bool = True) -> QualityCuts | None:
    """Cuts from ``[baseline]`` or ``[hq]``; thresholds have no defaults."""
    sec = cfg.get(section)
    if sec is None:
        if required:
            raise ConfigurationError(f"configuration needs a [{section}] section with snr_min and "
                                     f"plx_snr_min (no default thresholds exist)")
        return None
    missing = [k for k in ("snr_min", "plx_snr_min") if k not in sec]
    if missing:
        raise ConfigurationError(f"[{section}] is missing {missing}")
    known = {"snr_min", "plx_snr_min", "teff_min", "teff_max", "logg_min", "logg_max"}
    extra = sorted(set(sec) - known)
    if extra:
        raise ConfigurationError(f"[{section}] has unknown keys {extra}")
    g = lambda k, d: _float(section, k, sec[k]) if k in sec else d  # noqa: E731
    return QualityCuts(g("snr_min", None), g("plx_snr_min", None),
                       (g("teff_min", -math.inf), g("teff_max", math.inf)),
                       (g("logg_min", -math.inf), g("logg_max", math.inf)))


def value(cfg: dict[str, dict[str, str]], section: str, key: str, default: Any = None,
          cast=str) -> Any:
    raw = cfg.get(section, {}).get(key)
    if raw is None:
        return default
    try:
        return cast(raw)
    except ValueError:
        raise ConfigurationError(f"[{section}] {key} = {raw!r} is not valid") from None


def parse_matrix(text: str) -> list[list[float]]:
    rows = [r for r in text.split(";") if r.strip()]
    try:
        return [[float(x) for x in r.split(",")] for r in rows]
    except ValueError:
        raise ConfigurationError(f"bad profile matrix {text!r}") from None


def parse_range(text: str) -> tuple[float, float]:
    """``lo:hi`` (either side may be a signed number)."""
    parts = text.split(":")
    if len(parts) != 2:
        raise ConfigurationError(f"range must look like lo:hi, got {text!r}")
    try:
        lo, hi = float(parts[0]), float(parts[1])
    except ValueError:
        raise ConfigurationError(f"range must look like lo:hi, got {text!r}") from None
    if not hi > lo:
        raise ConfigurationError(f"empty range {text!r}")
    return lo, hi


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def sim_config(cfg: dict[str, dict[str, str]], seed: int | None = None) -> SimConfig:
    """SimConfig from ``[inject]``; unspecified fields keep their defaults."""
    sec = dict(cfg.get("inject", {}))
    names = {f.name: f for f in dataclasses.fields(SimConfig)}
    kw: dict[str, Any] = {}
    for key, raw in sec.items():
        if key not in names:
            raise ConfigurationError(f"[inject] unknown key {key!r}")
        try:
            if key == "grid_dims":
                kw[key] = tuple(int(x) for x in raw.lower().replace("x", ",").split(","))
            elif key in ("bias_profile", "shrink_profile", "noise_profile"):
                kw[key] = float(raw) if ";" not in raw and "," not in raw else parse_matrix(raw)
            elif key in ("sfh_means", "sfh_spreads", "sfh_weights", "snr_range", "plxsnr_range"):
                kw[key] = _floats(raw)
            elif key in ("n_per_cell", "seed", "n_min", "bootstrap_reps"):
                kw[key] = int(raw)
            elif key == "jitter":
                kw[key] = raw.strip().lower() in ("1", "true", "yes", "on")
            elif key == "stat":
                kw[key] = raw.strip()
            else:
                kw[key] = float(raw)
        except ValueError:
            raise ConfigurationError(f"[inject] {key} = {raw!r} is not valid") from None
    if seed is not None:
        kw["seed"] = seed
    try:
        return SimConfig(**kw)
    except ValueError as exc:
        raise ConfigurationError(f"[inject] {exc}") from None


