"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or configuration error.
"""

from __future__ import annotations

import argparse
import math
import os
import shlex
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from . import config as cfgmod
from .amr import METAL_POOR_BRANCH, binned_amr, fit_amr, slope_diff, threshold_crossings
from .catalog import Catalog, QualityCuts, apply_cuts, column_ranges, load_catalog
from .cem import (
    BOOTSTRAP_SCHEMES,
    DEFAULT_NCOARSE,
    MATCH_VARIABLES,
    CoarseningSpec,
    cem,
    coarsen,
    matched_amr_delta,
    matched_rows,
)
from .grid import STRATEGIES, build_grid, write_grid
from .history import (
    bias_strata_check,
    bias_strata_positions,
    compare_histories,
    history_summary,
    quality_selection_check,
)
from .injection import null_calibration, phase_scan, run_injection
from .io import (
    GRID_COLUMNS,
    RunManifest,
    config_digest,
    file_digest,
    validate_report,
    write_ppm,
    write_schema,
    write_table,
)
from .robustness import AXES, RunParams, SweepSpec, default_sweeps, robustness_sweep, run_map
from .sbw import DEFAULT_TAU, SIGMA_KINDS, TFORM_STATS, GridDiagnostics
from .stats import DEFAULT_REPLICATES, derive_seed

OUTPUT_ENV = "SBW_OUTPUT_DIR"
DEFAULT_OUTPUT = "sbw_output"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# run context


@dataclass
class Context:
    args: argparse.Namespace
    cfg: dict[str, dict[str, str]]
    outdir: Path
    argv: list[str]
    outputs: list[str] = field(default_factory=list)
    _catalog: Catalog | None = None

    @property
    def seed(self) -> int:
        return self.args.seed

    @property
    def b(self) -> int:
        return self.args.bootstrap_reps or DEFAULT_REPLICATES

    @property
    def tau(self) -> float:
        return DEFAULT_TAU if self.args.tau is None else self.args.tau

    @property
    def tform_stat(self) -> str:
        return self.args.tform_stat or "median"

    @property
    def workers(self) -> int:
        return self.args.workers

    def settings(self) -> dict:
        skip = {"output_dir", "workers", "func", "command"}
        s = {k: v for k, v in sorted(vars(self.args).items()) if k not in skip}
        s["config"] = self.cfg
        return s

    @property
    def digest(self) -> str:
        return config_digest(self.settings())

    def meta(self, table: str) -> dict:
        return {"table": table, "seed": self.seed, "config_digest": self.digest}

    def catalog(self) -> Catalog:
        if self._catalog is None:
            if not self.args.input:
                raise UsageError("this command needs --input")
            cat = load_catalog(self.args.input, cfgmod.column_map(self.cfg),
                               cfgmod.delimiter(self.cfg), lenient=self.args.lenient)
            base = cfgmod.cuts(self.cfg, "baseline", required=False)
            self._catalog = apply_cuts(cat, base) if base is not None else cat
            self._catalog.skipped = cat.skipped
        return self._catalog

    def hq_cuts(self) -> QualityCuts:
        return cfgmod.cuts(self.cfg, "hq", required=True)

    def table(self, name: str, rows, columns=None) -> Path:
        p = write_table(self.outdir / name, rows, columns, self.meta(name))
        self.outputs.append(name)
        return p

    def grid(self):
        a = self.args
        return build_grid(self.catalog(), a.nbins_snr, a.nbins_plx, a.strategy, a.nmin)

    def run_params(self, mode: str) -> RunParams:
        a = self.args
        return RunParams(mode=mode, n_bins_snr=a.nbins_snr, n_bins_plx=a.nbins_plx, n_min=a.nmin,
                         strategy=a.strategy, sigma_kind=a.sigma_kind, tform_stat=self.tform_stat,
                         tau=self.tau, b=self.b, seed=self.seed,
                         hq_cuts=self.hq_cuts() if mode == "internal" else None,
                         reference=a.reference)

    def write_manifest(self) -> None:
        inputs = {}
        for p in (self.args.input, self.args.schema, self.args.config):
            if p:
                inputs[str(p)] = file_digest(p)
        RunManifest(" ".join(shlex.quote(x) for x in self.argv), self.digest, self.seed, inputs,
                    __version__, outputs=sorted(set(self.outputs))).write(self.outdir)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(ctx: Context) -> None:
    cat = ctx.catalog()
    rows = [{"column": k, "min": lo, "max": hi, "n_present": n}
            for k, (lo, hi, n) in column_ranges(cat).items()]
    p = write_table(ctx.outdir / "validation.csv", rows, ["column", "min", "max", "n_present"],
                    {**ctx.meta("validation.csv"), "n_loaded": len(cat), "n_skipped": cat.skipped})
    ctx.outputs.append(p.name)


def cmd_grid(ctx: Context) -> tuple:
    spec, cells = ctx.grid()
    write_grid(ctx.outdir / "grid.json", spec, cells)
    ctx.outputs.append("grid.json")
    return spec, cells


def _write_map(ctx: Context, diags: GridDiagnostics, stem: str) -> None:
    ctx.table(f"{stem}.csv", diags.rows(), GRID_COLUMNS)
    if ctx.args.heatmaps:
        for q, div in (("delta", True), ("sigma_cell", False), ("s", False)):
            name = f"{stem}_{q}.ppm"
            write_ppm(ctx.outdir / name, diags.as_array(q), diverging=div)
            ctx.outputs.append(name)


def cmd_sbw_map(ctx: Context) -> GridDiagnostics:
    cmd_grid(ctx)
    diags = run_map(ctx.catalog(), ctx.run_params("internal"), ctx.workers)
    _write_map(ctx, diags, "sbw_internal")
    return diags


def cmd_struth_map(ctx: Context) -> GridDiagnostics:
    cmd_grid(ctx)
    diags = run_map(ctx.catalog(), ctx.run_params("truth"), ctx.workers)
    _write_map(ctx, diags, "sbw_truth")
    return diags


def _groups(ctx: Context) -> tuple[list[str], list[str]]:
    cat = ctx.catalog()
    hq = ctx.hq_cuts().mask(cat)
    sides = {"hq": list(cat.ids[hq]), "lq": list(cat.ids[~hq])}
    a = ctx.args
    if a.treated == a.control:
        raise UsageError("--treated and --control must differ")
    return sides[a.treated], sides[a.control]


def _cem_match(ctx: Context, n_coarse: int):
    treated, control = _groups(ctx)
    cat = ctx.catalog()
    labels = coarsen(cat, CoarseningSpec(tuple(ctx.args.vars), n_coarse))
    return cem(treated, control, labels)


def cmd_cem(ctx: Context) -> None:
    a = ctx.args
    match = _cem_match(ctx, a.ncoarse)
    res = matched_amr_delta(match, ctx.catalog(), a.ages if a.ages != "both" else "infer",
                            a.bin_width, ctx.b, derive_seed(ctx.seed, 3), scheme=a.scheme,
                            workers=ctx.workers)
    summary = dict(match.summary())
    summary.update({
        "treated": a.treated, "control": a.control, "ages": res.age_source,
        "delta_fixed_feh": res.fixed_feh.delta, "se_fixed_feh": res.fixed_feh.se,
        "z_fixed_feh": res.fixed_feh.z, "p_fixed_feh": res.fixed_feh.p,
        "delta_pooled": res.pooled.delta, "se_pooled": res.pooled.se, "z_pooled": res.pooled.z,
        "bootstrap_scheme": a.scheme,
    })
    ctx.table("cem_summary.csv", [{"quantity": k, "value": v} for k, v in summary.items()],
              ["quantity", "value"])
    ctx.table("cem_matched.csv", matched_rows(match), ["id", "group", "stratum", "weight"])
    ctx.table("cem_bins.csv", [vars(b) for b in res.bins],
              ["feh_lo", "feh_hi", "n_treated", "n_control", "median_treated", "median_control",
               "delta", "se", "ci_low", "ci_high", "z", "robust"])


def _age_sources(ctx: Context) -> list[str]:
    return ["infer", "seismo"] if ctx.args.ages == "both" else [ctx.args.ages]


def cmd_amr(ctx: Context) -> None:
    a = ctx.args
    cat = ctx.catalog()
    ranges = [tuple(r) for r in (a.fit_range or [(-math.inf, math.inf), METAL_POOR_BRANCH])]
    curves, fits, crows, frows = {}, {}, [], []
    for k, src in enumerate(_age_sources(ctx)):
        curve = binned_amr(cat, src, a.bin_width, ctx.b, derive_seed(ctx.seed, 4, k))
        curves[src] = curve
        crows += [{**r, "ages": src} for r in curve.rows()]
        for m, rng in enumerate(ranges):
            f = fit_amr(cat, src, rng, ctx.b, derive_seed(ctx.seed, 5, k, m), ctx.workers)
            fits[src, rng] = f
            frows.append({"feh_lo": rng[0], "feh_hi": rng[1], "slope_a": f.slope_a,
                          "slope_se": f.slope_se, "intercept_b": f.intercept_b, "n": f.n,
                          "ages": src})
    ctx.table("amr_curve.csv", crows,
              ["feh_center", "median", "count", "ci_low", "ci_high", "robust", "ages"])
    ctx.table("amr_fit.csv", frows,
              ["feh_lo", "feh_hi", "slope_a", "slope_se", "intercept_b", "n", "ages"])
    if len(curves) == 2:
        drows = []
        for m, rng in enumerate(ranges):
            f1, f2 = fits["infer", rng], fits["seismo", rng]
            ind = slope_diff(f1, f2, "independent")
            par = slope_diff(f1, f2, "paired", cat, "infer", "seismo", ctx.b,
                             derive_seed(ctx.seed, 6, m), ctx.workers)
            for mode, r in (("independent", ind), ("paired", par)):
                drows.append({"feh_lo": rng[0], "feh_hi": rng[1], "mode": mode, **r.as_row()})
        ctx.table("amr_slope_diff.csv", drows, ["feh_lo", "feh_hi", "mode", "delta", "se", "z", "p"])
        rep = threshold_crossings(curves["infer"], curves["seismo"], a.age_threshold)
        rows = ([{"curve": "infer", "feh": x} for x in rep.crossings_1]
                + [{"curve": "seismo", "feh": x} for x in rep.crossings_2]
                + [{"curve": "seismo_minus_infer", "feh": x} for x in rep.differences])
        p = write_table(ctx.outdir / "amr_crossings.csv", rows, ["curve", "feh"],
                        {**ctx.meta("amr_crossings.csv"), "age_threshold": rep.age_thresh,
                         "note": rep.label})
        ctx.outputs.append(p.name)


def _sample_positions(ctx: Context, sample: str, diags: GridDiagnostics | None) -> np.ndarray:
    cat = ctx.catalog()
    if sample == "std":
        return np.arange(len(cat))
    if sample == "hq":
        return np.flatnonzero(ctx.hq_cuts().mask(cat))
    hi, lo = bias_strata_positions(diags)
    return hi if sample == "high-bias" else lo


def _bias_map(ctx: Context) -> GridDiagnostics:
    mode = ctx.args.map
    return run_map(ctx.catalog(), ctx.run_params(mode), ctx.workers)


def cmd_history(ctx: Context, checks: bool | None = None) -> None:
    a = ctx.args
    cat = ctx.catalog()
    diags = _bias_map(ctx) if a.sample in ("high-bias", "low-bias") else None
    pos = _sample_positions(ctx, a.sample, diags)
    src = "infer" if a.ages == "both" else a.ages
    ages = cat.ages(src)[pos]
    ages = ages[np.isfinite(ages)]
    s = history_summary(ages, age_source=src, sample_label=a.sample)
    ctx.table("history_cff.csv", [{"age": t, "cff": f} for t, f in s.cff], ["age", "cff"])
    srows = [{"sample": a.sample, "age_source": src, "n": s.n, "dt_form": s.dt_form,
              "peak_age": s.peak_age, "f_old": s.f_old}]
    other = a.paired_with or ("seismo" if a.ages == "both" else None)
    if other:
        sub = cat.subset(pos)
        both = np.isfinite(sub.ages(src)) & np.isfinite(sub.ages(other))
        if not both.any():
            raise ValueError(f"no stars in sample {a.sample} carry both {src} and {other} ages")
        cmp = compare_histories(sub.ages(src)[both], sub.ages(other)[both], "paired", ctx.b,
                                derive_seed(ctx.seed, 7), labels=(src, other),
                                workers=ctx.workers)
        for sm in (cmp.first, cmp.second):
            srows.append({"sample": f"{a.sample}:paired", "age_source": sm.sample_label,
                          "n": sm.n, "dt_form": sm.dt_form, "peak_age": sm.peak_age,
                          "f_old": sm.f_old})
        ctx.table("history_compare.csv", cmp.rows(), ["tracer", "delta", "se", "z", "p"])
    ctx.table("history_summary.csv", srows,
              ["sample", "age_source", "n", "dt_form", "peak_age", "f_old"])
    if a.checks if checks is None else checks:
        _history_checks(ctx, src, diags)


def _history_checks(ctx: Context, src: str, diags: GridDiagnostics | None) -> None:
    cat = ctx.catalog()
    q = quality_selection_check(cat, ctx.hq_cuts(), src, ctx.b, derive_seed(ctx.seed, 8),
                                matched=ctx.args.matched, workers=ctx.workers)
    p = write_table(ctx.outdir / "history_quality.csv", q.rows(), ["tracer", "delta", "se", "z", "p"],
                    {**ctx.meta("history_quality.csv"), "sign": "standard minus HQ",
                     "matched_set": ctx.args.matched})
    ctx.outputs.append(p.name)
    diags = diags if diags is not None else _bias_map(ctx)
    try:
        bcmp = bias_strata_check(cat, diags, src, ctx.b, derive_seed(ctx.seed, 9),
                                 workers=ctx.workers)
    except ValueError as exc:
        print(f"note: bias-strata check skipped: {exc}", file=sys.stderr)
        return
    p = write_table(ctx.outdir / "history_bias.csv", bcmp.rows(), ["tracer", "delta", "se", "z", "p"],
                    {**ctx.meta("history_bias.csv"), "sign": "high-bias minus low-bias",
                     "map": ctx.args.map})
    ctx.outputs.append(p.name)


def _parse_scan(text: str) -> list[float]:
    key, sep, rng = text.partition("=")
    if key.strip() != "amplitudes" or not sep:
        raise UsageError(f"--scan must look like amplitudes=start:stop:step (got {text!r})")
    parts = rng.split(":")
    if len(parts) != 3:
        raise UsageError(f"--scan must look like amplitudes=start:stop:step (got {text!r})")
    try:
        lo, hi, step = (float(x) for x in parts)
    except ValueError:
        raise UsageError(f"--scan bounds must be numbers (got {text!r})") from None
    if not step > 0 or hi < lo:
        raise UsageError("--scan needs step > 0 and stop >= start")
    n = int(math.floor((hi - lo) / step + 1e-9))
    # integer multiples of step keep the grid free of accumulated rounding
    return [round(lo + k * step, 12) for k in range(n + 1)]


def cmd_inject(ctx: Context) -> None:
    a = ctx.args
    sim = cfgmod.sim_config(ctx.cfg, seed=ctx.seed)
    explicit = {"bootstrap_reps": a.bootstrap_reps, "tau": a.tau, "stat": a.tform_stat}
    sim = sim.with_(**{k: v for k, v in explicit.items() if v is not None})
    if a.scan is None:
        res = run_injection(sim, ctx.workers)
        ctx.table("inject_grid.csv", res.diags.rows(), GRID_COLUMNS)
        ctx.table("inject_summary.csv", [
            {"quantity": "r_tilde", "value": res.r_tilde},
            {"quantity": "sbw_fraction", "value": res.sbw_fraction},
            {"quantity": "sbw_event", "value": int(res.sbw_event)},
            {"quantity": "n_clipped", "value": res.n_clipped}], ["quantity", "value"])
        return
    amps = _parse_scan(a.scan)
    scan = phase_scan(sim, amps, a.seeds, ctx.workers)
    ctx.table("inject_points.csv", [vars(p) for p in scan.points],
              ["amplitude", "amp_index", "seed_index", "run_seed", "r_tilde", "sbw_event",
               "sbw_fraction"])
    ctx.table("inject_curve.csv", [vars(b) for b in scan.curve],
              ["r_lo", "r_hi", "n_runs", "event_fraction", "cell_fraction"])
    for k, amp in enumerate(sorted(scan.representatives)):
        rows = [{"amplitude": amp, **r} for r in scan.representatives[amp].rows()]
        ctx.table(f"inject_representative_{k:03d}.csv", rows, ["amplitude", *GRID_COLUMNS])
    if a.null_seeds > 0:
        null = null_calibration(sim, a.null_seeds, ctx.workers)
        ctx.table("inject_null.csv", [{"quantity": k, "value": v} for k, v in null.items()],
                  ["quantity", "value"])


def cmd_robustness(ctx: Context) -> None:
    a = ctx.args
    sweeps = [SweepSpec.parse(s) for s in a.sweep] if a.sweep else default_sweeps()
    params = ctx.run_params(a.map)
    runner = None
    if any(s.axis == "n_coarse" for s in sweeps):
        def runner(n_coarse: int) -> dict:
            m = _cem_match(ctx, n_coarse)
            r = matched_amr_delta(m, ctx.catalog(), "infer", a.bin_width, ctx.b,
                                  derive_seed(ctx.seed, 10, n_coarse), scheme=a.scheme)
            return {"cem_l1_before": m.l1_before, "cem_l1_after": m.l1_after,
                    "cem_delta": r.fixed_feh.delta, "cem_z": r.fixed_feh.z}
    rep = robustness_sweep(ctx.catalog(), params, sweeps, ctx.workers, runner)
    cols = ["variant", "axis", "value", "n_high", "n_valid", "n_high_stars", "jaccard_stars",
            "jaccard_cells", "r_tilde", "absdelta_min", "absdelta_p25", "absdelta_median",
            "absdelta_p75", "absdelta_max"]
    if runner is not None:
        cols += ["cem_l1_before", "cem_l1_after", "cem_delta", "cem_z"]
    ctx.table("robustness.csv", rep.rows(), cols)


def cmd_report(ctx: Context) -> None:
    cat = ctx.catalog()
    cmd_ingest(ctx)
    internal = cmd_sbw_map(ctx)
    if cat.has_seismo.any():
        cmd_struth_map(ctx)
    cmd_cem(ctx)
    cmd_amr(ctx)
    if ctx.args.map == "internal":
        _history_checks_with(ctx, internal)
    else:
        cmd_history(ctx, checks=True)
    cmd_robustness(ctx)
    write_schema(ctx.outdir)
    ctx.outputs.append("schema.json")


def _history_checks_with(ctx: Context, diags: GridDiagnostics) -> None:
    a = ctx.args
    cat = ctx.catalog()
    src = "infer" if a.ages == "both" else a.ages
    ages = cat.ages(src)
    s = history_summary(ages[np.isfinite(ages)], age_source=src, sample_label="std")
    ctx.table("history_cff.csv", [{"age": t, "cff": f} for t, f in s.cff], ["age", "cff"])
    ctx.table("history_summary.csv", [{"sample": "std", "age_source": src, "n": s.n,
                                       "dt_form": s.dt_form, "peak_age": s.peak_age,
                                       "f_old": s.f_old}],
              ["sample", "age_source", "n", "dt_form", "peak_age", "f_old"])
    _history_checks(ctx, src, diags)


COMMANDS: dict[str, tuple[Callable[[Context], object], str]] = {
    "ingest": (cmd_ingest, "load and validate a catalog; write per-column ranges"),
    "grid": (cmd_grid, "bin the SNR x parallax-precision plane"),
    "sbw-map": (cmd_sbw_map, "cell bias vs the HQ reference and its significance"),
    "struth-map": (cmd_struth_map, "cell bias vs asteroseismic ages and its significance"),
    "cem": (cmd_cem, "coarsened exact matching of HQ and LQ stars"),
    "amr": (cmd_amr, "binned age-metallicity relation and linear fits"),
    "history": (cmd_history, "formation-history tracers and comparisons"),
    "inject": (cmd_inject, "injection-recovery runs and phase scans"),
    "robustness": (cmd_robustness, "stability of the SBW map under sweeps"),
    "report": (cmd_report, "run every analysis into one directory"),
}


def _fit_range(text: str) -> tuple[float, float]:
    try:
        return cfgmod.parse_range(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _vars(text: str) -> list[str]:
    out = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in out if v not in MATCH_VARIABLES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown matching variable(s) {bad}")
    return out


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("common options")
    g.add_argument("--input", type=Path, help="catalog file (delimited text with header)")
    g.add_argument("--schema", type=Path, help="INI file with [input] and [columns]")
    g.add_argument("--config", type=Path, help="INI file with cuts and analysis settings")
    g.add_argument("--output-dir", type=Path, default=None,
                   help=f"output directory (default ${OUTPUT_ENV} or ./{DEFAULT_OUTPUT})")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bootstrap-reps", type=_positive_int, default=None,
                   help=f"bootstrap replicates (default {DEFAULT_REPLICATES})")
    g.add_argument("--workers", type=_positive_int, default=1)
    g.add_argument("--lenient", action="store_true", help="skip unparsable rows instead of failing")
    g.add_argument("--nbins-snr", type=_positive_int, default=6)
    g.add_argument("--nbins-plx", type=_positive_int, default=6)
    g.add_argument("--nmin", type=_positive_int, default=50)
    g.add_argument("--strategy", choices=STRATEGIES, default="quantile")
    g.add_argument("--sigma-kind", choices=SIGMA_KINDS, default="sd")
    g.add_argument("--tform-stat", choices=TFORM_STATS, default=None, help="default median")
    g.add_argument("--tau", type=float, default=None, help=f"S threshold (default {DEFAULT_TAU})")
    g.add_argument("--reference", choices=("global", "per_cell"), default="global")
    g.add_argument("--heatmaps", action="store_true", help="also write PPM heatmaps")
    g.add_argument("--ncoarse", type=int, default=DEFAULT_NCOARSE)
    g.add_argument("--vars", type=_vars, default=list(MATCH_VARIABLES))
    g.add_argument("--treated", choices=("hq", "lq"), default="hq")
    g.add_argument("--control", choices=("hq", "lq"), default="lq")
    g.add_argument("--scheme", choices=BOOTSTRAP_SCHEMES, default="group",
                   help="matched-sample bootstrap: stars per group, members within strata, or whole strata")
    g.add_argument("--bin-width", type=float, default=0.1)
    g.add_argument("--fit-range", type=_fit_range, action="append",
                   help="lo:hi [Fe/H] fit interval (repeatable)")
    g.add_argument("--age-threshold", type=float, default=8.0)
    g.add_argument("--ages", choices=("infer", "seismo", "both"), default="infer")
    g.add_argument("--sample", choices=("std", "hq", "high-bias", "low-bias"), default="std")
    g.add_argument("--paired-with", choices=("infer", "seismo"), default=None)
    g.add_argument("--matched", choices=("all", "both_ages"), default="all",
                   help="star set for the quality-selection check")
    g.add_argument("--checks", action="store_true",
                   help="history: add the quality-selection and bias-strata checks")
    g.add_argument("--map", choices=("internal", "truth"), default="internal",
                   help="which SBW map defines bias strata and robustness runs")
    g.add_argument("--scan", default=None, help="amplitudes=start:stop:step (inclusive)")
    g.add_argument("--seeds", type=_positive_int, default=20)
    g.add_argument("--null-seeds", type=int, default=20)
    g.add_argument("--sweep", action="append",
                   help=f"axis=v1,v2 (repeatable); axes: {', '.join(AXES)}")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sbwdiag", description="Stable-but-wrong inference diagnostics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    common = _common()
    for name, (fn, helptext) in COMMANDS.items():
        sp = sub.add_parser(name, parents=[common], help=helptext, description=helptext)
        sp.set_defaults(func=fn)
    return parser


def _load_cfg(args: argparse.Namespace) -> dict[str, dict[str, str]]:
    parsers = []
    for p in (args.schema, args.config):
        if p is not None:
            if not Path(p).is_file():
                raise FileNotFoundError(f"configuration file not found: {p}")
            parsers.append(cfgmod.read_ini(p))
    return cfgmod.merged(*parsers)


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help / --version exit 0, parse errors exit 1
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print(f"{parser.prog}: error: a command is required", file=sys.stderr)
        return EXIT_USAGE
    outdir = args.output_dir or Path(os.environ.get(OUTPUT_ENV) or DEFAULT_OUTPUT)
    try:
        cfg = _load_cfg(args)
        outdir.mkdir(parents=True, exist_ok=True)
        ctx = Context(args, cfg, outdir, ["sbwdiag", *argv])
        args.func(ctx)
        ctx.write_manifest()
        if args.command == "report":
            problems = validate_report(outdir)
            if problems:
                for p in problems:
                    print(f"report: {p}", file=sys.stderr)
                return EXIT_DATA
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, OSError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
