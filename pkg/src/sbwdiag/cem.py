"""Coarsened exact matching (CEM) of treated vs control stars on physical covariates.

Covariates are cut at quantiles of the pooled sample, each record gets the
tuple of its per-variable bin indices as a stratum label, and only strata
holding both groups are kept.  Treated records weigh 1; control records in
stratum ``s`` weigh ``(m_T,s / m_C,s) * (M_C / M_T)``.

Nothing in :func:`coarsen` or :func:`cem` is random, and outputs are sorted
by label and id so record order never matters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .catalog import Catalog
from .stats import (
    DEFAULT_REPLICATES,
    MIN_REPLICATES,
    SeedLike,
    bin_edge,
    quantile_sorted,
    replicate_map,
    replicate_sd,
    significance,
    weighted_quantile_presorted,
    weighted_median,
)

MATCH_VARIABLES = ("teff", "logg", "feh", "alpha_fe", "distance", "gal_r", "gal_z")
FORBIDDEN_VARIABLES = ("age_infer", "age_seismo")
DEFAULT_NCOARSE = 3
NCOARSE_RANGE = (1, 8)
DEFAULT_FEH_BIN = 0.1
DEFAULT_MIN_COMBINE = 30
BOOTSTRAP_SCHEMES = ("group", "within", "strata")
AGE_SOURCES = {"infer": "age_infer", "seismo": "age_seismo"}

Label = tuple[int, ...]


class MatchError(ValueError):
    pass


@dataclass(frozen=True)
class CoarseningSpec:
    variables: tuple[str, ...]
    n_coarse: int = DEFAULT_NCOARSE

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        if not self.variables:
            raise MatchError("at least one matching variable is required")
        if len(set(self.variables)) != len(self.variables):
            raise MatchError(f"duplicate matching variables: {self.variables}")
        for v in self.variables:
            if v in FORBIDDEN_VARIABLES:
                raise MatchError(f"{v} may not be a matching variable (circular)")
            if v not in MATCH_VARIABLES:
                raise MatchError(f"unknown matching variable {v!r}; choose from {MATCH_VARIABLES}")
        lo, hi = NCOARSE_RANGE
        if not lo <= int(self.n_coarse) <= hi:
            raise MatchError(f"n_coarse must lie in [{lo}, {hi}], got {self.n_coarse}")


@dataclass(frozen=True)
class MatchResult:
    strata: dict[Label, tuple[tuple[str, ...], tuple[str, ...]]]
    weights: dict[str, float]
    n_matched_treated: int
    n_matched_control: int
    l1_before: float
    l1_after: float
    n_strata_before: int = 0
    labels: Mapping[str, Label] = field(default_factory=dict, repr=False, compare=False)

    @property
    def matched_ids(self) -> list[str]:
        return [i for t, c in self.strata.values() for i in (*t, *c)]

    def summary(self) -> dict:
        w = np.array([self.weights[i] for s in self.strata.values() for i in s[1]])
        return {
            "n_strata_before": self.n_strata_before,
            "n_strata_matched": len(self.strata),
            "n_matched_treated": self.n_matched_treated,
            "n_matched_control": self.n_matched_control,
            "l1_before": self.l1_before,
            "l1_after": self.l1_after,
            "control_weight_min": float(w.min()),
            "control_weight_median": float(np.median(w)),
            "control_weight_max": float(w.max()),
        }


def _bin_edges(values: np.ndarray, n_coarse: int) -> np.ndarray:
    xs = np.sort(values)
    return np.array([quantile_sorted(xs, k / n_coarse) for k in range(1, n_coarse)], dtype=float)


def coarsen(catalog: Catalog, spec: CoarseningSpec) -> dict[str, Label]:
    """Joint bin label per record id from pooled-sample quantile edges."""
    if len(catalog) == 0:
        raise MatchError("cannot coarsen an empty catalog")
    codes = []
    for v in spec.variables:
        col = catalog.column(v)
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise MatchError(f"record {catalog.ids[bad[0]]}: matching variable {v} is missing")
        if col.min() == col.max():
            raise MatchError(f"matching variable {v} is constant across the pooled sample")
        edges = _bin_edges(col, spec.n_coarse)
        # A value sitting on an inner edge goes to the upper bin (half-open bins).
        codes.append(np.searchsorted(edges, col, side="right"))
    joint = np.stack(codes, axis=1) if codes else np.zeros((len(catalog), 0), int)
    return {i: tuple(int(x) for x in row) for i, row in zip(catalog.ids, joint)}


def _group_counts(ids: Iterable[str], labels: Mapping[str, Label],
                  weights: Mapping[str, float] | None) -> dict[Label, float]:
    out: dict[Label, float] = {}
    for i in ids:
        try:
            lab = labels[i]
        except KeyError:
            raise MatchError(f"record {i} has no stratum label") from None
        out[lab] = out.get(lab, 0.0) + (1.0 if weights is None else float(weights.get(i, 0.0)))
    return out


def l1_imbalance(treated: Iterable[str], control: Iterable[str],
                 labels: Mapping[str, Label], weights: Mapping[str, float] | None = None) -> float:
    """Half the summed absolute difference of within-group stratum frequencies."""
    t = _group_counts(treated, labels, weights)
    c = _group_counts(control, labels, weights)
    tt, ct = sum(t.values()), sum(c.values())
    if not (t and c):
        raise MatchError("l1_imbalance needs two non-empty groups")
    if tt <= 0 or ct <= 0:
        raise MatchError("l1_imbalance: a group has zero total weight")
    l1 = 0.5 * sum(abs(t.get(s, 0.0) / tt - c.get(s, 0.0) / ct) for s in set(t) | set(c))
    # Floating-point residue of an exactly balanced sample is reported as 0.
    return 0.0 if l1 < 1e-12 else min(l1, 1.0)


def cem(treated: Iterable[str], control: Iterable[str], labels: Mapping[str, Label]) -> MatchResult:
    t_ids, c_ids = sorted(set(treated)), sorted(set(control))
    if not t_ids or not c_ids:
        raise MatchError("both treated and control groups must be non-empty")
    overlap = set(t_ids) & set(c_ids)
    if overlap:
        raise MatchError(f"record {min(overlap)} is in both groups")
    by_t: dict[Label, list[str]] = {}
    by_c: dict[Label, list[str]] = {}
    for ids, dest in ((t_ids, by_t), (c_ids, by_c)):
        for i in ids:
            if i not in labels:
                raise MatchError(f"record {i} has no stratum label")
            dest.setdefault(labels[i], []).append(i)
    keep = sorted(set(by_t) & set(by_c))
    if not keep:
        raise MatchError("treated and control share no stratum; nothing can be matched")
    m_t = sum(len(by_t[s]) for s in keep)
    m_c = sum(len(by_c[s]) for s in keep)
    weights = {i: 0.0 for i in (*t_ids, *c_ids)}
    strata = {}
    for s in keep:
        ts, cs = tuple(by_t[s]), tuple(by_c[s])
        strata[s] = (ts, cs)
        for i in ts:
            weights[i] = 1.0
        # Integer products first: equal compositions give weight exactly 1.
        w = (len(ts) * m_c) / (len(cs) * m_t)
        for i in cs:
            weights[i] = w
    l1_before = l1_imbalance(t_ids, c_ids, labels)
    l1_after = l1_imbalance(t_ids, c_ids, labels, weights)
    return MatchResult(strata, weights, m_t, m_c, l1_before, l1_after,
                       len(set(by_t) | set(by_c)), dict(labels))


# ---------------------------------------------------------------------------
# matched age comparison


@dataclass(frozen=True)
class MatchedBin:
    feh_lo: float
    feh_hi: float
    n_treated: int
    n_control: int
    median_treated: float
    median_control: float
    delta: float
    se: float
    ci_low: float
    ci_high: float
    z: float
    robust: bool


@dataclass(frozen=True)
class Estimate:
    delta: float
    se: float
    ci_low: float
    ci_high: float
    z: float
    p: float


@dataclass(frozen=True)
class MatchedDelta:
    """Treated minus control ages after matching.

    ``fixed_feh`` averages the per-bin weighted-median differences over bins
    with at least ``min_combine`` stars per group, weighting each bin by its
    treated count.  It compares the groups at fixed metallicity and is the
    headline number.  ``pooled`` is the plain weighted-median difference of
    the two matched groups; it still carries whatever AMR gradient survives
    inside the coarse strata.
    """

    age_source: str
    fixed_feh: Estimate
    pooled: Estimate
    bins: tuple[MatchedBin, ...]
    b: int
    combined_bins: tuple[int, ...] = ()

    @property
    def delta(self) -> float:
        return self.fixed_feh.delta

    @property
    def z(self) -> float:
        return self.fixed_feh.z

    def robust_bins(self) -> list[MatchedBin]:
        return [x for x in self.bins if x.robust]


@dataclass
class _Group:
    pos: np.ndarray       # catalog positions, grouped by stratum
    weight: np.ndarray
    start: np.ndarray     # per slot: first index of its stratum within pos
    count: np.ndarray     # per slot: size of its stratum
    stratum: np.ndarray   # per slot: rank of its stratum label


def _group_layout(catalog: Catalog, match: MatchResult, side: int) -> _Group:
    pos, start, count, weight, rank = [], [], [], [], []
    for r, s in enumerate(sorted(match.strata)):
        ids = match.strata[s][side]
        rank.extend([r] * len(ids))
        p = catalog.positions(ids)
        base = len(pos)
        pos.extend(p.tolist())
        start.extend([base] * len(ids))
        count.extend([len(ids)] * len(ids))
        weight.extend(match.weights[i] for i in ids)
    return _Group(np.asarray(pos, dtype=np.int64), np.asarray(weight, float),
                  np.asarray(start, np.int64), np.asarray(count, np.int64),
                  np.asarray(rank, np.int64))


def feh_bin_index(feh: np.ndarray, width: float) -> np.ndarray:
    # The 1e-9 guard keeps values printed on a bin edge in the upper bin.
    return np.floor(np.asarray(feh, float) / width + 1e-9).astype(np.int64)


def _stratified_draw(g: _Group, rng: np.random.Generator, count: int) -> np.ndarray:
    u = rng.random((count, g.pos.size))
    return g.start + np.minimum((u * g.count).astype(np.int64), g.count - 1)


def matched_amr_delta(
    match: MatchResult,
    catalog: Catalog,
    age_source: str = "infer",
    bin_width: float = DEFAULT_FEH_BIN,
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    min_members: int = 2,
    min_combine: int = DEFAULT_MIN_COMBINE,
    scheme: str = "group",
    workers: int = 1,
) -> MatchedDelta:
    """Weighted-median age differences with a stratified bootstrap.

    ``scheme="group"`` redraws the matched treated and control stars
    separately, with replacement, each star keeping its matching weight.
    ``scheme="within"`` redraws inside every stratum instead, which carries
    no variation for strata of one or two stars and so understates the SE
    when strata are sparse.  ``scheme="strata"`` resamples whole strata
    (multinomial multiplicities applied to the member weights), which
    understates it when a bin is covered by only a few large strata.
    Bins with fewer than ``min_members`` positively weighted stars in either
    group are kept in the output and flagged ``robust=False``.
    """
    if age_source not in AGE_SOURCES:
        raise MatchError(f"age_source must be one of {tuple(AGE_SOURCES)}")
    if not match.strata:
        raise MatchError("empty match")
    if not bin_width > 0:
        raise MatchError("bin_width must be positive")
    if b < MIN_REPLICATES:
        raise MatchError(f"need at least {MIN_REPLICATES} bootstrap replicates")
    if scheme not in BOOTSTRAP_SCHEMES:
        raise MatchError(f"scheme must be one of {BOOTSTRAP_SCHEMES}")
    ages = catalog.column(AGE_SOURCES[age_source])
    feh = catalog.column("feh")
    groups = [_group_layout(catalog, match, side) for side in (0, 1)]
    for g in groups:
        if not np.all(np.isfinite(ages[g.pos])):
            raise MatchError(f"matched records lack {AGE_SOURCES[age_source]}")
        if not np.all(np.isfinite(feh[g.pos])):
            raise MatchError("matched records lack feh")
    fbins = [feh_bin_index(feh[g.pos], bin_width) for g in groups]
    keys = sorted(set(fbins[0].tolist()) | set(fbins[1].tolist()))
    counts = [[int(np.sum((fb == k) & (g.weight > 0))) for k in keys]
              for fb, g in zip(fbins, groups)]
    use = np.array([nt >= min_combine and nc >= min_combine for nt, nc in zip(*counts)])
    comb_w = np.where(use, np.asarray(counts[0], float), 0.0)

    def group_medians(vals: np.ndarray, w: np.ndarray, kb: np.ndarray) -> np.ndarray:
        # column 0: whole group; column 1 + n: feh bin keys[n]
        order = np.argsort(vals, axis=1, kind="stable")
        vs = np.take_along_axis(vals, order, axis=1)
        ws = np.take_along_axis(w, order, axis=1)
        ks = np.take_along_axis(kb, order, axis=1)
        cols = [weighted_quantile_presorted(vs, ws, 0.5)]
        for k in keys:
            cols.append(weighted_quantile_presorted(vs, np.where(ks == k, ws, 0.0), 0.5))
        return np.stack(cols, axis=1)

    def with_combined(d: np.ndarray) -> np.ndarray:
        per_bin = d[:, 1:]
        w = np.where(np.isfinite(per_bin), comb_w, 0.0)
        tot = w.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            comb = np.where(tot > 0, np.nansum(per_bin * w, axis=1) / tot, np.nan)
        return np.column_stack([d, comb])

    def point(side: int) -> np.ndarray:
        g = groups[side]
        return group_medians(ages[g.pos][None, :], g.weight[None, :], fbins[side][None, :])

    n_strata = len(match.strata)

    def block(rng: np.random.Generator, count: int) -> np.ndarray:
        out = []
        if scheme == "strata":
            mult = rng.multinomial(n_strata, np.full(n_strata, 1.0 / n_strata), size=count)
        for side, g in enumerate(groups):
            if scheme == "within":
                idx = _stratified_draw(g, rng, count)
                out.append(group_medians(ages[g.pos][idx], g.weight[idx], fbins[side][idx]))
            elif scheme == "group":
                idx = (rng.random((count, g.pos.size)) * g.pos.size).astype(np.int64)
                out.append(group_medians(ages[g.pos][idx], g.weight[idx], fbins[side][idx]))
            else:
                w = g.weight[None, :] * mult[:, g.stratum]
                v = np.broadcast_to(ages[g.pos], w.shape)
                out.append(group_medians(v, w, np.broadcast_to(fbins[side], w.shape)))
        return with_combined(out[0] - out[1])

    reps = replicate_map(block, b, seed, workers)
    pt, pc = point(0)[0], point(1)[0]
    diff = with_combined((point(0) - point(1)))[0]

    def summarize(col: int) -> tuple[float, float, float]:
        r = reps[:, col]
        r = r[np.isfinite(r)]
        if r.size < 2:
            return math.nan, math.nan, math.nan
        xs = np.sort(r)
        return (replicate_sd(r), float(quantile_sorted(xs, 0.025)),
                float(quantile_sorted(xs, 0.975)))

    def estimate(col: int) -> Estimate:
        se, lo, hi = summarize(col)
        if not math.isfinite(diff[col]) or not math.isfinite(se):
            return Estimate(float(diff[col]), se, lo, hi, math.nan, math.nan)
        sig = significance(float(diff[col]), se)
        return Estimate(sig.delta, sig.se, lo, hi, sig.z, sig.p_two_sided)

    bins = []
    for n, k in enumerate(keys, start=1):
        nt, nc = counts[0][n - 1], counts[1][n - 1]
        robust = nt >= min_members and nc >= min_members
        bse, blo, bhi = summarize(n) if robust else (math.nan, math.nan, math.nan)
        z = diff[n] / bse if robust and bse > 0 else math.nan
        bins.append(MatchedBin(bin_edge(k, bin_width), bin_edge(k + 1, bin_width), nt, nc, float(pt[n]),
                               float(pc[n]), float(diff[n]), bse, blo, bhi, float(z), robust))
    return MatchedDelta(age_source, estimate(len(keys) + 1), estimate(0), tuple(bins), b,
                        tuple(k for k, u in zip(keys, use) if u))


def weighted_group_median(match: MatchResult, catalog: Catalog, side: int,
                          column: str = "age_infer") -> float:
    ids = [i for s in sorted(match.strata) for i in match.strata[s][side]]
    pos = catalog.positions(ids)
    return weighted_median(catalog.column(column)[pos], [match.weights[i] for i in ids])


def matched_rows(match: MatchResult) -> list[dict]:
    """One row per matched record: id, group, stratum label and weight."""
    rows = []
    for s in sorted(match.strata):
        label = "-".join(str(x) for x in s)
        for side, group in ((0, "treated"), (1, "control")):
            for i in match.strata[s][side]:
                rows.append({"id": i, "group": group, "stratum": label, "weight": match.weights[i]})
    return rows


def stratum_covariate_means(match: MatchResult, catalog: Catalog, variable: str
                            ) -> list[tuple[Label, float, float]]:
    """(label, weighted treated mean, weighted control mean) per matched stratum."""
    col = catalog.column(variable)
    out = []
    for s in sorted(match.strata):
        t, c = match.strata[s]
        tw = np.array([match.weights[i] for i in t])
        cw = np.array([match.weights[i] for i in c])
        out.append((s, float(np.average(col[catalog.positions(t)], weights=tw)),
                    float(np.average(col[catalog.positions(c)], weights=cw))))
    return out


def split_groups(catalog: Catalog, treated_mask: Sequence[bool]) -> tuple[list[str], list[str]]:
    m = np.asarray(treated_mask, dtype=bool)
    return list(catalog.ids[m]), list(catalog.ids[~m])
