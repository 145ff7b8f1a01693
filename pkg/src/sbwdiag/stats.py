"""Seed-reproducible statistical primitives.

Every resampling routine in the package draws its random numbers through
:func:`replicate_map`.  Replicates are grouped in fixed blocks of
``BLOCK_SIZE``; block ``k`` owns its own Philox stream keyed by
``(seed..., k)`` (see :func:`make_rng`).  Because the block -> stream
mapping depends only on the replicate index, results are identical for any
worker count or scheduling order.
"""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

BLOCK_SIZE = 128
MIN_REPLICATES = 100
DEFAULT_REPLICATES = 1000

IQR_TO_SIGMA = 1.349
MAD_TO_SIGMA = 1.4826

SeedLike = Union[int, Sequence[int]]


class StatsError(ValueError):
    """Invalid input to a statistical primitive."""


class DegenerateScaleError(StatsError):
    """A standard error of zero (or below) where a positive one is required."""


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    se: float
    ci_low: float
    ci_high: float
    b: int
    seed: tuple[int, ...]
    replicates: np.ndarray | None = field(default=None, compare=False, repr=False)


@dataclass(frozen=True)
class SignificanceResult:
    delta: float
    se: float
    z: float
    p_two_sided: float

    def as_row(self) -> dict[str, float]:
        return {"delta": self.delta, "se": self.se, "z": self.z, "p": self.p_two_sided}


# ---------------------------------------------------------------------------
# quantiles and scales


def _as_finite_1d(values, what: str = "values") -> np.ndarray:
    x = np.asarray(values, dtype=float).ravel()
    if x.size == 0:
        raise StatsError(f"{what}: empty input")
    if not np.all(np.isfinite(x)):
        raise StatsError(f"{what}: non-finite entries")
    return x


def _check_q(q: float) -> None:
    if not (0.0 <= q <= 1.0):
        raise StatsError(f"quantile fraction {q!r} outside [0, 1]")


def quantile_sorted(xs: np.ndarray, q: float) -> np.ndarray:
    """Linear (n-1)-rule quantile of arrays already sorted along the last axis."""
    n = xs.shape[-1]
    h = (n - 1) * q
    lo = math.floor(h)
    hi = min(math.ceil(h), n - 1)
    frac = h - lo
    a = xs[..., lo]
    return a + frac * (xs[..., hi] - a)


def quantile(values, q: float) -> float:
    """Quantile with h = (n-1)q and linear interpolation between order statistics."""
    _check_q(q)
    x = np.sort(_as_finite_1d(values))
    return float(quantile_sorted(x, q))


def robust_scale(values, kind: str = "sd") -> float:
    """Dispersion of ``values`` on a standard-deviation-comparable scale.

    ``sd`` is the sample standard deviation, ``iqr_se`` is IQR/1.349 and
    ``mad_se`` is 1.4826 * MAD.  Applied to a bootstrap replicate
    distribution each one estimates the standard error.
    """
    x = _as_finite_1d(values)
    if x.size < 2:
        raise StatsError("robust_scale needs at least 2 values")
    if kind == "sd":
        return float(np.std(x, ddof=1))
    if kind == "iqr_se":
        xs = np.sort(x)
        return float((quantile_sorted(xs, 0.75) - quantile_sorted(xs, 0.25)) / IQR_TO_SIGMA)
    if kind == "mad_se":
        med = np.median(x)
        return float(MAD_TO_SIGMA * np.median(np.abs(x - med)))
    raise StatsError(f"unknown scale kind {kind!r}")


def histogram_mode_rows(x: np.ndarray, bin_width: float, origin: float = 0.0) -> np.ndarray:
    """Centre of the most populated bin for every row of a 2-D array.

    Bins are half-open ``[origin + k w, origin + (k+1) w)``; ties go to the
    lowest bin.
    """
    if not bin_width > 0:
        raise StatsError(f"bin_width must be positive, got {bin_width!r}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    k = np.floor((x - origin) / bin_width).astype(np.int64)
    kmin = int(k.min())
    nb = int(k.max()) - kmin + 1
    rows = x.shape[0]
    flat = (np.arange(rows, dtype=np.int64)[:, None] * nb + (k - kmin)).ravel()
    counts = np.bincount(flat, minlength=rows * nb).reshape(rows, nb)
    best = np.argmax(counts, axis=1) + kmin
    return origin + (best + 0.5) * bin_width


def histogram_mode(values, bin_width: float, origin: float = 0.0) -> float:
    x = _as_finite_1d(values)
    return float(histogram_mode_rows(x[None, :], bin_width, origin)[0])


# ---------------------------------------------------------------------------
# statistics usable on replicate matrices


@dataclass(frozen=True)
class Statistic:
    """A named statistic evaluated along the last axis of an array."""

    name: str
    fn: Callable[[np.ndarray], np.ndarray] = field(compare=False, repr=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(np.asarray(x, dtype=float))


def _median(x):
    return np.median(x, axis=-1)


def _mean(x):
    return np.mean(x, axis=-1)


def _iqr_width(x):
    xs = np.sort(x, axis=-1)
    return quantile_sorted(xs, 0.75) - quantile_sorted(xs, 0.25)


_STAT_RE = re.compile(r"^\s*(quantile|fraction_above)\s*\(\s*([-+0-9.eE]+)\s*\)\s*$")


def quantile_statistic(q: float) -> Statistic:
    _check_q(q)
    return Statistic(f"quantile({q:g})", lambda x: quantile_sorted(np.sort(x, axis=-1), q))


def fraction_above_statistic(tau: float) -> Statistic:
    return Statistic(f"fraction_above({tau:g})", lambda x: np.mean(x > tau, axis=-1))


def resolve_statistic(spec: Union[str, Statistic]) -> Statistic:
    """Turn ``"median"``, ``"mean"``, ``"p75_minus_p25"``, ``"quantile(0.75)"``
    or ``"fraction_above(10)"`` into a :class:`Statistic`."""
    if isinstance(spec, Statistic):
        return spec
    name = spec.strip()
    if name == "median":
        return Statistic("median", _median)
    if name == "mean":
        return Statistic("mean", _mean)
    if name == "p75_minus_p25":
        return Statistic("p75_minus_p25", _iqr_width)
    m = _STAT_RE.match(name)
    if m:
        arg = float(m.group(2))
        if m.group(1) == "quantile":
            return quantile_statistic(arg)
        return fraction_above_statistic(arg)
    raise StatsError(f"unknown statistic {spec!r}")


# ---------------------------------------------------------------------------
# replicate engine


def seed_tuple(seed: SeedLike) -> tuple[int, ...]:
    if isinstance(seed, (int, np.integer)):
        parts = (int(seed),)
    else:
        parts = tuple(int(s) for s in seed)
    if not parts or any(p < 0 for p in parts):
        raise StatsError(f"seed must be non-negative integer(s), got {seed!r}")
    return parts


def derive_seed(seed: SeedLike, *key: int) -> tuple[int, ...]:
    """Child seed for a sub-task identified by integer ``key`` (e.g. a cell)."""
    return seed_tuple(seed) + tuple(int(k) for k in key)


def make_rng(seed: SeedLike, *key: int) -> np.random.Generator:
    """Philox generator for ``seed`` extended by ``key``.

    The first seed component is the entropy and the rest go into the spawn
    key: SeedSequence zero-pads short entropy, so ``[s]`` and ``[s, 0]``
    would otherwise collide.
    """
    parts = derive_seed(seed, *key)
    ss = np.random.SeedSequence(entropy=parts[0], spawn_key=parts[1:])
    return np.random.Generator(np.random.Philox(ss))


def block_rng(seed: SeedLike, block: int) -> np.random.Generator:
    return make_rng(seed, block)


def replicate_map(
    fn: Callable[[np.random.Generator, int], np.ndarray],
    b: int,
    seed: SeedLike,
    workers: int = 1,
) -> np.ndarray:
    """Evaluate ``fn(rng, count)`` on every replicate block and stack the results.

    ``fn`` must return an array whose first axis has length ``count``.
    """
    starts = list(range(0, b, BLOCK_SIZE))

    def run(k: int) -> np.ndarray:
        count = min(BLOCK_SIZE, b - starts[k])
        return np.asarray(fn(block_rng(seed, k), count))

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, range(len(starts))))
    else:
        parts = [run(k) for k in range(len(starts))]
    return np.concatenate(parts, axis=0)


def replicate_sd(reps) -> float:
    """Sample SD of bootstrap replicates; exactly 0 when they all coincide."""
    r = np.asarray(reps, dtype=float)
    if r.size and np.all(r == r.flat[0]):
        return 0.0   # np.std can return round-off noise for identical values
    return float(np.std(r, ddof=1))


def _check_reps(b: int) -> None:
    if b < MIN_REPLICATES:
        raise StatsError(f"need at least {MIN_REPLICATES} bootstrap replicates, got {b}")


def summarize_replicates(point: float, reps: np.ndarray, b: int, seed: SeedLike,
                         keep: bool = False) -> BootstrapResult:
    reps = np.asarray(reps, dtype=float)
    xs = np.sort(reps)
    return BootstrapResult(
        point=float(point),
        se=replicate_sd(reps),
        ci_low=float(quantile_sorted(xs, 0.025)),
        ci_high=float(quantile_sorted(xs, 0.975)),
        b=b,
        seed=seed_tuple(seed),
        replicates=reps if keep else None,
    )


def bootstrap_stat(
    values,
    stat: Union[str, Statistic] = "median",
    b: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    keep_replicates: bool = False,
    workers: int = 1,
) -> BootstrapResult:
    """Nonparametric bootstrap of ``stat`` with percentile 95% interval."""
    x = _as_finite_1d(values)
    n = x.size
    if n < 2:
        raise StatsError("bootstrap needs at least 2 values")
    _check_reps(b)
    statistic = resolve_statistic(stat)

    def block(rng: np.random.Generator, count: int) -> np.ndarray:
        return statistic(x[rng.integers(0, n, size=(count, n))])

    reps = replicate_map(block, b, seed, workers)
    return summarize_replicates(float(statistic(x)), reps, b, seed, keep_replicates)


def significance(delta: float, se: float) -> SignificanceResult:
    """Like :func:`z_and_p` but maps the exact null ``delta == se == 0`` to z = 0.

    A zero SE with non-zero delta yields an infinite z and p = 0.
    """
    if se > 0:
        return z_and_p(delta, se)
    if se < 0 or not math.isfinite(se):
        raise DegenerateScaleError(f"invalid standard error {se!r}")
    if delta == 0:
        return SignificanceResult(float(delta), 0.0, 0.0, 1.0)
    return SignificanceResult(float(delta), 0.0, math.copysign(math.inf, delta), 0.0)


def z_and_p(delta: float, se: float) -> SignificanceResult:
    """z = delta/se and the two-sided normal p-value 2(1 - Phi(|z|))."""
    if not se > 0:
        raise DegenerateScaleError(f"standard error must be positive, got {se!r}")
    z = delta / se
    # erfc keeps full relative precision far into the tail.
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return SignificanceResult(float(delta), float(se), float(z), float(p))


def paired_bootstrap_diff(
    pairs,
    stat: Union[str, Statistic] = "median",
    b_reps: int = DEFAULT_REPLICATES,
    seed: SeedLike = 0,
    workers: int = 1,
) -> SignificanceResult:
    """stat(a) - stat(b) with pair indices resampled jointly."""
    arr = np.asarray(pairs, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise StatsError("pairs must have shape (n, 2)")
    n = arr.shape[0]
    if n < 2:
        raise StatsError("paired bootstrap needs at least 2 pairs")
    _check_reps(b_reps)
    if not np.all(np.isfinite(arr)):
        raise StatsError("pairs: non-finite entries")
    statistic = resolve_statistic(stat)
    a, c = arr[:, 0], arr[:, 1]

    def block(rng: np.random.Generator, count: int) -> np.ndarray:
        idx = rng.integers(0, n, size=(count, n))
        return statistic(a[idx]) - statistic(c[idx])

    reps = replicate_map(block, b_reps, seed, workers)
    delta = float(statistic(a) - statistic(c))
    return significance(delta, replicate_sd(reps))


def weighted_quantile_presorted(vs: np.ndarray, ws: np.ndarray, q: float) -> np.ndarray:
    """Weighted quantile per row for rows already sorted by value.

    The lower value is the first order statistic whose cumulative weight
    reaches ``q W``, the upper one the first whose cumulative weight exceeds
    it; the result is their midpoint, which reduces to the usual median for
    unit weights.  Zero-weight entries never contribute; rows without
    weight give NaN.
    """
    cw = np.cumsum(ws, axis=1)
    total = cw[:, -1:]
    target = q * total
    tol = 1e-12 * np.maximum(total, 1.0)
    lo = np.argmax(cw >= target - tol, axis=1)
    hi_mask = cw > target + tol
    hi = np.where(hi_mask.any(axis=1), np.argmax(hi_mask, axis=1), lo)
    rows = np.arange(vs.shape[0])
    out = 0.5 * (vs[rows, lo] + vs[rows, hi])
    out[total[:, 0] <= 0] = np.nan
    return out


def weighted_quantile_rows(values: np.ndarray, weights: np.ndarray, q: float) -> np.ndarray:
    v = np.atleast_2d(np.asarray(values, dtype=float))
    w = np.atleast_2d(np.asarray(weights, dtype=float))
    order = np.argsort(v, axis=1, kind="stable")
    return weighted_quantile_presorted(np.take_along_axis(v, order, axis=1),
                                       np.take_along_axis(w, order, axis=1), q)


def weighted_median(values, weights) -> float:
    return float(weighted_quantile_rows(np.asarray(values, float)[None, :],
                                        np.asarray(weights, float)[None, :], 0.5)[0])


def bin_edge(k: float, width: float) -> float:
    """``k * width`` rounded to 12 decimals, so 7 * 0.1 labels as 0.7."""
    return round(k * width, 12) + 0.0
