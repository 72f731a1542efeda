"""Ranking metrics: Spearman correlation, RankIC/RankICIR, block bootstrap."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .panel import average_ranks


@dataclass
class ICSeries:
    """Per-date rank information coefficients over a test range."""

    dates: list[str]
    values: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return len(self.dates)


def spearman(a, b) -> float:
    """Spearman rank correlation; rank 1 is the highest value, ties averaged.

    Returns NaN when either input is constant (undefined correlation).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("spearman expects two equal-length vectors")
    if a.size < 2:
        raise ValueError("spearman needs at least two observations")
    n = a.size
    ra = n + 1 - average_ranks(a)  # descending: rank 1 = highest
    rb = n + 1 - average_ranks(b)
    da = ra - ra.mean()
    db = rb - rb.mean()
    denom = math.sqrt(float(da @ da) * float(db @ db))
    if denom == 0.0:
        return float("nan")
    return float(da @ db) / denom


def rank_ic(scores: dict[str, dict[str, float]],
            returns: dict[str, dict[str, float]],
            ) -> tuple[ICSeries, float, float]:
    """Daily Spearman between score and realized-return cross-sections.

    ``scores`` and ``returns`` map date -> ticker -> value; dates must align.
    Returns the per-date series, its time mean, and the information ratio
    (mean over sample standard deviation). Dates with fewer than two jointly
    observed names are skipped with a warning.
    """
    if set(scores) != set(returns):
        missing = sorted(set(scores) ^ set(returns))[:5]
        raise ValueError(f"score/return dates misaligned, e.g. {missing}")
    dates, values, counts = [], [], []
    for date in sorted(scores):
        srow, rrow = scores[date], returns[date]
        names = [t for t in srow if t in rrow and not math.isnan(rrow[t])
                 and not math.isnan(srow[t])]
        if len(names) < 2:
            warnings.warn(f"rank_ic: skipping {date} with {len(names)} members")
            continue
        ic = spearman([srow[t] for t in names], [rrow[t] for t in names])
        if math.isnan(ic):
            warnings.warn(f"rank_ic: undefined correlation on {date}, skipped")
            continue
        dates.append(date)
        values.append(ic)
        counts.append(len(names))
    series = ICSeries(dates, np.asarray(values), np.asarray(counts))
    if not dates:
        return series, float("nan"), float("nan")
    mean = float(series.values.mean())
    if len(dates) < 2 or float(series.values.std(ddof=1)) == 0.0:
        icir = math.inf if mean > 0 else (-math.inf if mean < 0 else float("nan"))
    else:
        icir = mean / float(series.values.std(ddof=1))
    return series, mean, icir


def block_bootstrap_pvalue(ic_a: ICSeries, ic_b: ICSeries,
                           block_len: int = 20, n_resamples: int = 10_000,
                           rng: np.random.Generator | None = None) -> float:
    """One-sided moving-block bootstrap p-value for mean(ic_a - ic_b) > 0.

    The daily difference series is resampled by overlapping blocks with
    replacement up to the original length; p is the fraction of resampled
    means <= 0.
    """
    if ic_a.dates != ic_b.dates:
        raise ValueError("IC series must cover identical dates")
    if rng is None:
        rng = np.random.default_rng(0)
    d = ic_a.values - ic_b.values
    L = len(d)
    if L == 0:
        raise ValueError("empty IC series")
    if block_len > L:
        warnings.warn(f"block length {block_len} > series length {L}; shrinking")
        block_len = L
    n_blocks = -(-L // block_len)  # ceil
    starts = rng.integers(0, L - block_len + 1, size=(n_resamples, n_blocks))
    # gather blocks: (n_resamples, n_blocks, block_len) -> truncate to L
    idx = starts[..., None] + np.arange(block_len)
    samples = d[idx].reshape(n_resamples, -1)[:, :L]
    means = samples.mean(axis=1)
    return float((means <= 0.0).mean())
