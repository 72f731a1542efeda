"""Panel data model: CSV ingestion, normalization, targets, priors, splits.

A :class:`PanelDataset` is an aligned date x stock x feature block with
prices, membership, forward-return targets, and market-wide prior-factor
series. Targets at date t only read prices after t; prior windows at date t
only read factor returns up to t-1.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np


class IngestionError(ValueError):
    """Malformed or misaligned input data; message names file and line."""


class DataError(ValueError):
    """Values that violate a data contract (non-positive price, r <= -1)."""


MAD_SCALE = 1.4826  # consistency constant for Gaussian data
MAD_FLOOR = 1e-8
ZSCORE_CLIP = 3.0


@dataclass(frozen=True)
class SplitSpec:
    """Chronological (start, end) date ranges, inclusive, ISO-8601 strings."""

    train: tuple[str, str]
    valid: tuple[str, str]
    test: tuple[str, str]

    def __post_init__(self):
        ranges = [self.train, self.valid, self.test]
        for lo, hi in ranges:
            if lo > hi:
                raise IngestionError(f"split range {lo}..{hi} is reversed")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if hi >= lo:
                raise IngestionError("split ranges must be disjoint and ordered")


@dataclass
class NormalizationStats:
    """Train-range robust feature stats and prior-window moments."""

    feature_median: np.ndarray
    feature_mad: np.ndarray
    prior_mean: np.ndarray
    prior_std: np.ndarray


@dataclass
class PanelDataset:
    """Immutable-by-convention aligned market panel."""

    dates: list[str]
    tickers: list[str]
    features: np.ndarray        # (D, N, C), NaN where never observed
    open: np.ndarray            # (D, N)
    close: np.ndarray           # (D, N)
    member: np.ndarray          # (D, N) bool
    targets: np.ndarray         # (D, N, N_h) raw forward returns, NaN-masked
    priors_daily: np.ndarray    # (D, P) daily factor returns
    priors: np.ndarray          # (D, P) trailing cumulative windows, NaN-masked
    feature_names: list[str] = field(default_factory=list)
    prior_names: list[str] = field(default_factory=list)
    main_horizon: int = 5
    prior_window: int = 20

    @property
    def n_dates(self) -> int:
        return len(self.dates)

    @property
    def n_stocks(self) -> int:
        return len(self.tickers)

    @property
    def n_features(self) -> int:
        return self.features.shape[2]

    @property
    def n_horizons(self) -> int:
        return self.targets.shape[2]

    @property
    def n_priors(self) -> int:
        return self.priors.shape[1]

    def date_index(self, date: str) -> int:
        try:
            return self.dates.index(date)
        except ValueError:
            raise KeyError(f"date {date} not in panel") from None

    def usable_mask(self, t: int, lookback: int) -> np.ndarray:
        """Members at date t whose trailing feature window is fully observed."""
        if t - lookback + 1 < 0:
            return np.zeros(self.n_stocks, dtype=bool)
        window = self.features[t - lookback + 1:t + 1]
        ok = ~np.isnan(window).any(axis=(0, 2))
        return self.member[t] & ok

    def with_features(self, features: np.ndarray) -> "PanelDataset":
        return replace(self, features=features)

    def slice_dates(self, lo: int, hi: int) -> "PanelDataset":
        """Half-open row slice [lo, hi) over the date axis."""
        return PanelDataset(
            dates=self.dates[lo:hi],
            tickers=self.tickers,
            features=self.features[lo:hi],
            open=self.open[lo:hi],
            close=self.close[lo:hi],
            member=self.member[lo:hi],
            targets=self.targets[lo:hi],
            priors_daily=self.priors_daily[lo:hi],
            priors=self.priors[lo:hi],
            feature_names=self.feature_names,
            prior_names=self.prior_names,
            main_horizon=self.main_horizon,
            prior_window=self.prior_window,
        )


# -- CSV ingestion -----------------------------------------------------------

def _read_csv(path: str) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestionError(f"{path}: empty file") from None
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=2) if row]
    return header, rows


def _parse_float(cell: str, path: str, lineno: int, col: str) -> float:
    cell = cell.strip()
    if cell == "":
        return np.nan
    try:
        return float(cell)
    except ValueError:
        raise IngestionError(
            f"{path}:{lineno}: non-numeric value {cell!r} in column {col}") from None


def load_panel(features_file: str, prices_file: str, priors_file: str,
               n_horizons: int = 9, main_horizon: int = 5,
               prior_window: int = 20) -> PanelDataset:
    """Assemble an aligned panel from the three input CSVs.

    Missing feature cells are forward-filled per stock; dates before a
    stock's first feature observation stay NaN and are flagged non-member.
    """
    f_header, f_rows = _read_csv(features_file)
    if f_header[:2] != ["date", "ticker"]:
        raise IngestionError(f"{features_file}:1: header must start with date,ticker")
    feature_names = f_header[2:]

    p_header, p_rows = _read_csv(prices_file)
    if p_header != ["date", "ticker", "open", "close", "member"]:
        raise IngestionError(
            f"{prices_file}:1: header must be date,ticker,open,close,member")

    q_header, q_rows = _read_csv(priors_file)
    if q_header[:1] != ["date"]:
        raise IngestionError(f"{priors_file}:1: header must start with date")
    prior_names = q_header[1:]

    price_dates = sorted({row[0] for _, row in p_rows})
    feat_dates = sorted({row[0] for _, row in f_rows})
    if not set(feat_dates) <= set(price_dates):
        extra = sorted(set(feat_dates) - set(price_dates))[:3]
        raise IngestionError(
            f"{features_file}: dates {extra} missing from {prices_file}")
    dates = price_dates
    tickers = sorted({row[1] for _, row in p_rows})
    d_idx = {d: i for i, d in enumerate(dates)}
    t_idx = {t: i for i, t in enumerate(tickers)}
    D, N, C = len(dates), len(tickers), len(feature_names)

    features = np.full((D, N, C), np.nan)
    seen = set()
    for lineno, row in f_rows:
        if len(row) != 2 + C:
            raise IngestionError(
                f"{features_file}:{lineno}: expected {2 + C} columns, got {len(row)}")
        key = (row[0], row[1])
        if key in seen:
            raise IngestionError(
                f"{features_file}:{lineno}: duplicate (date,ticker) row {key}")
        seen.add(key)
        if row[1] not in t_idx:
            raise IngestionError(
                f"{features_file}:{lineno}: ticker {row[1]!r} absent from prices")
        di, ti = d_idx[row[0]], t_idx[row[1]]
        features[di, ti] = [_parse_float(c, features_file, lineno, feature_names[j])
                            for j, c in enumerate(row[2:])]

    open_px = np.full((D, N), np.nan)
    close_px = np.full((D, N), np.nan)
    member = np.zeros((D, N), dtype=bool)
    seen = set()
    for lineno, row in p_rows:
        if len(row) != 5:
            raise IngestionError(f"{prices_file}:{lineno}: expected 5 columns")
        key = (row[0], row[1])
        if key in seen:
            raise IngestionError(
                f"{prices_file}:{lineno}: duplicate (date,ticker) row {key}")
        seen.add(key)
        di, ti = d_idx[row[0]], t_idx[row[1]]
        open_px[di, ti] = _parse_float(row[2], prices_file, lineno, "open")
        close_px[di, ti] = _parse_float(row[3], prices_file, lineno, "close")
        member[di, ti] = row[4].strip() in ("1", "true", "True")
    if np.nanmin(open_px) <= 0 or np.nanmin(close_px) <= 0:
        raise DataError(f"{prices_file}: prices must be positive")

    priors_daily = np.full((D, len(prior_names)), np.nan)
    seen_dates = set()
    for lineno, row in q_rows:
        if len(row) != 1 + len(prior_names):
            raise IngestionError(f"{priors_file}:{lineno}: expected "
                                 f"{1 + len(prior_names)} columns")
        if row[0] in seen_dates:
            raise IngestionError(f"{priors_file}:{lineno}: duplicate date {row[0]}")
        seen_dates.add(row[0])
        if row[0] not in d_idx:
            continue
        priors_daily[d_idx[row[0]]] = [
            _parse_float(c, priors_file, lineno, prior_names[j])
            for j, c in enumerate(row[1:])]

    features = forward_fill(features)
    never_seen = np.isnan(features).any(axis=2)
    member &= ~never_seen

    targets = np.stack([forward_returns(open_px, close_px, h)
                        for h in range(1, n_horizons + 1)], axis=2)
    priors = prior_window_series(priors_daily, prior_window)
    return PanelDataset(dates=dates, tickers=tickers, features=features,
                        open=open_px, close=close_px, member=member,
                        targets=targets, priors_daily=priors_daily,
                        priors=priors, feature_names=feature_names,
                        prior_names=prior_names, main_horizon=main_horizon,
                        prior_window=prior_window)


def forward_fill(features: np.ndarray) -> np.ndarray:
    """Per-stock forward fill along the date axis; leading gaps stay NaN."""
    out = features.copy()
    D = out.shape[0]
    for t in range(1, D):
        gap = np.isnan(out[t])
        out[t][gap] = out[t - 1][gap]
    return out


# -- transforms ---------------------------------------------------------------

def fit_normalization(train: PanelDataset) -> NormalizationStats:
    """Median/MAD per feature and mean/std per prior, train range only."""
    member = train.member
    rows = train.features[member]  # (M, C) observed member rows
    if rows.size == 0:
        raise DataError("no member rows in the training range")
    med = np.median(rows, axis=0)
    mad = np.median(np.abs(rows - med), axis=0)
    pr = train.priors[~np.isnan(train.priors).any(axis=1)]
    if pr.size == 0:
        raise DataError("no complete prior windows in the training range")
    return NormalizationStats(feature_median=med, feature_mad=mad,
                              prior_mean=pr.mean(axis=0),
                              prior_std=np.maximum(pr.std(axis=0), 1e-12))


def robust_zscore(features: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    """Clip((x - median) / (1.4826 * MAD), -3, 3) with a MAD floor."""
    denom = MAD_SCALE * np.maximum(stats.feature_mad, MAD_FLOOR)
    return np.clip((features - stats.feature_median) / denom,
                   -ZSCORE_CLIP, ZSCORE_CLIP)


def standardize_priors(priors: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    return (priors - stats.prior_mean) / stats.prior_std


def cs_rank_norm(values: np.ndarray) -> np.ndarray:
    """Rank-percentile a cross-section then standardize to mean 0, variance 1.

    Percentile is (rank - 0.5) / N with average ranks for ties. A
    single-element section maps to 0.
    """
    values = np.asarray(values, dtype=float)
    n = values.size
    if n == 1:
        warnings.warn("cs_rank_norm: single-member cross-section, emitting 0")
        return np.zeros(1)
    ranks = average_ranks(values)
    pct = (ranks - 0.5) / n
    centered = pct - pct.mean()
    std = centered.std()
    if std == 0:
        return np.zeros(n)
    return centered / std


def average_ranks(values: np.ndarray) -> np.ndarray:
    """Ascending 1-based ranks with ties mapped to their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def forward_returns(open_px: np.ndarray, close_px: np.ndarray, horizon: int) -> np.ndarray:
    """y[t, i] = (close[t + h, i] - open[t + 1, i]) / open[t + 1, i].

    The last ``horizon`` dates have undefined targets and come back NaN.
    """
    if horizon < 1:
        raise DataError(f"horizon must be >= 1, got {horizon}")
    with np.errstate(invalid="ignore"):
        if np.nanmin(open_px) <= 0 or np.nanmin(close_px) <= 0:
            raise DataError("prices must be positive")
    D = open_px.shape[0]
    out = np.full_like(open_px, np.nan)
    if D > horizon:
        entry = open_px[1:D - horizon + 1]
        exit_ = close_px[horizon:]
        out[:D - horizon] = (exit_ - entry) / entry
    return out


def prior_factor_window(daily: np.ndarray, t: int, window: int) -> np.ndarray:
    """Trailing compounded factor return over [t - window, t - 1]."""
    if t - window < 0:
        raise DataError(f"window of {window} days not available before index {t}")
    seg = daily[t - window:t]
    if np.nanmin(seg) <= -1.0:
        raise DataError("factor return <= -100% inside window")
    return np.exp(np.log1p(seg).sum(axis=0)) - 1.0


def prior_window_series(daily: np.ndarray, window: int) -> np.ndarray:
    """Vectorized :func:`prior_factor_window` for every date; NaN when short."""
    D, P = daily.shape
    out = np.full((D, P), np.nan)
    logs = np.log1p(daily)
    for t in range(window, D):
        seg = logs[t - window:t]
        if np.isnan(seg).any():
            continue
        out[t] = np.exp(seg.sum(axis=0)) - 1.0
    return out


def chronological_split(panel: PanelDataset, spec: SplitSpec
                        ) -> tuple[PanelDataset, PanelDataset, PanelDataset]:
    """Cut the panel into non-overlapping train/valid/test date views."""
    views = []
    for lo, hi in split_indices(panel, spec):
        views.append(panel.slice_dates(lo, hi + 1))
    return tuple(views)


def split_indices(panel: PanelDataset, spec: SplitSpec
                  ) -> list[tuple[int, int]]:
    """Inclusive (first, last) date-index bounds of each split range."""
    bounds = []
    for lo, hi in (spec.train, spec.valid, spec.test):
        idx = [i for i, d in enumerate(panel.dates) if lo <= d <= hi]
        if not idx:
            raise IngestionError(f"split range {lo}..{hi} selects no dates")
        bounds.append((idx[0], idx[-1]))
    return bounds
