"""Synthetic market generator with planted cluster structure and alpha signal.

Stocks are grouped into latent clusters. Daily returns combine a persistent
stock-level alpha process, cluster-factor exposure, and idiosyncratic noise
scaled by the signal-to-noise ratio. Feature columns expose a noisy view of
the alpha plus static cluster fingerprints, so a structure-learning model can
recover both the clusters and the signal. The generator also measures the
ranking power of the true signal date by date, which downstream experiments
use as an attainability oracle.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .csvio import write_csv
from .evaluation import spearman
from .panel import PanelDataset, forward_returns, prior_window_series


@dataclass
class SyntheticConfig:
    n_stocks: int = 200
    n_dates: int = 500
    n_clusters: int = 4
    snr: float = 1.0
    n_factors: int = 4
    n_features: int = 16
    n_signal_features: int = 2
    n_cluster_features: int = 12
    n_horizons: int = 9
    main_horizon: int = 5
    prior_window: int = 20
    seed: int = 0
    alpha_vol: float = 0.01          # daily volatility of the alpha component
    factor_vol: float = 0.005        # daily volatility of cluster factors
    alpha_persistence: float = 0.9   # AR(1) coefficient of the alpha process
    feature_noise: float = 0.25

    def __post_init__(self):
        if self.n_clusters > self.n_stocks:
            raise ValueError("more clusters than stocks")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if self.n_signal_features + self.n_cluster_features > self.n_features:
            raise ValueError("signal + cluster feature columns exceed n_features")
        if not self.n_clusters <= self.n_factors:
            raise ValueError("need at least one prior factor per cluster")


@dataclass
class SyntheticTruth:
    """Ground truth emitted next to the panel."""

    clusters: np.ndarray          # (N,) cluster id per stock
    loadings: np.ndarray          # (N, P) planted factor loadings
    signal: np.ndarray            # (D, N) the alpha process driving returns
    achievable_ic: np.ndarray     # (D,) Spearman(signal_t, realized main target)
    dates: list[str] = field(default_factory=list)
    tickers: list[str] = field(default_factory=list)

    def mean_achievable_ic(self, date_lo: str = "", date_hi: str = "~") -> float:
        vals = [v for d, v in zip(self.dates, self.achievable_ic)
                if date_lo <= d <= date_hi and not np.isnan(v)]
        return float(np.mean(vals)) if vals else float("nan")


def _trading_dates(n: int) -> list[str]:
    """Weekday sequence starting 2015-01-01; ISO-8601 strings."""
    dates = []
    day = np.datetime64("2015-01-01")
    while len(dates) < n:
        if np.is_busday(day):
            dates.append(str(day))
        day += 1
    return dates


def synthetic_generate(cfg: SyntheticConfig) -> tuple[PanelDataset, SyntheticTruth]:
    """Build a deterministic synthetic panel plus its ground truth."""
    rng = np.random.default_rng(cfg.seed)
    D, N, P = cfg.n_dates, cfg.n_stocks, cfg.n_factors
    dates = _trading_dates(D)
    tickers = [f"S{i:04d}" for i in range(N)]
    clusters = np.arange(N) % cfg.n_clusters

    # planted loadings: unit weight on the own-cluster factor with mild jitter
    loadings = np.zeros((N, P))
    loadings[np.arange(N), clusters] = 1.0 + 0.1 * rng.standard_normal(N)

    factor_returns = cfg.factor_vol * rng.standard_normal((D, P))

    rho = cfg.alpha_persistence
    signal = np.zeros((D, N))
    signal[0] = rng.standard_normal(N)
    innov = rng.standard_normal((D, N))
    for t in range(1, D):
        signal[t] = rho * signal[t - 1] + np.sqrt(1.0 - rho * rho) * innov[t]

    noise_vol = cfg.alpha_vol / np.sqrt(cfg.snr)
    eps = rng.standard_normal((D, N))
    returns = np.empty((D, N))
    returns[0] = loadings @ factor_returns[0] + noise_vol * eps[0]
    for t in range(1, D):
        returns[t] = (cfg.alpha_vol * signal[t - 1]
                      + loadings @ factor_returns[t]
                      + noise_vol * eps[t])

    close = 100.0 * np.cumprod(1.0 + returns, axis=0)
    open_px = np.empty_like(close)
    open_px[0] = 100.0
    open_px[1:] = close[:-1]

    features = rng.standard_normal((D, N, cfg.n_features))
    ks, kc = cfg.n_signal_features, cfg.n_cluster_features
    features[:, :, :ks] = (signal[:, :, None]
                           + cfg.feature_noise * features[:, :, :ks])
    # cluster identity must survive per-window instance normalization AND
    # stay stationary over time, so it is planted as periodic patterns with
    # one frequency per cluster (static levels die in RevIN; random walks
    # drift out of any fixed codebook region)
    periods = np.geomspace(5.0, 14.0, cfg.n_clusters)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(cfg.n_clusters, kc))
    tgrid = np.arange(D)[:, None]
    waves = np.sin(2.0 * np.pi * tgrid[:, :, None] / periods[None, :, None]
                   + phases[None, :, :])  # (D, n_clusters, kc)
    features[:, :, ks:ks + kc] = (waves[:, clusters, :]
                                  + cfg.feature_noise * features[:, :, ks:ks + kc])

    member = np.ones((D, N), dtype=bool)
    targets = np.stack([forward_returns(open_px, close, h)
                        for h in range(1, cfg.n_horizons + 1)], axis=2)
    priors = prior_window_series(factor_returns, cfg.prior_window)

    panel = PanelDataset(dates=dates, tickers=tickers, features=features,
                         open=open_px, close=close, member=member,
                         targets=targets, priors_daily=factor_returns,
                         priors=priors,
                         feature_names=[f"f{j + 1:03d}" for j in range(cfg.n_features)],
                         prior_names=[f"p{j + 1:02d}" for j in range(P)],
                         main_horizon=cfg.main_horizon,
                         prior_window=cfg.prior_window)

    main = cfg.main_horizon - 1
    achievable = np.full(D, np.nan)
    for t in range(D):
        y = targets[t, :, main]
        if np.isnan(y).all():
            continue
        achievable[t] = spearman(signal[t], y)

    truth = SyntheticTruth(clusters=clusters, loadings=loadings, signal=signal,
                           achievable_ic=achievable, dates=dates, tickers=tickers)
    return panel, truth


def write_panel_files(panel: PanelDataset, truth: SyntheticTruth, out_dir: str
                      ) -> dict[str, str]:
    """Emit the generator file set; returns artifact name -> path."""
    paths = {
        "features": os.path.join(out_dir, "features.csv"),
        "prices": os.path.join(out_dir, "prices.csv"),
        "priors": os.path.join(out_dir, "priors.csv"),
        "truth": os.path.join(out_dir, "truth.csv"),
        "truth_ic": os.path.join(out_dir, "truth_ic.csv"),
    }
    write_csv(paths["features"], ["date", "ticker"] + panel.feature_names,
              ((panel.dates[t], panel.tickers[i], *panel.features[t, i])
               for t in range(panel.n_dates) for i in range(panel.n_stocks)))
    write_csv(paths["prices"], ["date", "ticker", "open", "close", "member"],
              ((panel.dates[t], panel.tickers[i], panel.open[t, i],
                panel.close[t, i], int(panel.member[t, i]))
               for t in range(panel.n_dates) for i in range(panel.n_stocks)))
    write_csv(paths["priors"], ["date"] + panel.prior_names,
              ((panel.dates[t], *panel.priors_daily[t])
               for t in range(panel.n_dates)))
    write_csv(paths["truth"], ["ticker", "cluster"],
              ((tk, int(c)) for tk, c in zip(truth.tickers, truth.clusters)))
    write_csv(paths["truth_ic"], ["date", "achievable_ic"],
              ((d, v) for d, v in zip(truth.dates, truth.achievable_ic)))
    return paths
