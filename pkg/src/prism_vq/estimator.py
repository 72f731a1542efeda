"""Sklearn-style estimator facade over the two-stage ranking pipeline.

`fit` runs both training stages on a panel, `transform` exposes the learned
discrete structure codes, and `predict` emits ranking scores, so the model
drops into scikit-learn styled tooling (`get_params`, `set_params`, `clone`).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import training as tr
from .evaluation import rank_ic, spearman
from .panel import PanelDataset, SplitSpec, chronological_split, split_indices
from .spatial import SpatialConfig
from .temporal import TemporalConfig


def _check_panel(panel) -> PanelDataset:
    if not isinstance(panel, PanelDataset):
        raise TypeError(f"expected a PanelDataset, got {type(panel).__name__}")
    if panel.n_dates < 10:
        raise ValueError("panel too short to split and train")
    return panel


def _default_split(panel: PanelDataset) -> SplitSpec:
    d = panel.dates
    i1, i2 = int(len(d) * 0.6), int(len(d) * 0.8)
    return SplitSpec((d[0], d[i1 - 1]), (d[i1], d[i2 - 1]), (d[i2], d[-1]))


class PrismVQRanker(BaseEstimator):
    """Two-stage cross-sectional return ranker.

    Stage 1 learns a codebook of cross-sectional prototypes; stage 2 maps
    temporal context and codes to dynamic factor loadings and a per-stock
    ranking score. All constructor arguments are hyperparameters in the
    scikit-learn sense.
    """

    def __init__(self, lookback: int = 20, latent_dim: int = 128,
                 codebook_size: int = 512, spatial_heads: int = 2,
                 decoder_channels: int = 128, decoder_base_len: int = 5,
                 temporal_dim: int = 64, temporal_heads: int = 2,
                 ffn_dim: int = 128, n_experts: int = 2, top_k: int = 1,
                 expert_dim: int = 64, trend_window: int = 5,
                 dropout: float = 0.1, balance_weight: float = 1e-2,
                 learning_rate: float = 1e-4, max_epochs: int = 50,
                 patience: int = 15, seed: int = 0):
        self.lookback = lookback
        self.latent_dim = latent_dim
        self.codebook_size = codebook_size
        self.spatial_heads = spatial_heads
        self.decoder_channels = decoder_channels
        self.decoder_base_len = decoder_base_len
        self.temporal_dim = temporal_dim
        self.temporal_heads = temporal_heads
        self.ffn_dim = ffn_dim
        self.n_experts = n_experts
        self.top_k = top_k
        self.expert_dim = expert_dim
        self.trend_window = trend_window
        self.dropout = dropout
        self.balance_weight = balance_weight
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed

    def fit(self, X: PanelDataset, y=None, split: SplitSpec | None = None):
        """Train both stages on the panel's train range.

        ``y`` is ignored (targets live inside the panel); ``split`` defaults
        to a chronological 60/20/20 cut.
        """
        panel = _check_panel(X)
        spec = split or _default_split(panel)
        train_view, _, _ = chronological_split(panel, spec)
        md = tr.prepare_model_data(panel, train_view, lookback=self.lookback)
        ranges = split_indices(panel, spec)
        scfg = SpatialConfig(n_features=panel.n_features,
                             lookback=self.lookback,
                             latent_dim=self.latent_dim,
                             codebook_size=self.codebook_size,
                             heads=self.spatial_heads, dropout=self.dropout,
                             decoder_channels=self.decoder_channels,
                             decoder_base_len=self.decoder_base_len,
                             n_horizons=panel.n_horizons,
                             n_priors=panel.n_priors)
        mcfg = TemporalConfig(n_features=panel.n_features,
                              lookback=self.lookback,
                              latent_dim=self.latent_dim,
                              temporal_dim=self.temporal_dim,
                              heads=self.temporal_heads, ffn_dim=self.ffn_dim,
                              dropout=self.dropout, n_experts=self.n_experts,
                              top_k=self.top_k, expert_dim=self.expert_dim,
                              n_priors=panel.n_priors,
                              trend_window=self.trend_window,
                              balance_weight=self.balance_weight)
        tcfg = tr.TrainConfig(learning_rate=self.learning_rate,
                              max_epochs=self.max_epochs,
                              patience=self.patience, seed=self.seed)
        stage1 = tr.train_stage1(md, ranges[0], ranges[1], scfg, tcfg)
        stage2 = tr.train_stage2(md, stage1.model, ranges[0], ranges[1],
                                 mcfg, tcfg)
        self.spatial_model_ = stage1.model
        self.temporal_model_ = stage2.model
        self.model_data_ = md
        self.split_ranges_ = ranges
        self.n_features_in_ = panel.n_features
        self.stage1_history_ = stage1.history
        self.stage2_history_ = stage2.history
        return self

    def predict(self, X: PanelDataset | None = None,
                date_range: tuple[int, int] | None = None) -> list[dict]:
        """Score rows over the test range (or an explicit date-index range).

        Omit ``X`` to score the fitted panel. A new panel is normalized with
        statistics fitted on its own train view, so it must carry enough
        history for that.
        """
        check_is_fitted(self, "temporal_model_")
        md = self.model_data_ if X is None else tr.prepare_model_data(
            _check_panel(X), chronological_split(X, _default_split(X))[0],
            lookback=self.lookback)
        rng = date_range or self.split_ranges_[2]
        return tr.predict_scores(self.spatial_model_, self.temporal_model_,
                                 md, rng)

    def transform(self, X: PanelDataset | None = None,
                  date_range: tuple[int, int] | None = None) -> list[dict]:
        """Discrete structure codes per (date, ticker) from the frozen stage 1."""
        check_is_fitted(self, "spatial_model_")
        md = self.model_data_ if X is None else tr.prepare_model_data(
            _check_panel(X), chronological_split(X, _default_split(X))[0],
            lookback=self.lookback)
        rng = date_range or self.split_ranges_[2]
        dates = tr.usable_dates(md, *rng, require_target=False)
        cache = tr.stage1_codes(self.spatial_model_, md, dates,
                                require_target=False)
        rows = []
        for t in sorted(cache):
            entry = cache[t]
            for pos, col in enumerate(entry["batch"].stock_idx):
                rows.append({"date": entry["batch"].date,
                             "ticker": md.panel.tickers[col],
                             "code_index": int(entry["indices"][pos])})
        return rows

    def score(self, X: PanelDataset | None = None, y=None) -> float:
        """Mean daily rank IC of predictions against realized main targets."""
        check_is_fitted(self, "temporal_model_")
        rows = self.predict(X)
        md = self.model_data_
        frames: dict[str, dict[str, float]] = {}
        for r in rows:
            frames.setdefault(r["date"], {})[r["ticker"]] = r["score"]
        panel = md.panel
        main = panel.main_horizon - 1
        realized = {}
        for d in frames:
            t = panel.date_index(d)
            realized[d] = {panel.tickers[i]: float(panel.targets[t, i, main])
                           for i in range(panel.n_stocks) if panel.member[t, i]}
        _, mean_ic, _ = rank_ic(frames, realized)
        return mean_ic
