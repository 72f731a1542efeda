"""Two-stage vector-quantized factor model for cross-sectional stock ranking."""

from .backtest import BacktestConfig, BacktestResult, run_backtest
from .estimator import PrismVQRanker
from .evaluation import block_bootstrap_pvalue, rank_ic, spearman
from .panel import (NormalizationStats, PanelDataset, SplitSpec,
                    chronological_split, load_panel)
from .spatial import SpatialConfig, SpatialModel
from .synthetic import SyntheticConfig, synthetic_generate
from .temporal import TemporalConfig, TemporalModel
from .training import TrainConfig, train_stage1, train_stage2

__all__ = [
    "BacktestConfig", "BacktestResult", "run_backtest", "PrismVQRanker",
    "block_bootstrap_pvalue", "rank_ic", "spearman", "NormalizationStats",
    "PanelDataset", "SplitSpec", "chronological_split", "load_panel",
    "SpatialConfig", "SpatialModel", "SyntheticConfig", "synthetic_generate",
    "TemporalConfig", "TemporalModel", "TrainConfig", "train_stage1",
    "train_stage2",
]

__version__ = "0.1.0"
