"""Flat key=value run configuration with defaults, file, and flag overrides."""

from __future__ import annotations

import copy


class ConfigKeyError(ValueError):
    """Unknown configuration key or uncoercible value."""


# Paper-style defaults; synthetic-scale runs override via config file.
DEFAULTS: dict[str, object] = {
    # data files and panel construction
    "data.features_file": "features.csv",
    "data.prices_file": "prices.csv",
    "data.priors_file": "priors.csv",
    "data.n_horizons": 9,
    "data.main_horizon": 5,
    "data.prior_window": 20,
    "data.lookback": 20,
    # chronological split (inclusive ISO dates)
    "split.train_start": "",
    "split.train_end": "",
    "split.valid_start": "",
    "split.valid_end": "",
    "split.test_start": "",
    "split.test_end": "",
    # synthetic generator
    "gen.n_stocks": 200,
    "gen.n_dates": 500,
    "gen.n_clusters": 4,
    "gen.snr": 1.0,
    "gen.n_factors": 4,
    "gen.n_features": 16,
    "gen.n_signal_features": 2,
    "gen.n_cluster_features": 12,
    "gen.alpha_vol": 0.01,
    "gen.factor_vol": 0.005,
    "gen.alpha_persistence": 0.9,
    "gen.feature_noise": 0.25,
    # stage 1
    "spatial.latent_dim": 128,
    "spatial.codebook_size": 512,
    "spatial.heads": 2,
    "spatial.dropout": 0.1,
    "spatial.decoder_channels": 128,
    "spatial.decoder_base_len": 5,
    "spatial.commit_weight": 0.25,
    "spatial.contra_weight": 1.0,
    "spatial.pred_weight": 1e-4,
    "spatial.temperature": 0.07,
    "spatial.ema_decay": 0.99,
    "spatial.dead_usage": 1.0,
    "spatial.dead_patience": 100,
    # stage 2
    "temporal.temporal_dim": 64,
    "temporal.heads": 2,
    "temporal.ffn_dim": 128,
    "temporal.dropout": 0.1,
    "temporal.n_experts": 2,
    "temporal.top_k": 1,
    "temporal.expert_dim": 64,
    "temporal.trend_window": 5,
    "temporal.balance_weight": 1e-2,
    "temporal.loading_penalty": 1e-4,
    # optimizer and schedule
    "train.learning_rate": 1e-4,
    "train.max_epochs": 50,
    "train.clip_norm": 1.0,
    "train.patience": 15,
    "train.weight_decay": 0.01,
    "train.final_lr_fraction": 0.1,
    # portfolio engine
    "backtest.top_k": 30,
    "backtest.n_drop": 5,
    "backtest.cost_buy_bps": 5.0,
    "backtest.cost_sell_bps": 15.0,
    # analysis
    "analysis.transition_horizons": "21,63",
    "analysis.top_codes": 100,
    "analysis.min_obs": 30,
}

# per-market hyperparameter pairs
MARKET_PRESETS = {
    "csi-style": {"temporal.heads": 2, "temporal.n_experts": 2,
                  "temporal.top_k": 1, "temporal.balance_weight": 1e-2},
    "sp-style": {"temporal.heads": 4, "temporal.n_experts": 8,
                 "temporal.top_k": 4, "temporal.balance_weight": 1e-3},
}


def parse_config_file(path: str) -> dict[str, str]:
    """Read `key = value` lines; '#' starts a comment, blank lines ignored."""
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigKeyError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(key: str, value, template) -> object:
    if isinstance(value, str):
        try:
            if isinstance(template, bool):
                return value.lower() in ("1", "true", "yes")
            if isinstance(template, int) and not isinstance(template, bool):
                return int(value)
            if isinstance(template, float):
                return float(value)
        except ValueError:
            raise ConfigKeyError(
                f"cannot parse {value!r} for {key} "
                f"(expected {type(template).__name__})") from None
        return value
    return value


def resolve_config(file_values: dict[str, str] | None = None,
                   overrides: dict[str, str] | None = None,
                   market: str | None = None) -> dict[str, object]:
    """Layer DEFAULTS <- market preset <- config file <- CLI overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if market:
        if market not in MARKET_PRESETS:
            raise ConfigKeyError(f"unknown market {market!r}; choose from "
                                 f"{sorted(MARKET_PRESETS)}")
        cfg.update(MARKET_PRESETS[market])
    for layer in (file_values or {}), (overrides or {}):
        for key, value in layer.items():
            if key not in DEFAULTS:
                raise ConfigKeyError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value, DEFAULTS[key])
    return cfg


def section(cfg: dict[str, object], prefix: str) -> dict[str, object]:
    """Strip `prefix.` from matching keys."""
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}
