"""Command-line pipeline: data generation, training, prediction, evaluation,
backtesting, sweeps, and interpretability reports.

Every command validates its inputs, writes its documented CSV artifacts
under ``--out``, and records a run manifest with file digests. Relative data
paths resolve against ``--out`` so a pipeline lives in one directory.
"""

from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from . import analysis as an
from . import backtest as bt
from . import evaluation as ev
from . import training as tr
from .config import (ConfigKeyError, MARKET_PRESETS, parse_config_file,
                     resolve_config, section)
from .csvio import write_csv
from .layers import ConfigError
from .manifest import RunManifest
from .panel import DataError, IngestionError, PanelDataset, SplitSpec, \
    chronological_split, load_panel, split_indices
from .spatial import SpatialConfig
from .synthetic import SyntheticConfig, synthetic_generate, write_panel_files
from .temporal import TemporalConfig
from .training import TrainConfig


class UsageError(ValueError):
    pass


def _data_path(cfg, key: str, out_dir: str) -> str:
    path = str(cfg[key])
    if os.path.isabs(path):
        return path
    return os.path.join(out_dir, path)


def _load_panel(cfg, out_dir: str, manifest: RunManifest) -> PanelDataset:
    paths = [_data_path(cfg, f"data.{k}_file", out_dir)
             for k in ("features", "prices", "priors")]
    for p in paths:
        if not os.path.exists(p):
            raise UsageError(f"input file {p} not found; run gen-data or "
                             f"point data.*_file at real data")
        manifest.add_input(p)
    return load_panel(*paths, n_horizons=int(cfg["data.n_horizons"]),
                      main_horizon=int(cfg["data.main_horizon"]),
                      prior_window=int(cfg["data.prior_window"]))


def _split_spec(cfg, panel: PanelDataset) -> SplitSpec:
    keys = ["split.train_start", "split.train_end", "split.valid_start",
            "split.valid_end", "split.test_start", "split.test_end"]
    vals = [str(cfg[k]) for k in keys]
    if all(vals):
        return SplitSpec((vals[0], vals[1]), (vals[2], vals[3]),
                         (vals[4], vals[5]))
    if any(vals):
        raise UsageError("set all six split.* dates or none (60/20/20 default)")
    d = panel.dates
    i1 = int(len(d) * 0.6)
    i2 = int(len(d) * 0.8)
    return SplitSpec((d[0], d[i1 - 1]), (d[i1], d[i2 - 1]), (d[i2], d[-1]))


def _prepare(cfg, panel):
    spec = _split_spec(cfg, panel)
    train_view, _, _ = chronological_split(panel, spec)
    md = tr.prepare_model_data(panel, train_view,
                               lookback=int(cfg["data.lookback"]))
    ranges = split_indices(panel, spec)
    return md, ranges


def _spatial_cfg(cfg, panel) -> SpatialConfig:
    s = section(cfg, "spatial")
    return SpatialConfig(n_features=panel.n_features,
                         lookback=int(cfg["data.lookback"]),
                         latent_dim=int(s["latent_dim"]),
                         codebook_size=int(s["codebook_size"]),
                         heads=int(s["heads"]), dropout=float(s["dropout"]),
                         decoder_channels=int(s["decoder_channels"]),
                         decoder_base_len=int(s["decoder_base_len"]),
                         n_horizons=int(cfg["data.n_horizons"]),
                         n_priors=panel.n_priors,
                         commit_weight=float(s["commit_weight"]),
                         contra_weight=float(s["contra_weight"]),
                         pred_weight=float(s["pred_weight"]),
                         temperature=float(s["temperature"]),
                         ema_decay=float(s["ema_decay"]),
                         dead_usage=float(s["dead_usage"]),
                         dead_patience=int(s["dead_patience"]))


def _temporal_cfg(cfg, panel) -> TemporalConfig:
    s = section(cfg, "temporal")
    return TemporalConfig(n_features=panel.n_features,
                          lookback=int(cfg["data.lookback"]),
                          latent_dim=int(cfg["spatial.latent_dim"]),
                          temporal_dim=int(s["temporal_dim"]),
                          heads=int(s["heads"]), ffn_dim=int(s["ffn_dim"]),
                          dropout=float(s["dropout"]),
                          n_experts=int(s["n_experts"]),
                          top_k=int(s["top_k"]),
                          expert_dim=int(s["expert_dim"]),
                          n_priors=panel.n_priors,
                          trend_window=int(s["trend_window"]),
                          balance_weight=float(s["balance_weight"]),
                          loading_penalty=float(s["loading_penalty"]))


def _train_cfg(cfg, seed: int) -> TrainConfig:
    s = section(cfg, "train")
    return TrainConfig(learning_rate=float(s["learning_rate"]),
                       max_epochs=int(s["max_epochs"]),
                       clip_norm=float(s["clip_norm"]),
                       patience=int(s["patience"]),
                       weight_decay=float(s["weight_decay"]),
                       final_lr_fraction=float(s["final_lr_fraction"]),
                       seed=seed)


def _write_history(path: str, history: list[dict]) -> None:
    comps = sorted({k for row in history for k in row}
                   - {"epoch", "split", "total", "metric"})
    header = (["epoch", "split", "loss_total"]
              + [f"loss_{k}" for k in comps] + ["metric"])
    rows = [[row.get("epoch"), row.get("split"), row.get("total", float("nan"))]
            + [row.get(k, float("nan")) for k in comps]
            + [row.get("metric", float("nan"))] for row in history]
    write_csv(path, header, rows)


def _read_score_rows(path: str) -> list[dict]:
    import csv as _csv
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.DictReader(fh)
        rows = []
        for r in reader:
            row = dict(r)
            for key, val in row.items():
                if key not in ("date", "ticker"):
                    row[key] = float(val) if val != "" else float("nan")
            rows.append(row)
    if not rows:
        raise DataError(f"{path} holds no score rows")
    return rows


def _score_frames(rows: list[dict]) -> dict[str, dict[str, float]]:
    frames: dict[str, dict[str, float]] = {}
    for r in rows:
        frames.setdefault(r["date"], {})[r["ticker"]] = float(r["score"])
    return frames


def _daily_close_returns(panel: PanelDataset) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    for t in range(1, panel.n_dates):
        row = {}
        for i, ticker in enumerate(panel.tickers):
            prev_px, px = panel.close[t - 1, i], panel.close[t, i]
            if np.isfinite(prev_px) and np.isfinite(px) and prev_px > 0:
                row[ticker] = float(px / prev_px - 1.0)
        out[panel.dates[t]] = row
    return out


def _target_frames(panel: PanelDataset) -> dict[str, dict[str, float]]:
    main = panel.main_horizon - 1
    out: dict[str, dict[str, float]] = {}
    for t in range(panel.n_dates):
        out[panel.dates[t]] = {
            panel.tickers[i]: float(panel.targets[t, i, main])
            for i in range(panel.n_stocks) if panel.member[t, i]}
    return out


def _scores_path(args, cfg, out_dir: str) -> str:
    if args.scores:
        return args.scores
    ensemble = os.path.join(out_dir, "predictions_ensemble.csv")
    if os.path.exists(ensemble):
        return ensemble
    return os.path.join(out_dir, f"predictions_seed{args.seeds[0]}.csv")


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args, cfg, manifest) -> None:
    g = section(cfg, "gen")
    scfg = SyntheticConfig(n_stocks=int(g["n_stocks"]),
                           n_dates=int(g["n_dates"]),
                           n_clusters=int(g["n_clusters"]),
                           snr=float(g["snr"]),
                           n_factors=int(g["n_factors"]),
                           n_features=int(g["n_features"]),
                           n_signal_features=int(g["n_signal_features"]),
                           n_cluster_features=int(g["n_cluster_features"]),
                           n_horizons=int(cfg["data.n_horizons"]),
                           main_horizon=int(cfg["data.main_horizon"]),
                           prior_window=int(cfg["data.prior_window"]),
                           seed=args.seeds[0],
                           alpha_vol=float(g["alpha_vol"]),
                           factor_vol=float(g["factor_vol"]),
                           alpha_persistence=float(g["alpha_persistence"]),
                           feature_noise=float(g["feature_noise"]))
    panel, truth = synthetic_generate(scfg)
    paths = write_panel_files(panel, truth, args.out)
    for p in paths.values():
        manifest.add_output(p)
    print(f"gen-data: {panel.n_dates} dates x {panel.n_stocks} stocks -> "
          f"{args.out}")


def cmd_train(args, cfg, manifest) -> None:
    for seed in args.seeds:
        panel = _load_panel(cfg, args.out, manifest)
        md, (train_r, valid_r, _) = _prepare(cfg, panel)
        tcfg = _train_cfg(cfg, seed)
        if args.stage == 1:
            result = tr.train_stage1(md, train_r, valid_r,
                                     _spatial_cfg(cfg, panel), tcfg,
                                     log=print)
            ckpt = os.path.join(args.out, f"stage1_seed{seed}.npz")
            tr.save_checkpoint(ckpt, "stage1", result.model, None,
                               result.best_epoch, result.history,
                               rng_state=result.rng_state)
            log_path = os.path.join(args.out,
                                    f"train_log_stage1_seed{seed}.csv")
        else:
            s1_path = os.path.join(args.out, f"stage1_seed{seed}.npz")
            if not os.path.exists(s1_path):
                raise UsageError(f"stage-2 needs the stage-1 checkpoint "
                                 f"{s1_path}; run train --stage 1 first")
            manifest.add_input(s1_path)
            stage1 = tr.load_checkpoint(s1_path).spatial_model
            result = tr.train_stage2(md, stage1, train_r, valid_r,
                                     _temporal_cfg(cfg, panel), tcfg,
                                     log=print)
            ckpt = os.path.join(args.out, f"stage2_seed{seed}.npz")
            tr.save_checkpoint(ckpt, "stage2", stage1, result.model,
                               result.best_epoch, result.history,
                               rng_state=result.rng_state)
            log_path = os.path.join(args.out,
                                    f"train_log_stage2_seed{seed}.csv")
        _write_history(log_path, result.history)
        manifest.add_output(ckpt)
        manifest.add_output(log_path)
        print(f"train stage {args.stage} seed {seed}: best epoch "
              f"{result.best_epoch}, metric {result.best_metric:.6f}")


def cmd_predict(args, cfg, manifest) -> None:
    for seed in args.seeds:
        ckpt_path = os.path.join(args.out, f"stage2_seed{seed}.npz")
        if not os.path.exists(ckpt_path):
            raise UsageError(f"missing checkpoint {ckpt_path}; run train "
                             f"--stage 2 first")
        manifest.add_input(ckpt_path)
        ckpt = tr.load_checkpoint(ckpt_path)
        panel = _load_panel(cfg, args.out, manifest)
        md, (_, _, test_r) = _prepare(cfg, panel)
        rows = tr.predict_scores(ckpt.spatial_model, ckpt.temporal_model,
                                 md, test_r)
        header = tr.score_header(ckpt.temporal_model.cfg.top_k)
        out_path = os.path.join(args.out, f"predictions_seed{seed}.csv")
        write_csv(out_path, header, ([r[c] for c in header] for r in rows))
        manifest.add_output(out_path)
        print(f"predict seed {seed}: {len(rows)} rows -> {out_path}")


def cmd_ensemble(args, cfg, manifest) -> None:
    tables = []
    for seed in args.seeds:
        path = os.path.join(args.out, f"predictions_seed{seed}.csv")
        if not os.path.exists(path):
            raise UsageError(f"missing per-seed predictions {path}")
        manifest.add_input(path)
        tables.append(_read_score_rows(path))
    rows = tr.seed_ensemble(tables)
    out_path = os.path.join(args.out, "predictions_ensemble.csv")
    write_csv(out_path, ["date", "ticker", "score"],
              ([r["date"], r["ticker"], r["score"]] for r in rows))
    manifest.add_output(out_path)
    print(f"ensemble over seeds {args.seeds}: {len(rows)} rows")


def cmd_evaluate(args, cfg, manifest) -> None:
    scores_path = _scores_path(args, cfg, args.out)
    if not os.path.exists(scores_path):
        raise UsageError(f"score file {scores_path} not found")
    manifest.add_input(scores_path)
    panel = _load_panel(cfg, args.out, manifest)
    frames = _score_frames(_read_score_rows(scores_path))
    targets = _target_frames(panel)
    realized = {d: targets[d] for d in frames if d in targets}
    missing = set(frames) - set(realized)
    if missing:
        raise DataError(f"scored dates missing from panel: {sorted(missing)[:3]}")
    series, mean_ic, icir = ev.rank_ic(frames, realized)
    ic_path = os.path.join(args.out, "ic_daily.csv")
    write_csv(ic_path, ["date", "rank_ic", "n"],
              ((d, v, int(n)) for d, v, n in
               zip(series.dates, series.values, series.counts)))
    metrics_path = os.path.join(args.out, "metrics.csv")
    write_csv(metrics_path, ["metric", "value"],
              [["rank_ic", mean_ic], ["rank_icir", icir],
               ["n_dates", len(series)]])
    manifest.add_output(ic_path)
    manifest.add_output(metrics_path)
    print(f"evaluate: RankIC {mean_ic:.4f}, RankICIR {icir:.4f} "
          f"over {len(series)} dates")


def _backtest_cfg(cfg) -> bt.BacktestConfig:
    s = section(cfg, "backtest")
    return bt.BacktestConfig(top_k=int(s["top_k"]), n_drop=int(s["n_drop"]),
                             cost_buy_bps=float(s["cost_buy_bps"]),
                             cost_sell_bps=float(s["cost_sell_bps"]))


def cmd_backtest(args, cfg, manifest) -> None:
    scores_path = _scores_path(args, cfg, args.out)
    if not os.path.exists(scores_path):
        raise UsageError(f"score file {scores_path} not found")
    manifest.add_input(scores_path)
    panel = _load_panel(cfg, args.out, manifest)
    frames = _score_frames(_read_score_rows(scores_path))
    returns = _daily_close_returns(panel)
    result = bt.run_backtest(frames, returns, _backtest_cfg(cfg))
    daily_path = os.path.join(args.out, "daily.csv")
    write_csv(daily_path, ["date", "holdings_hash", "log_return", "turnover",
                           "cost"],
              ((d, bt.holdings_digest(h), g, to, c) for d, h, g, to, c in
               zip(result.dates, result.holdings, result.log_returns,
                   result.turnovers, result.costs)))
    summary_path = os.path.join(args.out, "summary.csv")
    write_csv(summary_path, ["metric", "value"],
              sorted(result.summary.items()))
    manifest.add_output(daily_path)
    manifest.add_output(summary_path)
    print(f"backtest: AR {result.summary['annualized_return']:.4f} "
          f"SR {result.summary['sharpe']:.4f} "
          f"MDD {result.summary['max_drawdown']:.4f}")


def cmd_sweep(args, cfg, manifest) -> None:
    scores_path = _scores_path(args, cfg, args.out)
    if not os.path.exists(scores_path):
        raise UsageError(f"score file {scores_path} not found")
    manifest.add_input(scores_path)
    panel = _load_panel(cfg, args.out, manifest)
    frames = _score_frames(_read_score_rows(scores_path))
    returns = _daily_close_returns(panel)
    bcfg = _backtest_cfg(cfg)
    if args.mode == "costs":
        rows = bt.sweep_costs(frames, returns, bcfg)
        header = ["regime", "cost_buy_bps", "cost_sell_bps",
                  "annualized_return", "max_drawdown", "sharpe",
                  "cumulative_return", "mean_turnover"]
    else:
        rows = bt.sweep_ndrop(frames, returns, bcfg)
        header = ["n_drop", "drop_fraction", "annualized_return",
                  "max_drawdown", "sharpe", "cumulative_return",
                  "mean_turnover"]
    out_path = os.path.join(args.out, "sweep.csv")
    write_csv(out_path, header, ([row[c] for c in header] for row in rows))
    manifest.add_output(out_path)
    print(f"sweep {args.mode}: {len(rows)} rows -> {out_path}")


def _assignment_history(rows: list[dict]) -> dict[str, dict[str, int]]:
    history: dict[str, dict[str, int]] = {}
    for r in rows:
        history.setdefault(r["date"], {})[r["ticker"]] = int(r["code_index"])
    return history


def cmd_analyze(args, cfg, manifest) -> None:
    scores_path = _scores_path(args, cfg, args.out)
    if not os.path.exists(scores_path):
        raise UsageError(f"score file {scores_path} not found; analyze needs "
                         f"per-seed predictions with code/gate columns")
    manifest.add_input(scores_path)
    rows = _read_score_rows(scores_path)
    if args.what in ("codes", "exposures") and "code_index" not in rows[0]:
        raise UsageError(f"{scores_path} lacks code_index; use a per-seed "
                         f"prediction file, not an ensemble")
    if args.what == "codes":
        history = _assignment_history(rows)
        horizons = [int(h) for h in
                    str(cfg["analysis.transition_horizons"]).split(",")]
        summary_rows = []
        for horizon in horizons:
            out = an.code_transition_matrix(history, horizon,
                                            int(cfg["analysis.top_codes"]))
            path = os.path.join(args.out, f"transitions_{horizon}.csv")
            write_csv(path, ["from_code", "to_code", "probability"],
                      ((out.codes[i], out.codes[j], out.matrix[i, j])
                       for i in range(len(out.codes))
                       for j in range(len(out.codes))
                       if out.matrix[i, j] > 0.0))
            manifest.add_output(path)
            summary_rows.append([horizon, out.persistence, out.entropy,
                                 len(out.codes)])
            print(f"analyze codes h={horizon}: persistence "
                  f"{out.persistence:.4f}, entropy {out.entropy:.4f}")
        path = os.path.join(args.out, "persistence.csv")
        write_csv(path, ["horizon_days", "persistence", "entropy", "n_codes"],
                  summary_rows)
        manifest.add_output(path)
    elif args.what == "exposures":
        panel = _load_panel(cfg, args.out, manifest)
        history = _assignment_history(rows)
        returns = _daily_close_returns(panel)
        factors = {panel.dates[t]: {name: float(panel.priors_daily[t, j])
                                    for j, name in enumerate(panel.prior_names)}
                   for t in range(panel.n_dates)
                   if np.isfinite(panel.priors_daily[t]).all()}
        exposures = an.code_factor_exposure(history, returns, factors,
                                            int(cfg["analysis.min_obs"]))
        path = os.path.join(args.out, "exposures.csv")
        out_rows = []
        for e in exposures:
            names = e.factors + [""] * (3 - len(e.factors))
            rhos = [f"{r}" for r in e.rhos] + [""] * (3 - len(e.rhos))
            out_rows.append([e.code, e.n_obs, *names, *rhos])
        write_csv(path, ["code", "n_obs", "f1", "f2", "f3",
                         "rho1", "rho2", "rho3"], out_rows)
        manifest.add_output(path)
        print(f"analyze exposures: {len(exposures)} codes with >= "
              f"{cfg['analysis.min_obs']} observations")
    else:  # experts
        gate_cols = sorted(c for c in rows[0] if c.startswith("gate_w"))
        if not gate_cols:
            raise UsageError(f"{scores_path} lacks gate weight columns")
        n_experts = int(cfg["temporal.n_experts"])
        dates = sorted({r["date"] for r in rows})
        d_idx = {d: i for i, d in enumerate(dates)}
        sums = np.zeros((len(dates), n_experts))
        counts = np.zeros(len(dates))
        for r in rows:
            i = d_idx[r["date"]]
            counts[i] += 1
            for j, col in enumerate(gate_cols, start=1):
                expert = int(r[f"expert_top{j}"])
                sums[i, expert] += float(r[col])
        activation = sums / counts[:, None]
        act_path = os.path.join(args.out, "expert_activation.csv")
        write_csv(act_path, ["date"] + [f"expert_{e}" for e in range(n_experts)],
                  ((dates[i], *activation[i]) for i in range(len(dates))))
        spikes = an.expert_spikes(activation, dates)
        spk_path = os.path.join(args.out, "spikes.csv")
        write_csv(spk_path, ["expert", "mean_activation", "n_spikes",
                             "spike_rate"],
                  ((e, spikes.expert_means[e], len(spikes.spike_dates[e]),
                    spikes.spike_rate[e]) for e in range(n_experts)))
        wx_path = os.path.join(args.out, "wilcoxon.csv")
        wx_rows = []
        for a in range(n_experts):
            for b in range(a + 1, n_experts):
                stat, p = an.wilcoxon_signed_rank(activation[:, a],
                                                  activation[:, b])
                wx_rows.append([a, b, stat, p, spikes.jaccard[a, b]])
        write_csv(wx_path, ["expert_a", "expert_b", "statistic", "p_value",
                            "jaccard"], wx_rows)
        for p in (act_path, spk_path, wx_path):
            manifest.add_output(p)
        print(f"analyze experts: mean pairwise Jaccard "
              f"{spikes.mean_pairwise_jaccard:.4f}")


# -- entry point --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prism-vq",
        description="Two-stage vector-quantized factor model pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="key = value file")
        p.add_argument("--seed", default="0", help="comma list of seeds")
        p.add_argument("--out", default="runs/default", help="artifact dir")
        p.add_argument("--market", choices=sorted(MARKET_PRESETS), default=None)
        p.add_argument("--set", action="append", default=[], metavar="K=V",
                       help="config override, repeatable (wins over file)")

    common(sub.add_parser("gen-data", help="emit a synthetic market"))
    p_train = sub.add_parser("train", help="fit one model stage")
    p_train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    common(p_train)
    common(sub.add_parser("predict", help="score the test range"))
    common(sub.add_parser("ensemble", help="average per-seed scores"))
    for name in ("evaluate", "backtest"):
        p = sub.add_parser(name)
        p.add_argument("--scores", default=None, help="score CSV (default: "
                       "ensemble, else first seed)")
        common(p)
    p_sweep = sub.add_parser("sweep", help="cost or rebalance-rate grids")
    p_sweep.add_argument("--mode", choices=("costs", "ndrop"), required=True)
    p_sweep.add_argument("--scores", default=None)
    common(p_sweep)
    p_an = sub.add_parser("analyze", help="interpretability reports")
    p_an.add_argument("--what", choices=("codes", "exposures", "experts"),
                      required=True)
    p_an.add_argument("--scores", default=None)
    common(p_an)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "predict": cmd_predict,
    "ensemble": cmd_ensemble,
    "evaluate": cmd_evaluate,
    "backtest": cmd_backtest,
    "sweep": cmd_sweep,
    "analyze": cmd_analyze,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.seeds = [int(s) for s in str(args.seed).split(",") if s != ""]
        if not args.seeds:
            raise UsageError("at least one seed required")
        overrides = {}
        for item in args.set:
            if "=" not in item:
                raise UsageError(f"--set needs KEY=VALUE, got {item!r}")
            key, val = item.split("=", 1)
            overrides[key.strip()] = val.strip()
        file_values = parse_config_file(args.config) if args.config else {}
        cfg = resolve_config(file_values, overrides, args.market)
        os.makedirs(args.out, exist_ok=True)
        manifest = RunManifest(args.command, args.config, cfg, args.seeds)
        COMMANDS[args.command](args, cfg, manifest)
        manifest.write(args.out)
        return 0
    except (UsageError, ConfigKeyError) as exc:
        print(f"error:usage: {exc}", file=sys.stderr)
        return 2
    except (IngestionError, DataError, bt.BacktestError) as exc:
        print(f"error:data: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError) as exc:
        print(f"error:config: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
