"""Two-stage training: optimizer, schedule, early stopping, freeze, checkpoints.

Batches are whole-date cross-sections with the date order shuffled each epoch.
Stage 1 optimizes the spatial multi-task objective; stage 2 trains the
temporal model against rank-normalized targets with every stage-1 parameter
(including the codebook) frozen and hash-checked.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .evaluation import spearman
from .panel import (NormalizationStats, PanelDataset, SplitSpec, cs_rank_norm,
                    fit_normalization, robust_zscore, split_indices,
                    standardize_priors)
from .spatial import SpatialConfig, SpatialModel, quantize, spatial_forward
from .temporal import TemporalConfig, TemporalModel, temporal_forward


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    max_epochs: int = 50
    clip_norm: float = 1.0
    patience: int = 15
    weight_decay: float = 0.01
    final_lr_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.clip_norm, self.max_epochs) <= 0:
            raise ValueError("rates and limits must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max epochs")


# -- optimizer -------------------------------------------------------------------

class AdamW:
    """Decoupled weight decay Adam (b1 0.9, b2 0.999, eps 1e-8)."""

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, named_params: list[tuple[str, Tensor]],
                 lr: float, weight_decay: float = 0.01):
        self.params = named_params
        self.lr = lr
        self.weight_decay = weight_decay
        self.m = {name: np.zeros_like(p.values) for name, p in named_params}
        self.v = {name: np.zeros_like(p.values) for name, p in named_params}
        self.t = 0
        self.skipped = 0
        self.lr_scale = 1.0

    def step(self) -> bool:
        """Apply one update; returns False (and counts) on non-finite grads."""
        grads = {}
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.values)
            if not np.isfinite(g).all():
                self.skipped += 1
                warnings.warn(f"skipping step {self.t + 1}: non-finite "
                              f"gradient in {name}")
                return False
            grads[name] = g
        self.t += 1
        lr = self.lr * self.lr_scale
        c1 = 1.0 - self.BETA1 ** self.t
        c2 = 1.0 - self.BETA2 ** self.t
        for name, p in self.params:
            g = grads[name]
            self.m[name] = self.BETA1 * self.m[name] + (1 - self.BETA1) * g
            self.v[name] = self.BETA2 * self.v[name] + (1 - self.BETA2) * g * g
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.values -= lr * (m_hat / (np.sqrt(v_hat) + self.EPS)
                              + self.weight_decay * p.values)
        return True

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients by max_norm/norm when the global L2 norm exceeds it."""
    if max_norm <= 0:
        raise ValueError("clip norm must be positive")
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def lr_schedule(epoch: int, max_epochs: int, final_fraction: float = 0.1) -> float:
    """Linear decay from 1.0 at epoch 0 to final_fraction at max_epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    frac = min(epoch, max_epochs) / max_epochs
    return 1.0 - (1.0 - final_fraction) * frac


class EarlyStopper:
    """Stop after ``patience`` consecutive non-improving epochs.

    ``mode`` is "min" (losses) or "max" (scores); improvements must be strict.
    """

    def __init__(self, patience: int, mode: str = "min"):
        if mode not in ("min", "max"):
            raise ValueError(f"unknown mode {mode!r}")
        self.patience = patience
        self.mode = mode
        self.best = math.inf if mode == "min" else -math.inf
        self.best_epoch = 0
        self.streak = 0
        self.epoch = 0

    def update(self, metric: float) -> bool:
        """Record one epoch's metric; returns True when training should stop."""
        self.epoch += 1
        improved = (not math.isnan(metric)
                    and (metric < self.best if self.mode == "min"
                         else metric > self.best))
        if improved:
            self.best = metric
            self.best_epoch = self.epoch
            self.streak = 0
            return False
        self.streak += 1
        return self.streak >= self.patience


# -- batch construction --------------------------------------------------------------

@dataclass
class ModelData:
    """Panel plus the train-range-normalized views the models consume."""

    panel: PanelDataset
    stats: NormalizationStats
    features: np.ndarray       # robust z-scored, NaN before first observation
    priors: np.ndarray         # standardized trailing windows
    lookback: int


@dataclass
class DateBatch:
    index: int
    date: str
    stock_idx: np.ndarray      # column indices into panel.tickers
    window: np.ndarray         # (N_u, T, C)
    f_p: np.ndarray            # (P,)
    targets_norm: np.ndarray   # (N_u, N_h) rank-normalized, NaN-masked
    targets_raw: np.ndarray    # (N_u, N_h)


def prepare_model_data(panel: PanelDataset, train_spec_view: PanelDataset,
                       lookback: int) -> ModelData:
    stats = fit_normalization(train_spec_view)
    return ModelData(panel=panel, stats=stats,
                     features=robust_zscore(panel.features, stats),
                     priors=standardize_priors(panel.priors, stats),
                     lookback=lookback)


def date_batch(md: ModelData, t: int, require_target: bool = True
               ) -> DateBatch | None:
    """Cross-section at date index t, or None when unusable.

    Usable stocks are members with a full trailing feature window; the date
    needs a defined prior window and (when ``require_target``) at least two
    defined main-horizon targets.
    """
    panel = md.panel
    if np.isnan(md.priors[t]).any():
        return None
    mask = panel.usable_mask(t, md.lookback)
    main = panel.main_horizon - 1
    if require_target:
        mask &= np.isfinite(panel.targets[t, :, main])
    idx = np.flatnonzero(mask)
    if len(idx) < 2:
        return None
    window = md.features[t - md.lookback + 1:t + 1, idx].transpose(1, 0, 2)
    raw = panel.targets[t, idx]
    norm = np.full_like(raw, np.nan)
    for h in range(raw.shape[1]):
        finite = np.isfinite(raw[:, h])
        if finite.sum() >= 2:
            norm[finite, h] = cs_rank_norm(raw[finite, h])
    return DateBatch(index=t, date=panel.dates[t], stock_idx=idx,
                     window=np.ascontiguousarray(window), f_p=md.priors[t],
                     targets_norm=norm, targets_raw=raw)


def usable_dates(md: ModelData, lo: int, hi: int,
                 require_target: bool = True) -> list[int]:
    """Date indices in [lo, hi] that yield a usable batch."""
    out = []
    panel = md.panel
    main = panel.main_horizon - 1
    for t in range(max(lo, md.lookback - 1), hi + 1):
        if np.isnan(md.priors[t]).any():
            continue
        mask = panel.usable_mask(t, md.lookback)
        if require_target:
            mask &= np.isfinite(panel.targets[t, :, main])
        if mask.sum() >= 2:
            out.append(t)
    return out


# -- freeze bookkeeping -----------------------------------------------------------------

def parameter_hash(model) -> str:
    """SHA-256 over parameter names and raw values, order-independent."""
    digest = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(p.values).tobytes())
    return digest.hexdigest()


def snapshot(model) -> dict[str, np.ndarray]:
    return {name: p.values.copy() for name, p in model.named_parameters()}


def restore(model, snap: dict[str, np.ndarray]) -> None:
    for name, p in model.named_parameters():
        p.values[...] = snap[name]


# -- training loops ------------------------------------------------------------------------

@dataclass
class StageResult:
    model: object
    history: list[dict]
    best_epoch: int
    best_metric: float
    skipped_steps: int
    epochs_run: int
    rng_state: dict | None = None


def train_stage1(md: ModelData, train_range: tuple[int, int],
                 valid_range: tuple[int, int], scfg: SpatialConfig,
                 tcfg: TrainConfig, log=None) -> StageResult:
    """Fit the structure-discovery stage; early stop on validation loss."""
    rng = np.random.default_rng(tcfg.seed)
    model = SpatialModel(scfg, rng)
    named = list(model.named_parameters())
    opt = AdamW(named, tcfg.learning_rate, tcfg.weight_decay)
    train_dates = usable_dates(md, *train_range)
    valid_dates = usable_dates(md, *valid_range)
    if not train_dates or not valid_dates:
        raise ValueError("no usable training or validation dates")

    stopper = EarlyStopper(tcfg.patience, "min")
    best_snap = snapshot(model)
    history = []
    for epoch in range(1, tcfg.max_epochs + 1):
        opt.lr_scale = lr_schedule(epoch - 1, tcfg.max_epochs,
                                   tcfg.final_lr_fraction)
        order = rng.permutation(len(train_dates))
        sums: dict[str, float] = {}
        for pos in order:
            batch = date_batch(md, train_dates[pos])
            opt.zero_grad()
            with ad.tape():
                out = spatial_forward(model, batch.window, batch.f_p,
                                      batch.targets_norm, training=True,
                                      rng=rng)
                ad.backward(out.loss)
            clip_global_norm([p for _, p in named], tcfg.clip_norm)
            opt.step()
            model.codebook.ema_update(out.assignment.indices,
                                      out.z.values, rng, scfg.ema_decay,
                                      scfg.dead_usage, scfg.dead_patience)
            for key, val in out.components.items():
                sums[key] = sums.get(key, 0.0) + val
        train_row = {k: v / len(train_dates) for k, v in sums.items()}
        val_loss = _validate_spatial(model, md, valid_dates)
        history.append({"epoch": epoch, "split": "train", **train_row,
                        "metric": float("nan")})
        history.append({"epoch": epoch, "split": "valid",
                        "total": val_loss, "metric": val_loss})
        if log:
            log(f"stage1 epoch {epoch}: train {train_row['total']:.4f} "
                f"valid {val_loss:.4f}")
        stop = stopper.update(val_loss)
        if stopper.best_epoch == epoch:
            best_snap = snapshot(model)
        if stop:
            break
    restore(model, best_snap)
    return StageResult(model=model, history=history,
                       best_epoch=stopper.best_epoch, best_metric=stopper.best,
                       skipped_steps=opt.skipped, epochs_run=len(history) // 2,
                       rng_state=rng.bit_generator.state)


def _validate_spatial(model: SpatialModel, md: ModelData,
                      dates: list[int]) -> float:
    total = 0.0
    for t in dates:
        batch = date_batch(md, t)
        out = spatial_forward(model, batch.window, batch.f_p,
                              batch.targets_norm, training=False)
        total += out.components["total"]
    return total / len(dates)


def stage1_codes(model: SpatialModel, md: ModelData, dates: list[int],
                 require_target: bool = True) -> dict[int, dict]:
    """Frozen stage-1 inference per date: code indices and quantized vectors."""
    cache = {}
    for t in dates:
        batch = date_batch(md, t, require_target=require_target)
        if batch is None:
            continue
        z = model.encode_cross_section(batch.window)
        assignment = quantize(z, model.codebook)
        cache[t] = {"batch": batch, "indices": assignment.indices,
                    "z_q": assignment.z_q.values.copy()}
    return cache


def train_stage2(md: ModelData, stage1: SpatialModel,
                 train_range: tuple[int, int], valid_range: tuple[int, int],
                 mcfg: TemporalConfig, tcfg: TrainConfig, log=None
                 ) -> StageResult:
    """Fit the loading-generation stage with stage 1 frozen.

    Early stopping maximizes the mean daily rank IC on the validation range;
    any mutation of a stage-1 parameter fails hard.
    """
    rng = np.random.default_rng(tcfg.seed + 1)
    stage1.codebook.freeze()
    for _, p in stage1.named_parameters():
        p.requires_grad = False
    frozen_hash = parameter_hash(stage1)

    model = TemporalModel(mcfg, rng)
    named = list(model.named_parameters())
    opt = AdamW(named, tcfg.learning_rate, tcfg.weight_decay)
    train_dates = usable_dates(md, *train_range)
    valid_dates = usable_dates(md, *valid_range)
    if not train_dates or not valid_dates:
        raise ValueError("no usable training or validation dates")
    cache = stage1_codes(stage1, md, train_dates + valid_dates)
    main = md.panel.main_horizon - 1

    stopper = EarlyStopper(tcfg.patience, "max")
    best_snap = snapshot(model)
    history = []
    for epoch in range(1, tcfg.max_epochs + 1):
        opt.lr_scale = lr_schedule(epoch - 1, tcfg.max_epochs,
                                   tcfg.final_lr_fraction)
        order = rng.permutation(len(train_dates))
        sums: dict[str, float] = {}
        for pos in order:
            t = train_dates[pos]
            entry = cache[t]
            batch = entry["batch"]
            opt.zero_grad()
            with ad.tape():
                out = temporal_forward(model, batch.window, entry["z_q"],
                                       batch.f_p, batch.targets_norm[:, main],
                                       mode="train", rng=rng)
                ad.backward(out.loss)
            clip_global_norm([p for _, p in named], tcfg.clip_norm)
            opt.step()
            for key, val in out.components.items():
                sums[key] = sums.get(key, 0.0) + val
        train_row = {k: v / len(train_dates) for k, v in sums.items()}
        ics = []
        for t in valid_dates:
            entry = cache[t]
            batch = entry["batch"]
            out = temporal_forward(model, batch.window, entry["z_q"],
                                   batch.f_p, batch.targets_norm[:, main],
                                   mode="infer")
            realized = batch.targets_raw[:, main]
            ok = np.isfinite(realized)
            if ok.sum() >= 2:
                ic = spearman(out.score.values[ok], realized[ok])
                if not math.isnan(ic):
                    ics.append(ic)
        val_ic = float(np.mean(ics)) if ics else float("nan")
        history.append({"epoch": epoch, "split": "train", **train_row,
                        "metric": float("nan")})
        history.append({"epoch": epoch, "split": "valid",
                        "total": float("nan"), "metric": val_ic})
        if log:
            log(f"stage2 epoch {epoch}: train {train_row['total']:.4f} "
                f"valid IC {val_ic:.4f}")
        if parameter_hash(stage1) != frozen_hash:
            raise RuntimeError("frozen stage-1 parameters changed during "
                               "stage-2 training")
        stop = stopper.update(val_ic)
        if stopper.best_epoch == epoch:
            best_snap = snapshot(model)
        if stop:
            break
    restore(model, best_snap)
    if parameter_hash(stage1) != frozen_hash:
        raise RuntimeError("frozen stage-1 parameters changed during "
                           "stage-2 training")
    return StageResult(model=model, history=history,
                       best_epoch=stopper.best_epoch, best_metric=stopper.best,
                       skipped_steps=opt.skipped, epochs_run=len(history) // 2,
                       rng_state=rng.bit_generator.state)


# -- prediction --------------------------------------------------------------------------------

def predict_scores(stage1: SpatialModel, stage2: TemporalModel, md: ModelData,
                   date_range: tuple[int, int]) -> list[dict]:
    """Deterministic inference rows over a date range.

    Each row carries the score, its pricing decomposition, the code index,
    and the selected experts with their gate weights.
    """
    dates = usable_dates(md, *date_range, require_target=False)
    cache = stage1_codes(stage1, md, dates, require_target=False)
    k = stage2.cfg.top_k
    rows = []
    for t in dates:
        if t not in cache:
            continue
        entry = cache[t]
        batch = entry["batch"]
        z_q = ad.constant(entry["z_q"])
        h_temp = stage2.temporal_encode(batch.window, z_q)
        u = stage2.fuse(h_temp, z_q)
        gating = stage2.gate(z_q, mode="infer")
        m = stage2.experts_forward(u, gating)
        triple = stage2.loading_head(h_temp, m)
        score, prior_term, latent_term = stage2.predict_return(
            triple, ad.constant(batch.f_p), z_q)
        for pos, col in enumerate(batch.stock_idx):
            row = {"date": batch.date,
                   "ticker": md.panel.tickers[col],
                   "score": float(score.values[pos]),
                   "alpha": float(triple.alpha.values[pos]),
                   "prior_term": float(prior_term.values[pos]),
                   "latent_term": float(latent_term.values[pos]),
                   "code_index": int(entry["indices"][pos])}
            for j in range(k):
                e = int(gating.selected[pos, j])
                row[f"expert_top{j + 1}"] = e
                row[f"gate_w{j + 1}"] = float(gating.weights.values[pos, e])
            rows.append(row)
    return rows


def score_header(top_k: int) -> list[str]:
    cols = ["date", "ticker", "score", "alpha", "prior_term", "latent_term",
            "code_index"]
    cols += [f"expert_top{j + 1}" for j in range(top_k)]
    cols += [f"gate_w{j + 1}" for j in range(top_k)]
    return cols


# -- checkpointing -------------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def _cfg_dict(cfg) -> dict:
    return {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
            if f.init}


def save_checkpoint(path: str, stage: str, spatial_model: SpatialModel | None,
                    temporal_model: TemporalModel | None, epoch: int,
                    metric_history: list[dict],
                    rng_state: dict | None = None) -> None:
    """Versioned npz checkpoint; arrays under 'spatial/<name>' and
    'temporal/<name>', codebook statistics, and a JSON metadata blob."""
    arrays: dict[str, np.ndarray] = {}
    meta = {"version": CHECKPOINT_VERSION, "stage": stage, "epoch": epoch,
            "metric_history": metric_history, "rng_state": rng_state}
    if spatial_model is not None:
        for name, p in spatial_model.named_parameters():
            arrays[f"spatial/{name}"] = p.values
        arrays["spatial_state/ema_usage"] = spatial_model.codebook.ema_usage
        arrays["spatial_state/dead_streak"] = spatial_model.codebook.dead_streak
        meta["spatial_cfg"] = _cfg_dict(spatial_model.cfg)
        meta["codebook_frozen"] = spatial_model.codebook.frozen
    if temporal_model is not None:
        for name, p in temporal_model.named_parameters():
            arrays[f"temporal/{name}"] = p.values
        meta["temporal_cfg"] = _cfg_dict(temporal_model.cfg)
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


@dataclass
class Checkpoint:
    stage: str
    epoch: int
    spatial_model: SpatialModel | None
    temporal_model: TemporalModel | None
    metric_history: list[dict]
    rng_state: dict | None = None


def load_checkpoint(path: str) -> Checkpoint:
    data = np.load(path)
    meta = json.loads(bytes(data["__meta__"]).decode())
    if meta["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta['version']}")
    spatial_model = None
    temporal_model = None
    if "spatial_cfg" in meta:
        cfg = SpatialConfig(**meta["spatial_cfg"])
        spatial_model = SpatialModel(cfg, np.random.default_rng(0))
        for name, p in spatial_model.named_parameters():
            p.values[...] = data[f"spatial/{name}"]
        spatial_model.codebook.ema_usage = data["spatial_state/ema_usage"].copy()
        spatial_model.codebook.dead_streak = data["spatial_state/dead_streak"].copy()
        if meta.get("codebook_frozen"):
            spatial_model.codebook.freeze()
    if "temporal_cfg" in meta:
        cfg = TemporalConfig(**meta["temporal_cfg"])
        temporal_model = TemporalModel(cfg, np.random.default_rng(0))
        for name, p in temporal_model.named_parameters():
            p.values[...] = data[f"temporal/{name}"]
    return Checkpoint(stage=meta["stage"], epoch=meta["epoch"],
                      spatial_model=spatial_model,
                      temporal_model=temporal_model,
                      metric_history=meta["metric_history"],
                      rng_state=meta.get("rng_state"))


# -- ensembling -------------------------------------------------------------------------------------

def seed_ensemble(score_tables: list[list[dict]]) -> list[dict]:
    """Average per-seed scores by (date, ticker); keys must align exactly."""
    if not score_tables:
        raise ValueError("no score tables given")
    keysets = [set((r["date"], r["ticker"]) for r in tab)
               for tab in score_tables]
    base = keysets[0]
    for i, ks in enumerate(keysets[1:], start=2):
        if ks != base:
            missing = sorted(base ^ ks)[:5]
            raise ValueError(f"seed file {i} key mismatch, e.g. {missing}")
    acc: dict[tuple[str, str], float] = {}
    for tab in score_tables:
        for r in tab:
            key = (r["date"], r["ticker"])
            acc[key] = acc.get(key, 0.0) + float(r["score"])
    n = len(score_tables)
    return [{"date": d, "ticker": tk, "score": s / n}
            for (d, tk), s in sorted(acc.items())]
