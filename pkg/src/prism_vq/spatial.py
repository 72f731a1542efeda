"""Stage-1 model: cross-sectional structure discovery through vector quantization.

Per-stock feature windows are instance-normalized, GRU-encoded, and mixed by a
cross-asset attention block; the resulting embeddings snap to a learnable
codebook. Auxiliary reconstruction and multi-horizon prediction heads, plus a
codebook contrastive term, regularize the discrete codes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import layers as ly
from .layers import (AttentionConfig, ConfigError, EncoderBlock, GRU, Linear,
                     Module)


@dataclass
class SpatialConfig:
    n_features: int
    lookback: int = 20
    latent_dim: int = 128          # d_s
    codebook_size: int = 512
    heads: int = 2
    dropout: float = 0.1
    decoder_channels: int = 128    # hidden width of the upsampling decoder
    decoder_base_len: int = 5      # coarse sequence length before upsampling
    n_horizons: int = 9
    n_priors: int = 13
    commit_weight: float = 0.25
    contra_weight: float = 1.0
    pred_weight: float = 1e-4
    temperature: float = 0.07
    ema_decay: float = 0.99
    dead_usage: float = 1.0        # usage level below which a code counts as dead
    dead_patience: int = 100       # consecutive dead batches before re-anchoring
    ffn_dim: int = field(init=False)
    n_upsample: int = field(init=False)

    def __post_init__(self):
        if self.commit_weight < 0 or self.contra_weight < 0 or self.pred_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        self.ffn_dim = 2 * self.latent_dim
        ratio = self.lookback / self.decoder_base_len
        k = round(np.log2(ratio))
        if 2 ** k != ratio:
            raise ConfigError(
                f"lookback/base_len = {ratio} must be a power of two")
        self.n_upsample = int(k)


# -- reversible instance normalization ----------------------------------------

def revin_normalize(x: np.ndarray) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Per-sample, per-channel normalization over the time axis (floor 1e-5)."""
    mean = x.mean(axis=-2, keepdims=True)
    std = np.maximum(x.std(axis=-2, keepdims=True), 1e-5)
    return (x - mean) / std, (mean, std)


def revin_denormalize(xh: np.ndarray, stats) -> np.ndarray:
    mean, std = stats
    return xh * std + mean


# -- codebook -------------------------------------------------------------------

class Codebook(Module):
    """K x d_s codeword dictionary with EMA usage tracking and dead-code reset."""

    def __init__(self, size: int, dim: int, rng: np.random.Generator):
        self.codewords = ad.parameter(
            rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim)))
        self.ema_usage = np.zeros(size)
        self.dead_streak = np.zeros(size, dtype=int)
        self.frozen = False

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    def nearest(self, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Indices and squared distances of the nearest codeword per row.

        Ties break toward the lowest index.
        """
        c = self.codewords.values
        sq = ((z * z).sum(axis=1, keepdims=True)
              - 2.0 * z @ c.T + (c * c).sum(axis=1))
        idx = sq.argmin(axis=1)
        return idx, np.maximum(sq[np.arange(len(z)), idx], 0.0)

    def freeze(self) -> None:
        self.frozen = True
        self.codewords.requires_grad = False

    def ema_update(self, indices: np.ndarray, batch_z: np.ndarray,
                   rng: np.random.Generator, decay: float, dead_usage: float,
                   dead_patience: int) -> list[int]:
        """Decay usage toward this batch's counts; re-anchor persistent dead codes.

        Returns the indices that were re-initialized.
        """
        if self.frozen:
            raise RuntimeError("EMA update on a frozen codebook")
        counts = np.bincount(indices, minlength=self.size).astype(float)
        self.ema_usage = decay * self.ema_usage + (1.0 - decay) * counts
        dead = self.ema_usage < dead_usage
        self.dead_streak = np.where(dead, self.dead_streak + 1, 0)
        reset = np.flatnonzero(self.dead_streak >= dead_patience)
        for k in reset:
            pick = rng.integers(0, len(batch_z))
            self.codewords.values[k] = batch_z[pick]
            self.dead_streak[k] = 0
        return list(reset)

    def perplexity(self, indices: np.ndarray) -> float:
        """exp(entropy) of the batch assignment distribution."""
        p = np.bincount(indices, minlength=self.size) / max(len(indices), 1)
        nz = p[p > 0]
        return float(np.exp(-(nz * np.log(nz)).sum()))


@dataclass
class CodeAssignment:
    indices: np.ndarray      # (N,) code index per stock
    z_q: Tensor              # (N, d_s) codeword rows (grads reach the codebook)
    distances: np.ndarray    # (N,) squared distance to the assigned codeword


def quantize(z: Tensor, codebook: Codebook) -> CodeAssignment:
    idx, dist = codebook.nearest(z.values)
    z_q = ad.take(codebook.codewords, idx)
    return CodeAssignment(indices=idx, z_q=z_q, distances=dist)


# -- decoder and auxiliary head ---------------------------------------------------

class UpsampleBlock(Module):
    """Channel expansion -> depth-to-length shuffle -> FiLM -> transposed-conv skip."""

    def __init__(self, channels: int, n_priors: int, rng: np.random.Generator):
        self.expand = ad.parameter(ly.init_uniform(rng, channels,
                                                   (2 * channels, channels)))
        self.expand_bias = ad.parameter(np.zeros(2 * channels))
        self.film_lin = Linear(n_priors, 2 * channels, rng)
        self.skip_w = [ad.parameter(ly.init_uniform(rng, 4 * channels,
                                                    (channels, channels)))
                       for _ in range(4)]
        self.skip_b = ad.parameter(np.zeros(channels))
        self.channels = channels

    def __call__(self, x: Tensor, f_p: Tensor) -> Tensor:
        e = ad.gelu(ad.add(ad.channel_map(x, self.expand),
                           ad.reshape(self.expand_bias, (1, -1, 1))))
        up = ly.pixel_shuffle_1d(e, 2)
        mod = self.film_lin(f_p)
        gamma = mod[:self.channels]
        beta = mod[self.channels:]
        cond = ly.film(up, gamma, beta)
        skip = ly.conv1d_transpose(x, self.skip_w, self.skip_b, stride=2, padding=1)
        return ad.add(cond, skip)


class FilmUpsampleDecoder(Module):
    """Reconstruct a (N, T, C) window from codes, conditioned on prior factors."""

    def __init__(self, cfg: SpatialConfig, rng: np.random.Generator):
        H, T0 = cfg.decoder_channels, cfg.decoder_base_len
        self.cfg = cfg
        self.w_in = Linear(cfg.latent_dim, H * T0, rng)
        self.blocks = [UpsampleBlock(H, cfg.n_priors, rng)
                       for _ in range(cfg.n_upsample)]
        self.w_out = ad.parameter(ly.init_uniform(rng, H, (cfg.n_features, H)))
        self.b_out = ad.parameter(np.zeros(cfg.n_features))

    def __call__(self, z_q: Tensor, f_p: Tensor) -> Tensor:
        H, T0 = self.cfg.decoder_channels, self.cfg.decoder_base_len
        n = z_q.shape[0]
        x = ad.reshape(ad.gelu(self.w_in(z_q)), (n, H, T0))
        for block in self.blocks:
            x = block(x, f_p)
        out = ad.add(ad.channel_map(x, self.w_out),
                     ad.reshape(self.b_out, (1, -1, 1)))
        return ad.transpose(out, (0, 2, 1))  # (N, T, C)


class HorizonHead(Module):
    """Recurrent multi-horizon return head seeded from [code; priors].

    A two-layer MLP produces the initial hidden state; a learnable start token
    feeds the first cell step and each scalar prediction is projected back as
    the next step's input.
    """

    def __init__(self, cfg: SpatialConfig, rng: np.random.Generator):
        d = cfg.latent_dim
        self.mlp1 = Linear(d + cfg.n_priors, d, rng)
        self.mlp2 = Linear(d, d, rng)
        self.cell = GRU(d, d, rng)
        self.start = ad.parameter(np.zeros(d))
        self.out = Linear(d, 1, rng)
        self.feed = Linear(1, d, rng)
        self.n_horizons = cfg.n_horizons

    def __call__(self, z_q: Tensor, f_p: Tensor) -> Tensor:
        n = z_q.shape[0]
        fp_rows = ad.reshape(ad.mul(ad.constant(np.ones((n, 1))),
                                    ad.reshape(f_p, (1, -1))), (n, f_p.shape[0]))
        h = self.mlp2(ad.gelu(self.mlp1(ad.concat([z_q, fp_rows], axis=1))))
        x = ad.mul(ad.constant(np.ones((n, 1))), ad.reshape(self.start, (1, -1)))
        outs = []
        for _ in range(self.n_horizons):
            h = self.cell.step(x, h)
            y = self.out(h)           # (N, 1)
            outs.append(y)
            x = self.feed(y)
        return ad.concat(outs, axis=1)  # (N, N_h)


# -- model ------------------------------------------------------------------------

class SpatialModel(Module):
    def __init__(self, cfg: SpatialConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.gru = GRU(cfg.n_features, cfg.latent_dim, rng)
        self.encoder = EncoderBlock(
            AttentionConfig(dim=cfg.latent_dim, heads=cfg.heads,
                            ffn_dim=cfg.ffn_dim, dropout=cfg.dropout), rng)
        self.codebook = Codebook(cfg.codebook_size, cfg.latent_dim, rng)
        self.decoder = FilmUpsampleDecoder(cfg, rng)
        self.horizon_head = HorizonHead(cfg, rng)

    def encode_cross_section(self, window: np.ndarray, training: bool = False,
                             rng: np.random.Generator | None = None) -> Tensor:
        """(N, T, C) raw window -> (N, d_s) context-mixed embeddings.

        Stocks form a set: the attention block runs without positions, so the
        output is permutation-equivariant in the stock axis.
        """
        xh, _ = revin_normalize(window)
        h = self.gru(xh)
        return self.encoder(h, training=training, rng=rng)


# -- losses -----------------------------------------------------------------------

def vq_loss(z: Tensor, z_q: Tensor, commit_weight: float) -> Tensor:
    """Codebook + commitment pull, mean over stocks.

    The first term moves codewords toward frozen encoder outputs; the second
    moves the encoder toward frozen codewords.
    """
    d1 = ad.sub(ad.stop_gradient(z), z_q)
    d2 = ad.sub(z, ad.stop_gradient(z_q))
    t1 = ad.tmean(ad.tsum(ad.mul(d1, d1), axis=1))
    t2 = ad.tmean(ad.tsum(ad.mul(d2, d2), axis=1))
    return ad.add(t1, ad.mul(ad.constant(commit_weight), t2))


def _pairwise_distance(z: Tensor, codewords: Tensor) -> Tensor:
    """(N, K) Euclidean distances, differentiable on both sides."""
    zz = ad.tsum(ad.mul(z, z), axis=1, keepdims=True)
    cc = ad.tsum(ad.mul(codewords, codewords), axis=1)
    cross = ad.matmul(z, ad.transpose(codewords, (1, 0)))
    sq = ad.add(ad.sub(zz, ad.mul(ad.constant(2.0), cross)), cc)
    return ad.tsqrt(ad.add(sq, ad.constant(1e-12)))


def contrastive_loss(z: Tensor, codewords: Tensor, indices: np.ndarray,
                     temperature: float) -> Tensor:
    """Softmax classification of each embedding onto its assigned codeword.

    Similarity is the negative Euclidean distance scaled by the temperature;
    a stable log-sum-exp keeps small temperatures usable.
    """
    logits = ad.mul(_pairwise_distance(z, codewords),
                    ad.constant(-1.0 / temperature))
    shift = ad.constant(logits.values.max(axis=1, keepdims=True))
    lse = ad.add(ad.tlog(ad.tsum(ad.texp(ad.sub(logits, shift)),
                                 axis=1, keepdims=True)), shift)
    picked = ad.take(logits, (np.arange(len(indices)), indices))
    return ad.tmean(ad.sub(ad.reshape(lse, (-1,)), picked))


def masked_mse(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over the finite entries of ``target``."""
    mask = np.isfinite(target)
    tgt = ad.constant(np.where(mask, target, 0.0))
    w = ad.constant(mask.astype(float))
    diff = ad.mul(ad.sub(pred, tgt), w)
    count = max(int(mask.sum()), 1)
    return ad.div(ad.tsum(ad.mul(diff, diff)), ad.constant(float(count)))


@dataclass
class SpatialBatchOutput:
    loss: Tensor
    components: dict[str, float]
    assignment: CodeAssignment
    z: Tensor


def spatial_forward(model: SpatialModel, window: np.ndarray, f_p: np.ndarray,
                    targets: np.ndarray, training: bool = False,
                    rng: np.random.Generator | None = None) -> SpatialBatchOutput:
    """Full multi-task objective on one date's cross-section.

    ``window`` is (N, T, C) raw features, ``f_p`` the standardized prior
    vector for the date, ``targets`` the (N, N_h) rank-normalized forward
    returns (NaN allowed and masked out).
    """
    cfg = model.cfg
    z = model.encode_cross_section(window, training=training, rng=rng)
    assignment = quantize(z, model.codebook)
    z_st = ad.straight_through(z, assignment.z_q)

    fp_t = ad.constant(f_p)
    xh, _ = revin_normalize(window)
    recon = model.decoder(z_st, fp_t)
    rdiff = ad.sub(recon, ad.constant(xh))
    n = window.shape[0]
    recon_l = ad.tmean(ad.tsum(ad.reshape(ad.mul(rdiff, rdiff), (n, -1)), axis=1))

    vq_l = vq_loss(z, assignment.z_q, cfg.commit_weight)
    contra_l = contrastive_loss(z, model.codebook.codewords, assignment.indices,
                                cfg.temperature)
    pred = model.horizon_head(z_st, fp_t)
    pred_l = masked_mse(pred, targets)

    total = ad.add(ad.add(recon_l, vq_l),
                   ad.add(ad.mul(ad.constant(cfg.contra_weight), contra_l),
                          ad.mul(ad.constant(cfg.pred_weight), pred_l)))
    comps = {"recon": float(recon_l.values), "vq": float(vq_l.values),
             "contra": float(contra_l.values), "pred": float(pred_l.values),
             "total": float(total.values)}
    return SpatialBatchOutput(loss=total, components=comps,
                              assignment=assignment, z=z)
