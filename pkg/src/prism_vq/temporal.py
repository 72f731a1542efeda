"""Stage-2 model: structure-conditioned dynamic factor loadings.

A temporal Transformer with rotary positions summarizes each stock's feature
window behind a prepended structure token (the stock's frozen code). Routing
over a bank of expert MLPs depends only on the code; experts modulate
base loadings derived from the temporal summary, and the pricing equation
combines prior-factor and learned-factor terms into a ranking score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from . import layers as ly
from .layers import (AttentionConfig, ConfigError, EncoderBlock, LayerNorm,
                     Linear, Module)


@dataclass
class TemporalConfig:
    n_features: int
    lookback: int = 20
    latent_dim: int = 128        # d_s of the frozen stage-1 codes
    temporal_dim: int = 64       # d_t
    heads: int = 2
    ffn_dim: int = 128
    dropout: float = 0.1
    n_experts: int = 2
    top_k: int = 1
    expert_dim: int = 64         # d_moe
    n_priors: int = 13
    trend_window: int = 5
    balance_weight: float = 1e-2
    loading_penalty: float = 1e-4

    def __post_init__(self):
        if not 1 <= self.top_k <= self.n_experts:
            raise ConfigError(
                f"top_k {self.top_k} outside [1, {self.n_experts}]")
        if self.trend_window < 1 or self.trend_window % 2 == 0:
            raise ConfigError("trend window must be odd and >= 1")
        if self.balance_weight < 0 or self.loading_penalty < 0:
            raise ConfigError("loss weights must be non-negative")


def trend_seasonal_decompose(x: np.ndarray, window: int
                             ) -> tuple[np.ndarray, np.ndarray]:
    """Centered moving average over edge-replicated padding; residual seasonal.

    ``x`` is (..., T, C); the two parts sum back to ``x`` exactly.
    """
    if window < 1 or window % 2 == 0:
        raise ConfigError("trend window must be odd and >= 1")
    half = window // 2
    pad_width = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    padded = np.pad(x, pad_width, mode="edge")
    trend = _moving_average(padded, window, x.ndim)
    return trend, x - trend


def _moving_average(padded: np.ndarray, window: int, ndim: int) -> np.ndarray:
    # cumulative-sum sliding mean along the time axis (second to last)
    axis = ndim - 2
    cs = np.cumsum(padded, axis=axis)
    zeros_shape = list(padded.shape)
    zeros_shape[axis] = 1
    cs = np.concatenate([np.zeros(zeros_shape), cs], axis=axis)
    lo = [slice(None)] * ndim
    hi = [slice(None)] * ndim
    hi[axis] = slice(window, None)
    lo[axis] = slice(None, -window)
    return (cs[tuple(hi)] - cs[tuple(lo)]) / window


@dataclass
class GatingOutput:
    selected: np.ndarray       # (N, k) expert indices, ascending score order broken low
    weights: Tensor            # (N, M_e) sparse mixture weights
    mu: Tensor                 # (N, M_e) gate means
    sigma: Tensor              # (N, M_e) gate scales
    logits: Tensor             # (N, M_e) pre-softmax logits


@dataclass
class LoadingTriple:
    alpha: Tensor              # (N,)
    beta_prior: Tensor         # (N, P)
    beta_latent: Tensor        # (N, d_s)


class Expert(Module):
    """Lightweight two-layer MLP mapping fused input to the modulation space."""

    def __init__(self, in_dim: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(in_dim, hidden, rng)
        self.lin2 = Linear(hidden, hidden, rng)

    def __call__(self, u: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None,
                 dropout: float = 0.0) -> Tensor:
        h = ad.gelu(self.lin1(u))
        if training and dropout > 0.0:
            h = ad.dropout(h, dropout, rng, training)
        return self.lin2(h)


class TemporalModel(Module):
    def __init__(self, cfg: TemporalConfig, rng: np.random.Generator):
        self.cfg = cfg
        d_t, d_s, d_m = cfg.temporal_dim, cfg.latent_dim, cfg.expert_dim
        self.proj_seasonal = Linear(cfg.n_features, d_t, rng)
        self.proj_trend = Linear(cfg.n_features, d_t, rng)
        self.proj_code = Linear(d_s, d_t, rng)
        self.encoder = EncoderBlock(
            AttentionConfig(dim=d_t, heads=cfg.heads, ffn_dim=cfg.ffn_dim,
                            dropout=cfg.dropout, rope=True), rng)
        self.ln_temporal = LayerNorm(d_t)
        self.ln_code = LayerNorm(d_s)
        self.fuse_in = Linear(d_t + d_s, d_t, rng)
        self.fuse_a = ad.parameter(ly.init_uniform(rng, d_t, (d_t, d_t)))
        self.fuse_b = ad.parameter(ly.init_uniform(rng, d_t, (d_t, d_t)))
        self.fuse_o = ad.parameter(ly.init_uniform(rng, d_t, (d_t, d_t)))
        self.gate_mu = Linear(d_s, cfg.n_experts, rng)
        self.gate_sigma = Linear(d_s, cfg.n_experts, rng)
        self.experts = [Expert(d_t, d_m, rng) for _ in range(cfg.n_experts)]
        self.base_prior = Linear(d_t, cfg.n_priors, rng, bias=False)
        self.base_latent = Linear(d_t, d_s, rng, bias=False)
        self.mod_prior = Linear(d_m, 2 * cfg.n_priors, rng)
        self.mod_latent = Linear(d_m, 2 * d_s, rng)
        self.alpha_head = ad.parameter(ly.init_uniform(rng, d_m, (d_m,)))
        self.factor_map = Linear(d_s, d_s, rng)

    # -- encoding ------------------------------------------------------------

    def temporal_encode(self, window: np.ndarray, z_q: Tensor,
                        training: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
        """(N, T, C) window + (N, d_s) codes -> (N, d_t) structure-token summary."""
        trend, seasonal = trend_seasonal_decompose(window, self.cfg.trend_window)
        xt = ad.add(self.proj_trend(ad.constant(trend)),
                    self.proj_seasonal(ad.constant(seasonal)))  # (N, T, d_t)
        token = ad.reshape(self.proj_code(z_q), (z_q.shape[0], 1, -1))
        seq = ad.concat([token, xt], axis=1)  # (N, T+1, d_t)
        out = self.encoder(seq, positions=np.arange(seq.shape[1]),
                           training=training, rng=rng)
        return ad.take(out, (slice(None), 0))  # structure-token position

    def fuse(self, h_temp: Tensor, z_q: Tensor, training: bool = False,
             rng: np.random.Generator | None = None) -> Tensor:
        """Concat-normalized projection followed by a gated residual block."""
        v = self.fuse_in(ad.concat([self.ln_temporal(h_temp),
                                    self.ln_code(z_q)], axis=1))
        a = ad.matmul(v, self.fuse_a)
        b = ad.matmul(v, self.fuse_b)
        gated = ad.matmul(ad.mul(a, ad.gelu(b)), self.fuse_o)
        if training and self.cfg.dropout > 0.0:
            gated = ad.dropout(gated, self.cfg.dropout, rng, training)
        return ad.add(v, gated)

    # -- routing ---------------------------------------------------------------

    def gate(self, z_q: Tensor, mode: str,
             rng: np.random.Generator | None = None) -> GatingOutput:
        """Code-conditioned stochastic top-k routing.

        Training samples pre-activations by reparameterization; inference uses
        the means. The k largest logits win (ties to the lower index) and the
        mixture weights are a softmax restricted to the winners.
        """
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown gate mode {mode!r}")
        k, M = self.cfg.top_k, self.cfg.n_experts
        zt = self.ln_code(z_q)
        mu = self.gate_mu(zt)
        sigma = ad.softplus(self.gate_sigma(zt))
        if mode == "train":
            logits = ad.gaussian_reparameterize(mu, sigma, rng)
        else:
            logits = mu
        order = np.argsort(-logits.values, axis=1, kind="stable")
        selected = np.sort(order[:, :k], axis=1)
        mask = np.full(logits.values.shape, -1e30)
        np.put_along_axis(mask, selected, 0.0, axis=1)
        weights = ad.softmax(ad.add(logits, ad.constant(mask)), axis=1)
        return GatingOutput(selected=selected, weights=weights, mu=mu,
                            sigma=sigma, logits=logits)

    # -- experts ------------------------------------------------------------------

    def experts_forward(self, u: Tensor, gating: GatingOutput,
                        training: bool = False,
                        rng: np.random.Generator | None = None) -> Tensor:
        """Sparse mixture: only experts somebody selected are evaluated."""
        n = u.shape[0]
        total = None
        for j in range(self.cfg.n_experts):
            rows = np.flatnonzero((gating.selected == j).any(axis=1))
            if len(rows) == 0:
                continue
            out_j = self.experts[j](ad.take(u, (rows,)), training=training,
                                    rng=rng, dropout=self.cfg.dropout)
            w_j = ad.reshape(ad.take(gating.weights, (rows, np.full(len(rows), j))),
                             (len(rows), 1))
            scatter = np.zeros((n, len(rows)))
            scatter[rows, np.arange(len(rows))] = 1.0
            contrib = ad.matmul(ad.constant(scatter), ad.mul(w_j, out_j))
            total = contrib if total is None else ad.add(total, contrib)
        if total is None:
            raise ConfigError("gating selected no experts")
        return total

    # -- heads -----------------------------------------------------------------------

    def loading_head(self, h_temp: Tensor, m: Tensor) -> LoadingTriple:
        """Base loadings from the temporal summary, modulated by the expert mix."""
        P, d_s = self.cfg.n_priors, self.cfg.latent_dim
        base_p = self.base_prior(h_temp)
        base_l = self.base_latent(h_temp)
        mod_p = self.mod_prior(m)
        mod_l = self.mod_latent(m)
        beta_p = ad.add(ad.mul(mod_p[:, :P], base_p), mod_p[:, P:])
        beta_l = ad.add(ad.mul(mod_l[:, :d_s], base_l), mod_l[:, d_s:])
        alpha = ad.matmul(m, self.alpha_head)
        return LoadingTriple(alpha=alpha, beta_prior=beta_p, beta_latent=beta_l)

    def predict_return(self, triple: LoadingTriple, f_p: Tensor, z_q: Tensor
                       ) -> tuple[Tensor, Tensor, Tensor]:
        """Pricing equation: score = alpha + beta_p . f_p + beta_l . f_l.

        Returns (score, prior term, latent term) so analyses can decompose it.
        """
        f_l = self.factor_map(z_q)
        prior_term = ad.tsum(ad.mul(triple.beta_prior,
                                    ad.reshape(f_p, (1, -1))), axis=1)
        latent_term = ad.tsum(ad.mul(triple.beta_latent, f_l), axis=1)
        score = ad.add(ad.add(triple.alpha, prior_term), latent_term)
        return score, prior_term, latent_term


def load_balance_loss(gating: GatingOutput, n_experts: int) -> Tensor:
    """Selection-frequency times mean-weight penalty, scaled by expert count."""
    n = gating.weights.shape[0]
    freq = np.zeros(n_experts)
    for j in range(n_experts):
        freq[j] = (gating.selected == j).any(axis=1).mean()
    mean_w = ad.tmean(gating.weights, axis=0)
    return ad.mul(ad.constant(float(n_experts)),
                  ad.tsum(ad.mul(ad.constant(freq), mean_w)))


@dataclass
class TemporalBatchOutput:
    loss: Tensor
    components: dict[str, float]
    score: Tensor
    gating: GatingOutput
    triple: LoadingTriple


def temporal_forward(model: TemporalModel, window: np.ndarray,
                     z_q_values: np.ndarray, f_p: np.ndarray,
                     target: np.ndarray, mode: str = "train",
                     rng: np.random.Generator | None = None
                     ) -> TemporalBatchOutput:
    """Objective on one date: MSE + balance penalty + loading norm penalty.

    ``z_q_values`` are frozen codebook rows (constants here), ``target`` the
    rank-normalized main-horizon returns.
    """
    cfg = model.cfg
    training = mode == "train"
    z_q = ad.constant(z_q_values)
    h_temp = model.temporal_encode(window, z_q, training=training, rng=rng)
    u = model.fuse(h_temp, z_q, training=training, rng=rng)
    gating = model.gate(z_q, mode=mode, rng=rng)
    m = model.experts_forward(u, gating, training=training, rng=rng)
    triple = model.loading_head(h_temp, m)
    score, _, _ = model.predict_return(triple, ad.constant(f_p), z_q)

    mask = np.isfinite(target)
    tgt = ad.constant(np.where(mask, target, 0.0))
    w = ad.constant(mask.astype(float))
    diff = ad.mul(ad.sub(score, tgt), w)
    mse = ad.div(ad.tsum(ad.mul(diff, diff)),
                 ad.constant(float(max(int(mask.sum()), 1))))

    balance = load_balance_loss(gating, cfg.n_experts)

    def l2_rows(t: Tensor) -> Tensor:
        return ad.tsqrt(ad.add(ad.tsum(ad.mul(t, t), axis=1), ad.constant(1e-12)))

    penalty = ad.tmean(ad.add(l2_rows(triple.beta_prior),
                              l2_rows(triple.beta_latent)))

    total = ad.add(mse, ad.add(ad.mul(ad.constant(cfg.balance_weight), balance),
                               ad.mul(ad.constant(cfg.loading_penalty), penalty)))
    comps = {"mse": float(mse.values), "balance": float(balance.values),
             "load_norm": float(penalty.values), "total": float(total.values)}
    return TemporalBatchOutput(loss=total, components=comps, score=score,
                               gating=gating, triple=triple)
