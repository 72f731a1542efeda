"""Neural building blocks shared by both model stages.

Everything here is built from the primitives in :mod:`prism_vq.autodiff`:
linear maps, a single-layer GRU, rotary position embeddings, multi-head
attention, and the post-norm Transformer encoder block.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


def init_uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container; submodules and parameter lists recurse.

    Every Tensor attribute is a parameter, frozen or not: freezing clears
    requires_grad but parameters stay visible for hashing and checkpoints.
    """

    def named_parameters(self, prefix: str = ""):
        for name, val in vars(self).items():
            full = f"{prefix}.{name}" if prefix else name
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full)
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}")
                    elif isinstance(item, Tensor):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True):
        self.weight = ad.parameter(init_uniform(rng, in_features,
                                                (in_features, out_features)))
        self.bias = ad.parameter(np.zeros(out_features)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        flat = x
        orig = None
        if x.ndim > 2:
            orig = x.shape
            flat = ad.reshape(x, (-1, orig[-1]))
        out = ad.matmul(flat, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        if orig is not None:
            out = ad.reshape(out, orig[:-1] + (self.weight.shape[1],))
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = ad.parameter(np.ones(dim))
        self.bias = ad.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gain, self.bias, axis=-1, eps=self.eps)


class GRU(Module):
    """Single-layer gated recurrent unit, run left-to-right from a zero state.

    Update equations (reset gate applied to the hidden contribution of the
    candidate): z = sig(xWxz + hWhz + bz), r = sig(xWxr + hWhr + br),
    n = tanh(xWxn + r * (hWhn) + bn), h' = (1 - z) * n + z * h.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.input_size = input_size
        self.hidden_size = hidden_size
        ih = lambda: ad.parameter(init_uniform(rng, input_size, (input_size, hidden_size)))
        hh = lambda: ad.parameter(init_uniform(rng, hidden_size, (hidden_size, hidden_size)))
        b = lambda: ad.parameter(np.zeros(hidden_size))
        self.w_xz, self.w_hz, self.b_z = ih(), hh(), b()
        self.w_xr, self.w_hr, self.b_r = ih(), hh(), b()
        self.w_xn, self.w_hn, self.b_n = ih(), hh(), b()

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        z = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.w_xz), ad.matmul(h, self.w_hz)), self.b_z))
        r = ad.sigmoid(ad.add(ad.add(ad.matmul(x, self.w_xr), ad.matmul(h, self.w_hr)), self.b_r))
        n = ad.tanh(ad.add(ad.add(ad.matmul(x, self.w_xn), ad.mul(r, ad.matmul(h, self.w_hn))), self.b_n))
        one_minus_z = ad.sub(ad.constant(1.0), z)
        return ad.add(ad.mul(one_minus_z, n), ad.mul(z, h))

    def __call__(self, x) -> Tensor:
        """Encode a (B, T, C) batch of sequences; returns the final state (B, H)."""
        data = x.values if isinstance(x, Tensor) else np.asarray(x)
        is_tensor = isinstance(x, Tensor) and x.requires_grad
        batch, steps = data.shape[0], data.shape[1]
        h = ad.constant(np.zeros((batch, self.hidden_size)))
        for t in range(steps):
            xt = ad.take(x, (slice(None), t)) if is_tensor else ad.constant(data[:, t])
            h = self.step(xt, h)
        return h


@dataclass
class AttentionConfig:
    """Shape and regularization settings for one encoder block."""

    dim: int
    heads: int
    ffn_dim: int
    dropout: float = 0.0
    rope: bool = False
    head_dim: int = field(init=False)

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        self.head_dim = self.dim // self.heads
        if self.rope and self.head_dim % 2 != 0:
            raise ConfigError(f"rope needs an even head dim, got {self.head_dim}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")


def rope_angles(head_dim: int, positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    freqs = 10000.0 ** (-2.0 * np.arange(head_dim // 2) / head_dim)
    ang = np.asarray(positions, dtype=float)[..., None] * freqs
    return np.cos(ang), np.sin(ang)


def rope_rotate(u: Tensor, positions) -> Tensor:
    """Rotate consecutive coordinate pairs of the last axis by position-scaled angles.

    ``positions`` carries one index per row of ``u`` (shape = u.shape[:-1]).
    Norms are preserved; inner products depend only on relative positions.
    """
    d = u.shape[-1]
    if d % 2 != 0:
        raise ConfigError(f"rope requires an even dimension, got {d}")
    cos, sin = rope_angles(d, np.asarray(positions))
    cos_t, sin_t = ad.constant(cos), ad.constant(sin)
    even = ad.take(u, (Ellipsis, slice(0, None, 2)))
    odd = ad.take(u, (Ellipsis, slice(1, None, 2)))
    out_even = ad.sub(ad.mul(even, cos_t), ad.mul(odd, sin_t))
    out_odd = ad.add(ad.mul(even, sin_t), ad.mul(odd, cos_t))
    pair_shape = u.shape[:-1] + (d // 2, 1)
    stacked = ad.concat([ad.reshape(out_even, pair_shape),
                         ad.reshape(out_odd, pair_shape)], axis=-1)
    return ad.reshape(stacked, u.shape)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with head concatenation and output projection.

    Query/key/value projections carry no bias; RoPE, when enabled, rotates the
    per-head query and key rows by their token position before scoring.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        d = cfg.dim
        self.w_q = ad.parameter(init_uniform(rng, d, (d, d)))
        self.w_k = ad.parameter(init_uniform(rng, d, (d, d)))
        self.w_v = ad.parameter(init_uniform(rng, d, (d, d)))
        self.w_o = ad.parameter(init_uniform(rng, d, (d, d)))

    def __call__(self, x: Tensor, positions: np.ndarray | None = None) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = ad.reshape(x, (1,) + x.shape)
        b, s, d = x.shape
        cfg = self.cfg
        flat = ad.reshape(x, (b * s, d))
        q = ad.reshape(ad.matmul(flat, self.w_q), (b, s, d))
        k = ad.reshape(ad.matmul(flat, self.w_k), (b, s, d))
        v = ad.reshape(ad.matmul(flat, self.w_v), (b, s, d))
        if cfg.rope:
            if positions is None:
                positions = np.arange(s)
            pos = np.broadcast_to(np.asarray(positions), (b, s))
        heads = []
        scale = ad.constant(1.0 / np.sqrt(cfg.head_dim))
        for h in range(cfg.heads):
            cols = slice(h * cfg.head_dim, (h + 1) * cfg.head_dim)
            qh = ad.take(q, (slice(None), slice(None), cols))
            kh = ad.take(k, (slice(None), slice(None), cols))
            vh = ad.take(v, (slice(None), slice(None), cols))
            if cfg.rope:
                qh = rope_rotate(qh, pos)
                kh = rope_rotate(kh, pos)
            scores = ad.mul(ad.bmm(qh, ad.transpose(kh, (0, 2, 1))), scale)
            attn = ad.softmax(scores, axis=-1)
            heads.append(ad.bmm(attn, vh))
        out = ad.reshape(ad.matmul(ad.reshape(ad.concat(heads, axis=-1),
                                              (b * s, d)), self.w_o), (b, s, d))
        if squeeze:
            out = ad.reshape(out, (s, d))
        return out


class FeedForward(Module):
    def __init__(self, dim: int, ffn_dim: int, rng: np.random.Generator):
        self.lin1 = Linear(dim, ffn_dim, rng)
        self.lin2 = Linear(ffn_dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(ad.gelu(self.lin1(x)))


class EncoderBlock(Module):
    """Post-norm Transformer block: LN(x + MHA(x)) then LN(h + FFN(h)).

    Dropout is applied to each sub-layer output in training mode only.
    """

    def __init__(self, cfg: AttentionConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.attn = MultiHeadAttention(cfg, rng)
        self.ffn = FeedForward(cfg.dim, cfg.ffn_dim, rng)
        self.ln1 = LayerNorm(cfg.dim)
        self.ln2 = LayerNorm(cfg.dim)

    def __call__(self, x: Tensor, positions: np.ndarray | None = None,
                 training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        a = self.attn(x, positions=positions)
        if training and self.cfg.dropout > 0.0:
            a = ad.dropout(a, self.cfg.dropout, rng, training)
        h = self.ln1(ad.add(x, a))
        f = self.ffn(h)
        if training and self.cfg.dropout > 0.0:
            f = ad.dropout(f, self.cfg.dropout, rng, training)
        return self.ln2(ad.add(h, f))


def film(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Residual per-channel affine modulation x * (1 + gamma) + beta.

    ``x`` is (..., H, L); gamma and beta are (..., H) and broadcast over L.
    """
    g = ad.reshape(gamma, gamma.shape + (1,))
    b = ad.reshape(beta, beta.shape + (1,))
    return ad.add(ad.mul(x, ad.add(g, ad.constant(1.0))), b)


def conv1d(x: Tensor, weights: list[Tensor], bias: Tensor | None,
           stride: int = 1) -> Tensor:
    """1D convolution over (B, C_in, L) built from per-offset channel maps.

    ``weights[j]`` is the (C_out, C_in) kernel slice at offset j.
    """
    k = len(weights)
    L = x.shape[-1]
    out_len = (L - k) // stride + 1
    total = None
    for j, w in enumerate(weights):
        sl = ad.take(x, (Ellipsis, slice(j, j + stride * (out_len - 1) + 1, stride)))
        term = ad.channel_map(sl, w)
        total = term if total is None else ad.add(total, term)
    if bias is not None:
        total = ad.add(total, ad.reshape(bias, (1, -1, 1)))
    return total


def conv1d_transpose(x: Tensor, weights: list[Tensor], bias: Tensor | None,
                     stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed 1D convolution via zero interleaving plus a flipped convolution.

    Output length is stride * L when kernel = 2 * padding + stride.
    """
    k = len(weights)
    stuffed = ad.pad1d(ad.zero_interleave(x, stride), k - 1 - padding,
                       k - 1 - padding, mode="zero")
    flipped = list(reversed(weights))
    return conv1d(stuffed, flipped, bias, stride=1)


def pixel_shuffle_1d(x: Tensor, factor: int = 2) -> Tensor:
    """Depth-to-length rearrangement (B, C * factor, L) -> (B, C, L * factor)."""
    b, cf, L = x.shape
    c = cf // factor
    # channel block r contributes phase r of the upsampled sequence
    y = ad.reshape(x, (b, c, factor, L))
    y = ad.transpose(y, (0, 1, 3, 2))
    return ad.reshape(y, (b, c, L * factor))
