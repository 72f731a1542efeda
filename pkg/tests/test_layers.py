"""Tests for the shared neural building blocks."""

import numpy as np
import pytest

from prism_vq import autodiff as ad
from prism_vq import layers as ly
from conftest import finite_difference


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


class TestGRU:
    def test_zero_params_give_zero_output(self, rng):
        gru = ly.GRU(3, 5, rng)
        for p in gru.parameters():
            p.values[...] = 0.0
        out = gru(rng.standard_normal((4, 6, 3)))
        np.testing.assert_array_equal(out.values, 0.0)

    def test_single_step_matches_cell(self, rng):
        gru = ly.GRU(2, 3, rng)
        x = rng.standard_normal((1, 1, 2))
        h = gru(x).values
        step = gru.step(ad.constant(x[:, 0]), ad.constant(np.zeros((1, 3)))).values
        np.testing.assert_array_equal(h, step)

    def test_three_step_unroll_matches_loop_oracle(self, rng):
        gru = ly.GRU(3, 4, rng)
        x = rng.standard_normal((2, 3, 3))
        got = gru(x).values
        h = np.zeros((2, 4))
        for t in range(3):
            xt = x[:, t]
            z = _sigmoid(xt @ gru.w_xz.values + h @ gru.w_hz.values + gru.b_z.values)
            r = _sigmoid(xt @ gru.w_xr.values + h @ gru.w_hr.values + gru.b_r.values)
            n = np.tanh(xt @ gru.w_xn.values + r * (h @ gru.w_hn.values) + gru.b_n.values)
            h = (1 - z) * n + z * h
        np.testing.assert_allclose(got, h, rtol=1e-12)

    def test_gradients_match_finite_differences(self, rng):
        gru = ly.GRU(2, 3, rng)
        x = rng.standard_normal((2, 4, 2))

        def loss():
            h = gru(x)
            return ad.tsum(ad.mul(h, h))

        assert finite_difference(loss, gru.parameters(), h=1e-5) <= 1e-5


class TestRoPE:
    def test_position_zero_is_identity(self, rng):
        u = ad.constant(rng.standard_normal((4, 8)))
        out = ly.rope_rotate(u, np.zeros(4))
        np.testing.assert_array_equal(out.values, u.values)

    def test_norm_preserved(self, rng):
        u = ad.constant(rng.standard_normal((7, 10)))
        out = ly.rope_rotate(u, rng.integers(0, 100, 7))
        np.testing.assert_allclose(np.linalg.norm(out.values, axis=-1),
                                   np.linalg.norm(u.values, axis=-1), atol=1e-12)

    def test_inner_products_depend_on_relative_position(self, rng):
        q = rng.standard_normal(8)
        k = rng.standard_normal(8)

        def ip(m, n):
            a = ly.rope_rotate(ad.constant(q), np.asarray(m)).values
            b = ly.rope_rotate(ad.constant(k), np.asarray(n)).values
            return float(a @ b)

        for shift in (1, 5, 17):
            assert abs(ip(3, 9) - ip(3 + shift, 9 + shift)) <= 1e-10

    def test_odd_dimension_rejected(self, rng):
        with pytest.raises(ly.ConfigError):
            ly.rope_rotate(ad.constant(rng.standard_normal((2, 5))), np.arange(2))


class TestAttentionConfig:
    def test_head_dim_divisibility(self):
        with pytest.raises(ly.ConfigError):
            ly.AttentionConfig(dim=6, heads=4, ffn_dim=8)

    def test_rope_needs_even_head_dim(self):
        with pytest.raises(ly.ConfigError):
            ly.AttentionConfig(dim=6, heads=2, ffn_dim=8, rope=True)
        cfg = ly.AttentionConfig(dim=8, heads=2, ffn_dim=8, rope=True)
        assert cfg.head_dim == 4


class TestMultiHeadAttention:
    def test_single_token_reduces_to_value_projection(self, rng):
        cfg = ly.AttentionConfig(dim=4, heads=2, ffn_dim=8)
        mha = ly.MultiHeadAttention(cfg, rng)
        x = rng.standard_normal((1, 4))
        out = mha(ad.constant(x)).values
        ref = (x @ mha.w_v.values) @ mha.w_o.values
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_zero_query_key_means_mean_pooling(self, rng):
        cfg = ly.AttentionConfig(dim=4, heads=2, ffn_dim=8)
        mha = ly.MultiHeadAttention(cfg, rng)
        mha.w_q.values[...] = 0.0
        mha.w_k.values[...] = 0.0
        x = rng.standard_normal((5, 4))
        out = mha(ad.constant(x)).values
        ref = np.broadcast_to((x @ mha.w_v.values).mean(axis=0), (5, 4)) @ mha.w_o.values
        np.testing.assert_allclose(out, ref, rtol=1e-12)

    def test_matches_dense_reference(self, rng):
        cfg = ly.AttentionConfig(dim=4, heads=2, ffn_dim=8)
        mha = ly.MultiHeadAttention(cfg, rng)
        x = rng.standard_normal((3, 4))
        got = mha(ad.constant(x)).values

        heads = []
        for h in range(2):
            cols = slice(2 * h, 2 * h + 2)
            q = x @ mha.w_q.values[:, cols]
            k = x @ mha.w_k.values[:, cols]
            v = x @ mha.w_v.values[:, cols]
            s = q @ k.T / np.sqrt(2.0)
            e = np.exp(s - s.max(axis=-1, keepdims=True))
            a = e / e.sum(axis=-1, keepdims=True)
            heads.append(a @ v)
        ref = np.concatenate(heads, axis=-1) @ mha.w_o.values
        np.testing.assert_allclose(got, ref, rtol=1e-10)

    def test_batched_equals_per_sequence(self, rng):
        cfg = ly.AttentionConfig(dim=4, heads=2, ffn_dim=8, rope=True)
        mha = ly.MultiHeadAttention(cfg, rng)
        x = rng.standard_normal((3, 5, 4))
        batched = mha(ad.constant(x), positions=np.arange(5)).values
        for i in range(3):
            single = mha(ad.constant(x[i]), positions=np.arange(5)).values
            np.testing.assert_allclose(batched[i], single, atol=1e-12)


class TestEncoderBlock:
    def test_zero_sublayers_collapse_to_double_norm(self, rng):
        cfg = ly.AttentionConfig(dim=4, heads=2, ffn_dim=6)
        blk = ly.EncoderBlock(cfg, rng)
        for name, p in blk.named_parameters():
            if "ln" not in name:
                p.values[...] = 0.0
        x = rng.standard_normal((3, 4))
        got = blk(ad.constant(x)).values

        def ln(v):
            mu = v.mean(axis=-1, keepdims=True)
            var = np.maximum(v.var(axis=-1, keepdims=True), 1e-5)
            return (v - mu) / np.sqrt(var)

        np.testing.assert_allclose(got, ln(ln(x)), rtol=1e-10)

    def test_inference_is_deterministic(self, rng):
        cfg = ly.AttentionConfig(dim=4, heads=2, ffn_dim=6, dropout=0.5)
        blk = ly.EncoderBlock(cfg, rng)
        x = ad.constant(rng.standard_normal((3, 4)))
        np.testing.assert_array_equal(blk(x).values, blk(x).values)

    def test_dropout_active_in_training_mode(self, rng):
        cfg = ly.AttentionConfig(dim=4, heads=2, ffn_dim=6, dropout=0.5)
        blk = ly.EncoderBlock(cfg, rng)
        x = ad.constant(rng.standard_normal((3, 4)))
        a = blk(x, training=True, rng=np.random.default_rng(0)).values
        b = blk(x, training=True, rng=np.random.default_rng(1)).values
        assert not np.array_equal(a, b)

    def test_gradient_matches_finite_differences(self, rng):
        cfg = ly.AttentionConfig(dim=4, heads=2, ffn_dim=6, rope=True)
        blk = ly.EncoderBlock(cfg, rng)
        x = ad.parameter(rng.standard_normal((3, 4)))
        # contract with a fixed random direction: sum(LN(.)^2) is nearly
        # constant, which starves finite differences of signal
        probe = ad.constant(rng.standard_normal((3, 4)))

        def loss():
            return ad.tsum(ad.mul(blk(x, positions=np.arange(3)), probe))

        assert finite_difference(loss, [x] + blk.parameters(), h=1e-5) <= 1e-5


class TestFiLM:
    def test_zero_modulation_is_identity(self, rng):
        x = ad.constant(rng.standard_normal((3, 6)))
        out = ly.film(x, ad.constant(np.zeros(3)), ad.constant(np.zeros(3)))
        np.testing.assert_array_equal(out.values, x.values)

    def test_gamma_minus_one_collapses_to_beta(self, rng):
        x = ad.constant(rng.standard_normal((3, 6)))
        beta = rng.standard_normal(3)
        out = ly.film(x, ad.constant(-np.ones(3)), ad.constant(beta))
        np.testing.assert_allclose(out.values, np.broadcast_to(beta[:, None], (3, 6)))

    def test_random_case_matches_elementwise_oracle(self, rng):
        x = rng.standard_normal((2, 4, 5))
        gamma = rng.standard_normal((2, 4))
        beta = rng.standard_normal((2, 4))
        got = ly.film(ad.constant(x), ad.constant(gamma), ad.constant(beta)).values
        ref = x * (1.0 + gamma[..., None]) + beta[..., None]
        np.testing.assert_allclose(got, ref, rtol=1e-12)


class TestConvBlocks:
    def test_conv1d_matches_loop_oracle(self, rng):
        x = rng.standard_normal((2, 3, 8))
        wts = [rng.standard_normal((4, 3)) for _ in range(3)]
        bias = rng.standard_normal(4)
        got = ly.conv1d(ad.constant(x), [ad.constant(w) for w in wts],
                        ad.constant(bias), stride=2).values
        out_len = (8 - 3) // 2 + 1
        ref = np.zeros((2, 4, out_len))
        for b in range(2):
            for t in range(out_len):
                acc = bias.copy()
                for j in range(3):
                    acc = acc + wts[j] @ x[b, :, 2 * t + j]
                ref[b, :, t] = acc
        np.testing.assert_allclose(got, ref, rtol=1e-12)

    def test_transpose_conv_doubles_length(self, rng):
        x = ad.constant(rng.standard_normal((2, 3, 5)))
        wts = [ad.constant(rng.standard_normal((4, 3))) for _ in range(4)]
        out = ly.conv1d_transpose(x, wts, None, stride=2, padding=1)
        assert out.shape == (2, 4, 10)

    def test_pixel_shuffle_layout(self):
        x = np.arange(12.0).reshape(1, 4, 3)  # channels (c, r): 0..3 -> c=0,1; r=0,1
        out = ly.pixel_shuffle_1d(ad.constant(x), 2).values
        assert out.shape == (1, 2, 6)
        # out[c, 2l + r] == x[2c + r, l]
        for c in range(2):
            for l in range(3):
                for r in range(2):
                    assert out[0, c, 2 * l + r] == x[0, 2 * c + r, l]
