"""Attention and transformer layers against loop oracles and invariants."""

import numpy as np
import pytest

from moda import gradcheck
from moda.blocks import (
    FfnParams,
    MhaParams,
    TransformerLayerParams,
    cross_attn_layer_forward,
    decoder_block_forward,
    mha_forward,
    transformer_layer_forward,
)
from moda.errors import ConfigError, ShapeError
from moda.rng import Rng
from moda.tensor import Tensor


def _mha_loop_oracle(q_in, kv_in, p: MhaParams, causal=False):
    """Independent per-head numpy implementation."""
    e = p.wq.shape[0]
    h = p.n_heads
    hd = e // h
    b, nq, _ = q_in.shape
    nk = kv_in.shape[1]
    q = q_in @ p.wq.data + p.bq.data
    k = kv_in @ p.wk.data + p.bk.data
    v = kv_in @ p.wv.data + p.bv.data
    out = np.zeros((b, nq, e))
    for bi in range(b):
        for head in range(h):
            sl = slice(head * hd, (head + 1) * hd)
            scores = q[bi, :, sl] @ k[bi, :, sl].T / np.sqrt(hd)
            if causal:
                scores = np.where(np.triu(np.ones((nq, nk)), k=1) > 0, -np.inf, scores)
            scores = scores - scores.max(axis=-1, keepdims=True)
            attn = np.exp(scores)
            attn /= attn.sum(axis=-1, keepdims=True)
            out[bi, :, sl] = attn @ v[bi, :, sl]
    return out @ p.wo.data + p.bo.data


class TestMha:
    def test_single_key_collapses_to_value_path(self):
        rng = Rng(0, "mha1")
        p = MhaParams.init(8, 2, rng, "attn")
        kv = rng.child("kv").normal((2, 1, 8))
        q1 = rng.child("q1").normal((2, 5, 8))
        q2 = rng.child("q2").normal((2, 5, 8))
        expected = (kv @ p.wv.data + p.bv.data) @ p.wo.data + p.bo.data
        out1 = mha_forward(Tensor(q1), Tensor(kv), p).data
        out2 = mha_forward(Tensor(q2), Tensor(kv), p).data
        np.testing.assert_allclose(out1, np.broadcast_to(expected, out1.shape), atol=1e-12)
        np.testing.assert_allclose(out1, out2, atol=1e-12)  # query content irrelevant

    def test_matches_per_head_loop_oracle(self):
        rng = Rng(1, "mha2")
        p = MhaParams.init(8, 2, rng, "attn")
        q = rng.child("q").normal((1, 3, 8))
        kv = rng.child("kv").normal((1, 4, 8))
        out = mha_forward(Tensor(q), Tensor(kv), p).data
        np.testing.assert_allclose(out, _mha_loop_oracle(q, kv, p), atol=1e-10)

    def test_single_head_equivalence(self):
        rng = Rng(2, "mha3")
        p = MhaParams.init(8, 1, rng, "attn")
        q = rng.child("q").normal((2, 4, 8))
        kv = rng.child("kv").normal((2, 5, 8))
        out = mha_forward(Tensor(q), Tensor(kv), p).data
        np.testing.assert_allclose(out, _mha_loop_oracle(q, kv, p), atol=1e-10)

    def test_causal_future_perturbation_invisible(self):
        rng = Rng(3, "mha4")
        p = MhaParams.init(8, 2, rng, "attn")
        x = rng.child("x").normal((1, 6, 8))
        base = mha_forward(Tensor(x), Tensor(x), p, causal=True).data
        t = 2
        perturbed = x.copy()
        perturbed[0, t + 1:] += rng.child("noise").normal((6 - t - 1, 8))
        out = mha_forward(Tensor(perturbed), Tensor(perturbed), p, causal=True).data
        np.testing.assert_allclose(out[0, :t + 1], base[0, :t + 1], atol=1e-12)

    def test_causal_matches_loop_oracle(self):
        rng = Rng(4, "mha5")
        p = MhaParams.init(8, 4, rng, "attn")
        x = rng.child("x").normal((2, 5, 8))
        out = mha_forward(Tensor(x), Tensor(x), p, causal=True).data
        np.testing.assert_allclose(out, _mha_loop_oracle(x, x, p, causal=True), atol=1e-10)

    def test_width_mismatch(self):
        p = MhaParams.init(8, 2, Rng(0), "attn")
        with pytest.raises(ShapeError):
            mha_forward(Tensor(np.zeros((1, 2, 6))), Tensor(np.zeros((1, 2, 6))), p)

    def test_heads_must_divide_width(self):
        with pytest.raises(ConfigError):
            MhaParams.init(8, 3, Rng(0), "attn")

    def test_causal_requires_square(self):
        p = MhaParams.init(8, 2, Rng(0), "attn")
        with pytest.raises(ShapeError):
            mha_forward(Tensor(np.zeros((1, 3, 8))), Tensor(np.zeros((1, 4, 8))), p,
                        causal=True)


class TestLayers:
    def test_cross_layer_preserves_target_shape(self):
        rng = Rng(5, "layer")
        p = TransformerLayerParams.init(32, 4, 4, rng, "layer")
        target = rng.child("t").normal((2, 9, 32))
        memory = rng.child("m").normal((2, 5, 32))
        out = cross_attn_layer_forward(Tensor(target), Tensor(memory), p)
        assert out.shape == (2, 9, 32)

    def test_zeroed_output_projections_make_identity(self):
        rng = Rng(6, "layer")
        p = TransformerLayerParams.init(16, 2, 2, rng, "layer")
        p.attn.wo.data[:] = 0.0
        p.attn.bo.data[:] = 0.0
        p.ffn.w2.data[:] = 0.0
        p.ffn.b2.data[:] = 0.0
        x = rng.child("x").normal((2, 4, 16))
        mem = rng.child("m").normal((2, 3, 16))
        out = cross_attn_layer_forward(Tensor(x), Tensor(mem), p)
        np.testing.assert_array_equal(out.data, x)

    def test_memory_permutation_invariance(self):
        rng = Rng(7, "layer")
        p = TransformerLayerParams.init(16, 4, 2, rng, "layer")
        x = rng.child("x").normal((2, 4, 16))
        mem = rng.child("m").normal((2, 6, 16))
        perm = Rng(8).permutation(6)
        out = cross_attn_layer_forward(Tensor(x), Tensor(mem), p).data
        out_p = cross_attn_layer_forward(Tensor(x), Tensor(mem[:, perm]), p).data
        np.testing.assert_allclose(out, out_p, atol=1e-12)

    def test_decoder_block_single_token(self):
        rng = Rng(9, "layer")
        p = TransformerLayerParams.init(16, 2, 2, rng, "layer")
        out = decoder_block_forward(Tensor(rng.child("x").normal((3, 1, 16))), p)
        assert out.shape == (3, 1, 16)
        assert np.isfinite(out.data).all()

    def test_decoder_block_causality(self):
        rng = Rng(10, "layer")
        p = TransformerLayerParams.init(16, 2, 2, rng, "layer")
        x = rng.child("x").normal((1, 5, 16))
        base = decoder_block_forward(Tensor(x), p).data
        perturbed = x.copy()
        perturbed[0, 3:] = rng.child("p").normal((2, 16))
        out = decoder_block_forward(Tensor(perturbed), p).data
        np.testing.assert_allclose(out[0, :3], base[0, :3], atol=1e-12)

    def test_self_attention_layer_non_causal(self):
        rng = Rng(11, "layer")
        p = TransformerLayerParams.init(16, 2, 2, rng, "layer")
        x = rng.child("x").normal((1, 4, 16))
        base = transformer_layer_forward(Tensor(x), p).data
        perturbed = x.copy()
        perturbed[0, 3] += rng.child("bump").normal((16,))
        out = transformer_layer_forward(Tensor(perturbed), p).data
        assert np.abs(out[0, 0] - base[0, 0]).max() > 1e-9  # future IS visible

    def test_blocks_pass_gradient_check(self):
        results = gradcheck.run_block_checks()
        failing = [r for r in results if not r.passed]
        assert failing == [], gradcheck.format_report(failing)


class TestDropout:
    def test_zero_rate_is_identity_path(self):
        rng = Rng(12, "drop")
        p = TransformerLayerParams.init(16, 2, 2, rng, "layer")
        x = rng.child("x").normal((2, 3, 16))
        plain = decoder_block_forward(Tensor(x), p).data
        with_rng = decoder_block_forward(Tensor(x), p, dropout=0.0,
                                         drop_rng=Rng(0, "d")).data
        np.testing.assert_array_equal(plain, with_rng)

    def test_positive_rate_deterministic_given_key(self):
        rng = Rng(13, "drop")
        p = TransformerLayerParams.init(16, 2, 2, rng, "layer")
        x = rng.child("x").normal((2, 3, 16))
        a = decoder_block_forward(Tensor(x), p, dropout=0.5, drop_rng=Rng(1, "d")).data
        b = decoder_block_forward(Tensor(x), p, dropout=0.5, drop_rng=Rng(1, "d")).data
        c = decoder_block_forward(Tensor(x), p, dropout=0.5, drop_rng=Rng(2, "d")).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_ffn_params_hidden_width_guard(self):
        with pytest.raises(ConfigError):
            FfnParams.init(16, 0, Rng(0), "ffn")
