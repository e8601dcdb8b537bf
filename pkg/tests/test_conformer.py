"""Conformer encoder: embedding, relative attention, conv module, block order."""

import numpy as np
import pytest

from avsrkit import tensor as T
from avsrkit.conformer import (
    ConformerBlock,
    ConformerConfig,
    ConformerEncoder,
    sinusoid_table,
)
from avsrkit.errors import ConfigError
from avsrkit.nn import RngBox
from avsrkit.tensor import Tensor


def tiny_cfg(**overrides):
    base = dict(n_blocks=2, d_k=32, d_v=32, d_ff=48, n_head=4, depthwise_kernel=5, dropout=0.0)
    base.update(overrides)
    return ConformerConfig(**base)


@pytest.fixture(scope="module")
def encoder():
    return ConformerEncoder(16, tiny_cfg(), np.random.default_rng(0), RngBox(0), np.float64)


def rand(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


class TestConfig:
    def test_zero_blocks_rejected(self):
        with pytest.raises(ConfigError, match="block"):
            tiny_cfg(n_blocks=0)

    def test_dv_must_equal_dk(self):
        with pytest.raises(ConfigError, match="d_v"):
            tiny_cfg(d_v=16)

    def test_head_divisibility(self):
        with pytest.raises(ConfigError, match="divisible"):
            tiny_cfg(n_head=5)

    def test_even_depthwise_rejected(self):
        with pytest.raises(ConfigError, match="odd"):
            tiny_cfg(depthwise_kernel=4)

    def test_paper_preset_dimensions(self):
        cfg = ConformerConfig()
        assert (cfg.n_blocks, cfg.d_ff, cfg.d_k, cfg.d_v, cfg.depthwise_kernel) == (12, 2048, 256, 256, 31)


class TestEmbed:
    def test_zero_features_give_bias_rows(self, encoder):
        out = encoder.embed(Tensor(np.zeros((4, 16))))
        assert np.allclose(out.data, encoder.embed.b.data)

    def test_linearity_over_concatenation(self, encoder):
        a, b = Tensor(rand((3, 16), 1)), Tensor(rand((2, 16), 2))
        joint = encoder.embed(T.concat([a, b], axis=0)).data
        parts = np.concatenate([encoder.embed(a).data, encoder.embed(b).data])
        assert np.allclose(joint, parts)

    def test_paper_projection_shape(self):
        enc = ConformerEncoder(512, ConformerConfig(n_blocks=1, dropout=0.0), np.random.default_rng(3), RngBox(0), np.float32)
        assert enc.embed(Tensor(rand((25, 512), 4).astype(np.float32))).shape == (25, 256)


class TestRelativeMHSA:
    def test_single_position_attends_to_itself(self, encoder):
        attn = encoder.blocks[0].attn
        x = Tensor(rand((1, 32), 5))
        weights = attn.attention_weights(x)
        assert np.allclose(weights.data, 1.0)

    def test_rows_sum_to_one(self, encoder):
        attn = encoder.blocks[0].attn
        weights = attn.attention_weights(Tensor(rand((9, 32), 6)))
        assert np.abs(weights.data.sum(axis=2) - 1.0).max() <= 1e-12

    def test_position_term_shift_equivariance(self, encoder):
        attn = encoder.blocks[0].attn
        _, pos = attn.logit_terms(Tensor(rand((8, 32), 7)))
        assert np.abs(pos.data[:, 1:, 1:] - pos.data[:, :-1, :-1]).max() == 0.0

    def test_sinusoid_table_closed_form(self):
        table = sinusoid_table(np.array([0.0, 1.0]), 4, np.float64)
        assert np.allclose(table[0], [0.0, 1.0, 0.0, 1.0])
        assert table[1, 0] == pytest.approx(np.sin(1.0))


class TestFeedForward:
    def test_zeroed_second_linear_is_identity(self, encoder):
        ffn = encoder.blocks[0].ffn1
        saved = ffn.lin2.w.data.copy(), ffn.lin2.b.data.copy()
        ffn.lin2.w.data[:] = 0.0
        ffn.lin2.b.data[:] = 0.0
        x = Tensor(rand((5, 32), 8))
        assert np.array_equal(ffn(x).data, x.data)
        ffn.lin2.w.data, ffn.lin2.b.data = saved

    def test_half_step_weight(self, encoder):
        ffn = encoder.blocks[0].ffn1
        x = Tensor(rand((4, 32), 9))
        assert np.allclose(ffn(x).data, x.data + 0.5 * ffn.branch(x).data)


class TestConvModule:
    def test_temporal_length_preserved(self):
        block = ConformerBlock(tiny_cfg(), np.random.default_rng(10), RngBox(0), np.float64)
        conv = block.conv
        for t in (2, 3, 17, 64):
            out = conv(Tensor(rand((t, 32), t)))
            assert out.shape == (t, 32)

    def test_zeroed_projection_is_identity(self):
        conv = ConformerBlock(tiny_cfg(), np.random.default_rng(11), RngBox(0), np.float64).conv
        conv.pw2.w.data[:] = 0.0
        conv.pw2.b.data[:] = 0.0
        # layer norm of the constant-zero branch output is exactly its bias (zero)
        x = Tensor(rand((6, 32), 12))
        assert np.allclose(conv(x).data, x.data)

    def test_glu_halves_width(self):
        conv = ConformerBlock(tiny_cfg(), np.random.default_rng(13), RngBox(0), np.float64).conv
        x = Tensor(rand((4, 32), 14))
        assert conv.pw1(x).shape == (4, 64)
        assert T.glu(conv.pw1(x)).shape == (4, 32)


class TestEncoder:
    def test_output_shape_random_lengths(self, encoder):
        for t in (2, 5, 23):
            assert encoder(Tensor(rand((t, 16), t))).shape == (t, 32)

    def test_block_order_reduces_to_attn_conv_when_ffns_zeroed(self):
        block = ConformerBlock(tiny_cfg(n_blocks=1), np.random.default_rng(15), RngBox(0), np.float64)
        for ffn in (block.ffn1, block.ffn2):
            ffn.lin2.w.data[:] = 0.0
            ffn.lin2.b.data[:] = 0.0
        x = Tensor(rand((5, 32), 16))
        manual = x
        manual = T.add(manual, block.attn(block.attn_norm(manual)))
        manual = block.conv(manual)
        assert np.array_equal(block(x).data, manual.data)

    def test_permutation_sensitivity(self, encoder):
        x = rand((10, 16), 17)
        perm = np.random.default_rng(18).permutation(10)
        while np.array_equal(perm, np.arange(10)):
            perm = np.random.default_rng(19).permutation(10)
        direct = encoder(Tensor(x)).data[perm]
        permuted = encoder(Tensor(x[perm])).data
        assert not np.allclose(direct, permuted)

    def test_gradcheck_desk_block(self):
        from avsrkit.harness import gradcheck

        report = gradcheck("conformer_block", seed=0, samples=4)[0]
        assert report.passed, report.lines()
