"""Conformer encoder: linear embedding plus stacked blocks of
half-step feed-forward, relative-position multi-head self-attention,
convolution module, and a second half-step feed-forward.

Self-attention follows the Transformer-XL parameterization: logits are the
sum of a content-content term and a content-position term over sinusoidal
encodings of the signed frame offset, with learned global content/position
bias vectors, all scaled by 1/sqrt(d_head) before the softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import BatchNorm, DepthwiseConv1d, Dropout, LayerNorm, Linear, Module, RngBox
from .tensor import Tensor


@dataclass
class ConformerConfig:
    n_blocks: int = 12
    d_k: int = 256
    d_v: int = 256
    d_ff: int = 2048
    n_head: int = 8
    depthwise_kernel: int = 31
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError(f"encoder needs at least one block, got {self.n_blocks}")
        if self.d_v != self.d_k:
            raise ConfigError(f"d_v must equal d_k, got {self.d_v} vs {self.d_k}")
        if self.d_k % self.n_head != 0:
            raise ConfigError(f"d_k={self.d_k} not divisible by n_head={self.n_head}")
        if self.depthwise_kernel % 2 == 0:
            raise ConfigError(f"depthwise kernel must be odd, got {self.depthwise_kernel}")


def sinusoid_table(positions: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Interleaved sin/cos encoding of arbitrary (possibly negative) positions."""
    inv_freq = 1.0 / (10000.0 ** (np.arange(0, dim, 2, dtype=np.float64) / dim))
    angles = positions[:, None] * inv_freq[None, :]
    table = np.zeros((len(positions), dim), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table.astype(dtype)


class RelativeMHSA(Module):
    """Multi-head self-attention with relative position information."""

    def __init__(self, cfg: ConformerConfig, rng, rngbox: RngBox, dtype):
        super().__init__()
        d, h = cfg.d_k, cfg.n_head
        self.n_head = h
        self.d_head = d // h
        self.wq = Linear(d, d, rng, dtype, bias=False)
        self.wk = Linear(d, d, rng, dtype, bias=False)
        self.wv = Linear(d, d, rng, dtype, bias=False)
        self.wr = Linear(d, d, rng, dtype, bias=False)
        self.wo = Linear(d, d, rng, dtype)
        self.u = Tensor((rng.standard_normal((h, 1, self.d_head)) * 0.02).astype(dtype), requires_grad=True)
        self.v = Tensor((rng.standard_normal((h, 1, self.d_head)) * 0.02).astype(dtype), requires_grad=True)
        self.att_dropout = Dropout(cfg.dropout, rngbox)
        self.out_dropout = Dropout(cfg.dropout, rngbox)
        self.dtype = dtype

    def _heads(self, x: Tensor, n: int) -> Tensor:
        return T.transpose(T.reshape(x, (n, self.n_head, self.d_head)), (1, 0, 2))

    def logit_terms(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Unscaled content and position logit matrices, each [heads, T, T].

        The position term is the learned global bias dotted with the
        projected sinusoidal encoding of the signed offset i - j, so it is a
        pure function of the offset (exactly shift-equivariant); the content
        term carries the query-dependent part.
        """
        n = x.shape[0]
        q = self._heads(self.wq(x), n)
        k = self._heads(self.wk(x), n)
        # Rows of the encoding table run over offsets T-1 ... -(T-1); entry
        # (i, j) needs offset i - j, i.e. table row (T-1) - (i - j).
        offsets = np.arange(n - 1, -n, -1, dtype=np.float64)
        rel = self.wr(Tensor(sinusoid_table(offsets, self.n_head * self.d_head, self.dtype)))
        rel = self._heads(rel, 2 * n - 1)
        content = T.matmul(T.add(q, self.u), T.transpose(k, (0, 2, 1)))
        # [H, 1, dh] @ [H, dh, 2T-1] -> per-head bias over offsets.
        pos_by_offset = T.reshape(T.matmul(self.v, T.transpose(rel, (0, 2, 1))), (self.n_head, 2 * n - 1))
        idx = (n - 1) - (np.arange(n)[:, None] - np.arange(n)[None, :])
        gathered = T.take(T.transpose(pos_by_offset, (1, 0)), idx.reshape(-1).astype(np.int64))
        position = T.transpose(T.reshape(gathered, (n, n, self.n_head)), (2, 0, 1))
        return content, position

    def attention_weights(self, x: Tensor) -> Tensor:
        content, position = self.logit_terms(x)
        scale = Tensor(np.asarray(1.0 / np.sqrt(self.d_head), dtype=self.dtype))
        return T.softmax(T.mul(T.add(content, position), scale), axis=2)

    def __call__(self, x: Tensor) -> Tensor:
        n = x.shape[0]
        weights = self.att_dropout(self.attention_weights(x))
        v = self._heads(self.wv(x), n)
        mixed = T.matmul(weights, v)
        merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (n, self.n_head * self.d_head))
        return self.out_dropout(self.wo(merged))


class ConformerFeedForward(Module):
    """Pre-norm linear/ReLU/dropout/linear stack, added with half-step weight."""

    def __init__(self, cfg: ConformerConfig, rng, rngbox: RngBox, dtype):
        super().__init__()
        self.norm = LayerNorm(cfg.d_k, dtype)
        self.lin1 = Linear(cfg.d_k, cfg.d_ff, rng, dtype)
        self.lin2 = Linear(cfg.d_ff, cfg.d_k, rng, dtype)
        self.dropout = Dropout(cfg.dropout, rngbox)
        self.half = Tensor(np.asarray(0.5, dtype=dtype))

    def branch(self, x: Tensor) -> Tensor:
        return self.lin2(self.dropout(T.relu(self.lin1(self.norm(x)))))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, T.mul(self.branch(x), self.half))


class ConvModule(Module):
    """Pointwise expansion, GLU gate, depthwise temporal conv, batch norm,
    swish, pointwise projection, layer norm; residual around the whole chain."""

    def __init__(self, cfg: ConformerConfig, rng, rngbox: RngBox, dtype):
        super().__init__()
        d = cfg.d_k
        self.pw1 = Linear(d, 2 * d, rng, dtype)
        self.depthwise = DepthwiseConv1d(d, cfg.depthwise_kernel, rng, dtype)
        self.bn = BatchNorm(d, dtype)
        self.pw2 = Linear(d, d, rng, dtype)
        self.norm = LayerNorm(d, dtype)

    def branch(self, x: Tensor) -> Tensor:
        h = T.glu(self.pw1(x))
        h = T.swish(self.bn(self.depthwise(h)))
        return self.norm(self.pw2(h))

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(x, self.branch(x))


class ConformerBlock(Module):
    def __init__(self, cfg: ConformerConfig, rng, rngbox: RngBox, dtype):
        super().__init__()
        self.ffn1 = ConformerFeedForward(cfg, rng, rngbox, dtype)
        self.attn_norm = LayerNorm(cfg.d_k, dtype)
        self.attn = RelativeMHSA(cfg, rng, rngbox, dtype)
        self.conv = ConvModule(cfg, rng, rngbox, dtype)
        self.ffn2 = ConformerFeedForward(cfg, rng, rngbox, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.ffn1(x)
        x = T.add(x, self.attn(self.attn_norm(x)))
        x = self.conv(x)
        return self.ffn2(x)


class ConformerEncoder(Module):
    """Linear embedding of front-end features, then stacked conformer blocks."""

    def __init__(self, in_dim: int, cfg: ConformerConfig, rng, rngbox: RngBox, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.embed = Linear(in_dim, cfg.d_k, rng, dtype)
        self.blocks = [ConformerBlock(cfg, rng, rngbox, dtype) for _ in range(cfg.n_blocks)]
        self.final_norm = LayerNorm(cfg.d_k, dtype)

    def __call__(self, features: Tensor) -> Tensor:
        x = self.embed(features)
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)
