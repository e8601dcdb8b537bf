"""Modality fusion and the autoregressive transformer decoder.

The decoder consumes a sos-prefixed symbol sequence, embeds it with
absolute sinusoidal positions, and applies stacked blocks of masked
self-attention, cross-attention over the encoder memory, and a
feed-forward module (pre-norm residuals).  Output row i depends only on
prefix positions <= i; the causal mask guarantees that bit-exactly because
masked attention weights underflow to literal 0.0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conformer import sinusoid_table
from .errors import ConfigError, ContractError, ShapeError
from .nn import BatchNorm, Dropout, Embedding, LayerNorm, Linear, Module, RngBox
from .tensor import NEG_INF, Tensor


class Vocabulary:
    """Character inventory plus the reserved blank/sos/eos/pad indices.

    Layout: blank=0, characters 1..V, sos=V+1, eos=V+2, pad=V+3.  CTC heads
    score ids 0..V; the decoder scores the full table.
    """

    def __init__(self, chars: str):
        if not chars:
            raise ConfigError("vocabulary needs at least one character")
        if len(set(chars)) != len(chars):
            raise ConfigError("vocabulary characters must be distinct")
        self.chars = chars
        self.blank = 0
        self.sos = len(chars) + 1
        self.eos = len(chars) + 2
        self.pad = len(chars) + 3
        self._to_id = {c: i + 1 for i, c in enumerate(chars)}

    @property
    def n_chars(self) -> int:
        return len(self.chars)

    @property
    def ctc_size(self) -> int:
        return len(self.chars) + 1

    @property
    def full_size(self) -> int:
        return len(self.chars) + 4

    @property
    def char_ids(self) -> list[int]:
        return list(range(1, len(self.chars) + 1))

    def encode(self, text: str) -> list[int]:
        try:
            return [self._to_id[c] for c in text]
        except KeyError as err:
            raise ContractError(f"character {err.args[0]!r} not in vocabulary {self.chars!r}") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if 1 <= i <= len(self.chars):
                out.append(self.chars[i - 1])
        return "".join(out)


@dataclass
class DecoderConfig:
    n_blocks: int = 6
    d_k: int = 256
    d_ff: int = 2048
    n_head: int = 8
    dropout: float = 0.1

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ConfigError(f"decoder needs at least one block, got {self.n_blocks}")
        if self.d_k % self.n_head != 0:
            raise ConfigError(f"d_k={self.d_k} not divisible by n_head={self.n_head}")


class FusionMLP(Module):
    """Frame-wise fusion: concat -> linear(4*d) -> batch norm -> ReLU -> linear(d)."""

    def __init__(self, d_k: int, rng, dtype=np.float32):
        super().__init__()
        self.lin1 = Linear(2 * d_k, 4 * d_k, rng, dtype)
        self.bn = BatchNorm(4 * d_k, dtype)
        self.lin2 = Linear(4 * d_k, d_k, rng, dtype)

    def __call__(self, acoustic: Tensor, visual: Tensor) -> Tensor:
        if acoustic.shape[0] != visual.shape[0]:
            raise ShapeError(
                f"fusion: stream lengths misaligned: acoustic {acoustic.shape[0]} frames "
                f"vs visual {visual.shape[0]} frames"
            )
        joint = T.concat([acoustic, visual], axis=1)
        return self.lin2(T.relu(self.bn(self.lin1(joint))))


class MultiHeadAttention(Module):
    """Standard scaled dot-product attention with optional additive mask."""

    def __init__(self, d_k: int, n_head: int, rng, rngbox: RngBox, dropout: float, dtype):
        super().__init__()
        self.n_head = n_head
        self.d_head = d_k // n_head
        self.wq = Linear(d_k, d_k, rng, dtype, bias=False)
        self.wk = Linear(d_k, d_k, rng, dtype, bias=False)
        self.wv = Linear(d_k, d_k, rng, dtype, bias=False)
        self.wo = Linear(d_k, d_k, rng, dtype)
        self.att_dropout = Dropout(dropout, rngbox)
        self.out_dropout = Dropout(dropout, rngbox)
        self.dtype = dtype

    def _heads(self, x: Tensor, n: int) -> Tensor:
        return T.transpose(T.reshape(x, (n, self.n_head, self.d_head)), (1, 0, 2))

    def attention_weights(self, query: Tensor, memory: Tensor, mask: np.ndarray | None = None) -> Tensor:
        nq, nk = query.shape[0], memory.shape[0]
        q = self._heads(self.wq(query), nq)
        k = self._heads(self.wk(memory), nk)
        scale = Tensor(np.asarray(1.0 / np.sqrt(self.d_head), dtype=self.dtype))
        logits = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), scale)
        if mask is not None:
            logits = T.add(logits, Tensor(mask.astype(self.dtype)))
        return T.softmax(logits, axis=2)

    def __call__(self, query: Tensor, memory: Tensor, mask: np.ndarray | None = None) -> Tensor:
        nq, nk = query.shape[0], memory.shape[0]
        weights = self.att_dropout(self.attention_weights(query, memory, mask))
        v = self._heads(self.wv(memory), nk)
        mixed = T.matmul(weights, v)
        merged = T.reshape(T.transpose(mixed, (1, 0, 2)), (nq, self.n_head * self.d_head))
        return self.out_dropout(self.wo(merged))


class DecoderBlock(Module):
    def __init__(self, cfg: DecoderConfig, rng, rngbox: RngBox, dtype):
        super().__init__()
        d = cfg.d_k
        self.norm1 = LayerNorm(d, dtype)
        self.self_attn = MultiHeadAttention(d, cfg.n_head, rng, rngbox, cfg.dropout, dtype)
        self.norm2 = LayerNorm(d, dtype)
        self.cross_attn = MultiHeadAttention(d, cfg.n_head, rng, rngbox, cfg.dropout, dtype)
        self.norm3 = LayerNorm(d, dtype)
        self.lin1 = Linear(d, cfg.d_ff, rng, dtype)
        self.lin2 = Linear(cfg.d_ff, d, rng, dtype)
        self.ffn_dropout = Dropout(cfg.dropout, rngbox)

    def __call__(self, x: Tensor, memory: Tensor, causal_mask: np.ndarray) -> Tensor:
        h = self.norm1(x)
        x = T.add(x, self.self_attn(h, h, causal_mask))
        x = T.add(x, self.cross_attn(self.norm2(x), memory))
        ffn = self.lin2(self.ffn_dropout(T.relu(self.lin1(self.norm3(x)))))
        return T.add(x, ffn)


def causal_mask(n: int) -> np.ndarray:
    """Additive mask: 0 at or below the diagonal, effectively -inf above."""
    mask = np.zeros((n, n), dtype=np.float64)
    mask[np.triu_indices(n, k=1)] = NEG_INF
    return mask


class TransformerDecoder(Module):
    """sos-prefixed symbol ids + encoder memory -> next-symbol logits."""

    def __init__(self, vocab: Vocabulary, cfg: DecoderConfig, rng, rngbox: RngBox, dtype=np.float32):
        super().__init__()
        self.vocab = vocab
        self.cfg = cfg
        self.dtype = dtype
        self.embedding = Embedding(vocab.full_size, cfg.d_k, rng, dtype)
        self.blocks = [DecoderBlock(cfg, rng, rngbox, dtype) for _ in range(cfg.n_blocks)]
        self.final_norm = LayerNorm(cfg.d_k, dtype)
        self.out_proj = Linear(cfg.d_k, vocab.full_size, rng, dtype)
        self.embed_scale = Tensor(np.asarray(np.sqrt(cfg.d_k), dtype=dtype))

    def embed_prefix(self, prefix_ids) -> Tensor:
        ids = np.asarray(prefix_ids, dtype=np.int64)
        if ids.size == 0:
            raise ContractError("decoder prefix must not be empty")
        if ids[0] != self.vocab.sos:
            raise ContractError(f"decoder prefix must start with sos={self.vocab.sos}, got {ids[0]}")
        pe = sinusoid_table(np.arange(len(ids), dtype=np.float64), self.cfg.d_k, self.dtype)
        return T.add(T.mul(self.embedding(ids), self.embed_scale), Tensor(pe))

    def __call__(self, prefix_ids, memory: Tensor) -> Tensor:
        if memory.shape[0] < 1:
            raise ContractError("decoder requires a nonempty encoder memory")
        x = self.embed_prefix(prefix_ids)
        mask = causal_mask(x.shape[0])
        for block in self.blocks:
            x = block(x, memory, mask)
        return self.out_proj(self.final_norm(x))

    def next_log_probs(self, prefix_ids, memory: Tensor) -> np.ndarray:
        """Log-distribution over the next symbol after the given prefix."""
        logits = self(prefix_ids, memory)
        last = logits[logits.shape[0] - 1]
        return T.log_softmax(T.reshape(last, (1, last.shape[0])), axis=1).data[0]
