"""Label-synchronous joint CTC/attention beam search with shallow LM fusion.

Every hypothesis carries three additively-updated log scores (attention,
CTC prefix, language model) fused as

    total = lambda * ctc + (1 - lambda) * attention + beta * lm

Partial hypotheses use the CTC *prefix* probability (mass of all complete
sequences extending them); hypotheses terminated by eos switch to the exact
sequence probability.  At every step all live hypotheses are extended by
every candidate symbol plus eos, candidates are pruned jointly to the beam
width, and eos candidates inside the beam are finalized.  Ties break on
lexicographic token order, so decoding is fully deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conformer import sinusoid_table
from .errors import ConfigError, ContractError
from .fusion_decoder import MultiHeadAttention, Vocabulary, causal_mask
from .nn import Dropout, Embedding, LayerNorm, Linear, Module, RngBox
from .tensor import NEG_INF, Tensor


@dataclass
class DecodeConfig:
    ctc_weight: float = 0.1  # lambda in the fused objective
    lm_weight: float = 0.6  # beta
    beam: int = 10
    max_len_ratio: float = 1.0
    max_len: int | None = None
    length_normalize: bool = True
    nbest: int = 1

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must be in [0, 1], got {self.ctc_weight}")
        if self.lm_weight < 0.0:
            raise ConfigError(f"lm_weight must be >= 0, got {self.lm_weight}")
        if self.beam < 1:
            raise ConfigError(f"beam width must be >= 1, got {self.beam}")


# -- incremental CTC prefix scoring -----------------------------------------------


@dataclass
class CTCPrefixState:
    """Per-frame log mass of the prefix ending in blank / non-blank."""

    r_b: np.ndarray
    r_nb: np.ndarray
    last: int | None
    prefix_log_prob: float


class CTCPrefixScorer:
    """Incremental prefix probabilities over a fixed log-posterior lattice."""

    def __init__(self, log_posteriors: np.ndarray, blank: int = 0):
        x = np.asarray(log_posteriors, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ContractError(f"prefix scorer needs a [T, V+1] lattice, got shape {x.shape}")
        self.x = np.maximum(x, NEG_INF)
        self.blank = blank
        self.n_frames = x.shape[0]

    def initial_state(self) -> CTCPrefixState:
        r_b = np.cumsum(self.x[:, self.blank])
        r_nb = np.full(self.n_frames, NEG_INF)
        return CTCPrefixState(r_b=r_b, r_nb=r_nb, last=None, prefix_log_prob=0.0)

    def extend(self, state: CTCPrefixState, token: int) -> CTCPrefixState:
        """State for prefix + token; its ``prefix_log_prob`` is the new psi."""
        if token == self.blank:
            raise ContractError("cannot extend a CTC prefix with the blank symbol")
        x = self.x
        n = self.n_frames
        xc = x[:, token]
        xb = x[:, self.blank]
        # phi[t]: mass of paths that emitted the parent prefix by frame t and
        # may start a fresh `token` at t+1 (a repeat must cross a blank).
        if token == state.last:
            phi = state.r_b
        else:
            phi = np.logaddexp(state.r_b, state.r_nb)
        r_nb = np.full(n, NEG_INF)
        r_b = np.full(n, NEG_INF)
        r_nb[0] = xc[0] if state.last is None else NEG_INF
        psi = r_nb[0]
        for t in range(1, n):
            r_nb[t] = np.logaddexp(r_nb[t - 1], phi[t - 1]) + xc[t]
            r_b[t] = np.logaddexp(r_b[t - 1], r_nb[t - 1]) + xb[t]
            psi = np.logaddexp(psi, phi[t - 1] + xc[t])
        return CTCPrefixState(r_b=r_b, r_nb=r_nb, last=token, prefix_log_prob=float(psi))

    def complete(self, state: CTCPrefixState) -> float:
        """Log probability that the prefix is the entire emitted sequence."""
        return float(np.logaddexp(state.r_b[-1], state.r_nb[-1]))


def ctc_prefix_score(prefix, next_token: int, log_posteriors, state: CTCPrefixState | None = None):
    """One-step prefix extension returning (score delta, new state).

    ``state`` must correspond to ``prefix`` over the same lattice; passing
    None rebuilds it from scratch (convenient, quadratic if used in a loop).
    """
    scorer = CTCPrefixScorer(np.asarray(log_posteriors))
    if state is None:
        state = scorer.initial_state()
        for tok in prefix:
            state = scorer.extend(state, int(tok))
    new_state = scorer.extend(state, int(next_token))
    return new_state.prefix_log_prob - state.prefix_log_prob, new_state


# -- language model scorers ----------------------------------------------------


class LMScorer:
    """Interface: log p(token | consumed prefix), state threaded explicitly."""

    vocab: Vocabulary

    def initial_state(self):
        return ()

    def score_all(self, state) -> np.ndarray:
        raise NotImplementedError

    def score(self, state, token: int):
        token = int(token)
        if token == self.vocab.blank:
            raise ContractError("language models never score the blank symbol")
        log_probs = self.score_all(state)
        return float(log_probs[token]), state + (token,)


class UniformLM(LMScorer):
    """log(1/k) over the k = |V| + 1 scorable symbols (characters and eos)."""

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self._log_probs = np.full(vocab.full_size, NEG_INF)
        k = vocab.n_chars + 1
        for i in vocab.char_ids:
            self._log_probs[i] = -math.log(k)
        self._log_probs[vocab.eos] = -math.log(k)

    def score_all(self, state) -> np.ndarray:
        return self._log_probs


@dataclass
class LMConfig:
    d_k: int = 32
    d_ff: int = 64
    n_blocks: int = 2
    n_head: int = 4
    dropout: float = 0.0

    def to_dict(self) -> dict:
        return {
            "d_k": self.d_k,
            "d_ff": self.d_ff,
            "n_blocks": self.n_blocks,
            "n_head": self.n_head,
            "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LMConfig":
        return cls(**d)


class _LMBlock(Module):
    def __init__(self, cfg: LMConfig, rng, rngbox: RngBox, dtype):
        super().__init__()
        self.norm1 = LayerNorm(cfg.d_k, dtype)
        self.attn = MultiHeadAttention(cfg.d_k, cfg.n_head, rng, rngbox, cfg.dropout, dtype)
        self.norm2 = LayerNorm(cfg.d_k, dtype)
        self.lin1 = Linear(cfg.d_k, cfg.d_ff, rng, dtype)
        self.lin2 = Linear(cfg.d_ff, cfg.d_k, rng, dtype)
        self.dropout = Dropout(cfg.dropout, rngbox)

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = self.norm1(x)
        x = T.add(x, self.attn(h, h, mask))
        return T.add(x, self.lin2(self.dropout(T.relu(self.lin1(self.norm2(x))))))


class TransformerLM(Module, LMScorer):
    """Tiny decoder-only character LM exposing the scorer interface."""

    def __init__(self, vocab: Vocabulary, cfg: LMConfig = LMConfig(), seed: int = 0, dtype=np.float32):
        super().__init__()
        self.vocab = vocab
        self.cfg = cfg
        self.dtype = dtype
        self.rngbox = RngBox((seed, 1))
        rng = np.random.default_rng((seed, 0x17))
        self.embedding = Embedding(vocab.full_size, cfg.d_k, rng, dtype)
        self.blocks = [_LMBlock(cfg, rng, self.rngbox, dtype) for _ in range(cfg.n_blocks)]
        self.final_norm = LayerNorm(cfg.d_k, dtype)
        self.out_proj = Linear(cfg.d_k, vocab.full_size, rng, dtype)
        mask = np.full(vocab.full_size, 0.0)
        for special in (vocab.blank, vocab.sos, vocab.pad):
            mask[special] = NEG_INF
        self._valid_mask = mask

    def logits(self, prefix_ids) -> Tensor:
        ids = np.asarray(prefix_ids, dtype=np.int64)
        pe = sinusoid_table(np.arange(len(ids), dtype=np.float64), self.cfg.d_k, self.dtype)
        x = T.add(self.embedding(ids), Tensor(pe))
        mask = causal_mask(len(ids))
        for block in self.blocks:
            x = block(x, mask)
        return self.out_proj(self.final_norm(x))

    def score_all(self, state) -> np.ndarray:
        prefix = [self.vocab.sos, *state]
        logits = self.logits(prefix)
        last = logits[logits.shape[0] - 1]
        masked = last.data + self._valid_mask
        masked = masked - masked.max()
        return (masked - np.log(np.exp(masked).sum())).astype(np.float64)


# -- hypotheses and search -------------------------------------------------------


@dataclass
class BeamHypothesis:
    """Partial transcript plus its decomposed and fused scores."""

    tokens: tuple
    att_score: float
    ctc_score: float
    lm_score: float
    ctc_state: CTCPrefixState | None
    lm_state: tuple
    terminated: bool = False

    def fused(self, cfg: DecodeConfig) -> float:
        return (
            cfg.ctc_weight * self.ctc_score
            + (1.0 - cfg.ctc_weight) * self.att_score
            + cfg.lm_weight * self.lm_score
        )

    def rank_score(self, cfg: DecodeConfig) -> float:
        total = self.fused(cfg)
        if cfg.length_normalize:
            total /= max(1, len(self.tokens) + 1)  # +1 counts the eos emission
        return total

    def _tie_key(self):
        return self.tokens + ((1,) if self.terminated else ())

    def search_key(self, cfg: DecodeConfig):
        """Pruning order inside the search: raw fused total, then lex tokens."""
        return (-self.fused(cfg), self._tie_key())

    def final_key(self, cfg: DecodeConfig):
        """n-best order: optionally length-normalized total, then lex tokens."""
        return (-self.rank_score(cfg), self._tie_key())


def _resolved_max_len(cfg: DecodeConfig, n_frames: int) -> int:
    if cfg.max_len is not None:
        return max(1, cfg.max_len)
    return max(1, int(n_frames * cfg.max_len_ratio))


def _expand(hyp, decoder, memory, scorer, lm, cfg, vocab, max_len):
    """All one-symbol extensions of ``hyp``: every character plus eos.

    ``max_len`` is an emission budget, so characters are only offered while
    a further eos emission would still fit inside it.
    """
    log_att = decoder.next_log_probs((vocab.sos,) + hyp.tokens, memory)
    log_lm = lm.score_all(hyp.lm_state) if cfg.lm_weight > 0.0 else None
    out = []
    if len(hyp.tokens) < max_len:
        for c in vocab.char_ids:
            new_state = scorer.extend(hyp.ctc_state, c) if scorer is not None else None
            out.append(
                BeamHypothesis(
                    tokens=hyp.tokens + (c,),
                    att_score=hyp.att_score + float(log_att[c]),
                    ctc_score=new_state.prefix_log_prob if new_state is not None else 0.0,
                    lm_score=hyp.lm_score + float(log_lm[c]) if log_lm is not None else 0.0,
                    ctc_state=new_state,
                    lm_state=hyp.lm_state + (c,) if log_lm is not None else hyp.lm_state,
                    terminated=False,
                )
            )
    out.append(
        BeamHypothesis(
            tokens=hyp.tokens,
            att_score=hyp.att_score + float(log_att[vocab.eos]),
            ctc_score=scorer.complete(hyp.ctc_state) if scorer is not None else 0.0,
            lm_score=hyp.lm_score + float(log_lm[vocab.eos]) if log_lm is not None else 0.0,
            ctc_state=hyp.ctc_state,
            lm_state=hyp.lm_state,
            terminated=True,
        )
    )
    return out


def _initial_hypothesis(scorer, lm) -> BeamHypothesis:
    return BeamHypothesis(
        tokens=(),
        att_score=0.0,
        ctc_score=0.0,
        lm_score=0.0,
        ctc_state=scorer.initial_state() if scorer is not None else None,
        lm_state=lm.initial_state(),
    )


def beam_search(
    decoder,
    memory: Tensor,
    log_posteriors,
    cfg: DecodeConfig,
    lm: LMScorer | None = None,
) -> list[BeamHypothesis]:
    """n-best transcripts by the fused objective.

    ``decoder`` provides ``next_log_probs(prefix_ids, memory)`` and
    ``vocab``; ``log_posteriors`` is the CTC lattice from the same encoding
    pass.  Returns terminated hypotheses ranked by (optionally
    length-normalized) fused score; if nothing terminated within the length
    budget, the best partials are returned flagged ``terminated=False``.
    """
    if memory.shape[0] < 1:
        raise ContractError("beam_search requires a nonempty encoder memory")
    vocab: Vocabulary = decoder.vocab
    if lm is None:
        lm = UniformLM(vocab)
    scorer = CTCPrefixScorer(np.asarray(log_posteriors)) if cfg.ctc_weight > 0.0 else None
    max_len = _resolved_max_len(cfg, memory.shape[0])

    live = [_initial_hypothesis(scorer, lm)]
    finished: list[BeamHypothesis] = []
    partials: list[BeamHypothesis] = []
    while live:
        # a hypothesis that spent the whole emission budget on characters
        # never chose eos: it closes as an unterminated partial
        partials.extend(h for h in live if len(h.tokens) >= max_len)
        live = [h for h in live if len(h.tokens) < max_len]
        if not live:
            break
        candidates = []
        for hyp in live:
            candidates.extend(_expand(hyp, decoder, memory, scorer, lm, cfg, vocab, max_len))
        candidates.sort(key=lambda h: h.search_key(cfg))
        top = candidates[: cfg.beam]
        live = [h for h in top if not h.terminated]
        finished.extend(h for h in top if h.terminated)

    pool = finished if finished else partials
    pool = sorted(pool, key=lambda h: h.final_key(cfg))
    return pool[: max(1, cfg.nbest)]


def greedy_decode(
    decoder,
    memory: Tensor,
    log_posteriors,
    cfg: DecodeConfig,
    lm: LMScorer | None = None,
) -> BeamHypothesis:
    """Iterated argmax over the fused extension score; stops when eos wins."""
    if memory.shape[0] < 1:
        raise ContractError("greedy_decode requires a nonempty encoder memory")
    vocab: Vocabulary = decoder.vocab
    if lm is None:
        lm = UniformLM(vocab)
    scorer = CTCPrefixScorer(np.asarray(log_posteriors)) if cfg.ctc_weight > 0.0 else None
    max_len = _resolved_max_len(cfg, memory.shape[0])

    hyp = _initial_hypothesis(scorer, lm)
    while len(hyp.tokens) < max_len:
        candidates = _expand(hyp, decoder, memory, scorer, lm, cfg, vocab, max_len)
        candidates.sort(key=lambda h: h.search_key(cfg))
        hyp = candidates[0]
        if hyp.terminated:
            return hyp
    return hyp  # emission budget exhausted without eos


def format_nbest(hyps: list[BeamHypothesis], cfg: DecodeConfig, vocab: Vocabulary) -> str:
    """One line per hypothesis: rank, fused score, lambda, beta, transcript."""
    lines = []
    for rank, hyp in enumerate(hyps, 1):
        text = vocab.decode(hyp.tokens)
        lines.append(f"{rank}\t{hyp.rank_score(cfg):.6f}\t{cfg.ctc_weight}\t{cfg.lm_weight}\t{text}")
    return "\n".join(lines) + "\n"
