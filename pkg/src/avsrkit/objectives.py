"""Training objectives: CTC log-likelihood, attention cross-entropy, hybrid.

The CTC forward recursion runs in log-space over the blank-augmented label
sequence and is built from differentiable tensor operations, so gradients
with respect to the frame log-posteriors come out of the same engine as
everything else.  A brute-force enumeration over all frame labelings serves
as the independent oracle for small instances.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, InfeasibleSampleError, ShapeError
from .tensor import NEG_INF, Tensor


@dataclass
class HybridLossConfig:
    """Relative CTC weight for the interpolated training objective."""

    ctc_weight: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ContractError(f"ctc_weight must be in [0, 1], got {self.ctc_weight}")


def required_frames(target: list[int] | np.ndarray) -> int:
    """Minimum number of frames that can emit ``target`` under CTC."""
    target = list(target)
    repeats = sum(1 for i in range(1, len(target)) if target[i] == target[i - 1])
    return len(target) + repeats


def ctc_log_likelihood(log_posteriors: Tensor, target, blank: int = 0) -> Tensor:
    """Log probability of ``target`` summed over all blank-augmented alignments.

    ``log_posteriors`` is [T, V+1] with valid log-distributions per row and
    the blank symbol at index ``blank``.  Infeasible targets (too few frames)
    yield a constant -inf tensor.
    """
    target = [int(t) for t in target]
    n_frames, n_symbols = log_posteriors.shape
    if any(t == blank for t in target):
        raise ContractError("ctc target must not contain the blank symbol")
    if any(not 0 <= t < n_symbols for t in target):
        raise ContractError(f"ctc target symbol out of range for lattice width {n_symbols}")
    if n_frames < required_frames(target):
        return Tensor(np.asarray(-math.inf, dtype=log_posteriors.dtype))

    # Extended sequence: blank, y1, blank, y2, ..., blank (length 2L+1).
    ext = [blank]
    for t in target:
        ext.extend([t, blank])
    ext = np.asarray(ext, dtype=np.int64)
    s_len = len(ext)

    # A skip transition s-2 -> s is legal only onto a label that differs
    # from the label two slots back (blanks and repeats must be entered
    # stepwise).
    skip_ok = np.full(s_len, NEG_INF, dtype=log_posteriors.dtype)
    for s in range(2, s_len):
        if ext[s] != blank and ext[s] != ext[s - 2]:
            skip_ok[s] = 0.0
    skip_mask = Tensor(skip_ok)
    ninf1 = Tensor(np.full(1, NEG_INF, dtype=log_posteriors.dtype))
    ninf2 = Tensor(np.full(2, NEG_INF, dtype=log_posteriors.dtype))

    emit0 = T.take(log_posteriors[0], ext)
    init = np.full(s_len, NEG_INF, dtype=log_posteriors.dtype)
    init[0] = 0.0
    if s_len > 1:
        init[1] = 0.0
    alpha = T.add(Tensor(init), emit0)

    dead = Tensor(np.full(s_len, NEG_INF, dtype=log_posteriors.dtype))
    for t in range(1, n_frames):
        stay = alpha
        step = T.concat([ninf1, alpha[: s_len - 1]], axis=0) if s_len > 1 else dead
        skip = T.add(T.concat([ninf2, alpha[: s_len - 2]], axis=0), skip_mask) if s_len > 2 else dead
        merged = T.logsumexp(T.stack([stay, step, skip], axis=0), axis=0)
        alpha = T.add(merged, T.take(log_posteriors[t], ext))

    tail = alpha[s_len - 2 : s_len] if s_len > 1 else alpha
    return T.logsumexp(tail, axis=0)


def ctc_brute_force(log_posteriors: np.ndarray, target, blank: int = 0) -> float:
    """Oracle: enumerate every frame labeling and sum those collapsing to target."""
    log_posteriors = np.asarray(log_posteriors, dtype=np.float64)
    n_frames, n_symbols = log_posteriors.shape
    if n_frames > 8 or n_symbols > 6:
        raise ShapeError(f"ctc_brute_force limited to T<=8, vocab+1<=6; got shape {log_posteriors.shape}")
    target = tuple(int(t) for t in target)

    total = -math.inf
    for path in itertools.product(range(n_symbols), repeat=n_frames):
        collapsed = []
        prev = None
        for sym in path:
            if sym != prev and sym != blank:
                collapsed.append(sym)
            prev = sym
        if tuple(collapsed) != target:
            continue
        lp = float(sum(log_posteriors[t, sym] for t, sym in enumerate(path)))
        total = np.logaddexp(total, lp)
    return float(total)


def attention_ce(
    logits: Tensor,
    target_with_eos,
    label_smoothing: float = 0.0,
    reduction: str = "mean",
) -> Tensor:
    """Negative log-likelihood of the teacher-forced decoder outputs.

    ``logits`` rows map one-to-one onto ``target_with_eos`` (the gold
    characters followed by eos).  Label smoothing mixes the one-hot target
    with the uniform distribution over the whole output vocabulary.
    """
    targets = np.asarray(target_with_eos, dtype=np.int64)
    if targets.ndim != 1 or logits.shape[0] != targets.shape[0]:
        raise ContractError(
            f"attention_ce: {logits.shape[0]} logit rows vs {targets.shape[0]} target symbols"
        )
    if reduction not in ("mean", "sum"):
        raise ContractError(f"attention_ce: unknown reduction {reduction!r}")
    n_pos, n_vocab = logits.shape
    log_probs = T.log_softmax(logits, axis=1)
    picked = T.take_along_last(log_probs, targets.reshape(n_pos, 1))
    nll = T.neg(T.sum_(picked))
    if label_smoothing > 0.0:
        uniform = T.neg(T.mean(log_probs, axis=1, keepdims=True))
        smooth = T.sum_(uniform)
        nll = T.add(
            T.mul(nll, Tensor(np.asarray(1.0 - label_smoothing, dtype=logits.dtype))),
            T.mul(smooth, Tensor(np.asarray(label_smoothing, dtype=logits.dtype))),
        )
    if reduction == "mean":
        nll = T.mul(nll, Tensor(np.asarray(1.0 / n_pos, dtype=logits.dtype)))
    return nll


def hybrid_loss(ctc_ll: Tensor, ce_ll: Tensor, ctc_weight: float) -> Tensor:
    """Negated interpolation of the two log-likelihood terms.

    loss = -(alpha * ctc_ll + (1 - alpha) * ce_ll); alpha=1 is pure CTC,
    alpha=0 pure attention.  An infeasible CTC term (-inf) cannot be
    trained through and raises unless its weight is zero.
    """
    if not 0.0 <= ctc_weight <= 1.0:
        raise ContractError(f"ctc_weight must be in [0, 1], got {ctc_weight}")
    alpha = float(ctc_weight)
    if alpha > 0.0 and not math.isfinite(ctc_ll.item()):
        raise InfeasibleSampleError("hybrid_loss: CTC term is -inf (target infeasible for input length)")
    if alpha == 0.0:
        return T.neg(ce_ll)
    if alpha == 1.0:
        return T.neg(ctc_ll)
    a = Tensor(np.asarray(alpha, dtype=ctc_ll.dtype))
    b = Tensor(np.asarray(1.0 - alpha, dtype=ce_ll.dtype))
    return T.neg(T.add(T.mul(ctc_ll, a), T.mul(ce_ll, b)))
