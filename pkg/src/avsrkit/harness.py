"""Training, evaluation, checkpointing, and the gradient-check driver.

The training loop accumulates per-utterance gradients over a mini-batch
(so batching cannot change results), clips the global gradient norm, and
applies bias-corrected Adam under the warmup/inverse-sqrt learning-rate
schedule.  Metrics are appended as line-delimited key=value records; two
runs with the same configuration produce identical logs.
"""

from __future__ import annotations

import json
import math
import struct
import time
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import dataflow, objectives, search
from . import tensor as T
from .dataflow import AudioClip, AugmentPolicy, FrameStats, Manifest, VideoClip
from .errors import ConfigError, ContractError, NumericError
from .fusion_decoder import Vocabulary
from .model import AVSRModel, ModelConfig
from .nn import Module
from .search import DecodeConfig, LMConfig, TransformerLM
from .tensor import Tensor

CHECKPOINT_MAGIC = b"AVCK1"
CHECKPOINT_VERSION = 1


# -- learning-rate schedule and optimizer -----------------------------------------


def noam_lr(step: int, warmup: int, peak: float) -> float:
    """Linear ramp to ``peak`` at ``step == warmup``, then inverse-sqrt decay."""
    if step < 1:
        raise ContractError(f"noam_lr is defined for step >= 1, got {step}")
    if warmup < 1 or peak <= 0:
        raise ConfigError(f"invalid schedule: warmup={warmup}, peak={peak}")
    return peak * min(step / warmup, math.sqrt(warmup / step))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> None:
    """In-place bias-corrected Adam update for one parameter array."""
    m[...] = beta1 * m + (1.0 - beta1) * grad
    v[...] = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    """Adam over a named parameter dict, with global-norm gradient clipping."""

    def __init__(self, params: dict[str, Tensor], beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.t = 0

    def clip_global_norm(self, max_norm: float) -> float:
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = math.sqrt(total)
        if max_norm > 0 and norm > max_norm:
            scale = max_norm / norm
            for p in self.params.values():
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self, lr: float) -> None:
        self.t += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            adam_step(p.data, g.astype(p.data.dtype), self.m[name], self.v[name], self.t, lr, self.beta1, self.beta2, self.eps)


# -- word error rate ---------------------------------------------------------------


@dataclass
class WERResult:
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    n_scored: int
    n_excluded: int = 0


def edit_counts(ref: list, hyp: list) -> tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimum edit alignment."""
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            cost[i, j] = min(
                cost[i - 1, j - 1] + (0 if same else 1),
                cost[i - 1, j] + 1,
                cost[i, j - 1] + 1,
            )
    subs = dels = ins = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and cost[i, j] == cost[i - 1, j - 1] + (0 if ref[i - 1] == hyp[j - 1] else 1):
            if ref[i - 1] != hyp[j - 1]:
                subs += 1
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            dels += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return subs, dels, ins


def evaluate_wer(hyps: list[str], refs: list[str], unit: str = "word") -> WERResult:
    """Corpus WER = (S + D + I) / N over minimum edit alignments."""
    if len(hyps) != len(refs):
        raise ContractError(f"evaluate_wer: {len(hyps)} hypotheses vs {len(refs)} references")
    if unit not in ("word", "char"):
        raise ContractError(f"evaluate_wer: unknown unit {unit!r}")
    split = (lambda s: s.split()) if unit == "word" else list
    subs = dels = ins = ref_len = scored = excluded = 0
    for hyp, ref in zip(hyps, refs):
        ref_units = split(ref)
        if not ref_units:
            warnings.warn("evaluate_wer: empty reference excluded")
            excluded += 1
            continue
        s, d, i = edit_counts(ref_units, split(hyp))
        subs += s
        dels += d
        ins += i
        ref_len += len(ref_units)
        scored += 1
    if scored == 0:
        raise ContractError("evaluate_wer: no non-empty references")
    wer = (subs + dels + ins) / ref_len
    return WERResult(wer, subs, dels, ins, ref_len, scored, excluded)


# -- checkpoints -------------------------------------------------------------------


@dataclass
class CheckpointData:
    kind: str
    config: dict
    step: int
    rng_state: dict
    extra: dict
    params: dict
    buffers: dict
    moments_m: dict
    moments_v: dict


def _dtype_tag(arr: np.ndarray) -> str:
    return arr.dtype.newbyteorder("<").str


def save_checkpoint(
    path,
    kind: str,
    config: dict,
    params: dict,
    buffers: dict | None = None,
    moments_m: dict | None = None,
    moments_v: dict | None = None,
    step: int = 0,
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> None:
    """Deterministic binary container: JSON header plus raw array payload."""
    buffers = buffers or {}
    moments_m = moments_m or {}
    moments_v = moments_v or {}
    entries = []
    payload = bytearray()
    for group, arrays in (("param", params), ("buffer", buffers), ("moment_m", moments_m), ("moment_v", moments_v)):
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
            entries.append(
                {
                    "name": name,
                    "group": group,
                    "shape": list(arr.shape),
                    "dtype": _dtype_tag(arr),
                    "offset": len(payload),
                    "nbytes": len(raw),
                }
            )
            payload.extend(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config,
        "step": step,
        "rng_state": rng_state or {},
        "extra": extra or {},
        "arrays": entries,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(bytes(payload))


def load_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = fh.read(5)
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a checkpoint (magic {magic!r})")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header["format_version"] != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {header['format_version']}")
        payload = fh.read()
    groups: dict[str, dict] = {"param": {}, "buffer": {}, "moment_m": {}, "moment_v": {}}
    for entry in header["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        groups[entry["group"]][entry["name"]] = arr
    return CheckpointData(
        kind=header["kind"],
        config=header["config"],
        step=header["step"],
        rng_state=header["rng_state"],
        extra=header["extra"],
        params=groups["param"],
        buffers=groups["buffer"],
        moments_m=groups["moment_m"],
        moments_v=groups["moment_v"],
    )


def _assign_params(module: Module, stored: dict) -> None:
    params = module.named_parameters()
    if set(params) != set(stored):
        missing = sorted(set(params) ^ set(stored))
        raise ConfigError(f"checkpoint parameter names do not match the model (first diffs: {missing[:4]})")
    for name, p in params.items():
        if tuple(stored[name].shape) != p.shape:
            raise ConfigError(f"checkpoint shape mismatch for {name}: {stored[name].shape} vs {p.shape}")
        p.data = stored[name].astype(p.data.dtype)


def save_model(path, model: AVSRModel, optimizer: Adam | None = None, step: int = 0, rng_state: dict | None = None, extra: dict | None = None) -> None:
    params = {name: p.data for name, p in model.named_parameters().items()}
    save_checkpoint(
        path,
        kind="model",
        config=model.cfg.to_dict(),
        params=params,
        buffers=model.named_buffers(),
        moments_m=optimizer.m if optimizer else None,
        moments_v=optimizer.v if optimizer else None,
        step=step,
        rng_state=rng_state,
        extra=extra,
    )


def load_model(path, expect_config: ModelConfig | None = None) -> tuple[AVSRModel, CheckpointData]:
    data = load_checkpoint(path)
    if data.kind != "model":
        raise ConfigError(f"{path}: checkpoint kind {data.kind!r}, expected a model")
    cfg = ModelConfig.from_dict(data.config)
    if expect_config is not None and expect_config.to_dict() != cfg.to_dict():
        raise ConfigError("checkpoint model configuration does not match the expected configuration")
    model = AVSRModel(cfg, seed=0)
    _assign_params(model, data.params)
    model.load_buffers(data.buffers)
    model.eval()
    return model, data


def save_lm(path, lm: TransformerLM, extra: dict | None = None) -> None:
    config = {"alphabet": lm.vocab.chars, "lm": lm.cfg.to_dict()}
    params = {name: p.data for name, p in lm.named_parameters().items()}
    save_checkpoint(path, kind="lm", config=config, params=params, extra=extra)


def load_lm(path) -> TransformerLM:
    data = load_checkpoint(path)
    if data.kind != "lm":
        raise ConfigError(f"{path}: checkpoint kind {data.kind!r}, expected a language model")
    vocab = Vocabulary(data.config["alphabet"])
    lm = TransformerLM(vocab, LMConfig.from_dict(data.config["lm"]))
    _assign_params(lm, data.params)
    lm.eval()
    return lm


# -- training ---------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimization schedule and data handling knobs."""

    batch_size: int = 8
    epochs: int = 50
    warmup_steps: int = 25000
    peak_lr: float = 4e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-9
    max_frames: int = 600
    ctc_weight: float = 0.3
    grad_clip: float = 5.0
    seed: int = 0
    augment: bool = False
    speed_perturb: bool = False
    video_augment: bool = False
    val_every: int = 0
    val_max_utts: int = 100
    max_steps: int = 0
    time_budget_seconds: float = 0.0
    log_every: int = 10
    target_val_wer: float = -1.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc_weight must be in [0, 1], got {self.ctc_weight}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        """Toy-scale schedule: same shape as the full recipe, desk constants."""
        base = dict(batch_size=8, epochs=20, warmup_steps=400, peak_lr=1.2e-2)
        base.update(overrides)
        return cls(**base)


@dataclass
class Utterance:
    utt_id: str
    audio: AudioClip | None
    video: VideoClip | None
    transcript: str
    n_frames: int


@dataclass
class TrainResult:
    checkpoint_path: str
    best_checkpoint_path: str
    metrics_path: str
    steps: int
    best_val_wer: float
    n_skipped: int
    frame_stats: FrameStats | None


def load_dataset(
    manifest: Manifest,
    model_cfg: ModelConfig,
    stats: FrameStats | None,
    max_frames: int = 0,
) -> list[Utterance]:
    """Read, normalize, and length-filter every utterance of a manifest."""
    fe_cfg = model_cfg.frontend_config()
    need_audio = model_cfg.modality in ("audio", "audio-visual")
    need_video = model_cfg.modality in ("visual", "audio-visual")
    out = []
    for rec in manifest.records:
        audio = video = None
        n_frames = 0
        if need_audio:
            audio = dataflow.normalize_waveform(dataflow.read_wav(manifest.base_dir / rec.wav_path))
            n_frames = fe_cfg.audio_frame_count(len(audio.samples))
        if need_video:
            video = dataflow.read_frames(manifest.base_dir / rec.frames_path)
            if stats is not None:
                video = dataflow.standardize_frames(video, stats)
            n_frames = video.frames.shape[0]
        if max_frames > 0 and n_frames > max_frames:
            continue
        out.append(Utterance(rec.utt_id, audio, video, rec.transcript, n_frames))
    return out


def _utterance_loss(model: AVSRModel, utt: Utterance, alpha: float, smoothing: float):
    """Per-utterance hybrid loss normalized by target length (+eos)."""
    vocab = model.vocab
    target = vocab.encode(utt.transcript)
    memory, ctc_lp = model.encode(utt.audio, utt.video)
    logits = model.decoder_logits([vocab.sos, *target], memory)
    ce_loss = objectives.attention_ce(logits, [*target, vocab.eos], smoothing, reduction="sum")
    ce_ll = T.neg(ce_loss)
    if alpha > 0.0:
        ctc_ll = objectives.ctc_log_likelihood(ctc_lp, target)
    else:
        ctc_ll = Tensor(np.asarray(0.0, dtype=ctc_lp.dtype))
    loss = objectives.hybrid_loss(ctc_ll, ce_ll, alpha)
    scale = Tensor(np.asarray(1.0 / (len(target) + 1), dtype=loss.dtype))
    return T.mul(loss, scale), float(ctc_ll.item()), float(ce_ll.item())


def greedy_transcribe(model: AVSRModel, utt: Utterance, max_len: int = 0) -> str:
    """Attention-only greedy decode used for validation WER."""
    memory, ctc_lp = model.encode(utt.audio, utt.video)
    cfg = DecodeConfig(ctc_weight=0.0, lm_weight=0.0, beam=1, max_len=max_len or None)
    hyp = search.greedy_decode(model.decoder, memory, ctc_lp.data, cfg)
    return model.vocab.decode(hyp.tokens)


def _validate(model: AVSRModel, utts: list[Utterance], limit: int) -> float:
    model.eval()
    subset = utts[:limit] if limit else utts
    hyps = [greedy_transcribe(model, u) for u in subset]
    refs = [u.transcript for u in subset]
    result = evaluate_wer(hyps, refs)
    model.train()
    return result.wer


def _augment_utterance(utt: Utterance, model_cfg: ModelConfig, train_cfg: TrainConfig, policy: AugmentPolicy, rng) -> Utterance:
    audio, video = utt.audio, utt.video
    if audio is not None:
        if train_cfg.speed_perturb and model_cfg.modality == "audio":
            factor = float(rng.uniform(*policy.speed_range))
            audio = dataflow.speed_perturb(audio, factor)
        audio = dataflow.augment_waveform(audio, policy, rng)
    if video is not None and train_cfg.video_augment:
        video = dataflow.augment_video(video, policy, rng, training=True)
    return Utterance(utt.utt_id, audio, video, utt.transcript, utt.n_frames)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    train_manifest: Manifest,
    val_manifest: Manifest | None = None,
    out_dir="train_out",
    policy: AugmentPolicy | None = None,
) -> TrainResult:
    """Full training run; writes metrics, the last and the best checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataflow.validate_manifest(train_manifest, model_cfg.alphabet)
    policy = policy or AugmentPolicy()

    stats = None
    if model_cfg.modality in ("visual", "audio-visual"):
        stats = dataflow.frame_stats(train_manifest)

    train_utts = load_dataset(train_manifest, model_cfg, stats, train_cfg.max_frames)
    if not train_utts:
        raise ConfigError("no training utterances left after the max-frames filter")
    val_utts = load_dataset(val_manifest, model_cfg, stats, 0) if val_manifest is not None else []

    model = AVSRModel(model_cfg, seed=train_cfg.seed)
    model.seed_dropout((train_cfg.seed, 0xD0))
    model.train()
    optimizer = Adam(model.named_parameters(), train_cfg.adam_beta1, train_cfg.adam_beta2, train_cfg.adam_eps)
    shuffle_rng = np.random.default_rng((train_cfg.seed, 0x5F))

    metrics_path = out_dir / "metrics.log"
    last_path = out_dir / "last.ckpt"
    best_path = out_dir / "best.ckpt"
    metrics = open(metrics_path, "w", encoding="utf-8")

    alpha = train_cfg.ctc_weight
    smoothing = model_cfg.label_smoothing
    step = 0
    n_skipped = 0
    best_wer = math.inf
    t_start = time.monotonic()
    stop = False

    def out_of_budget() -> bool:
        if train_cfg.max_steps and step >= train_cfg.max_steps:
            return True
        if train_cfg.time_budget_seconds and time.monotonic() - t_start > train_cfg.time_budget_seconds:
            return True
        return False

    def run_validation() -> None:
        nonlocal best_wer, stop
        if not val_utts:
            return
        wer = _validate(model, val_utts, train_cfg.val_max_utts)
        if wer < best_wer:
            best_wer = wer
            save_model(best_path, model, optimizer, step, extra=_extra(stats, best_wer))
        metrics.write(f"step={step} val_wer={wer:.6g} best_wer={best_wer:.6g}\n")
        metrics.flush()
        if 0.0 <= train_cfg.target_val_wer and wer <= train_cfg.target_val_wer:
            stop = True

    for epoch in range(1, train_cfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_utts))
        for base in range(0, len(order), train_cfg.batch_size):
            batch_idx = order[base : base + train_cfg.batch_size]
            losses = []
            ctc_terms = []
            ce_terms = []
            n_used = 0
            for idx in batch_idx:
                utt = train_utts[int(idx)]
                if train_cfg.augment or train_cfg.speed_perturb or train_cfg.video_augment:
                    aug_rng = np.random.default_rng((train_cfg.seed, epoch, int(idx)))
                    utt = _augment_utterance(utt, model_cfg, train_cfg, policy, aug_rng)
                try:
                    loss, ctc_ll, ce_ll = _utterance_loss(model, utt, alpha, smoothing)
                except objectives.InfeasibleSampleError:
                    n_skipped += 1
                    continue
                losses.append(loss.item())
                ctc_terms.append(ctc_ll)
                ce_terms.append(ce_ll)
                n_used += 1
                T.backward(T.mul(loss, Tensor(np.asarray(1.0 / len(batch_idx), dtype=loss.dtype))))
            if n_used == 0:
                continue
            step += 1
            lr = noam_lr(step, train_cfg.warmup_steps, train_cfg.peak_lr)
            grad_norm = optimizer.clip_global_norm(train_cfg.grad_clip)
            optimizer.step(lr)
            model.zero_grad()
            if step % train_cfg.log_every == 0 or step == 1:
                metrics.write(
                    f"step={step} epoch={epoch} lr={lr:.6g} loss={np.mean(losses):.6g} "
                    f"ctc_ll={np.mean(ctc_terms):.6g} ce_ll={np.mean(ce_terms):.6g} "
                    f"grad_norm={grad_norm:.6g} skipped={n_skipped}\n"
                )
                metrics.flush()
            if train_cfg.val_every and step % train_cfg.val_every == 0:
                run_validation()
            if stop or out_of_budget():
                stop = True
                break
        if not stop:
            run_validation()
        if stop or out_of_budget():
            break

    save_model(last_path, model, optimizer, step, extra=_extra(stats, best_wer))
    if not best_path.exists():
        save_model(best_path, model, optimizer, step, extra=_extra(stats, best_wer))
    metrics.close()
    return TrainResult(
        checkpoint_path=str(last_path),
        best_checkpoint_path=str(best_path),
        metrics_path=str(metrics_path),
        steps=step,
        best_val_wer=best_wer,
        n_skipped=n_skipped,
        frame_stats=stats,
    )


def _extra(stats: FrameStats | None, best_wer: float) -> dict:
    extra = {"best_val_wer": best_wer if math.isfinite(best_wer) else -1.0}
    if stats is not None:
        extra["frame_mean"] = stats.mean
        extra["frame_std"] = stats.std
    return extra


def stats_from_extra(extra: dict) -> FrameStats | None:
    if "frame_mean" in extra:
        return FrameStats(mean=extra["frame_mean"], std=extra["frame_std"])
    return None


def evaluate_manifest(
    model: AVSRModel,
    manifest: Manifest,
    stats: FrameStats | None,
    decode_cfg: DecodeConfig,
    lm=None,
    limit: int = 0,
    audio_transform=None,
) -> tuple[WERResult, list[tuple[str, str]]]:
    """Beam-decode a manifest and score WER against its transcripts.

    ``audio_transform(clip, utt_index)`` lets callers corrupt the audio
    stream (e.g. mix noise at a fixed SNR) before encoding.
    """
    model.eval()
    utts = load_dataset(manifest, model.cfg, stats, 0)
    if limit:
        utts = utts[:limit]
    hyps = []
    for i, utt in enumerate(utts):
        audio = utt.audio
        if audio is not None and audio_transform is not None:
            audio = audio_transform(audio, i)
        memory, ctc_lp = model.encode(audio, utt.video)
        best = search.beam_search(model.decoder, memory, ctc_lp.data, decode_cfg, lm)[0]
        hyps.append((utt.utt_id, model.vocab.decode(best.tokens)))
    result = evaluate_wer([h for _, h in hyps], [u.transcript for u in utts])
    return result, hyps


# -- character language model training ----------------------------------------------


def train_char_lm(
    texts: list[str],
    vocab: Vocabulary,
    cfg: LMConfig = LMConfig(),
    seed: int = 0,
    epochs: int = 30,
    lr: float = 3e-3,
    batch_size: int = 10,
) -> TransformerLM:
    """Fit the tiny transformer LM on a text corpus by teacher forcing."""
    lm = TransformerLM(vocab, cfg, seed=seed)
    lm.train()
    optimizer = Adam(lm.named_parameters())
    rng = np.random.default_rng((seed, 0x1E))
    step = 0
    for _ in range(epochs):
        order = rng.permutation(len(texts))
        for base in range(0, len(order), batch_size):
            batch = order[base : base + batch_size]
            for idx in batch:
                ids = vocab.encode(texts[int(idx)])
                logits = lm.logits([vocab.sos, *ids])
                loss = objectives.attention_ce(logits, [*ids, vocab.eos], 0.0, reduction="mean")
                T.backward(T.mul(loss, Tensor(np.asarray(1.0 / len(batch), dtype=loss.dtype))))
            step += 1
            optimizer.clip_global_norm(5.0)
            optimizer.step(lr * min(1.0, step / 20.0))
            lm.zero_grad()
    lm.eval()
    return lm


# -- gradient checking ----------------------------------------------------------------


def central_difference(fn, x: np.ndarray, indices, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn(x)`` at the given flat indices."""
    flat = x.reshape(-1)
    out = np.zeros(len(indices))
    for n, idx in enumerate(indices):
        orig = flat[idx]
        flat[idx] = orig + h
        up = fn()
        flat[idx] = orig - h
        down = fn()
        flat[idx] = orig
        out[n] = (up - down) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float((np.abs(a - b) / denom).max())


@dataclass
class GradCheckReport:
    module: str
    tolerance: float
    group_errors: dict = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.group_errors.values()) if self.group_errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def lines(self) -> list[str]:
        out = [f"[{'PASS' if self.passed else 'FAIL'}] {self.module}: max rel err {self.max_error:.3e} (tol {self.tolerance:.0e})"]
        for name, err in sorted(self.group_errors.items(), key=lambda kv: -kv[1])[:5]:
            out.append(f"    {name}: {err:.3e}")
        return out


def _check_tensors(scalar_fn, tensors: dict[str, Tensor], samples: int, seed: int, h: float) -> dict[str, float]:
    """Compare analytic gradients of ``scalar_fn()`` against central differences.

    ``scalar_fn`` must rebuild the graph from the current tensor data on
    every call (finite differences mutate the data in place).
    """
    loss = scalar_fn()
    T.backward(loss)
    rng = np.random.default_rng((seed, 0xFD))
    errors = {}
    for name, tensor in tensors.items():
        grad = tensor.grad
        if grad is None:
            grad = np.zeros_like(tensor.data)
        n = tensor.data.size
        idx = sorted(rng.choice(n, size=min(samples, n), replace=False).tolist())
        fd = central_difference(lambda: scalar_fn().item(), tensor.data, idx, h)
        analytic = grad.reshape(-1)[idx]
        errors[name] = relative_error(analytic, fd)
        tensor.grad = None
    return errors


def _projection(shape, seed) -> Tensor:
    rng = np.random.default_rng((seed, 0xBB))
    return Tensor(rng.standard_normal(int(np.prod(shape))))


def _perturb_params(module: Module, seed, scale: float = 0.05) -> None:
    """Move parameters to a generic point before differencing.

    Zero-initialized gains park ReLU inputs exactly on the kink, where
    central differences are not a valid oracle; a small random offset makes
    the function differentiable at the evaluation point.
    """
    rng = np.random.default_rng((seed, 0xEE))
    for p in module.named_parameters().values():
        p.data = p.data + scale * rng.standard_normal(p.shape).astype(p.data.dtype)


def _scalarize(out: Tensor, proj: Tensor) -> Tensor:
    return T.sum_(T.mul(T.reshape(out, (out.size,)), proj))


def _gc_linear(seed, samples, h):
    from .nn import Linear

    rng = np.random.default_rng(seed)
    lin = Linear(6, 4, rng, np.float64)
    x = Tensor(rng.standard_normal((5, 6)), requires_grad=True)
    proj = _projection((5, 4), seed)
    fn = lambda: _scalarize(lin(x), proj)
    tensors = {"input": x, **lin.named_parameters("linear.")}
    return _check_tensors(fn, tensors, samples, seed, h)


def _gc_audio_frontend(seed, samples, h):
    from .frontends import AudioFrontend, FrontendConfig

    rng = np.random.default_rng(seed)
    cfg = FrontendConfig(channels=(2, 3, 4, 5))
    fe = AudioFrontend(cfg, rng, np.float64)
    _perturb_params(fe, seed)
    clip = AudioClip(np.random.default_rng((seed, 1)).standard_normal(1280))
    proj = _projection((2, 5), seed)
    fn = lambda: _scalarize(fe(clip), proj)
    return _check_tensors(fn, fe.named_parameters("audio_frontend."), samples, seed, h)


def _gc_visual_frontend(seed, samples, h):
    from .frontends import FrontendConfig, VisualFrontend

    rng = np.random.default_rng(seed)
    cfg = FrontendConfig(channels=(2, 3, 4, 5))
    fe = VisualFrontend(cfg, rng, np.float64)
    _perturb_params(fe, seed)
    clip = VideoClip(np.random.default_rng((seed, 2)).random((3, 16, 16)))
    proj = _projection((3, 5), seed)
    fn = lambda: _scalarize(fe(clip), proj)
    return _check_tensors(fn, fe.named_parameters("visual_frontend."), samples, seed, h)


def _gc_conformer_block(seed, samples, h):
    from .conformer import ConformerBlock, ConformerConfig
    from .nn import RngBox

    rng = np.random.default_rng(seed)
    cfg = ConformerConfig(n_blocks=1, d_k=8, d_v=8, d_ff=12, n_head=2, depthwise_kernel=5, dropout=0.0)
    block = ConformerBlock(cfg, rng, RngBox(0), np.float64)
    x = Tensor(np.random.default_rng((seed, 3)).standard_normal((6, 8)), requires_grad=True)
    proj = _projection((6, 8), seed)
    fn = lambda: _scalarize(block(x), proj)
    tensors = {"input": x, **block.named_parameters("conformer_block.")}
    return _check_tensors(fn, tensors, samples, seed, h)


def _gc_fusion(seed, samples, h):
    from .fusion_decoder import FusionMLP

    rng = np.random.default_rng(seed)
    fus = FusionMLP(6, rng, np.float64)
    a = Tensor(np.random.default_rng((seed, 4)).standard_normal((5, 6)), requires_grad=True)
    v = Tensor(np.random.default_rng((seed, 5)).standard_normal((5, 6)), requires_grad=True)
    proj = _projection((5, 6), seed)
    fn = lambda: _scalarize(fus(a, v), proj)
    tensors = {"acoustic": a, "visual": v, **fus.named_parameters("fusion.")}
    return _check_tensors(fn, tensors, samples, seed, h)


def _gc_decoder_block(seed, samples, h):
    from .fusion_decoder import DecoderConfig, TransformerDecoder
    from .nn import RngBox

    rng = np.random.default_rng(seed)
    vocab = Vocabulary("abc")
    cfg = DecoderConfig(n_blocks=1, d_k=8, d_ff=12, n_head=2, dropout=0.0)
    dec = TransformerDecoder(vocab, cfg, rng, RngBox(0), np.float64)
    memory = Tensor(np.random.default_rng((seed, 6)).standard_normal((4, 8)), requires_grad=True)
    prefix = [vocab.sos, 1, 2]
    proj = _projection((3, vocab.full_size), seed)
    fn = lambda: _scalarize(dec(prefix, memory), proj)
    tensors = {"memory": memory, **dec.named_parameters("decoder.")}
    return _check_tensors(fn, tensors, samples, seed, h)


def _random_lattice(n_frames, width, seed):
    logits = np.random.default_rng(seed).standard_normal((n_frames, width))
    return logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))


def _gc_ctc(seed, samples, h):
    lattice = Tensor(_random_lattice(6, 4, (seed, 7)), requires_grad=True)
    target = [1, 2, 1]
    fn = lambda: objectives.ctc_log_likelihood(lattice, target)
    return _check_tensors(fn, {"log_posteriors": lattice}, samples, seed, h)


def _gc_ce(seed, samples, h):
    logits = Tensor(np.random.default_rng((seed, 8)).standard_normal((4, 7)), requires_grad=True)
    target = [1, 2, 3, 6]
    fn = lambda: objectives.attention_ce(logits, target, 0.1, reduction="mean")
    return _check_tensors(fn, {"logits": logits}, samples, seed, h)


def _gc_hybrid(seed, samples, h):
    lattice = Tensor(_random_lattice(6, 4, (seed, 9)), requires_grad=True)
    logits = Tensor(np.random.default_rng((seed, 10)).standard_normal((3, 7)), requires_grad=True)

    def fn():
        ctc_ll = objectives.ctc_log_likelihood(lattice, [1, 2])
        ce_ll = T.neg(objectives.attention_ce(logits, [1, 2, 6], 0.0, reduction="sum"))
        return objectives.hybrid_loss(ctc_ll, ce_ll, 0.3)

    return _check_tensors(fn, {"log_posteriors": lattice, "logits": logits}, samples, seed, h)


def _gc_full_av(seed, samples, h):
    cfg = ModelConfig(
        alphabet="ab",
        modality="audio-visual",
        d_k=8,
        d_ff=12,
        encoder_blocks=1,
        n_head=2,
        depthwise_kernel=5,
        decoder_blocks=1,
        dropout=0.0,
        label_smoothing=0.0,
        frontend_channels=(2, 3, 4, 5),
        dtype="float64",
    )
    model = AVSRModel(cfg, seed=seed)
    _perturb_params(model, seed)
    model.train()
    data_rng = np.random.default_rng((seed, 11))
    audio = AudioClip(data_rng.standard_normal(8 * 640))
    video = VideoClip(data_rng.random((8, 16, 16)))
    target = model.vocab.encode("abab")

    def fn():
        memory, ctc_lp = model.encode(audio, video)
        logits = model.decoder_logits([model.vocab.sos, *target], memory)
        ce_ll = T.neg(objectives.attention_ce(logits, [*target, model.vocab.eos], 0.0, "sum"))
        ctc_ll = objectives.ctc_log_likelihood(ctc_lp, target)
        return objectives.hybrid_loss(ctc_ll, ce_ll, 0.3)

    return _check_tensors(fn, model.named_parameters(), samples, seed, h)


_GRADCHECKS = {
    "linear": (_gc_linear, 1e-9),
    "audio_frontend": (_gc_audio_frontend, 1e-4),
    "visual_frontend": (_gc_visual_frontend, 1e-4),
    "conformer_block": (_gc_conformer_block, 1e-4),
    "fusion": (_gc_fusion, 1e-4),
    "decoder_block": (_gc_decoder_block, 1e-4),
    "ctc": (_gc_ctc, 1e-5),
    "ce": (_gc_ce, 1e-6),
    "hybrid": (_gc_hybrid, 1e-5),
    "full_av": (_gc_full_av, 1e-4),
}


def gradcheck(module: str = "all", seed: int = 0, samples: int = 4, h: float = 1e-5) -> list[GradCheckReport]:
    """Analytic vs central-difference gradients for the selected module(s)."""
    if module == "all":
        names = list(_GRADCHECKS)
    elif module in _GRADCHECKS:
        names = [module]
    else:
        raise ConfigError(f"unknown gradcheck module {module!r}; choose from {sorted(_GRADCHECKS)} or 'all'")
    reports = []
    for name in names:
        fn, tol = _GRADCHECKS[name]
        errors = fn(seed, samples, h)
        reports.append(GradCheckReport(module=name, tolerance=tol, group_errors=errors))
    return reports
