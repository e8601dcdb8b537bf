"""Data ingestion, normalization, augmentation, and the synthetic corpus.

File formats (all little-endian):
  * waveforms: WAV, PCM16 mono
  * frame stacks: magic ``AVF1``, u32 T, H, W, then T*H*W grayscale bytes
  * manifests: UTF-8 TSV of (id, wav path, frames path, transcript),
    ``#`` starts a comment line; paths are relative to the manifest file
"""

from __future__ import annotations

import math
import struct
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, DegenerateInputError, ShapeError

AVF_MAGIC = b"AVF1"

# Tone family shared by the corpus generator and the babble synthesizer:
# every symbol gets a distinct pair of frequencies, all below Nyquist at
# 16 kHz for up to 10 symbols.
_BASE_F1, _STEP_F1 = 350.0, 120.0
_BASE_F2, _STEP_F2 = 900.0, 170.0
MAX_SYMBOLS = 10


@dataclass
class AudioClip:
    """Raw waveform samples (float) with their sample rate."""

    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class VideoClip:
    """Stack of grayscale frames, intensities in [0, 1], fixed frame rate."""

    frames: np.ndarray
    frame_rate: int = 25

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3:
            raise ShapeError(f"VideoClip frames must be [T, H, W], got {self.frames.shape}")


@dataclass
class AugmentPolicy:
    """Audio/video augmentation bounds; all sampling is uniform."""

    snr_levels_db: tuple = (-5, 0, 5, 10, 15, 20)
    n_time_masks: int = 2
    max_mask_seconds: float = 0.4
    n_band_rejects: int = 2
    max_band_hz: float = 150.0
    speed_range: tuple = (0.9, 1.1)
    crop: tuple = (88, 88)
    hflip_prob: float = 0.5


@dataclass
class ManifestRecord:
    utt_id: str
    wav_path: str
    frames_path: str
    transcript: str


@dataclass
class Manifest:
    records: list
    split: str = "train"
    base_dir: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.records)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


# -- file I/O -----------------------------------------------------------------


def write_wav(path, clip: AudioClip) -> None:
    pcm = np.clip(clip.samples, -1.0, 1.0)
    pcm = (pcm * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(clip.sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> AudioClip:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise DataError(f"{path}: expected mono PCM16 WAV")
        sr = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
    return AudioClip(samples, sr)


def write_frames(path, clip: VideoClip) -> None:
    t, h, w = clip.frames.shape
    data = np.clip(clip.frames, 0.0, 1.0)
    payload = (data * 255.0).round().astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(AVF_MAGIC)
        fh.write(struct.pack("<III", t, h, w))
        fh.write(payload)


def read_frames(path) -> VideoClip:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != AVF_MAGIC:
            raise DataError(f"{path}: bad magic {magic!r}, expected {AVF_MAGIC!r}")
        t, h, w = struct.unpack("<III", fh.read(12))
        payload = fh.read(t * h * w)
    if len(payload) != t * h * w:
        raise DataError(f"{path}: truncated frame payload")
    frames = np.frombuffer(payload, dtype=np.uint8).reshape(t, h, w).astype(np.float64) / 255.0
    return VideoClip(frames)


def write_manifest(path, manifest: Manifest) -> None:
    lines = ["# id\twav\tframes\ttranscript"]
    for rec in manifest.records:
        lines.append(f"{rec.utt_id}\t{rec.wav_path}\t{rec.frames_path}\t{rec.transcript}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path, split: str = "train") -> Manifest:
    path = Path(path)
    records = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        records.append(ManifestRecord(*parts))
    return Manifest(records, split=split, base_dir=path.parent)


def validate_manifest(manifest: Manifest, alphabet: str) -> None:
    """Check referenced files exist and transcripts stay within the alphabet."""
    allowed = set(alphabet)
    for rec in manifest.records:
        if not rec.transcript:
            raise DataError(f"{rec.utt_id}: empty transcript")
        extra = set(rec.transcript) - allowed
        if extra:
            raise DataError(f"{rec.utt_id}: transcript symbols {sorted(extra)} outside alphabet {alphabet!r}")
        for p in (rec.wav_path, rec.frames_path):
            if not (manifest.base_dir / p).exists():
                raise DataError(f"{rec.utt_id}: missing file {p}")


def load_pair(manifest: Manifest, rec: ManifestRecord) -> tuple[AudioClip, VideoClip]:
    return (
        read_wav(manifest.base_dir / rec.wav_path),
        read_frames(manifest.base_dir / rec.frames_path),
    )


# -- normalization -------------------------------------------------------------


def normalize_waveform(clip: AudioClip) -> AudioClip:
    """Remove the mean and divide by the standard deviation."""
    mu = clip.samples.mean()
    sd = clip.samples.std()
    if sd == 0.0:
        raise DegenerateInputError("normalize_waveform: constant waveform has no scale")
    return AudioClip((clip.samples - mu) / sd, clip.sample_rate)


@dataclass
class FrameStats:
    mean: float
    std: float


def frame_stats(manifest: Manifest) -> FrameStats:
    """Pixel mean/std over an entire split (compute on train only)."""
    total = 0.0
    total_sq = 0.0
    count = 0
    for rec in manifest.records:
        frames = read_frames(manifest.base_dir / rec.frames_path).frames
        total += frames.sum()
        total_sq += (frames * frames).sum()
        count += frames.size
    if count == 0:
        raise DataError("frame_stats: empty manifest")
    mean = total / count
    var = max(total_sq / count - mean * mean, 1e-12)
    return FrameStats(mean=float(mean), std=float(math.sqrt(var)))


def standardize_frames(clip: VideoClip, stats: FrameStats) -> VideoClip:
    return VideoClip((clip.frames - stats.mean) / stats.std, clip.frame_rate)


# -- audio augmentation ---------------------------------------------------------


def mix_at_snr(clean: AudioClip, noise: AudioClip, snr_db) -> AudioClip:
    """Add noise scaled so the clean/noise power ratio hits ``snr_db``.

    ``snr_db=None`` (or +inf) selects the clean branch and returns the
    input untouched.  Powers are mean squares over the full clip.
    """
    if snr_db is None or snr_db == math.inf:
        return AudioClip(clean.samples.copy(), clean.sample_rate)
    n = len(clean.samples)
    noise_samples = noise.samples
    if len(noise_samples) < n:
        reps = -(-n // len(noise_samples))
        noise_samples = np.tile(noise_samples, reps)
    noise_samples = noise_samples[:n]
    p_clean = float(np.mean(clean.samples**2))
    p_noise = float(np.mean(noise_samples**2))
    if p_noise == 0.0:
        raise DegenerateInputError("mix_at_snr: silent noise")
    scale = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioClip(clean.samples + scale * noise_samples, clean.sample_rate)


def time_mask(clip: AudioClip, policy: AugmentPolicy, seed) -> AudioClip:
    """Zero ``n_time_masks`` random spans of up to ``max_mask_seconds`` each."""
    rng = _as_rng(seed)
    max_len = int(policy.max_mask_seconds * clip.sample_rate)
    n = len(clip.samples)
    if n <= max_len:
        warnings.warn(f"time_mask skipped: clip of {n} samples shorter than one mask ({max_len})")
        return AudioClip(clip.samples.copy(), clip.sample_rate)
    out = clip.samples.copy()
    for _ in range(policy.n_time_masks):
        length = int(rng.integers(1, max_len + 1))
        start = int(rng.integers(0, n - length + 1))
        out[start : start + length] = 0.0
    return AudioClip(out, clip.sample_rate)


def reject_band(samples: np.ndarray, sample_rate: int, lo_hz: float, hi_hz: float) -> np.ndarray:
    """Zero all rFFT bins with frequency in [lo_hz, hi_hz]."""
    if hi_hz <= lo_hz:
        return samples.copy()
    spec = np.fft.rfft(samples)
    freqs = np.fft.rfftfreq(len(samples), d=1.0 / sample_rate)
    spec[(freqs >= lo_hz) & (freqs <= hi_hz)] = 0.0
    return np.fft.irfft(spec, n=len(samples))


def band_reject(clip: AudioClip, policy: AugmentPolicy, seed) -> AudioClip:
    """Reject ``n_band_rejects`` random frequency bands of up to ``max_band_hz``."""
    rng = _as_rng(seed)
    nyquist = clip.sample_rate / 2.0
    out = clip.samples.copy()
    for _ in range(policy.n_band_rejects):
        width = float(rng.uniform(0.0, policy.max_band_hz))
        center = float(rng.uniform(width / 2.0, nyquist - width / 2.0))
        out = reject_band(out, clip.sample_rate, center - width / 2.0, center + width / 2.0)
    return AudioClip(out, clip.sample_rate)


def speed_perturb(clip: AudioClip, factor: float) -> AudioClip:
    """Resample by linear interpolation; factor > 1 shortens the clip."""
    if not 0.9 <= factor <= 1.1:
        raise ConfigError(f"speed factor must be in [0.9, 1.1], got {factor}")
    n = len(clip.samples)
    n_out = round(n / factor)
    positions = np.arange(n_out) * factor
    out = np.interp(positions, np.arange(n), clip.samples)
    return AudioClip(out, clip.sample_rate)


def synth_babble(n_samples: int, seed, sample_rate: int = 16000, n_talkers: int = 6) -> AudioClip:
    """Babble stand-in: sum of shifted speech-like tone streams.

    Each stream strings together random symbol signatures from the same
    tone family the synthetic corpus uses, so the spectrum genuinely
    collides with the speech content at low SNR.
    """
    rng = _as_rng(seed)
    total = np.zeros(n_samples, dtype=np.float64)
    seg = int(0.2 * sample_rate)
    for _ in range(n_talkers):
        offset = int(rng.integers(0, seg))
        stream = []
        length = 0
        while length < n_samples + offset:
            k = int(rng.integers(0, MAX_SYMBOLS))
            stream.append(symbol_waveform(k, sample_rate=sample_rate, phase=rng.uniform(0, 2 * math.pi)))
            length += seg
        total += np.concatenate(stream)[offset : offset + n_samples]
    return AudioClip(total / n_talkers, sample_rate)


def augment_waveform(clip: AudioClip, policy: AugmentPolicy, seed) -> AudioClip:
    """Uniformly pick one SNR level or clean, then time masks and band rejects."""
    rng = _as_rng(seed)
    choice = int(rng.integers(0, len(policy.snr_levels_db) + 1))
    if choice < len(policy.snr_levels_db):
        noise = synth_babble(len(clip.samples), rng, clip.sample_rate)
        clip = mix_at_snr(clip, noise, policy.snr_levels_db[choice])
    clip = time_mask(clip, policy, rng)
    clip = band_reject(clip, policy, rng)
    return clip


# -- video augmentation ----------------------------------------------------------


def augment_video(clip: VideoClip, policy: AugmentPolicy, seed, training: bool = True) -> VideoClip:
    """One crop offset and one flip decision per clip, identical on all frames."""
    t, h, w = clip.frames.shape
    ch, cw = policy.crop
    if h < ch or w < cw:
        raise ShapeError(f"augment_video: frames {h}x{w} smaller than crop {ch}x{cw}")
    if training:
        rng = _as_rng(seed)
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        flip = bool(rng.random() < policy.hflip_prob)
    else:
        top = (h - ch) // 2
        left = (w - cw) // 2
        flip = False
    frames = clip.frames[:, top : top + ch, left : left + cw]
    if flip:
        frames = frames[:, :, ::-1]
    return VideoClip(frames.copy(), clip.frame_rate)


# -- synthetic corpus -------------------------------------------------------------


def symbol_frequencies(k: int) -> tuple[float, float]:
    if not 0 <= k < MAX_SYMBOLS:
        raise ConfigError(f"symbol index {k} outside supported range 0..{MAX_SYMBOLS - 1}")
    return _BASE_F1 + _STEP_F1 * k, _BASE_F2 + _STEP_F2 * k


def symbol_waveform(
    k: int,
    sample_rate: int = 16000,
    seconds: float = 0.2,
    phase: float = 0.0,
) -> np.ndarray:
    """Clean tone signature of symbol ``k``: a fixed two-frequency chord."""
    f1, f2 = symbol_frequencies(k)
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    return 0.45 * np.sin(2 * math.pi * f1 * t + phase) + 0.45 * np.sin(2 * math.pi * f2 * t + phase)


def symbol_frames(k: int, frame_size: int, n_frames: int = 5) -> np.ndarray:
    """Spatial signature of symbol ``k``: a Gaussian blob at a distinct position."""
    angle = 2 * math.pi * k / MAX_SYMBOLS
    cy = frame_size / 2.0 + 0.3 * frame_size * math.sin(angle)
    cx = frame_size / 2.0 + 0.3 * frame_size * math.cos(angle)
    yy, xx = np.mgrid[0:frame_size, 0:frame_size]
    sigma = frame_size / 10.0
    blob = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
    return np.repeat(blob[None, :, :], n_frames, axis=0)


def classify_symbols(clip: AudioClip, alphabet_size: int, seconds: float = 0.2) -> list[int]:
    """Nearest-template oracle: correlate each segment against every signature."""
    seg = int(seconds * clip.sample_rate)
    templates = [symbol_waveform(k, clip.sample_rate, seconds) for k in range(alphabet_size)]
    norms = [np.linalg.norm(t) for t in templates]
    out = []
    for start in range(0, len(clip.samples) - seg + 1, seg):
        chunk = clip.samples[start : start + seg]
        scores = [abs(chunk @ t) / n for t, n in zip(templates, norms)]
        out.append(int(np.argmax(scores)))
    return out


@dataclass
class CorpusSpec:
    """Parameters of the synthetic audio-visual corpus."""

    alphabet: str = "abcde"
    n_train: int = 200
    n_val: int = 20
    n_test: int = 20
    min_len: int = 1
    max_len: int = 8
    frame_size: int = 24
    sample_rate: int = 16000
    frame_rate: int = 25
    symbol_seconds: float = 0.2
    audio_noise_rms: float = 0.01

    def __post_init__(self):
        if not 2 <= len(self.alphabet) <= MAX_SYMBOLS:
            raise ConfigError(f"alphabet size must be 2..{MAX_SYMBOLS}, got {len(self.alphabet)}")
        if len(set(self.alphabet)) != len(self.alphabet):
            raise ConfigError("alphabet symbols must be distinct")
        if not 1 <= self.min_len <= self.max_len <= 12:
            raise ConfigError(f"utterance lengths must satisfy 1 <= min <= max <= 12, got {self.min_len}..{self.max_len}")
        if int(self.symbol_seconds * self.frame_rate) < 1:
            raise ConfigError("symbol duration shorter than one video frame")


def render_utterance(spec: CorpusSpec, transcript: str, rng) -> tuple[AudioClip, VideoClip]:
    """Waveform and frame stack for a transcript, with mild audio noise."""
    rng = _as_rng(rng)
    frames_per_symbol = int(spec.symbol_seconds * spec.frame_rate)
    wav_parts = []
    frame_parts = []
    for ch in transcript:
        k = spec.alphabet.index(ch)
        wav_parts.append(symbol_waveform(k, spec.sample_rate, spec.symbol_seconds))
        frame_parts.append(symbol_frames(k, spec.frame_size, frames_per_symbol))
    samples = np.concatenate(wav_parts)
    samples = samples + spec.audio_noise_rms * rng.standard_normal(len(samples))
    return AudioClip(samples, spec.sample_rate), VideoClip(np.concatenate(frame_parts), spec.frame_rate)


def synth_corpus(spec: CorpusSpec, seed: int, out_dir) -> dict[str, Manifest]:
    """Generate train/val/test splits of paired audio and frame files.

    Per-utterance randomness is derived from (seed, split, index), so the
    corpus is byte-identical for a fixed spec and seed regardless of
    generation order.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise OSError(f"synth_corpus: cannot create output directory {out_dir}: {err}") from err
    manifests: dict[str, Manifest] = {}
    for split_idx, (split, count) in enumerate(
        (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))
    ):
        split_dir = out_dir / split
        split_dir.mkdir(exist_ok=True)
        records = []
        for i in range(count):
            rng = np.random.default_rng((seed, split_idx, i))
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            transcript = "".join(spec.alphabet[int(rng.integers(0, len(spec.alphabet)))] for _ in range(length))
            audio, video = render_utterance(spec, transcript, rng)
            utt_id = f"{split}_{i:05d}"
            wav_rel = f"{split}/{utt_id}.wav"
            avf_rel = f"{split}/{utt_id}.avf"
            write_wav(out_dir / wav_rel, audio)
            write_frames(out_dir / avf_rel, video)
            records.append(ManifestRecord(utt_id, wav_rel, avf_rel, transcript))
        manifest = Manifest(records, split=split, base_dir=out_dir)
        write_manifest(out_dir / f"{split}.tsv", manifest)
        manifests[split] = manifest
    return manifests
