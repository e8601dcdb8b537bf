"""Full recognizer assembly: front-ends, encoders, fusion, decoder, CTC head.

Audio-only and visual-only variants reuse the same code path: the single
encoder stream feeds the decoder directly and fusion is skipped.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .conformer import ConformerConfig, ConformerEncoder
from .dataflow import AudioClip, VideoClip
from .errors import ConfigError, ContractError
from .frontends import AudioFrontend, FrontendConfig, VisualFrontend
from .fusion_decoder import DecoderConfig, FusionMLP, TransformerDecoder, Vocabulary
from .nn import Linear, Module, RngBox
from .tensor import Tensor

MODALITIES = ("audio", "visual", "audio-visual")


@dataclass
class ModelConfig:
    """Every architecture hyperparameter of the recognizer."""

    alphabet: str = "abcde"
    modality: str = "audio-visual"
    d_k: int = 256
    d_ff: int = 2048
    encoder_blocks: int = 12
    n_head: int = 8
    depthwise_kernel: int = 31
    decoder_blocks: int = 6
    dropout: float = 0.1
    label_smoothing: float = 0.1
    frontend_channels: tuple = (64, 128, 256, 512)
    sample_rate: int = 16000
    dtype: str = "float32"

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        self.frontend_channels = tuple(self.frontend_channels)

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def conformer_config(self) -> ConformerConfig:
        return ConformerConfig(
            n_blocks=self.encoder_blocks,
            d_k=self.d_k,
            d_v=self.d_k,
            d_ff=self.d_ff,
            n_head=self.n_head,
            depthwise_kernel=self.depthwise_kernel,
            dropout=self.dropout,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            n_blocks=self.decoder_blocks,
            d_k=self.d_k,
            d_ff=self.d_ff,
            n_head=self.n_head,
            dropout=self.dropout,
        )

    def frontend_config(self) -> FrontendConfig:
        return FrontendConfig(channels=self.frontend_channels, sample_rate=self.sample_rate)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frontend_channels"] = list(self.frontend_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["frontend_channels"] = tuple(d["frontend_channels"])
        return cls(**d)

    @classmethod
    def paper(cls, modality: str = "audio-visual", alphabet: str = "abcdefghijklmnopqrstuvwxyz0123456789 '") -> "ModelConfig":
        n_head = 4 if modality == "visual" else 8
        return cls(alphabet=alphabet, modality=modality, n_head=n_head)

    @classmethod
    def desk(cls, modality: str = "audio-visual", alphabet: str = "abcde") -> "ModelConfig":
        """Scaled-down preset for toy corpora: /8 widths, 2 blocks, no dropout."""
        return cls(
            alphabet=alphabet,
            modality=modality,
            d_k=64,
            d_ff=128,
            encoder_blocks=2,
            n_head=4,
            decoder_blocks=2,
            dropout=0.0,
            frontend_channels=(8, 16, 32, 64),
        )


class AVSRModel(Module):
    """End-to-end recognizer over raw waveforms and/or grayscale frame stacks."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.vocab = Vocabulary(cfg.alphabet)
        self.rngbox = RngBox(seed)
        init_rng = np.random.default_rng((seed, 0xA5))
        dtype = cfg.np_dtype
        fe_cfg = cfg.frontend_config()
        enc_cfg = cfg.conformer_config()
        feat_dim = cfg.frontend_channels[-1]

        self.audio_frontend = None
        self.audio_encoder = None
        self.visual_frontend = None
        self.visual_encoder = None
        self.fusion = None
        if cfg.modality in ("audio", "audio-visual"):
            self.audio_frontend = AudioFrontend(fe_cfg, init_rng, dtype)
            self.audio_encoder = ConformerEncoder(feat_dim, enc_cfg, init_rng, self.rngbox, dtype)
        if cfg.modality in ("visual", "audio-visual"):
            self.visual_frontend = VisualFrontend(fe_cfg, init_rng, dtype)
            self.visual_encoder = ConformerEncoder(feat_dim, enc_cfg, init_rng, self.rngbox, dtype)
        if cfg.modality == "audio-visual":
            self.fusion = FusionMLP(cfg.d_k, init_rng, dtype)
        self.decoder = TransformerDecoder(self.vocab, cfg.decoder_config(), init_rng, self.rngbox, dtype)
        self.ctc_head = Linear(cfg.d_k, self.vocab.ctc_size, init_rng, dtype)

    def seed_dropout(self, seed: int) -> None:
        self.rngbox.reseed(seed)

    def encode(self, audio: AudioClip | None = None, video: VideoClip | None = None) -> tuple[Tensor, Tensor]:
        """Inputs -> (encoder memory [T, d_k], CTC log-posteriors [T, V+1])."""
        modality = self.cfg.modality
        if modality in ("audio", "audio-visual") and audio is None:
            raise ContractError(f"{modality} model requires an audio clip")
        if modality in ("visual", "audio-visual") and video is None:
            raise ContractError(f"{modality} model requires a video clip")

        if modality == "audio":
            memory = self.audio_encoder(self.audio_frontend(audio))
        elif modality == "visual":
            memory = self.visual_encoder(self.visual_frontend(video))
        else:
            a = self.audio_encoder(self.audio_frontend(audio))
            v = self.visual_encoder(self.visual_frontend(video))
            memory = self.fusion(a, v)
        ctc_log_post = T.log_softmax(self.ctc_head(memory), axis=1)
        return memory, ctc_log_post

    def decoder_logits(self, prefix_ids, memory: Tensor) -> Tensor:
        return self.decoder(prefix_ids, memory)
