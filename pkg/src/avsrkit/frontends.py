"""Raw-input feature extractors.

Audio: an 18-layer 1D residual network over the waveform whose stride chain
(4 at the stem, 2 in each of the four residual stages, then average pooling)
downsamples 16 kHz samples to exactly 25 feature frames per second.  The
temporal padding of every strided convolution is chosen so the output
length is exactly floor(input/stride); nested, the whole chain realizes
floor(samples / downsample_factor) with no off-by-one drift.

Visual: a 3D convolutional stem (temporal extent preserved) followed by a
2D residual network applied per frame and global spatial average pooling,
one feature vector per input frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .dataflow import AudioClip, VideoClip
from .nn import BatchNorm, Conv1d, Conv2d, Conv3d, Module
from .tensor import Tensor


def temporal_padding(kernel: int, stride: int) -> tuple[int, int]:
    """Left/right padding giving output length floor(T / stride).

    Total padding kernel - stride makes floor((T + pad - kernel)/stride) + 1
    collapse to floor(T/stride) for every T >= stride.
    """
    if kernel < stride:
        raise ConfigError(f"temporal padding undefined for kernel {kernel} < stride {stride}")
    total = kernel - stride
    left = total // 2
    return left, total - left


@dataclass
class FrontendConfig:
    """Stage widths and strides for both front-ends."""

    channels: tuple = (64, 128, 256, 512)
    conv1_kernel: int = 80
    conv1_stride: int = 4
    stage_strides: tuple = (2, 2, 2, 2)
    pool_stride: int = 10
    visual_stage_strides: tuple = (1, 2, 2, 2)
    sample_rate: int = 16000
    frame_rate: int = 25
    min_frame_size: int = 16

    def __post_init__(self):
        if len(self.channels) != 4 or any(c < 1 for c in self.channels):
            raise ConfigError(f"expected 4 positive stage channel counts, got {self.channels}")
        if self.downsample_factor * self.frame_rate != self.sample_rate:
            raise ConfigError(
                f"audio downsample factor {self.downsample_factor} x {self.frame_rate} fps "
                f"!= sample rate {self.sample_rate}"
            )

    @property
    def downsample_factor(self) -> int:
        return self.conv1_stride * math.prod(self.stage_strides) * self.pool_stride

    def audio_frame_count(self, n_samples: int) -> int:
        return n_samples // self.downsample_factor

    @classmethod
    def paper(cls) -> "FrontendConfig":
        return cls()

    @classmethod
    def desk(cls) -> "FrontendConfig":
        return cls(channels=(8, 16, 32, 64))


class ResidualBlock1d(Module):
    """conv-bn-relu-conv-bn plus shortcut; a strided block subsamples its input.

    The second batch norm gain starts at zero so a fresh block is exactly
    its shortcut, which keeps deep stacks trainable at toy scale.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng, dtype):
        super().__init__()
        self.stride = stride
        self.conv1 = Conv1d(in_ch, out_ch, 3, rng, stride, temporal_padding(3, stride), dtype, bias=False)
        self.bn1 = BatchNorm(out_ch, dtype)
        self.conv2 = Conv1d(out_ch, out_ch, 3, rng, 1, temporal_padding(3, 1), dtype, bias=False)
        self.bn2 = BatchNorm(out_ch, dtype)
        self.bn2.gain.data[:] = 0.0
        self.projection = None
        if stride > 1 or in_ch != out_ch:
            self.projection = Conv1d(in_ch, out_ch, 1, rng, 1, (0, 0), dtype, bias=False)
            self.bn_proj = BatchNorm(out_ch, dtype)

    def _shortcut(self, x: Tensor) -> Tensor:
        if self.projection is None:
            return x
        if self.stride > 1:
            # Subsample on the center of each stride window so the shortcut
            # aligns with the strided conv and has length floor(T/stride).
            x = x[self.stride - 1 :: self.stride]
        return self.bn_proj(self.projection(x))

    def __call__(self, x: Tensor) -> Tensor:
        branch = self.bn2(self.conv2(T.relu(self.bn1(self.conv1(x)))))
        return T.relu(T.add(self._shortcut(x), branch))


class ResidualBlock2d(Module):
    """2D residual block applied with the frame axis as the batch axis."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(in_ch, out_ch, (3, 3), rng, (stride, stride), (1, 1), dtype, bias=False)
        self.bn1 = BatchNorm(out_ch, dtype)
        self.conv2 = Conv2d(out_ch, out_ch, (3, 3), rng, (1, 1), (1, 1), dtype, bias=False)
        self.bn2 = BatchNorm(out_ch, dtype)
        self.bn2.gain.data[:] = 0.0
        self.projection = None
        if stride > 1 or in_ch != out_ch:
            self.projection = Conv2d(in_ch, out_ch, (1, 1), rng, (stride, stride), (0, 0), dtype, bias=False)
            self.bn_proj = BatchNorm(out_ch, dtype)

    def _shortcut(self, x: Tensor) -> Tensor:
        if self.projection is None:
            return x
        return self.bn_proj(self.projection(x))

    def __call__(self, x: Tensor) -> Tensor:
        branch = self.bn2(self.conv2(T.relu(self.bn1(self.conv1(x)))))
        return T.relu(T.add(self._shortcut(x), branch))


def _stage_plan(cfg: FrontendConfig, strides: tuple) -> list[tuple[int, int, int]]:
    plan = []
    in_ch = cfg.channels[0]
    for out_ch, stride in zip(cfg.channels, strides):
        plan.append((in_ch, out_ch, stride))
        in_ch = out_ch
    return plan


class AudioFrontend(Module):
    """Waveform [T_a] -> features [floor(T_a / downsample_factor), channels[-1]]."""

    def __init__(self, cfg: FrontendConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        k, s = cfg.conv1_kernel, cfg.conv1_stride
        self.conv1 = Conv1d(1, cfg.channels[0], k, rng, s, temporal_padding(k, s), dtype, bias=False)
        self.bn1 = BatchNorm(cfg.channels[0], dtype)
        blocks = []
        for in_ch, out_ch, stride in _stage_plan(cfg, cfg.stage_strides):
            blocks.append(ResidualBlock1d(in_ch, out_ch, stride, rng, dtype))
            blocks.append(ResidualBlock1d(out_ch, out_ch, 1, rng, dtype))
        self.blocks = blocks

    @property
    def min_samples(self) -> int:
        return self.cfg.downsample_factor

    def __call__(self, clip: AudioClip) -> Tensor:
        n = len(clip.samples)
        if n < self.min_samples:
            raise ContractError(
                f"audio frontend: insufficient samples: got {n}, need at least {self.min_samples} "
                f"for one output frame"
            )
        x = Tensor(clip.samples.astype(self.dtype).reshape(n, 1))
        x = T.relu(self.bn1(self.conv1(x)))
        for block in self.blocks:
            x = block(x)
        return T.avgpool1d(x, self.cfg.pool_stride)


class VisualFrontend(Module):
    """Frame stack [T, H, W] -> features [T, channels[-1]]."""

    def __init__(self, cfg: FrontendConfig, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.conv1 = Conv3d(1, cfg.channels[0], (5, 7, 7), rng, (1, 2, 2), (2, 3, 3), dtype, bias=False)
        self.bn1 = BatchNorm(cfg.channels[0], dtype)
        blocks = []
        for in_ch, out_ch, stride in _stage_plan(cfg, cfg.visual_stage_strides):
            blocks.append(ResidualBlock2d(in_ch, out_ch, stride, rng, dtype))
            blocks.append(ResidualBlock2d(out_ch, out_ch, 1, rng, dtype))
        self.blocks = blocks

    def __call__(self, clip: VideoClip) -> Tensor:
        t, h, w = clip.frames.shape
        m = self.cfg.min_frame_size
        if h < m or w < m:
            raise ShapeError(
                f"visual frontend stem: frames {h}x{w} below the {m}x{m} minimum "
                f"for the spatial stride chain"
            )
        x = Tensor(clip.frames.astype(self.dtype).reshape(t, h, w, 1))
        x = T.relu(self.bn1(self.conv1(x)))
        x = T.maxpool2d(x, (3, 3), (2, 2), (1, 1))
        for block in self.blocks:
            x = block(x)
        # Global spatial average: [T, H', W', C] -> [T, C].
        return T.mean(x, axis=(1, 2))
