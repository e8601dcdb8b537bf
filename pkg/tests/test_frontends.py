"""Front-end rate contracts, shapes, and degenerate inputs."""

import numpy as np
import pytest

from avsrkit import tensor as T
from avsrkit.dataflow import AudioClip, VideoClip
from avsrkit.errors import ConfigError, ContractError, ShapeError
from avsrkit.frontends import (
    AudioFrontend,
    FrontendConfig,
    ResidualBlock1d,
    VisualFrontend,
    temporal_padding,
)
from avsrkit.tensor import Tensor


@pytest.fixture(scope="module")
def desk_cfg():
    return FrontendConfig.desk()


@pytest.fixture(scope="module")
def audio_fe(desk_cfg):
    return AudioFrontend(desk_cfg, np.random.default_rng(0), np.float32)


@pytest.fixture(scope="module")
def visual_fe(desk_cfg):
    fe = VisualFrontend(desk_cfg, np.random.default_rng(1), np.float32)
    # warm batch-norm running statistics so eval mode is available
    fe(VideoClip(np.random.default_rng(2).random((8, 24, 24))))
    return fe


def noise_clip(n, seed=0):
    return AudioClip(np.random.default_rng(seed).standard_normal(n))


class TestConfig:
    def test_downsample_contract(self, desk_cfg):
        assert desk_cfg.downsample_factor * desk_cfg.frame_rate == desk_cfg.sample_rate
        assert desk_cfg.downsample_factor == 640

    def test_paper_channels(self):
        assert FrontendConfig.paper().channels == (64, 128, 256, 512)

    def test_inconsistent_rate_rejected(self):
        with pytest.raises(ConfigError, match="fps"):
            FrontendConfig(pool_stride=20)

    def test_temporal_padding_floor_semantics(self):
        for kernel, stride in ((80, 4), (3, 2), (3, 1), (10, 10)):
            left, right = temporal_padding(kernel, stride)
            assert left + right == kernel - stride
            for length in range(stride, 50):
                out = (length + left + right - kernel) // stride + 1
                assert out == length // stride


class TestAudioFrontend:
    def test_one_second_gives_25_frames(self, audio_fe):
        out = audio_fe(noise_clip(16000))
        assert out.shape == (25, 64)

    def test_paper_scale_shape(self):
        fe = AudioFrontend(FrontendConfig.paper(), np.random.default_rng(3), np.float32)
        assert fe(noise_clip(16000)).shape == (25, 512)

    def test_rate_contract_arbitrary_lengths(self, audio_fe, desk_cfg):
        for n in (640, 641, 1000, 12345, 16000, 16639, 31999):
            out = audio_fe(noise_clip(n, seed=n))
            assert out.shape[0] == n * 25 // 16000 == desk_cfg.audio_frame_count(n)

    def test_doubling_divisible_length_doubles_frames(self, audio_fe):
        base = audio_fe(noise_clip(1280)).shape[0]
        assert audio_fe(noise_clip(2560)).shape[0] == 2 * base

    def test_zero_waveform_finite_fixed_vectors(self, audio_fe):
        audio_fe(noise_clip(16000))  # record batch statistics
        audio_fe.eval()
        try:
            out = audio_fe(AudioClip(np.zeros(16000)))
            assert np.isfinite(out.data).all()
            assert np.abs(out.data - out.data[0]).max() <= 1e-5
        finally:
            audio_fe.train()

    def test_too_short_names_minimum(self, audio_fe):
        with pytest.raises(ContractError, match="640"):
            audio_fe(noise_clip(639))

    def test_no_nan_on_random_inputs(self, audio_fe):
        for seed in range(5):
            n = int(np.random.default_rng(seed).integers(640, 20000))
            assert np.isfinite(audio_fe(noise_clip(n, seed)).data).all()


class TestVisualFrontend:
    def test_one_feature_per_frame(self, visual_fe):
        out = visual_fe(VideoClip(np.random.default_rng(4).random((25, 24, 24))))
        assert out.shape == (25, 64)

    def test_88x88_crop_size(self, visual_fe):
        out = visual_fe(VideoClip(np.random.default_rng(5).random((29, 88, 88))))
        assert out.shape == (29, 64)

    def test_temporal_extent_preserved(self, visual_fe):
        visual_fe.eval()
        try:
            for t in (1, 2, 3, 7):
                out = visual_fe(VideoClip(np.random.default_rng(t).random((t, 16, 16))))
                assert out.shape == (t, 64)
        finally:
            visual_fe.train()

    def test_constant_frames_identical_interior_features(self, visual_fe):
        # the 5-frame temporal stem zero-pads clip boundaries, so only frames
        # with a full temporal context (2 away from either edge) are identical
        visual_fe.eval()
        try:
            out = visual_fe(VideoClip(np.full((8, 24, 24), 0.5)))
            interior = out.data[2:-2]
            assert np.abs(interior - interior[0]).max() <= 1e-5
        finally:
            visual_fe.train()

    def test_small_frames_name_stem(self, visual_fe):
        with pytest.raises(ShapeError, match="stem"):
            visual_fe(VideoClip(np.random.default_rng(6).random((4, 8, 8))))

    def test_no_nan_on_random_inputs(self, visual_fe):
        for seed in range(3):
            clip = VideoClip(np.random.default_rng(seed).random((5, 20, 20)))
            assert np.isfinite(visual_fe(clip).data).all()


class TestResidualBlock:
    def test_zero_branch_is_shortcut(self):
        block = ResidualBlock1d(4, 4, 1, np.random.default_rng(7), np.float64)
        x = Tensor(np.abs(np.random.default_rng(8).standard_normal((12, 4))))
        out = block(x)
        # bn2 gain starts at zero, so the block is relu(x); x >= 0 here
        assert np.allclose(out.data, x.data)

    def test_stride_two_halves_length(self):
        block = ResidualBlock1d(4, 8, 2, np.random.default_rng(9), np.float64)
        for t in (8, 9, 15):
            out = block(Tensor(np.random.default_rng(t).standard_normal((t, 4))))
            assert out.shape == (t // 2, 8)

    def test_gradient_flows_through_both_branches(self):
        from avsrkit.harness import central_difference, relative_error

        rng = np.random.default_rng(10)
        block = ResidualBlock1d(3, 3, 1, rng, np.float64)
        for p in block.named_parameters().values():
            p.data = p.data + 0.05 * rng.standard_normal(p.shape)
        x = Tensor(rng.standard_normal((8, 3)), requires_grad=True)
        proj = Tensor(rng.standard_normal((8, 3)))

        def build():
            return T.sum_(T.mul(block(x), proj))

        T.backward(build())
        for tensor in [x, block.conv1.w, block.conv2.w]:
            idx = list(range(min(8, tensor.data.size)))
            fd = central_difference(lambda: build().item(), tensor.data, idx)
            assert relative_error(tensor.grad.reshape(-1)[idx], fd) <= 1e-6
            tensor.grad = None


class TestTemporalAlignment:
    def test_audio_video_one_second_alignment(self, audio_fe, visual_fe):
        audio_frames = audio_fe(noise_clip(16000)).shape[0]
        video_frames = visual_fe(VideoClip(np.random.default_rng(11).random((25, 24, 24)))).shape[0]
        assert audio_frames == video_frames == 25
