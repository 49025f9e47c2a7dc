import numpy as np
import pytest

from icr.errors import ChannelMismatchError, CheckpointError
from icr.nn.unet import (
    FULL_CHANNELS,
    FULL_STRIDES,
    ResUNet3d,
    UNetConfig,
    desk_config,
    full_config,
    load_checkpoint,
    save_checkpoint,
)


def analytic_param_count(cfg: UNetConfig) -> int:
    """Independent closed-form count from the architecture definition."""
    u = cfg.residual_units

    def res_unit(c_in, c_out, stride):
        total = 27 * c_in * c_out + 2 * c_out  # first conv + its norm
        total += (u - 1) * (27 * c_out * c_out + 2 * c_out)
        if c_in != c_out or stride != 1:
            total += c_in * c_out  # pointwise skip projection
        return total

    ch, st = cfg.channels, cfg.strides
    levels = len(st)
    total = 0
    c_prev = cfg.in_channels
    for i in range(levels):
        total += res_unit(c_prev, ch[i], st[i])
        c_prev = ch[i]
    total += res_unit(ch[-2], ch[-1], 1)  # bottom
    inner = ch[-1]
    for i in range(levels - 1, -1, -1):
        c_out = ch[i - 1] if i >= 1 else ch[0]
        total += 27 * (ch[i] + inner) * c_out + 2 * c_out  # tconv + norm
        total += res_unit(c_out, c_out, 1)
        inner = c_out
    total += 27 * ch[0] * 1 + 1  # head conv + bias
    return total


class TestConfig:
    def test_stride_channel_consistency(self):
        with pytest.raises(ValueError):
            UNetConfig(2, (8, 16, 32), (1, 2, 2))  # len(strides) != len(channels)-1
        with pytest.raises(ValueError):
            UNetConfig(2, (8, 16, 32), (2, 2))  # first stride must be 1
        cfg = UNetConfig(2)
        assert cfg.stride_product == 2

    def test_roundtrip_dict(self):
        cfg = full_config(5)
        assert UNetConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_output_shape_and_open_range(self):
        net = ResUNet3d(desk_config(2), seed=0)
        x = np.random.default_rng(0).normal(size=(2, 16, 16, 16)).astype(np.float32)
        prob = net.predict_prob(x)
        assert prob.shape == (16, 16, 16)
        assert prob.min() > 0.0
        assert prob.max() < 1.0

    def test_deterministic(self):
        net = ResUNet3d(desk_config(2), seed=1)
        x = np.random.default_rng(1).normal(size=(2, 16, 16, 16)).astype(np.float32)
        assert np.array_equal(net.predict_prob(x), net.predict_prob(x))

    def test_same_seed_same_weights(self):
        a = ResUNet3d(desk_config(5), seed=7)
        b = ResUNet3d(desk_config(5), seed=7)
        assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))

    def test_channel_mismatch(self):
        net = ResUNet3d(desk_config(2), seed=0)
        with pytest.raises(ChannelMismatchError):
            net.forward(np.zeros((3, 16, 16, 16), np.float32))

    def test_indivisible_dims_rejected(self):
        net = ResUNet3d(desk_config(2), seed=0)
        with pytest.raises(ValueError):
            net.forward(np.zeros((2, 15, 16, 16), np.float32))

    @pytest.mark.parametrize("in_channels", [2, 5])
    def test_param_count_matches_analytic(self, in_channels):
        desk = ResUNet3d(desk_config(in_channels), seed=0)
        assert desk.param_count == analytic_param_count(desk.config)
        full = ResUNet3d(full_config(in_channels), seed=0)
        assert full.config.channels == FULL_CHANNELS
        assert full.config.strides == FULL_STRIDES
        assert full.param_count == analytic_param_count(full.config)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        net = ResUNet3d(desk_config(5), seed=3)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path, {"epoch": 12, "val_dsc": 0.5})
        loaded, meta = load_checkpoint(path)
        assert meta == {"epoch": 12, "val_dsc": 0.5}
        assert loaded.config == net.config
        for p, q in zip(net.parameters(), loaded.parameters()):
            assert np.array_equal(p.data, q.data)
        # double save gives identical bytes
        save_checkpoint(loaded, tmp_path / "net2.ckpt", {"epoch": 12, "val_dsc": 0.5})
        assert (tmp_path / "net.ckpt").read_bytes() == (tmp_path / "net2.ckpt").read_bytes()

    def test_truncated_payload_rejected(self, tmp_path):
        net = ResUNet3d(desk_config(2), seed=0)
        path = tmp_path / "net.ckpt"
        save_checkpoint(net, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "net.ckpt"
        path.write_bytes(b'{"format":"other"}\n')
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nope.ckpt")
