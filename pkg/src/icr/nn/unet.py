"""Residual 3D U-Net with configurable widths and strides.

Encoder: one residual unit per level (stride on its first conv), then a
stride-1 residual bottom block. Decoder: transposed conv + norm/act +
residual unit per level, taking the skip concatenation from the matching
encoder level. A plain 3x3x3 conv head produces single-channel logits;
probabilities come from a sigmoid clamped away from exact 0/1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .. import rng as rngmod
from ..errors import ChannelMismatchError, CheckpointError
from . import functional as F
from .tensor import Tensor, no_grad

DESK_CHANNELS = (8, 16, 32)
DESK_STRIDES = (1, 2)
FULL_CHANNELS = (16, 32, 64, 128, 256)
FULL_STRIDES = (1, 2, 2, 2)

PROB_CLAMP = 1e-6


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    channels: tuple[int, ...] = DESK_CHANNELS
    strides: tuple[int, ...] = DESK_STRIDES
    residual_units: int = 2
    leaky_slope: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "strides", tuple(int(s) for s in self.strides))
        if len(self.channels) < 2:
            raise ValueError("need at least two channel levels")
        if len(self.strides) != len(self.channels) - 1:
            raise ValueError(
                f"len(strides) must be len(channels)-1: {self.strides} vs {self.channels}"
            )
        if self.strides[0] != 1:
            raise ValueError("first stride must be 1")
        if self.in_channels < 1 or self.residual_units < 1:
            raise ValueError("in_channels and residual_units must be positive")

    @property
    def stride_product(self) -> int:
        return int(np.prod(self.strides))

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "strides": list(self.strides),
            "residual_units": self.residual_units,
            "leaky_slope": self.leaky_slope,
            "norm_eps": self.norm_eps,
        }

    @staticmethod
    def from_dict(d: dict) -> "UNetConfig":
        return UNetConfig(
            in_channels=d["in_channels"],
            channels=tuple(d["channels"]),
            strides=tuple(d["strides"]),
            residual_units=d.get("residual_units", 2),
            leaky_slope=d.get("leaky_slope", 0.01),
            norm_eps=d.get("norm_eps", 1e-5),
        )


def desk_config(in_channels: int) -> UNetConfig:
    return UNetConfig(in_channels)


def full_config(in_channels: int) -> UNetConfig:
    return UNetConfig(in_channels, FULL_CHANNELS, FULL_STRIDES)


class _ParamFactory:
    """Kaiming fan-in init with one named stream per layer."""

    def __init__(self, seed: int, slope: float):
        self.seed = seed
        self.gain = np.sqrt(2.0 / (1.0 + slope**2))
        self.counter = 0

    def conv(self, shape, fan_in) -> Tensor:
        rng = rngmod.stream(self.seed, "init", self.counter)
        self.counter += 1
        std = self.gain / np.sqrt(fan_in)
        return Tensor(rng.normal(0.0, std, shape).astype(np.float32), requires_grad=True)

    def const(self, shape, value) -> Tensor:
        return Tensor(np.full(shape, value, dtype=np.float32), requires_grad=True)


class _ResidualUnit:
    def __init__(self, cfg: UNetConfig, c_in: int, c_out: int, stride: int, make: _ParamFactory):
        self.cfg = cfg
        self.stride = stride
        self.convs = []
        c_prev = c_in
        for u in range(cfg.residual_units):
            w = make.conv((c_out, c_prev, 3, 3, 3), c_prev * 27)
            gamma = make.const((c_out,), 1.0)
            beta = make.const((c_out,), 0.0)
            self.convs.append((w, gamma, beta, stride if u == 0 else 1))
            c_prev = c_out
        self.skip = None
        if c_in != c_out or stride != 1:
            self.skip = make.conv((c_out, c_in), c_in)

    def params(self):
        out = []
        for w, gamma, beta, _ in self.convs:
            out.extend([w, gamma, beta])
        if self.skip is not None:
            out.append(self.skip)
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for w, gamma, beta, stride in self.convs:
            h = F.conv3d(h, w, stride)
            h = F.instance_norm(h, gamma, beta, self.cfg.norm_eps)
            h = F.leaky_relu(h, self.cfg.leaky_slope)
        res = x if self.skip is None else F.pointwise_conv3d(x, self.skip, self.stride)
        return h + res


class _UpBlock:
    def __init__(self, cfg: UNetConfig, c_in: int, c_out: int, stride: int, make: _ParamFactory):
        self.cfg = cfg
        self.stride = stride
        self.w = make.conv((c_in, c_out, 3, 3, 3), c_in * 27)
        self.gamma = make.const((c_out,), 1.0)
        self.beta = make.const((c_out,), 0.0)
        self.res = _ResidualUnit(cfg, c_out, c_out, 1, make)

    def params(self):
        return [self.w, self.gamma, self.beta] + self.res.params()

    def forward(self, x: Tensor) -> Tensor:
        h = F.conv3d_transpose(x, self.w, self.stride)
        h = F.instance_norm(h, self.gamma, self.beta, self.cfg.norm_eps)
        h = F.leaky_relu(h, self.cfg.leaky_slope)
        return self.res.forward(h)


class ResUNet3d:
    def __init__(self, config: UNetConfig, seed: int = 0):
        self.config = config
        make = _ParamFactory(seed, config.leaky_slope)
        ch = config.channels
        st = config.strides
        levels = len(st)

        self.downs = []
        c_prev = config.in_channels
        for i in range(levels):
            self.downs.append(_ResidualUnit(config, c_prev, ch[i], st[i], make))
            c_prev = ch[i]
        self.bottom = _ResidualUnit(config, ch[-2], ch[-1], 1, make)

        self.ups = []
        inner = ch[-1]
        for i in range(levels - 1, -1, -1):
            c_out = ch[i - 1] if i >= 1 else ch[0]
            self.ups.append(_UpBlock(config, ch[i] + inner, c_out, st[i], make))
            inner = c_out

        self.head_w = make.conv((1, ch[0], 3, 3, 3), ch[0] * 27)
        self.head_b = make.const((1,), 0.0)

    def parameters(self) -> list[Tensor]:
        out = []
        for block in self.downs:
            out.extend(block.params())
        out.extend(self.bottom.params())
        for block in self.ups:
            out.extend(block.params())
        out.extend([self.head_w, self.head_b])
        return out

    @property
    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def _check_input(self, data: np.ndarray) -> None:
        if data.ndim != 4 or data.shape[0] != self.config.in_channels:
            raise ChannelMismatchError(
                f"expected ({self.config.in_channels}, nx, ny, nz) input, got {data.shape}"
            )
        k = self.config.stride_product
        if any(n % k != 0 for n in data.shape[1:]):
            raise ValueError(f"spatial dims {data.shape[1:]} not divisible by {k}")

    def forward(self, x) -> Tensor:
        """Single-channel logits with the input's spatial dims."""
        t = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
        self._check_input(t.data)
        skips = []
        h = t
        for block in self.downs:
            h = block.forward(h)
            skips.append(h)
        h = self.bottom.forward(h)
        for i, block in enumerate(self.ups):
            skip = skips[len(self.downs) - 1 - i]
            h = block.forward(F.concat_channels(skip, h))
        logits = F.conv3d(h, self.head_w, 1)
        return F.add_channel_bias(logits, self.head_b)

    def predict_prob(self, x: np.ndarray) -> np.ndarray:
        """Inference probabilities, clamped to the open interval (0, 1)."""
        with no_grad():
            logits = self.forward(np.asarray(x, dtype=np.float32))
        prob = expit(logits.data[0]).astype(np.float32)
        return np.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)


# ---------------------------------------------------------------------------
# Checkpoints: JSON metadata line + little-endian float32 payload in
# parameter declaration order; round-trips bit-exactly.

CKPT_FORMAT = "icr-ckpt-1"


def save_checkpoint(net: ResUNet3d, path, meta: dict | None = None) -> None:
    header = {
        "format": CKPT_FORMAT,
        "config": net.config.to_dict(),
        "meta": meta or {},
    }
    payload = b"".join(
        np.ascontiguousarray(p.data, dtype="<f4").tobytes() for p in net.parameters()
    )
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        fh.write(payload)


def load_checkpoint(path) -> tuple[ResUNet3d, dict]:
    try:
        with open(path, "rb") as fh:
            header_line = fh.readline()
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        header = json.loads(header_line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header") from exc
    if header.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    net = ResUNet3d(UNetConfig.from_dict(header["config"]))
    params = net.parameters()
    expected = sum(p.data.size for p in params) * 4
    if len(payload) != expected:
        raise CheckpointError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    offset = 0
    for p in params:
        n = p.data.size * 4
        arr = np.frombuffer(payload[offset : offset + n], dtype="<f4").reshape(p.data.shape)
        p.data = arr.astype(np.float32, copy=True)
        p.zero_grad()
        offset += n
    return net, header.get("meta", {})
