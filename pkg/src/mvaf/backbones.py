"""Top-down conv backbones with upsample-and-concat necks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat
from .autodiff import functional as F
from .autodiff.nn import Conv2d, ConvTranspose2d, Module, Norm


class ConfigError(ValueError):
    """Inconsistent backbone or run configuration."""


@dataclass(frozen=True)
class BlockConfig:
    layers: int
    channels: int
    stride: int = 2
    kernel: int = 3


@dataclass(frozen=True)
class BackboneConfig:
    """``blocks`` run in sequence; blocks from ``upsample_from`` on are
    brought to ``upsample_stride`` with ``upsample_channels`` each and
    concatenated.  ``role`` is a free tag (bev, rv, cv, fusion)."""

    in_channels: int
    blocks: tuple[BlockConfig, ...]
    upsample_channels: int | tuple[int, ...] = 8
    upsample_stride: int = 2
    upsample_from: int = 0
    norm: str = "batch"
    activation: str = "leaky_relu"
    role: str = "bev"

    def block_strides(self) -> list[int]:
        out, s = [], 1
        for b in self.blocks:
            s *= b.stride
            out.append(s)
        return out

    @property
    def total_stride(self) -> int:
        return self.block_strides()[-1]

    def upsample_widths(self) -> list[int]:
        n = len(self.blocks) - self.upsample_from
        if isinstance(self.upsample_channels, int):
            return [self.upsample_channels] * n
        if len(self.upsample_channels) != n:
            raise ConfigError(f"{self.role}: {len(self.upsample_channels)} upsample widths for {n} branches")
        return list(self.upsample_channels)

    @property
    def out_channels(self) -> int:
        return sum(self.upsample_widths())

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigError(f"{self.role}: backbone needs at least one block")
        if self.in_channels < 1 or any(b.layers < 1 or b.channels < 1 or b.stride < 1 for b in self.blocks):
            raise ConfigError(f"{self.role}: layer counts, channels and strides must be positive")
        if not 0 <= self.upsample_from < len(self.blocks):
            raise ConfigError(f"{self.role}: upsample_from {self.upsample_from} out of range")
        for s in self.block_strides()[self.upsample_from:]:
            if s < self.upsample_stride or s % self.upsample_stride:
                raise ConfigError(f"{self.role}: block stride {s} cannot reach target stride {self.upsample_stride}")
        self.upsample_widths()


def toy_config(in_channels: int, role: str = "bev", channels=(8, 16, 32), layers=(1, 1, 1),
               upsample_channels: int = 8, norm: str = "batch") -> BackboneConfig:
    blocks = tuple(BlockConfig(n, c) for n, c in zip(layers, channels))
    return BackboneConfig(in_channels, blocks, upsample_channels, 2, 0, norm, role=role)


def cv_config(in_channels: int = 3, channels=(8, 16, 32, 32), layers=(1, 1, 1, 1),
              upsample_channels: int = 8, norm: str = "batch") -> BackboneConfig:
    blocks = tuple(BlockConfig(n, c) for n, c in zip(layers, channels))
    return BackboneConfig(in_channels, blocks, upsample_channels, 4, 1, norm, role="cv")


@dataclass
class ViewFeatureMap:
    features: Tensor  # (B, C, rows, cols)
    stride: int

    @property
    def dims(self) -> tuple[int, int]:
        return self.features.shape[2], self.features.shape[3]


def _activate(x: Tensor, kind: str) -> Tensor:
    if kind == "leaky_relu":
        return F.leaky_relu(x, 0.1)
    if kind == "relu":
        return F.relu(x)
    if kind == "none":
        return x
    raise ConfigError(f"unknown activation {kind!r}")


class ConvBlock(Module):
    def __init__(self, c_in: int, cfg: BlockConfig, norm: str, activation: str, rng: np.random.Generator):
        self.convs = []
        self.norms = []
        for i in range(cfg.layers):
            stride = cfg.stride if i == 0 else 1
            self.convs.append(Conv2d(c_in if i == 0 else cfg.channels, cfg.channels, cfg.kernel, rng, stride=stride))
            self.norms.append(Norm(cfg.channels, norm))
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = _activate(norm(conv(x)), self.activation)
        return x


class Upsample(Module):
    """Transposed conv with kernel = stride = factor (a 1x1 conv when factor is 1)."""

    def __init__(self, c_in: int, c_out: int, factor: int, norm: str, activation: str, rng: np.random.Generator):
        self.factor = factor
        if factor == 1:
            self.conv = Conv2d(c_in, c_out, 1, rng, padding=0)
        else:
            self.conv = ConvTranspose2d(c_in, c_out, factor, rng, stride=factor, padding=0)
        self.norm = Norm(c_out, norm)
        self.activation = activation

    def forward(self, x: Tensor) -> Tensor:
        return _activate(self.norm(self.conv(x)), self.activation)


class Backbone(Module):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        config.validate()
        self.config = config
        self.blocks = []
        c = config.in_channels
        for b in config.blocks:
            self.blocks.append(ConvBlock(c, b, config.norm, config.activation, rng))
            c = b.channels
        strides = config.block_strides()
        self.ups = []
        for i, width in zip(range(config.upsample_from, len(config.blocks)), config.upsample_widths()):
            factor = strides[i] // config.upsample_stride
            self.ups.append(Upsample(config.blocks[i].channels, width, factor, config.norm, config.activation, rng))

    def forward(self, x: Tensor) -> Tensor:
        outs = []
        for blk in self.blocks:
            x = blk(x)
            outs.append(x)
        branches = [up(o) for up, o in zip(self.ups, outs[self.config.upsample_from:])]
        return branches[0] if len(branches) == 1 else concat(branches, axis=1)


def build_backbone(config: BackboneConfig, rng: np.random.Generator) -> Backbone:
    return Backbone(config, rng)


def forward_view(network: Backbone, inputs) -> ViewFeatureMap:
    """Run a backbone on a (B, C, H, W) pseudo-image or image tensor."""
    x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=np.float64))
    if x.ndim == 3:
        x = x.reshape(1, *x.shape)
    total = network.config.total_stride
    h, w = x.shape[2], x.shape[3]
    if h % total or w % total:
        raise ConfigError(f"input {h}x{w} is not divisible by total stride {total}")
    if x.shape[1] != network.config.in_channels:
        raise ConfigError(f"input has {x.shape[1]} channels, backbone expects {network.config.in_channels}")
    return ViewFeatureMap(network(x), network.config.upsample_stride)


def image_tensor(images) -> Tensor:
    """(H, W, 3) or (B, H, W, 3) images in [0, 1] to a centered (B, 3, H, W) tensor."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)) - 0.5)


def forward_cv_toy(network: Backbone, images) -> ViewFeatureMap:
    """Camera branch: images as (H, W, 3) / (B, H, W, 3) arrays or a prepared tensor."""
    x = images if isinstance(images, Tensor) else image_tensor(images)
    return forward_view(network, x)
