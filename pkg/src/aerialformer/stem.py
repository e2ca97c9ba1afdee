"""Convolutional stem: four 3x3 conv + BatchNorm + GELU layers, the first with stride 2."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError, GeometryError
from .tensor import BatchNorm2d, Conv2d, Module, Tensor
from .tensor import functional as F


@dataclass
class StemConfig:
    out_channels: int = 48
    in_channels: int = 3
    num_layers: int = 4

    def __post_init__(self):
        if self.out_channels < 1 or self.num_layers < 1:
            raise ConfigError("stem needs out_channels >= 1 and at least one layer")


class ConvBNGELU(Module):
    def __init__(self, cin: int, cout: int, stride: int, rng=None):
        # no conv bias: BatchNorm's shift makes it redundant and its gradient identically zero
        self.conv = Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return F.gelu(self.bn(self.conv(x)))


class CNNStem(Module):
    """``[N, 3, H, W]`` -> ``[N, C_stem, H/2, W/2]``."""

    def __init__(self, cfg: StemConfig, rng=None):
        self.layers = []
        cin = cfg.in_channels
        for i in range(cfg.num_layers):
            layer = ConvBNGELU(cin, cfg.out_channels, stride=2 if i == 0 else 1, rng=rng)
            setattr(self, f"conv{i + 1}", layer)
            self.layers.append(layer)
            cin = cfg.out_channels

    def forward(self, img: Tensor) -> Tensor:
        h, w = img.shape[2:]
        if h % 2 or w % 2:
            raise GeometryError(f"stem input {h}x{w} must have even sides")
        x = img
        for layer in self.layers:
            x = layer(x)
        return x
