"""Multi-dilated convolutional decoder.

Five MDC blocks (pointwise pre-mixer -> three-branch dilated conv layer ->
pointwise + 3x3 post-mixer), each followed by a 2x2 stride-2 transposed
convolution that doubles the resolution and halves the channels. Skip
features from the encoder (and finally the stem) are concatenated before
blocks 2-5. A 1x1 classifier produces per-class logits.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, GeometryError, WiringError
from .tensor import BatchNorm2d, Conv2d, ConvTranspose2d, Module, Tensor, concat, split
from .tensor import functional as F

DEFAULT_SCHEDULE = ((1, 3, 3), (3, 3, 3), (3, 5, 7), (3, 5, 7), (3, 5, 7))


def receptive_field(k: int, d: int) -> int:
    """Side length of a dilated kernel's footprint: ``d * (k - 1) + 1``."""
    if k < 1 or d < 1:
        raise ConfigError(f"kernel size and dilation must be >= 1, got k={k}, d={d}")
    return d * (k - 1) + 1


def kernel_and_dilation(r: int) -> tuple[int, int]:
    """Kernel size and dilation realising receptive field ``r`` (k=1 for r=1, else k=3)."""
    if r < 1 or r % 2 == 0:
        raise ConfigError(f"receptive field must be a positive odd integer, got {r}")
    if r == 1:
        return 1, 1
    return 3, (r - 1) // 2


def working_width(out_channels: int) -> int:
    return max(3, 3 * round(out_channels / 3))


@dataclass
class MdcBlockConfig:
    receptive_fields: tuple[int, int, int]
    in_channels: int
    working_channels: int
    out_channels: int

    def __post_init__(self):
        self.receptive_fields = tuple(int(r) for r in self.receptive_fields)
        if len(self.receptive_fields) != 3:
            raise ConfigError(f"MDC block needs three receptive fields, got {self.receptive_fields}")
        for r in self.receptive_fields:
            kernel_and_dilation(r)
        if self.working_channels % 3:
            raise ConfigError(f"working channels {self.working_channels} not divisible by 3")
        if min(self.in_channels, self.working_channels, self.out_channels) < 1:
            raise ConfigError("MDC block channel counts must be >= 1")


@dataclass
class DecoderConfig:
    """Blocks ordered deepest (H/32) to shallowest (H/2)."""

    blocks: list[MdcBlockConfig]
    skip_channels: tuple[int, ...]
    num_classes: int
    head_channels: int = field(init=False)

    def __post_init__(self):
        if len(self.blocks) != 5:
            raise ConfigError(f"decoder needs 5 MDC blocks, got {len(self.blocks)}")
        if len(self.skip_channels) != 4:
            raise ConfigError("decoder needs 4 skip widths (F3, F2, F1, stem)")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for i in range(4):
            up = self.blocks[i].out_channels // 2
            expect = up + self.skip_channels[i]
            if self.blocks[i].out_channels % 2:
                raise ConfigError(f"block {i + 1} output width {self.blocks[i].out_channels} "
                                  f"must be even for the halving deconv")
            if self.blocks[i + 1].in_channels != expect:
                raise WiringError(
                    f"block {i + 2} expects {self.blocks[i + 1].in_channels} input channels but "
                    f"deconv(block {i + 1}) gives {up} + skip {self.skip_channels[i]} = {expect}")
        if self.blocks[4].out_channels % 2:
            raise ConfigError("last block output width must be even for the final deconv")
        self.head_channels = self.blocks[4].out_channels // 2

    @classmethod
    def from_widths(cls, embed_dim: int, stem_channels: int, num_classes: int,
                    schedule=DEFAULT_SCHEDULE) -> "DecoderConfig":
        """Block outputs mirror the skip widths: 8C, 4C, 2C, C, C_stem."""
        c = embed_dim
        outs = [8 * c, 4 * c, 2 * c, c, stem_channels]
        skips = (4 * c, 2 * c, c, stem_channels)
        ins = [8 * c] + [outs[i] // 2 + skips[i] for i in range(4)]
        blocks = [MdcBlockConfig(tuple(schedule[i]), ins[i], working_width(outs[i]), outs[i])
                  for i in range(5)]
        return cls(blocks, skips, num_classes)

    def to_dict(self) -> dict:
        return {
            "blocks": [
                {"receptive_fields": list(b.receptive_fields), "in_channels": b.in_channels,
                 "working_channels": b.working_channels, "out_channels": b.out_channels}
                for b in self.blocks],
            "skip_channels": list(self.skip_channels),
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls([MdcBlockConfig(**b) for b in d["blocks"]], tuple(d["skip_channels"]),
                   d["num_classes"])


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, k: int, rng=None):
        self.conv = Conv2d(cin, cout, k, padding=k // 2, bias=False, rng=rng)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.conv(x)))


class DilatedConvLayer(Module):
    """Split channels into three equal groups, convolve each at its own dilation, concat.

    Padding keeps the spatial size. Branches are bias-free: the following
    pointwise conv + BatchNorm would cancel a per-channel constant.
    """

    def __init__(self, channels: int, receptive_fields, rng=None):
        if channels % 3:
            raise ConfigError(f"DCL channel count {channels} not divisible by 3")
        c = channels // 3
        self.branches = []
        for j, r in enumerate(receptive_fields):
            k, d = kernel_and_dilation(r)
            branch = Conv2d(c, c, k, padding=d * (k - 1) // 2, dilation=d, bias=False, rng=rng)
            setattr(self, f"branch{j}", branch)
            self.branches.append(branch)
        self.receptive_fields = tuple(receptive_fields)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] % 3:
            raise ConfigError(f"DCL input has {x.shape[1]} channels, not divisible by 3")
        parts = split(x, 3, axis=1)
        return concat([b(p) for b, p in zip(self.branches, parts)], axis=1)


class PostMixer(Module):
    def __init__(self, cin: int, cout: int, rng=None):
        self.pointwise = ConvBNReLU(cin, cout, 1, rng)
        self.conv3x3 = ConvBNReLU(cout, cout, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv3x3(self.pointwise(x))


class MDCBlock(Module):
    def __init__(self, cfg: MdcBlockConfig, rng=None):
        self.premixer = Conv2d(cfg.in_channels, cfg.working_channels, 1, rng=rng)
        self.dcl = DilatedConvLayer(cfg.working_channels, cfg.receptive_fields, rng)
        self.postmixer = PostMixer(cfg.working_channels, cfg.out_channels, rng)
        self.cfg = cfg

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise WiringError(f"MDC block expects {self.cfg.in_channels} input channels, "
                              f"got {x.shape[1]}")
        return self.postmixer(self.dcl(self.premixer(x)))


class DeconvBlock(Module):
    """2x2 stride-2 transposed conv (x2 spatial, /2 channels) + BatchNorm + ReLU."""

    def __init__(self, cin: int, k: int = 2, stride: int = 2, padding: int = 0, rng=None):
        if cin % 2:
            raise ConfigError(f"deconv input width {cin} must be even")
        if (k - 2 * padding) != stride or stride != 2:
            raise GeometryError(f"deconv k={k}, stride={stride}, padding={padding} does not give "
                                f"exactly 2x upsampling ((h-1)*s - 2p + k == 2h needs s=2, k-2p=2)")
        self.deconv = ConvTranspose2d(cin, cin // 2, k, stride, padding, bias=False, rng=rng)
        self.bn = BatchNorm2d(cin // 2)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.bn(self.deconv(x)))


class MDCDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng=None):
        self.cfg = cfg
        self.blocks, self.ups = [], []
        for i, bc in enumerate(cfg.blocks, start=1):
            blk = MDCBlock(bc, rng)
            up = DeconvBlock(bc.out_channels, rng=rng)
            setattr(self, f"block{i}", blk)
            setattr(self, f"up{i}", up)
            self.blocks.append(blk)
            self.ups.append(up)
        self.head = Conv2d(cfg.head_channels, cfg.num_classes, 1, rng=rng)

    def forward(self, features: list[Tensor], stem_out: Tensor) -> Tensor:
        """``features``: encoder outputs [F1..F4] as ``[N, C, h, w]``; returns ``[N, L, H, W]``."""
        skips = [features[2], features[1], features[0], stem_out]
        x = features[3]
        for i, (blk, up) in enumerate(zip(self.blocks, self.ups)):
            x = up(blk(x))
            if i < 4:
                skip = skips[i]
                if skip.shape[2:] != x.shape[2:] or skip.shape[0] != x.shape[0]:
                    raise WiringError(f"after deconv {i + 1}: upsampled {list(x.shape)} vs "
                                      f"skip {list(skip.shape)}")
                x = concat([x, skip], axis=1)
        return self.head(x)
