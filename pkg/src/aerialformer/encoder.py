"""Hierarchical windowed-attention encoder.

Patch embedding, four stages of pre-norm transformer blocks whose windows
alternate between a regular grid and a grid displaced by ``M // 2``, and
checkerboard patch merging between stages. Features are channel-last
``[N, h, w, d]`` inside the encoder.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, GeometryError
from .tensor import functional as F
from .tensor import (LayerNorm, Linear, Module, Parameter, Tensor, concat, getitem, matmul,
                     reshape, roll, take, transpose, trunc_normal)


@dataclass
class EncoderConfig:
    embed_dim: int = 96
    window_size: int = 7
    depths: tuple[int, ...] = (2, 2, 6, 2)
    num_heads: tuple[int, ...] = (3, 6, 12, 24)
    patch_size: int = 4
    ffn_expansion: float = 4.0
    in_channels: int = 3
    patch_norm: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.num_heads = tuple(int(h) for h in self.num_heads)
        self.validate()

    def validate(self) -> None:
        if self.patch_size < 1 or self.window_size < 1 or self.embed_dim < 1:
            raise ConfigError("patch_size, window_size and embed_dim must be >= 1")
        if len(self.depths) != 4 or len(self.num_heads) != 4:
            raise ConfigError(f"need 4 stage depths and head counts, got {self.depths}, "
                              f"{self.num_heads}")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"all stage depths must be >= 1, got {self.depths}")
        for s, heads in enumerate(self.num_heads):
            dim = self.stage_dim(s)
            if heads < 1 or dim % heads:
                raise ConfigError(f"stage {s + 1}: dim {dim} not divisible by {heads} heads")

    def stage_dim(self, s: int) -> int:
        """Feature width of stage ``s`` (0-based)."""
        return self.embed_dim * 2 ** s

    @property
    def input_multiple(self) -> int:
        """Image sides must be multiples of this so every stage tiles into windows."""
        return self.patch_size * 8 * self.window_size


# ---------------------------------------------------------------------------
# window bookkeeping
# ---------------------------------------------------------------------------

def window_partition(x: Tensor, window: int) -> Tensor:
    """``[N, h, w, d]`` -> ``[N * (h/M) * (w/M), M*M, d]``, windows in row-major order."""
    n, h, w, d = x.shape
    if h % window or w % window:
        raise GeometryError(f"window_partition: {h}x{w} not divisible by window {window}")
    x = reshape(x, (n, h // window, window, w // window, window, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, window * window, d))


def window_reverse(windows: Tensor, window: int, h: int, w: int) -> Tensor:
    d = windows.shape[-1]
    x = reshape(windows, (-1, h // window, w // window, window, window, d))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    return reshape(x, (-1, h, w, d))


def relative_position_index(window: int) -> np.ndarray:
    """``[M*M, M*M]`` map from token pairs to rows of the ``(2M-1)^2`` bias table.

    The row depends only on the displacement (dy, dx) between the two tokens.
    """
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij"))
    coords = coords.reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
    return rel[0] * (2 * window - 1) + rel[1]


def shifted_window_mask(h: int, w: int, window: int, shift: int) -> np.ndarray:
    """Additive ``[num_windows, M*M, M*M]`` mask for cyclically shifted windows.

    Tokens that came from different regions before the cyclic shift get
    ``-inf`` so they never attend to each other.
    """
    region = np.zeros((h, w), dtype=np.int64)
    bounds = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    label = 0
    for hs in bounds:
        for ws in bounds:
            region[hs, ws] = label
            label += 1
    win = region.reshape(h // window, window, w // window, window).transpose(0, 2, 1, 3)
    win = win.reshape(-1, window * window)
    same = win[:, :, None] == win[:, None, :]
    return np.where(same, 0.0, -np.inf)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class PatchEmbed(Module):
    """Non-overlapping ``p x p`` patches projected to ``C`` channels (a stride-p conv)."""

    def __init__(self, cfg: EncoderConfig, rng=None):
        p, c = cfg.patch_size, cfg.embed_dim
        self.proj_weight = Parameter(trunc_normal((c, cfg.in_channels, p, p), 0.02, rng))
        self.proj_bias = Parameter(np.zeros(c))
        self.norm = LayerNorm(c, cfg.norm_eps) if cfg.patch_norm else None
        self.patch_size = p

    def forward(self, img: Tensor) -> Tensor:
        n, cin, h, w = img.shape
        p = self.patch_size
        if h % p or w % p:
            raise GeometryError(f"patch_embed: image {h}x{w} not divisible by patch size {p}")
        x = reshape(img, (n, cin, h // p, p, w // p, p))
        x = transpose(x, (0, 2, 4, 1, 3, 5))
        x = reshape(x, (n, h // p, w // p, cin * p * p))
        cout = self.proj_weight.shape[0]
        x = F.linear(x, reshape(self.proj_weight, (cout, -1)), self.proj_bias)
        return self.norm(x) if self.norm is not None else x


class WindowAttention(Module):
    """Multi-head self-attention inside each window with a learned relative-position bias."""

    def __init__(self, dim: int, heads: int, window: int, rng=None):
        if dim % heads:
            raise ConfigError(f"attention dim {dim} not divisible by {heads} heads")
        self.qkv = Linear(dim, 3 * dim, rng=rng)
        self.proj = Linear(dim, dim, rng=rng)
        self.relative_position_bias_table = Parameter(
            trunc_normal(((2 * window - 1) ** 2, heads), 0.02, rng))
        self._index = relative_position_index(window)
        self.heads, self.window, self.dim = heads, window, dim
        self.scale = (dim // heads) ** -0.5

    def position_bias(self) -> Tensor:
        """``[heads, M*M, M*M]`` bias gathered from the shared table."""
        b = take(self.relative_position_bias_table, self._index)
        return transpose(b, (2, 0, 1))

    def forward(self, x: Tensor, mask: np.ndarray | None = None,
                return_attention: bool = False):
        """``x``: ``[num_windows_total, T, d]``; ``mask``: ``[windows_per_image, T, T]``."""
        bw, t, d = x.shape
        hd = d // self.heads
        qkv = reshape(self.qkv(x), (bw, t, 3, self.heads, hd))
        qkv = transpose(qkv, (2, 0, 3, 1, 4))
        q, k, v = getitem(qkv, 0), getitem(qkv, 1), getitem(qkv, 2)
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * self.scale
        scores = scores + self.position_bias()
        if mask is not None:
            nw = mask.shape[0]
            scores = reshape(scores, (bw // nw, nw, self.heads, t, t)) + mask[None, :, None]
            scores = reshape(scores, (bw, self.heads, t, t))
        attn = F.softmax(scores, axis=-1)
        out = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (bw, t, d))
        out = self.proj(out)
        return (out, attn) if return_attention else out


class FeedForward(Module):
    def __init__(self, dim: int, expansion: float, rng=None):
        hidden = int(dim * expansion)
        self.fc1 = Linear(dim, hidden, rng=rng)
        self.fc2 = Linear(hidden, dim, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class SwinBlock(Module):
    """Pre-norm residual window attention followed by a pre-norm residual FFN.

    ``shift`` > 0 cyclically shifts the token grid before windowing and masks
    attention between tokens that were not adjacent before the shift.
    """

    def __init__(self, dim: int, heads: int, window: int, shift: int, expansion: float = 4.0,
                 eps: float = 1e-5, rng=None):
        self.norm1 = LayerNorm(dim, eps)
        self.attn = WindowAttention(dim, heads, window, rng)
        self.norm2 = LayerNorm(dim, eps)
        self.mlp = FeedForward(dim, expansion, rng)
        self.window, self.shift = window, shift
        self.use_mask = True
        self._mask_cache: dict[tuple[int, int], np.ndarray] = {}

    def _mask(self, h: int, w: int) -> np.ndarray | None:
        if not self.shift or not self.use_mask:
            return None
        key = (h, w)
        if key not in self._mask_cache:
            self._mask_cache[key] = shifted_window_mask(h, w, self.window, self.shift)
        return self._mask_cache[key]

    def forward(self, x: Tensor) -> Tensor:
        n, h, w, d = x.shape
        m = self.window
        if h % m or w % m:
            raise GeometryError(f"block input {h}x{w} not divisible by window {m}")
        y = self.norm1(x)
        if self.shift:
            y = roll(y, (-self.shift, -self.shift), (1, 2))
        y = window_reverse(self.attn(window_partition(y, m), self._mask(h, w)), m, h, w)
        if self.shift:
            y = roll(y, (self.shift, self.shift), (1, 2))
        x = x + y
        return x + self.mlp(self.norm2(x))


def checkerboard_gather(x: Tensor) -> Tensor:
    """``[N, h, w, d]`` -> ``[N, h/2, w/2, 4d]``.

    Channel blocks in order: (even row, even col), (even, odd), (odd, even), (odd, odd).
    """
    n, h, w, d = x.shape
    if h % 2 or w % 2:
        raise GeometryError(f"patch_merge needs even spatial dims, got {h}x{w}")
    parts = [getitem(x, (slice(None), slice(r, None, 2), slice(c, None, 2)))
             for r, c in ((0, 0), (0, 1), (1, 0), (1, 1))]
    return concat(parts, axis=-1)


class PatchMerging(Module):
    """Checkerboard gather to 4d channels, LayerNorm, then a bias-free projection to 2d."""

    def __init__(self, dim: int, norm: bool = True, eps: float = 1e-5, rng=None):
        self.norm = LayerNorm(4 * dim, eps) if norm else None
        self.reduction = Linear(4 * dim, 2 * dim, bias=False, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = checkerboard_gather(x)
        if self.norm is not None:
            x = self.norm(x)
        return self.reduction(x)


class EncoderStage(Module):
    def __init__(self, dim: int, depth: int, heads: int, window: int, expansion: float,
                 merge: bool, eps: float = 1e-5, rng=None):
        self.blocks = []
        for l in range(depth):
            # first block of a stage uses the regular grid, then alternate
            shift = window // 2 if l % 2 == 1 else 0
            blk = SwinBlock(dim, heads, window, shift, expansion, eps, rng)
            setattr(self, f"block{l}", blk)
            self.blocks.append(blk)
        self.merge = PatchMerging(dim, eps=eps, rng=rng) if merge else None

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor | None]:
        for blk in self.blocks:
            x = blk(x)
        return x, (self.merge(x) if self.merge is not None else None)


class SwinEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng=None):
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg, rng)
        self.stages = []
        for s in range(4):
            stage = EncoderStage(cfg.stage_dim(s), cfg.depths[s], cfg.num_heads[s],
                                 cfg.window_size, cfg.ffn_expansion, merge=s < 3,
                                 eps=cfg.norm_eps, rng=rng)
            setattr(self, f"stage{s + 1}", stage)
            self.stages.append(stage)

    def forward(self, img: Tensor) -> list[Tensor]:
        """Return ``[F1, F2, F3, F4]`` (channel-last), each taken before its stage's merge."""
        mult = self.cfg.input_multiple
        h, w = img.shape[2:]
        if h % mult or w % mult:
            raise GeometryError(
                f"encoder input {h}x{w}: sides must be multiples of {mult} "
                f"(patch {self.cfg.patch_size} x 8 x window {self.cfg.window_size})")
        x = self.patch_embed(img)
        feats = []
        for stage in self.stages:
            f, x = stage(x)
            feats.append(f)
        return feats


def encode(img: Tensor, encoder: SwinEncoder) -> list[Tensor]:
    return encoder(img)
