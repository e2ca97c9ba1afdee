"""Overlapping tile grids, logit stitching and tiled whole-image inference."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import Palette, to_input
from .errors import GeometryError
from .tensor import Tensor, no_grad


def _pair(v) -> tuple[int, int]:
    return (int(v), int(v)) if np.isscalar(v) else (int(v[0]), int(v[1]))


def axis_origins(dim: int, tile: int, step: int) -> list[int]:
    """Tile starts along one axis; the last one is clamped to ``dim - tile``."""
    if dim <= tile:
        return [0]
    count = math.ceil((dim - tile) / step) + 1
    return [min(i * step, dim - tile) for i in range(count)]


@dataclass
class TileGrid:
    image_size: tuple[int, int]
    tile_size: tuple[int, int]
    step: tuple[int, int]
    origins: list[tuple[int, int]]

    @property
    def extent(self) -> tuple[int, int]:
        """Actual tile height/width (smaller than ``tile_size`` for small images)."""
        return (min(self.tile_size[0], self.image_size[0]),
                min(self.tile_size[1], self.image_size[1]))

    def __len__(self) -> int:
        return len(self.origins)

    def coverage(self) -> np.ndarray:
        cov = np.zeros(self.image_size, dtype=np.int64)
        th, tw = self.extent
        for y, x in self.origins:
            cov[y:y + th, x:x + tw] += 1
        return cov


def make_grid(height: int, width: int, tile, step) -> TileGrid:
    """Row-major tile origins covering an ``height x width`` image."""
    th, tw = _pair(tile)
    sh, sw = _pair(step)
    if min(th, tw) < 1 or min(height, width) < 1:
        raise GeometryError(f"tile {th}x{tw} and image {height}x{width} must be >= 1")
    if not (1 <= sh <= th and 1 <= sw <= tw):
        raise GeometryError(f"step {sh}x{sw} must satisfy 1 <= step <= tile ({th}x{tw})")
    ys = axis_origins(height, th, sh)
    xs = axis_origins(width, tw, sw)
    return TileGrid((height, width), (th, tw), (sh, sw), [(y, x) for y in ys for x in xs])


def stitch(logit_tiles, grid: TileGrid, num_classes: int) -> np.ndarray:
    """Per-pixel mean of every covering tile's ``[L, th, tw]`` logits -> ``[L, H, W]``."""
    if len(logit_tiles) != len(grid.origins):
        raise GeometryError(f"{len(logit_tiles)} logit tiles for {len(grid.origins)} origins")
    h, w = grid.image_size
    th, tw = grid.extent
    acc = np.zeros((num_classes, h, w))
    count = np.zeros((h, w))
    for (y, x), tile in zip(grid.origins, logit_tiles):
        tile = np.asarray(tile.data if isinstance(tile, Tensor) else tile)
        if tile.shape != (num_classes, th, tw):
            raise GeometryError(f"logit tile shape {tile.shape} != {(num_classes, th, tw)}")
        acc[:, y:y + th, x:x + tw] += tile
        count[y:y + th, x:x + tw] += 1
    if (count == 0).any():
        y, x = np.argwhere(count == 0)[0]
        raise GeometryError(f"grid invariant violated: pixel ({y}, {x}) not covered by any tile")
    return acc / count


def predict_logits(model, image: np.ndarray, tile, step) -> np.ndarray:
    """Stitched ``[L, H, W]`` logits of an uint8 ``[H, W, 3]`` image."""
    h, w = image.shape[:2]
    grid = make_grid(h, w, tile, step)
    th, tw = grid.extent
    if hasattr(model, "eval"):
        model.eval()
    tiles = []
    with no_grad():
        for y, x in grid.origins:
            out = model(Tensor(to_input(image[y:y + th, x:x + tw])))
            tiles.append(np.asarray(out.data if isinstance(out, Tensor) else out)[0])
    return stitch(tiles, grid, tiles[0].shape[0])


def infer_image(model, image: np.ndarray, tile, step,
                palette: Palette | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class-id mask (argmax, lowest id wins ties) and a 50 % color overlay."""
    logits = predict_logits(model, image, tile, step)
    pred = logits.argmax(axis=0).astype(np.uint8)
    palette = palette or Palette.default(logits.shape[0])
    overlay = (0.5 * image.astype(np.float64) + 0.5 * palette.encode(pred)).round()
    return pred, overlay.astype(np.uint8)
