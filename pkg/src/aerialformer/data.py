"""Segmentation samples, PNG/palette I/O, dataset manifests and the synthetic-shapes set."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import DataError

IGNORE_INDEX = 255
IMAGENET_MEAN = np.array([123.675, 116.28, 103.53])
IMAGENET_STD = np.array([58.395, 57.12, 57.375])

DEFAULT_COLORS = [
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200), (245, 130, 48),
    (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60), (250, 190, 212),
    (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200), (128, 0, 0),
]


@dataclass
class SegSample:
    image: np.ndarray  # [H, W, 3] uint8
    mask: np.ndarray   # [H, W] uint8 class ids, IGNORE_INDEX = unlabeled
    identifier: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise DataError(f"{self.identifier}: image must be HxWx3, got {self.image.shape}")
        if self.mask.shape != self.image.shape[:2]:
            raise DataError(f"{self.identifier}: mask {self.mask.shape} vs image "
                            f"{self.image.shape[:2]}")

    def validate(self, num_classes: int) -> None:
        bad = (self.mask >= num_classes) & (self.mask != IGNORE_INDEX)
        if bad.any():
            y, x = np.argwhere(bad)[0]
            raise DataError(f"{self.identifier}: class id {self.mask[y, x]} at ({y}, {x}) outside "
                            f"[0, {num_classes}) and not {IGNORE_INDEX}")


def to_input(images: np.ndarray) -> np.ndarray:
    """uint8 ``[N, H, W, 3]`` (or one ``[H, W, 3]``) -> normalised float64 ``[N, 3, H, W]``."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    return np.ascontiguousarray(((images - IMAGENET_MEAN) / IMAGENET_STD).transpose(0, 3, 1, 2))


# ---------------------------------------------------------------------------
# PNG and palettes
# ---------------------------------------------------------------------------

def read_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8)).save(path)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=np.uint8), mode="L").save(path)


@dataclass
class Palette:
    """Color <-> class-id mapping for RGB-encoded masks."""

    colors: dict[int, tuple[int, int, int]]

    @classmethod
    def default(cls, num_classes: int) -> "Palette":
        colors = {i: DEFAULT_COLORS[i % len(DEFAULT_COLORS)] for i in range(num_classes)}
        colors[IGNORE_INDEX] = (255, 255, 255)
        return cls(colors)

    @classmethod
    def load(cls, path) -> "Palette":
        """JSON: ``{"classes": [{"id": 0, "color": [r, g, b], "name": ...}, ...]}``."""
        try:
            doc = json.loads(Path(path).read_text())
            return cls({int(c["id"]): tuple(int(v) for v in c["color"]) for c in doc["classes"]})
        except (OSError, ValueError, KeyError, TypeError) as exc:
            raise DataError(f"bad palette file {path}: {exc}") from exc

    def save(self, path) -> None:
        doc = {"classes": [{"id": i, "color": list(c)} for i, c in sorted(self.colors.items())]}
        Path(path).write_text(json.dumps(doc, indent=2) + "\n")

    def encode(self, mask: np.ndarray) -> np.ndarray:
        lut = np.zeros((256, 3), dtype=np.uint8)
        for i, c in self.colors.items():
            lut[i] = c
        return lut[mask]

    def decode(self, rgb: np.ndarray, source: str = "") -> np.ndarray:
        packed = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) \
            | rgb[..., 2].astype(np.int64)
        keys = {(r << 16) | (g << 8) | b: i for i, (r, g, b) in self.colors.items()}
        uniq, inverse = np.unique(packed, return_inverse=True)
        ids = np.empty(len(uniq), dtype=np.uint8)
        for j, key in enumerate(uniq):
            if int(key) not in keys:
                color = ((key >> 16) & 255, (key >> 8) & 255, key & 255)
                raise DataError(f"{source}: color {tuple(int(v) for v in color)} not in palette")
            ids[j] = keys[int(key)]
        return ids[inverse.reshape(packed.shape)]


def read_mask(path, palette: Palette | None = None) -> np.ndarray:
    """Single-channel (L or P mode) PNGs are ids; RGB masks are decoded through ``palette``."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "P", "I", "I;16"):
                return np.asarray(im, dtype=np.uint8)
            rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc
    if palette is None:
        raise DataError(f"{path}: RGB mask needs a palette file")
    return palette.decode(rgb, str(path))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def read_manifest(path) -> list[tuple[str, str]]:
    """Lines of ``image_path<TAB>mask_path``; blank lines and ``#`` comments skipped."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise DataError(f"{path}:{lineno}: expected 'image<TAB>mask', got {line!r}")
        pairs.append((fields[0], fields[1]))
    return pairs


def ingest_dataset(root, manifest: str = "manifest.tsv", palette=None,
                   num_classes: int | None = None) -> Iterator[SegSample]:
    """Yield validated samples for every manifest pair (paths relative to ``root``).

    ``palette`` may be a :class:`Palette`, a path, or None, in which case
    ``root/palette.json`` is used if present.
    """
    root = Path(root)
    if palette is None and (root / "palette.json").exists():
        palette = root / "palette.json"
    if palette is not None and not isinstance(palette, Palette):
        palette = Palette.load(palette)
    for image_rel, mask_rel in read_manifest(root / manifest):
        image_path, mask_path = root / image_rel, root / mask_rel
        for p in (image_path, mask_path):
            if not p.exists():
                raise DataError(f"missing file {p} for pair ({image_rel}, {mask_rel})")
        image = read_image(image_path)
        mask = read_mask(mask_path, palette)
        if mask.shape != image.shape[:2]:
            raise DataError(f"{mask_path}: mask {mask.shape} does not match image "
                            f"{image.shape[:2]} of {image_path}")
        sample = SegSample(image, mask, Path(image_rel).stem)
        if num_classes is not None:
            sample.validate(num_classes)
        yield sample


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def make_synthetic(n: int, size: int, num_classes: int, seed: int = 0,
                   max_shapes: int = 4) -> list[SegSample]:
    """Random rectangles and ellipses on a textured background.

    Class 0 is background; each foreground class has its own base color with
    per-pixel noise.
    """
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    base = np.array([DEFAULT_COLORS[c % len(DEFAULT_COLORS)] for c in range(num_classes)],
                    dtype=np.float64)
    base[0] = (90, 90, 90)
    samples = []
    for i in range(n):
        mask = np.zeros((size, size), dtype=np.uint8)
        for _ in range(rng.integers(1, max_shapes + 1)):
            cls = int(rng.integers(1, num_classes)) if num_classes > 1 else 0
            cy, cx = rng.integers(0, size, 2)
            ry, rx = rng.integers(size // 10 + 1, size // 4 + 2, 2)
            if rng.random() < 0.5:
                region = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
            else:
                region = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            mask[region] = cls
        image = base[mask] + rng.normal(0.0, 12.0, (size, size, 3))
        image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
        samples.append(SegSample(image, mask, f"synthetic_{i:04d}"))
    return samples


def write_dataset(samples: list[SegSample], out_dir, num_classes: int) -> Path:
    """Write images/, masks/ (single-channel id PNGs), manifest.tsv and palette.json."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img_rel, mask_rel = f"images/{s.identifier}.png", f"masks/{s.identifier}.png"
        write_image(out / img_rel, s.image)
        write_mask(out / mask_rel, s.mask)
        lines.append(f"{img_rel}\t{mask_rel}")
    (out / "manifest.tsv").write_text("\n".join(lines) + "\n")
    Palette.default(num_classes).save(out / "palette.json")
    return out
