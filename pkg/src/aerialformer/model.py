"""Full network: CNN stem + windowed-attention encoder + MDC decoder."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .decoder import DEFAULT_SCHEDULE, DecoderConfig, MDCDecoder
from .encoder import EncoderConfig, SwinEncoder
from .errors import ConfigError, GeometryError
from .stem import CNNStem, StemConfig
from .tensor import Module, Tensor, transpose

PRESETS = ("t", "s", "b")


@dataclass
class ModelConfig:
    encoder: EncoderConfig
    stem: StemConfig
    decoder: DecoderConfig
    variant: str = "custom"

    @property
    def num_classes(self) -> int:
        return self.decoder.num_classes

    @classmethod
    def build(cls, embed_dim: int, window_size: int, depths, num_heads, num_classes: int,
              stem_channels: int | None = None, schedule=DEFAULT_SCHEDULE,
              variant: str = "custom", **encoder_kwargs) -> "ModelConfig":
        enc = EncoderConfig(embed_dim=embed_dim, window_size=window_size, depths=tuple(depths),
                            num_heads=tuple(num_heads), **encoder_kwargs)
        if stem_channels is None:
            stem_channels = embed_dim // 2
        stem = StemConfig(out_channels=stem_channels, in_channels=enc.in_channels)
        dec = DecoderConfig.from_widths(embed_dim, stem_channels, num_classes, schedule)
        return cls(enc, stem, dec, variant)

    def to_dict(self) -> dict:
        enc = asdict(self.encoder)
        enc["depths"] = list(enc["depths"])
        enc["num_heads"] = list(enc["num_heads"])
        return {"variant": self.variant, "num_classes": self.num_classes, "encoder": enc,
                "stem": asdict(self.stem), "decoder": self.decoder.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            enc = EncoderConfig(**d["encoder"])
            stem = StemConfig(**d.get("stem", {"out_channels": enc.embed_dim // 2}))
            dec_d = d.get("decoder", {})
            if "blocks" in dec_d:
                dec = DecoderConfig.from_dict(dec_d)
            else:
                dec = DecoderConfig.from_widths(enc.embed_dim, stem.out_channels,
                                                int(d["num_classes"]),
                                                dec_d.get("schedule", DEFAULT_SCHEDULE))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed model config: {exc}") from exc
        if "num_classes" in d and int(d["num_classes"]) != dec.num_classes:
            raise ConfigError(f"num_classes {d['num_classes']} disagrees with decoder "
                              f"{dec.num_classes}")
        return cls(enc, stem, dec, d.get("variant", "custom"))

    def with_num_classes(self, num_classes: int) -> "ModelConfig":
        d = self.to_dict()
        d["num_classes"] = num_classes
        d["decoder"]["num_classes"] = num_classes
        return ModelConfig.from_dict(d)


def load_config(path_or_name) -> ModelConfig:
    """Read a JSON model config; bare preset names (``"t"``, ``"aerialformer_t"``) also work."""
    name = str(path_or_name)
    stem = Path(name).name.lower().removesuffix(".json").removeprefix("aerialformer_")
    if not Path(name).exists() and stem in PRESETS + ("toy",):
        text = resources.files("aerialformer.presets").joinpath(
            f"aerialformer_{stem}.json").read_text()
    else:
        text = Path(name).read_text()
    return ModelConfig.from_dict(json.loads(text))


class AerialFormer(Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.stem = CNNStem(cfg.stem, rng)
        self.encoder = SwinEncoder(cfg.encoder, rng)
        self.decoder = MDCDecoder(cfg.decoder, rng)

    @property
    def input_multiple(self) -> int:
        return self.cfg.encoder.input_multiple

    def forward_features(self, img: Tensor) -> Tensor:
        """Logits for an input whose sides are already multiples of :attr:`input_multiple`."""
        stem_out = self.stem(img)
        feats = [transpose(f, (0, 3, 1, 2)) for f in self.encoder(img)]
        return self.decoder(feats, stem_out)

    def forward(self, img) -> Tensor:
        """``[N, 3, H, W]`` -> ``[N, L, H, W]`` logits.

        Sides that are not multiples of :attr:`input_multiple` are reflect-padded
        (bottom/right) before the network and the logits cropped back.
        """
        data = img.data if isinstance(img, Tensor) else np.asarray(img, dtype=np.float64)
        if data.ndim != 4:
            raise GeometryError(f"expected [N, C, H, W] input, got shape {list(data.shape)}")
        h, w = data.shape[2:]
        mult = self.input_multiple
        ph, pw = -h % mult, -w % mult
        if not (ph or pw):
            return self.forward_features(img if isinstance(img, Tensor) else Tensor(data))
        if isinstance(img, Tensor) and img.requires_grad:
            raise GeometryError(f"input {h}x{w} needs padding to a multiple of {mult}; "
                                "pad differentiable inputs explicitly")
        padded = np.pad(data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")
        logits = self.forward_features(Tensor(padded))
        return logits[:, :, :h, :w]


def param_count(cfg_or_model) -> dict:
    """Total scalar parameter count with a per-module breakdown."""
    model = cfg_or_model if isinstance(cfg_or_model, AerialFormer) else AerialFormer(cfg_or_model)
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        key = ".".join(parts[:2]) if parts[0] in ("encoder", "decoder") else parts[0]
        groups[key] = groups.get(key, 0) + p.size
    totals = {top: sum(v for k, v in groups.items() if k.split(".")[0] == top)
              for top in ("stem", "encoder", "decoder")}
    return {"total": sum(totals.values()), "modules": totals, "breakdown": groups}
