"""Command-line entry point: train, infer, eval, tile, params, make-synthetic."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .data import (Palette, ingest_dataset, make_synthetic, read_image, read_mask, write_dataset,
                   write_image, write_mask)
from .errors import AerialFormerError, DataError
from .metrics import ConfusionCounts, confusion, metrics
from .model import AerialFormer, ModelConfig, load_config, param_count
from .tensor import load_checkpoint
from .tiling import infer_image, make_grid
from .training import TrainConfig, train_loop

log = logging.getLogger("aerialformer")


def _size_arg(text: str) -> tuple[int, int]:
    """``512`` or ``512x384`` (height x width)."""
    parts = text.lower().split("x")
    try:
        vals = [int(p) for p in parts]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(vals) == 1:
        vals *= 2
    if len(vals) != 2 or min(vals) < 1:
        raise argparse.ArgumentTypeError(f"expected positive N or HxW, got {text!r}")
    return vals[0], vals[1]


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.train_config:
        overrides.update(json.loads(Path(args.train_config).read_text()))
    for name in ("lr", "iterations", "batch_size", "seed", "checkpoint_every", "weight_decay"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.no_augment:
        overrides.update(hflip=False, jitter=False)
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise DataError(f"unknown training options {sorted(unknown)}")
    tcfg = TrainConfig(**overrides)
    dataset = list(ingest_dataset(args.data, args.manifest, args.palette, cfg.num_classes))
    model = AerialFormer(cfg, seed=tcfg.seed)
    log.info("training %s (%d params) on %d samples", cfg.variant, model.num_parameters(),
             len(dataset))
    result = train_loop(model, dataset, tcfg, args.out, cfg.to_dict())
    last = result.trace[-1]
    print(f"iterations {result.iterations}  loss {last['loss']:.4f}  "
          f"pixel accuracy {last['pixel_accuracy']:.4f}  checkpoint {result.checkpoint}")
    return 0


def load_model(checkpoint) -> AerialFormer:
    arrays, meta = load_checkpoint(checkpoint)
    if not meta or not meta.get("model"):
        raise DataError(f"{checkpoint}: checkpoint carries no model config")
    model = AerialFormer(ModelConfig.from_dict(meta["model"]), seed=None)
    model.load_state_dict(arrays)
    return model.eval()


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    image = read_image(args.image)
    palette = Palette.load(args.palette) if args.palette else None
    tile = args.tile or image.shape[:2]
    step = args.step or tile
    pred, overlay = infer_image(model, image, tile, step, palette)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mask(out, pred)
    overlay_path = out.with_name(out.stem + "_overlay.png")
    write_image(overlay_path, overlay)
    print(f"wrote {out} and {overlay_path}")
    return 0


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred_dir), Path(args.gt_dir)
    palette = Palette.load(args.palette) if args.palette else None
    gt_files = sorted(gt_dir.glob("*.png"))
    if not gt_files:
        raise DataError(f"no PNG masks in {gt_dir}")
    total: ConfusionCounts | None = None
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            raise DataError(f"missing prediction {pred_path} for ground truth {gt_path}")
        gt = read_mask(gt_path, palette)
        pred = read_mask(pred_path, palette)
        if pred.shape != gt.shape:
            raise DataError(f"{pred_path}: shape {pred.shape} differs from {gt_path} {gt.shape}")
        try:
            counts = confusion(pred, gt, args.classes, args.ignore_index)
        except DataError as exc:
            raise DataError(f"{pred_path}: {exc}") from exc
        total = counts if total is None else total + counts
    names = args.class_names.split(",") if args.class_names else None
    if names is not None and len(names) != args.classes:
        raise DataError(f"--class-names lists {len(names)} names for {args.classes} classes")
    report = metrics(total, names)
    doc = report.to_dict(include_pixel_accuracy=args.pixel_accuracy)
    doc["images"] = len(gt_files)
    text = json.dumps(doc, indent=2)
    if args.report:
        Path(args.report).write_text(text + "\n")
    else:
        print(text)
    print(report.table(include_pixel_accuracy=args.pixel_accuracy))
    return 0


def cmd_tile(args) -> int:
    image = read_image(args.image)
    h, w = image.shape[:2]
    grid = make_grid(h, w, args.tile, args.step or args.tile)
    th, tw = grid.extent
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, (y, x) in enumerate(grid.origins):
        write_image(out / f"tile_{i:04d}_y{y}_x{x}.png", image[y:y + th, x:x + tw])
    (out / "grid.json").write_text(json.dumps({
        "image": str(args.image), "image_size": [h, w], "tile_size": [th, tw],
        "step": list(grid.step), "origins": [list(o) for o in grid.origins]}, indent=2) + "\n")
    print(f"wrote {len(grid)} tiles to {out}")
    return 0


def cmd_params(args) -> int:
    cfg = load_config(args.config)
    if args.classes is not None:
        cfg = cfg.with_num_classes(args.classes)
    counts = param_count(cfg)
    if args.json:
        print(json.dumps(counts, indent=2))
        return 0
    width = max(len(k) for k in counts["breakdown"])
    for key, n in counts["breakdown"].items():
        print(f"{key:<{width}}  {n:>12,}")
    for key, n in counts["modules"].items():
        print(f"{key + ' total':<{width}}  {n:>12,}")
    print(f"{'total':<{width}}  {counts['total']:>12,}  ({counts['total'] / 1e6:.1f}M)")
    return 0


def cmd_make_synthetic(args) -> int:
    if args.classes < 1 or args.n < 1 or args.size < 4:
        raise DataError("make-synthetic needs --n >= 1, --size >= 4 and --classes >= 1")
    samples = make_synthetic(args.n, args.size, args.classes, seed=args.seed)
    out = write_dataset(samples, args.out, args.classes)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aerialformer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a manifest dataset")
    t.add_argument("--config", required=True, help="model config JSON or preset (t, s, b, toy)")
    t.add_argument("--data", required=True, help="dataset root containing the manifest")
    t.add_argument("--out", required=True, help="output directory for trace and checkpoints")
    t.add_argument("--manifest", default="manifest.tsv")
    t.add_argument("--palette", default=None, help="palette JSON for RGB masks")
    t.add_argument("--train-config", default=None, help="JSON file of training options")
    t.add_argument("--lr", type=float)
    t.add_argument("--weight-decay", type=float)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--no-augment", action="store_true", help="disable flip and color jitter")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="tiled inference on one image")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--tile", type=_size_arg, default=None, help="tile size N or HxW")
    i.add_argument("--step", type=_size_arg, default=None, help="step N or HxW (default: tile)")
    i.add_argument("--out", required=True, help="predicted id-mask PNG path")
    i.add_argument("--palette", default=None, help="palette JSON for the overlay colors")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predicted masks against ground truth")
    e.add_argument("--pred-dir", required=True)
    e.add_argument("--gt-dir", required=True)
    e.add_argument("--classes", type=int, required=True)
    e.add_argument("--class-names", default=None, help="comma-separated class names")
    e.add_argument("--ignore-index", type=int, default=255)
    e.add_argument("--palette", default=None, help="palette JSON for RGB masks")
    e.add_argument("--pixel-accuracy", action="store_true",
                   help="also report conventional overall pixel accuracy")
    e.add_argument("--report", default=None, help="write the JSON report here instead of stdout")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("tile", help="cut an image into overlapping tiles")
    g.add_argument("--image", required=True)
    g.add_argument("--tile", type=_size_arg, required=True)
    g.add_argument("--step", type=_size_arg, default=None)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_tile)

    c = sub.add_parser("params", help="parameter count of a model config")
    c.add_argument("--config", required=True)
    c.add_argument("--classes", type=int, default=None, help="override number of classes")
    c.add_argument("--json", action="store_true")
    c.set_defaults(func=cmd_params)

    s = sub.add_parser("make-synthetic", help="generate a synthetic-shapes dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AerialFormerError, ValueError, KeyError, OSError) as exc:
        print(f"aerialformer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
