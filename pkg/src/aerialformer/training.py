"""Cross-entropy loss, Adam with decoupled weight decay, augmentation and the training loop."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import IGNORE_INDEX, SegSample, to_input
from .errors import DataError, TrainingError
from .tensor import Module, Parameter, Tensor, backward, save_checkpoint
from .tensor.tensor import as_tensor, make_result

log = logging.getLogger(__name__)


def cross_entropy(logits, target: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of ``-log softmax(logits)[true class]`` over non-ignored pixels.

    ``logits``: ``[N, L, H, W]``; ``target``: ``[N, H, W]`` integer ids. When
    every pixel is ignored the loss is 0 and the gradient is zero.
    """
    logits = as_tensor(logits)
    target = np.asarray(target)
    n, num_classes = logits.shape[:2]
    if target.shape != (n,) + logits.shape[2:]:
        raise DataError(f"target shape {list(target.shape)} does not match logits "
                        f"{list(logits.shape)}")
    valid = target != ignore_index
    bad = valid & ((target < 0) | (target >= num_classes))
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"class id {int(target[loc])} at pixel (n, y, x) = {loc} outside "
                        f"[0, {num_classes})")
    count = int(valid.sum())
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    safe = np.where(valid, target, 0).astype(np.intp)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count if count else 0.0

    def bwd(g):
        if not count:
            return (np.zeros_like(logits.data),)
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None],
                          np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        return (grad * (valid[:, None] * (g / count)),)

    return make_result("cross_entropy", np.asarray(loss), (logits,), bwd)


def pixel_accuracy(logits: np.ndarray, target: np.ndarray,
                   ignore_index: int = IGNORE_INDEX) -> float:
    valid = target != ignore_index
    if not valid.any():
        return 1.0
    return float((logits.argmax(axis=1) == target)[valid].mean())


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Bias-corrected Adam; weight decay is a multiplicative shrink ``p *= 1 - lr*wd``.

    Decay skips 1-D parameters (biases and norm scales/shifts).
    """

    def __init__(self, named_params, lr: float = 6e-5, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params: list[tuple[str, Parameter]] = list(named_params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, tuple(betas), eps, weight_decay
        self.state = OptimizerState()

    def step(self) -> None:
        b1, b2 = self.betas
        self.state.step += 1
        t = self.state.step
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for name, p in self.params:
            if p.grad is None:
                raise TrainingError(f"parameter {name} has no gradient")
            g = p.grad
            m = self.state.m.get(name)
            if m is None:
                m = self.state.m[name] = np.zeros_like(p.data)
                self.state.v[name] = np.zeros_like(p.data)
            v = self.state.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay and p.ndim > 1:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 6e-5
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 8
    iterations: int = 1000
    ignore_index: int = IGNORE_INDEX
    hflip: bool = True
    jitter: bool = True
    jitter_strength: float = 0.25
    seed: int = 0
    checkpoint_every: int = 0
    stop_accuracy: float | None = None
    stop_loss: float | None = None

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


def augment(sample: SegSample, cfg: TrainConfig, rng: np.random.Generator) -> SegSample:
    """Joint horizontal flip (p=0.5) and image-only brightness/contrast jitter."""
    image, mask = sample.image, sample.mask
    if cfg.hflip and rng.random() < 0.5:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if cfg.jitter:
        s = cfg.jitter_strength
        contrast, brightness = rng.uniform(1.0 - s, 1.0 + s, 2)
        img = image.astype(np.float64)
        mu = img.mean()
        img = ((img - mu) * contrast + mu) * brightness
        image = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SegSample(np.ascontiguousarray(image), np.ascontiguousarray(mask), sample.identifier)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    trace: list[dict]
    checkpoint: Path | None
    iterations: int


def train_loop(model: Module, dataset: Sequence[SegSample], cfg: TrainConfig,
               out_dir=None, model_config: dict | None = None) -> TrainResult:
    """sample -> augment -> forward -> cross-entropy -> backward -> Adam, per iteration.

    Writes ``loss_trace.jsonl`` (iteration, loss, pixel_accuracy) and
    checkpoints into ``out_dir`` when given.
    """
    if not dataset:
        raise TrainingError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.named_parameters(), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    out = Path(out_dir) if out_dir is not None else None
    trace_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        trace_fh = open(out / "loss_trace.jsonl", "w")
    meta = {"model": model_config, "train": asdict(cfg)}
    trace: list[dict] = []
    model.train()
    it = 0
    try:
        for it in range(1, cfg.iterations + 1):
            if cfg.batch_size >= len(dataset):
                idx = np.arange(len(dataset))
            else:
                idx = rng.choice(len(dataset), cfg.batch_size, replace=False)
            batch = [augment(dataset[i], cfg, rng) for i in idx]
            x = Tensor(to_input(np.stack([s.image for s in batch])))
            y = np.stack([s.mask for s in batch]).astype(np.int64)
            logits = model(x)
            loss = cross_entropy(logits, y, cfg.ignore_index)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at iteration {it}; "
                                    f"config: {json.dumps(meta, default=str)}")
            opt.zero_grad()
            backward(loss)
            opt.step()
            rec = {"iteration": it, "loss": value,
                   "pixel_accuracy": pixel_accuracy(logits.data, y, cfg.ignore_index)}
            trace.append(rec)
            if trace_fh is not None:
                trace_fh.write(json.dumps(rec) + "\n")
            if out is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{it:06d}.afc", model.state_dict(),
                                {**meta, "iteration": it})
            if (cfg.stop_accuracy is not None and rec["pixel_accuracy"] >= cfg.stop_accuracy
                    and (cfg.stop_loss is None or value < cfg.stop_loss)):
                log.info("stopping at iteration %d: accuracy %.4f, loss %.4f",
                         it, rec["pixel_accuracy"], value)
                break
    finally:
        if trace_fh is not None:
            trace_fh.close()
    ckpt = None
    if out is not None:
        ckpt = out / "final.afc"
        save_checkpoint(ckpt, model.state_dict(), {**meta, "iteration": it})
    return TrainResult(trace, ckpt, it)
