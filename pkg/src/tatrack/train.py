"""Base-model pretraining and prompt tuning."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .checkpoint import copy_weights
from .errors import ConfigError, NumericError
from .losses import LossWeights, total_loss
from .model import BBox, ModelConfig, TATrack
from .module import xavier_uniform
from .tracker import CropSpec, crop_and_resize, pair_input

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 25
    samples_per_epoch: int = 60000
    batch_size: int = 64
    lr: float = 1e-4
    lr_drop_epoch: int = 10
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-4
    grad_clip: float = 0.1
    seed: int = 0
    max_gap: int = 50
    center_jitter: float = 0.5
    scale_jitter: float = 0.15
    blackout_bias: float = 0.0

    def __post_init__(self):
        for f in ("epochs", "samples_per_epoch", "batch_size", "lr", "lr_drop_factor", "max_gap"):
            if getattr(self, f) <= 0:
                raise ConfigError(f"{f} must be positive")
        if not 0 < self.lr_drop_epoch < self.epochs:
            raise ConfigError("lr_drop_epoch must lie inside (0, epochs)")

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.samples_per_epoch // self.batch_size)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-indexed ``epoch``: dropped after lr_drop_epoch epochs."""
        return self.lr * (self.lr_drop_factor if epoch > self.lr_drop_epoch else 1.0)

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in known:
                continue
            kw[k] = float(v) if known[k] == "float" else int(float(v))
        return cls(**kw)


def desk_pretrain_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=25, samples_per_epoch=1024, batch_size=16, lr=1e-3,
                       lr_drop_epoch=20, weight_decay=1e-4, grad_clip=1.0, seed=seed)


def desk_finetune_config(seed: int = 0) -> TrainConfig:
    return TrainConfig(epochs=25, samples_per_epoch=256, batch_size=16, lr=1e-3,
                       lr_drop_epoch=10, weight_decay=1e-4, grad_clip=1.0, seed=seed,
                       blackout_bias=0.3)


def read_config_file(path) -> dict:
    """Flat ``key=value`` lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


class AdamW:
    def __init__(self, params, lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, grad_clip: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def grad_norm(self) -> float:
        return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                             for p in self.params if p.trainable))

    def step(self, names: list | None = None) -> float:
        bad = [i for i, p in enumerate(self.params) if p.trainable and not np.isfinite(p.grad).all()]
        if bad:
            label = [names[i] if names else str(i) for i in bad[:5]]
            raise NumericError(f"non-finite gradient in {label}; step aborted")
        norm = self.grad_norm()
        scale = 1.0
        if self.grad_clip and norm > self.grad_clip:
            scale = self.grad_clip / (norm + 1e-12)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if not p.trainable:
                continue
            g = p.grad * scale
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - self.lr * (update + self.weight_decay * p.data)).astype(p.dtype, copy=False)
        return norm


@dataclass
class SamplePair:
    initial: tuple
    online: tuple
    search: tuple
    gt_box: BBox
    partial: bool
    frames: tuple  # (initial, online, search) indices
    sequence: str = ""


def sample_training_pair(dataset, rng: np.random.Generator, spec: CropSpec, cfg: TrainConfig,
                         dtype=np.float32) -> SamplePair | None:
    """Initial template from an early frame, online template from a frame at most
    ``max_gap`` before the search frame, search crop jittered around the target."""
    seq = dataset[int(rng.integers(len(dataset)))]
    n = len(seq)
    if n < 3:
        return None
    blackout = getattr(seq, "attribute_mask", None)
    s = None
    if cfg.blackout_bias > 0 and blackout is not None and rng.random() < cfg.blackout_bias:
        idx = np.flatnonzero(blackout("LI")[2:]) + 2
        if idx.size:
            s = int(rng.choice(idx))
    if s is None:
        s = int(rng.integers(2, n))
    o = int(rng.integers(max(1, s - cfg.max_gap), s))
    i = int(rng.integers(0, o))
    boxes = seq.boxes
    init_frame = seq.frame(i)
    init, _ = crop_and_resize(init_frame, boxes[i], spec, "template")
    online, _ = crop_and_resize(seq.frame(o), boxes[o], spec, "template")
    gx, gy, gw, gh = boxes[s]
    size = math.sqrt(gw * gh)
    jitter = rng.uniform(-cfg.center_jitter, cfg.center_jitter, size=2) * size
    center = (gx + gw / 2 + jitter[0], gy + gh / 2 + jitter[1])
    scale = float(np.exp(rng.uniform(-cfg.scale_jitter, cfg.scale_jitter)))
    search, info = crop_and_resize(seq.frame(s), boxes[s], spec, "search", center, scale)
    box = info.to_crop(boxes[s])
    x1, y1 = box.cx - box.w / 2, box.cy - box.h / 2
    x2, y2 = box.cx + box.w / 2, box.cy + box.h / 2
    cx1, cy1, cx2, cy2 = max(x1, 0.0), max(y1, 0.0), min(x2, 1.0), min(y2, 1.0)
    partial = (cx1, cy1, cx2, cy2) != (x1, y1, x2, y2)
    if cx2 <= cx1 or cy2 <= cy1:
        return None
    gt = BBox((cx1 + cx2) / 2, (cy1 + cy2) / 2, cx2 - cx1, cy2 - cy1)
    return SamplePair(pair_input(init, dtype), pair_input(online, dtype), pair_input(search, dtype),
                      gt, partial, (i, o, s), getattr(seq, "name", ""))


def make_batch(samples: list[SamplePair]):
    stack = lambda attr, k: np.stack([getattr(s, attr)[k] for s in samples])  # noqa: E731
    init = (stack("initial", 0), stack("initial", 1))
    online = (stack("online", 0), stack("online", 1))
    search = (stack("search", 0), stack("search", 1))
    return init, online, search, [s.gt_box for s in samples]


def draw_batch(dataset, rng, spec, cfg, dtype=np.float32) -> list[SamplePair]:
    out = []
    while len(out) < cfg.batch_size:
        s = sample_training_pair(dataset, rng, spec, cfg, dtype)
        if s is not None:
            out.append(s)
    return out


def train_loop(model: TATrack, dataset, cfg: TrainConfig, log_path=None,
               on_epoch: Callable | None = None, loss_weights: LossWeights = LossWeights()) -> list[dict]:
    """Optimize the trainable parameters of ``model``; returns per-epoch mean losses."""
    names = [n for n, _ in model.named_params()]
    params = [p for _, p in model.named_params()]
    opt = AdamW(params, cfg.lr, weight_decay=cfg.weight_decay, grad_clip=cfg.grad_clip)
    spec = CropSpec.for_model(model)
    rng = np.random.default_rng([cfg.seed, 101])
    dtype = model.backbone.patch_embed.proj.weight.dtype
    fh = open(log_path, "a") if log_path else None
    history = []
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            opt.lr = cfg.lr_at(epoch)
            model.train()
            sums: dict = {}
            for _ in range(cfg.steps_per_epoch):
                init, online, search, gts = make_batch(draw_batch(dataset, rng, spec, cfg, dtype))
                opt.zero_grad()
                maps = model(init, search, online)
                loss, parts = total_loss(*maps, gts, loss_weights)
                if not math.isfinite(parts["total"]):
                    raise NumericError(f"loss diverged at epoch {epoch} step {step} (seed {cfg.seed})")
                T.backward(loss)
                opt.step(names)
                step += 1
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                if fh:
                    fh.write(json.dumps({"epoch": epoch, "step": step, **parts, "lr": opt.lr}) + "\n")
            record = {"epoch": epoch, "lr": opt.lr,
                      **{k: v / cfg.steps_per_epoch for k, v in sums.items()}}
            history.append(record)
            log.info("epoch %d lr %.2e loss %.4f (cls %.4f iou %.4f l1 %.4f)", epoch, opt.lr,
                     record["total"], record["cls"], record["iou"], record["l1"])
            if on_epoch:
                on_epoch(record)
    finally:
        if fh:
            fh.close()
    model.eval()
    return history


def pretrain_base(dataset, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                  log_path=None) -> TATrack:
    """Train backbone and head as a single-branch RGB tracker (the frozen base)."""
    base_cfg = (model_cfg or ModelConfig()).with_(use_mcp=False, dual=False, sti_layers=())
    model = TATrack(base_cfg, seed=cfg.seed)
    model.set_trainable(True)
    train_loop(model, dataset, cfg, log_path)
    return model


def xavier_reinit(model: TATrack, seed: int) -> None:
    """Xavier-uniform weights for every trainable matrix; vectors keep their defaults."""
    rng = np.random.default_rng([seed, 202])
    for name, p in model.named_params():
        if not p.trainable or p.ndim != 2 or name.endswith("_pe"):
            continue
        a, b = p.shape
        p.assign(xavier_uniform(rng, p.shape, a, b).astype(p.dtype))


def finetune_tatrack(base: TATrack, dataset, cfg: TrainConfig, model_cfg: ModelConfig,
                     log_path=None, on_epoch=None) -> TATrack:
    """Build the prompted model on top of a frozen base and train only the new parameters."""
    model = TATrack(model_cfg, seed=cfg.seed)
    copy_weights(base, model)
    model.freeze_base()
    xavier_reinit(model, cfg.seed)
    train_loop(model, dataset, cfg, log_path, on_epoch)
    return model
