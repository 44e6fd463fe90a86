"""Per-sequence inference: crops, dual-branch forward, decode, online template selection."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import cv2
import numpy as np

from . import tensor as T
from .errors import InputError
from .model import BBox, TATrack, decode_batch

PIXEL_MEAN = 0.45
PIXEL_STD = 0.25


@dataclass(frozen=True)
class CropSpec:
    area_factor_template: float = 2.0
    area_factor_search: float = 4.0
    template_side: int = 32
    search_side: int = 64

    def __post_init__(self):
        if not 0 < self.area_factor_template < self.area_factor_search:
            raise InputError("crop area factors must satisfy 0 < template < search")

    @classmethod
    def for_model(cls, model: TATrack, **kw) -> "CropSpec":
        bb = model.cfg.backbone
        return cls(template_side=bb.template_side, search_side=bb.search_side, **kw)

    def factor(self, which: str) -> float:
        return self.area_factor_template if which == "template" else self.area_factor_search

    def side(self, which: str) -> int:
        return self.template_side if which == "template" else self.search_side


@dataclass(frozen=True)
class CropInfo:
    """Square source window [x0, x0+side) x [y0, y0+side) mapped onto out_side pixels."""

    x0: float
    y0: float
    side: float
    out_side: int
    padded: bool

    def to_image(self, box: BBox) -> np.ndarray:
        """Normalized crop box -> image (x, y, w, h)."""
        w, h = box.w * self.side, box.h * self.side
        cx = self.x0 + box.cx * self.side
        cy = self.y0 + box.cy * self.side
        return np.array([cx - w / 2, cy - h / 2, w, h])

    def to_crop(self, xywh) -> BBox:
        x, y, w, h = xywh
        return BBox((x + w / 2 - self.x0) / self.side, (y + h / 2 - self.y0) / self.side,
                    w / self.side, h / self.side)


def _check_box(xywh) -> None:
    x, y, w, h = xywh
    if not (w > 0 and h > 0) or not np.isfinite([x, y, w, h]).all():
        raise InputError(f"degenerate box {tuple(float(v) for v in xywh)}")


def crop_window(xywh, factor: float, center=None, scale: float = 1.0) -> tuple[float, float, float]:
    _check_box(xywh)
    x, y, w, h = xywh
    cx, cy = (x + w / 2, y + h / 2) if center is None else center
    side = math.sqrt(factor * w * h) * scale
    return cx - side / 2, cy - side / 2, side


def _warp(img: np.ndarray, x0: float, y0: float, side: float, out: int) -> np.ndarray:
    k = out / side
    m = np.array([[k, 0.0, k * (0.5 - x0) - 0.5], [0.0, k, k * (0.5 - y0) - 0.5]])
    fill = cv2.mean(img)[:img.shape[-1]]
    return cv2.warpAffine(img, m, (out, out), flags=cv2.INTER_LINEAR,
                          borderMode=cv2.BORDER_CONSTANT, borderValue=fill)


def crop_and_resize(frame, center_box, spec: CropSpec, which: str = "search", center=None,
                    scale: float = 1.0):
    """Crop the same square window from both modalities; out-of-frame area is mean-padded."""
    rgb, tir = frame
    if rgb.shape[:2] != tir.shape[:2]:
        raise InputError(f"RGB {rgb.shape} and TIR {tir.shape} frames are not aligned")
    x0, y0, side = crop_window(center_box, spec.factor(which), center, scale)
    out = spec.side(which)
    h, w = rgb.shape[:2]
    padded = x0 < 0 or y0 < 0 or x0 + side > w or y0 + side > h
    info = CropInfo(x0, y0, side, out, padded)
    return (_warp(rgb, x0, y0, side, out), _warp(tir, x0, y0, side, out)), info


def to_input(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 HxWx3 -> normalized [3, H, W]."""
    x = img.astype(dtype) * (1.0 / 255.0)
    return np.ascontiguousarray(((x - PIXEL_MEAN) / PIXEL_STD).transpose(2, 0, 1))


def pair_input(pair, dtype=np.float32):
    return to_input(pair[0], dtype), to_input(pair[1], dtype)


class TemplateSelector:
    """Max-score online template selection over fixed intervals.

    ``interval=None`` never updates. ``min_confidence`` optionally rejects
    low-scoring candidates (off by default).
    """

    def __init__(self, interval: int | None = 50, min_confidence: float | None = None):
        if interval is not None and (interval != math.inf) and interval < 1:
            raise InputError("update interval must be >= 1")
        self.interval = None if interval in (None, math.inf) else int(interval)
        self.min_confidence = min_confidence
        self.reset()

    def reset(self) -> None:
        self.best_score = -math.inf
        self.best = None
        self.frames_since_update = 0

    def observe(self, score: float, candidate=None) -> bool:
        """Record one tracked frame; True when the current interval just closed."""
        if self.interval is None:
            return False
        if score > self.best_score:
            self.best_score, self.best = score, candidate
        self.frames_since_update += 1
        return self.frames_since_update >= self.interval

    def maybe_update(self):
        """Return the selected candidate when the interval is complete, else None."""
        if self.interval is None or self.frames_since_update < self.interval:
            return None
        chosen = self.best
        if self.min_confidence is not None and self.best_score < self.min_confidence:
            chosen = None
        self.reset()
        return chosen


def simulate_updates(scores, interval: int | None) -> list[tuple[int, int]]:
    """(update frame, chosen frame) pairs for a scripted score sequence."""
    sel = TemplateSelector(interval)
    out = []
    for t, s in enumerate(scores):
        sel.observe(float(s), t)
        chosen = sel.maybe_update()
        if chosen is not None:
            out.append((t, chosen))
    return out


@dataclass
class TrackerState:
    prev_box: np.ndarray
    initial_template: tuple
    online_template: tuple
    selector: TemplateSelector
    frame_shape: tuple
    init_input: tuple = field(default=None, repr=False)
    online_input: tuple = field(default=None, repr=False)
    frame_index: int = 0
    updates: list = field(default_factory=list)

    @property
    def best_candidate(self):
        return self.selector.best, self.selector.best_score

    @property
    def frames_since_update(self) -> int:
        return self.selector.frames_since_update

    @property
    def update_interval(self):
        return self.selector.interval


def clip_box(xywh, shape) -> np.ndarray:
    h, w = shape[:2]
    x, y, bw, bh = xywh
    bw = float(np.clip(bw, 2.0, w))
    bh = float(np.clip(bh, 2.0, h))
    cx = float(np.clip(x + bw / 2, 0, w))
    cy = float(np.clip(y + bh / 2, 0, h))
    return np.array([cx - bw / 2, cy - bh / 2, bw, bh])


class Tracker:
    def __init__(self, model: TATrack, spec: CropSpec | None = None, update_interval=50,
                 min_confidence: float | None = None):
        self.model = model
        self.spec = spec or CropSpec.for_model(model)
        self.update_interval = update_interval
        self.min_confidence = min_confidence
        self.dtype = model.backbone.patch_embed.proj.weight.dtype

    def init(self, frame, box) -> TrackerState:
        box = np.asarray(box, dtype=np.float64)
        _check_box(box)
        h, w = frame[0].shape[:2]
        x, y, bw, bh = box
        if x + bw <= 0 or y + bh <= 0 or x >= w or y >= h:
            raise InputError(f"initial box {tuple(box)} lies outside the {w}x{h} frame")
        tpl, _ = crop_and_resize(frame, box, self.spec, "template")
        inp = pair_input(tpl, self.dtype)
        return TrackerState(box, tpl, tpl, TemplateSelector(self.update_interval, self.min_confidence),
                            frame[0].shape, inp, inp)

    def prepare(self, state: TrackerState, frame):
        if frame[0].shape != state.frame_shape:
            raise InputError(f"frame size changed from {state.frame_shape} to {frame[0].shape}")
        search, info = crop_and_resize(frame, state.prev_box, self.spec, "search")
        return pair_input(search, self.dtype), info

    def finish(self, state: TrackerState, frame, decoded, info: CropInfo):
        box_n, conf = decoded
        box = clip_box(info.to_image(box_n), frame[0].shape)
        state.prev_box = box
        t = state.frame_index
        state.frame_index += 1
        if self.model.cfg.dual and state.selector.interval is not None:
            candidate = None
            if conf > state.selector.best_score:
                candidate, _ = crop_and_resize(frame, box, self.spec, "template")
                state.selector.best_score, state.selector.best = conf, candidate
            state.selector.frames_since_update += 1
            chosen = state.selector.maybe_update()
            if chosen is not None:
                state.online_template = chosen
                state.online_input = pair_input(chosen, self.dtype)
                state.updates.append(t)
        return box, conf

    def forward(self, init_inputs, online_inputs, search_inputs):
        stack = lambda items, k: np.stack([it[k] for it in items])  # noqa: E731
        init = (stack(init_inputs, 0), stack(init_inputs, 1))
        search = (stack(search_inputs, 0), stack(search_inputs, 1))
        with T.no_grad():
            if self.model.cfg.dual:
                online = (stack(online_inputs, 0), stack(online_inputs, 1))
                maps = self.model.dual_forward(init, online, search)
            else:
                maps = self.model.single_forward(init, search)
        return decode_batch(*maps)

    def track_frame(self, state: TrackerState, frame):
        inp, info = self.prepare(state, frame)
        decoded = self.forward([state.init_input], [state.online_input], [inp])[0]
        return self.finish(state, frame, decoded, info)


@dataclass
class TrackResult:
    boxes: np.ndarray
    confidences: np.ndarray
    seconds: float
    updates: list

    @property
    def fps(self) -> float:
        return (len(self.boxes) - 1) / self.seconds if self.seconds > 0 else float("inf")


def track_sequences(tracker: Tracker, sequences, max_frames: int | None = None) -> list[TrackResult]:
    """Track several sequences in lockstep, batching the forward passes across them."""
    tracker.model.eval()
    n = [min(len(s), max_frames or len(s)) for s in sequences]
    states, boxes, confs = [], [], []
    elapsed = np.zeros(len(sequences))
    for k, seq in enumerate(sequences):
        frame0 = seq.frame(0)
        t0 = time.perf_counter()
        states.append(tracker.init(frame0, seq.boxes[0]))
        elapsed[k] += time.perf_counter() - t0
        boxes.append([np.asarray(seq.boxes[0], dtype=np.float64)])
        confs.append([1.0])
    for t in range(1, max(n)):
        active = [k for k in range(len(sequences)) if t < n[k]]
        frames = {k: sequences[k].frame(t) for k in active}
        t0 = time.perf_counter()
        prepared = {k: tracker.prepare(states[k], frames[k]) for k in active}
        decoded = tracker.forward([states[k].init_input for k in active],
                                  [states[k].online_input for k in active],
                                  [prepared[k][0] for k in active])
        for k, dec in zip(active, decoded):
            box, conf = tracker.finish(states[k], frames[k], dec, prepared[k][1])
            boxes[k].append(box)
            confs[k].append(conf)
        share = (time.perf_counter() - t0) / len(active)
        elapsed[active] += share
    return [TrackResult(np.array(b), np.array(c), float(e), s.updates)
            for b, c, e, s in zip(boxes, confs, elapsed, states)]


def write_results(path, result: TrackResult) -> None:
    from pathlib import Path

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{x:.3f},{y:.3f},{w:.3f},{h:.3f}\n" for x, y, w, h in result.boxes))
    conf_path = path.with_name(path.stem + "_confidence.txt")
    conf_path.write_text("".join(f"{c:.6f}\n" for c in result.confidences))
