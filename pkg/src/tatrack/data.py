"""Sequence I/O and synthetic RGB-thermal sequences.

On-disk layout (one directory per sequence)::

    visible/000000.png ...    RGB frames
    infrared/000000.png ...   thermal frames, grayscale replicated to 3 channels
    groundtruth.txt           "x,y,w,h" per line, pixels, top-left origin
    attributes.txt            optional; "<CODE> <start> <end>" per span, end exclusive
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterator

import cv2
import numpy as np

from .errors import InputError, LoadError

# LasHeR attribute codes
ATTRIBUTES = ("NO", "PO", "TO", "HO", "MB", "LI", "HI", "AIV", "LR", "DEF",
              "BC", "SA", "CM", "TC", "FL", "OV", "FM", "SV", "ARC")

EVENT_CODES = {"rgb_blackout": "LI", "tir_crossover": "TC", "occlusion": "PO", "deformation": "DEF"}

IMAGE_EXTS = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass
class SequenceMeta:
    name: str
    rgb_dir: Path
    tir_dir: Path
    groundtruth: Path
    attributes: dict = field(default_factory=dict)  # code -> list of (start, end)

    def frames_with(self, code: str, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=bool)
        for start, end in self.attributes.get(code, ()):
            mask[max(0, start):min(n, end)] = True
        return mask


class Sequence:
    """A loaded sequence; frames are read lazily."""

    def __init__(self, meta: SequenceMeta, rgb_files: list, tir_files: list, boxes: np.ndarray):
        self.meta = meta
        self.rgb_files = rgb_files
        self.tir_files = tir_files
        self.boxes = boxes

    @property
    def name(self) -> str:
        return self.meta.name

    def __len__(self) -> int:
        return len(self.boxes)

    def frame(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return _read_rgb(self.rgb_files[i]), _read_rgb(self.tir_files[i])

    def frames(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for i in range(len(self)):
            yield self.frame(i)

    def attribute_mask(self, code: str) -> np.ndarray:
        return self.meta.frames_with(code, len(self))


def _read_rgb(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if img is None:
        raise LoadError(f"cannot decode image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)


def _write_rgb(path: Path, img: np.ndarray) -> None:
    if not cv2.imwrite(str(path), cv2.cvtColor(img, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def parse_groundtruth(path: Path) -> np.ndarray:
    boxes = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.replace("\t", ",").replace(" ", ",").split(",")
        parts = [p for p in parts if p]
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            vals = []
        if len(vals) != 4:
            raise LoadError(f"{path}:{lineno}: expected 'x,y,w,h', got {line!r}")
        boxes.append(vals)
    return np.array(boxes, dtype=np.float64).reshape(-1, 4)


def parse_attributes(path: Path) -> dict:
    spans: dict = {}
    if not path.exists():
        return spans
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise LoadError(f"{path}:{lineno}: expected '<CODE> <start> <end>', got {line!r}")
        try:
            spans.setdefault(parts[0], []).append((int(parts[1]), int(parts[2])))
        except ValueError as exc:
            raise LoadError(f"{path}:{lineno}: bad span {line!r}") from exc
    return spans


def load_sequence(directory) -> Sequence:
    root = Path(directory)
    rgb_dir, tir_dir, gt_path = root / "visible", root / "infrared", root / "groundtruth.txt"
    for p in (rgb_dir, tir_dir, gt_path):
        if not p.exists():
            raise LoadError(f"{root}: missing {p.name}")
    rgb = sorted(p for p in rgb_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    tir = sorted(p for p in tir_dir.iterdir() if p.suffix.lower() in IMAGE_EXTS)
    rgb_names = {p.name for p in rgb}
    tir_names = {p.name for p in tir}
    if rgb_names != tir_names:
        missing_tir = sorted(rgb_names - tir_names)
        missing_rgb = sorted(tir_names - rgb_names)
        if missing_tir:
            raise LoadError(f"{root}: infrared frame missing for {missing_tir[0]}")
        raise LoadError(f"{root}: visible frame missing for {missing_rgb[0]}")
    boxes = parse_groundtruth(gt_path)
    if len(boxes) != len(rgb):
        raise LoadError(f"{gt_path}: {len(boxes)} boxes for {len(rgb)} frames")
    meta = SequenceMeta(root.name, rgb_dir, tir_dir, gt_path, parse_attributes(root / "attributes.txt"))
    return Sequence(meta, rgb, tir, boxes)


def load_dataset(root) -> list[Sequence]:
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if (d / "groundtruth.txt").exists())
    if not dirs:
        raise LoadError(f"no sequences under {root}")
    return [load_sequence(d) for d in dirs]


# ---------------------------------------------------------------------------
# synthetic sequences


@dataclass
class SynthConfig:
    frames: int = 200
    height: int = 128
    width: int = 128
    target_w: float = 0.0  # 0 picks a random size
    target_h: float = 0.0
    speed: float = 1.5
    scale_amp: float = 0.15
    distractors: int = 2
    rgb_blackout: tuple = ()
    tir_crossover: tuple = ()
    occlusion: tuple = ()
    deformation: tuple = ()
    noise: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for kind in EVENT_CODES:
            spans = tuple(tuple(int(v) for v in s) for s in getattr(self, kind))
            for start, end in spans:
                if not 0 <= start < end <= self.frames:
                    raise InputError(f"{kind} span ({start}, {end}) outside [0, {self.frames})")
            setattr(self, kind, spans)

    def events(self) -> dict:
        return {k: getattr(self, k) for k in EVENT_CODES}


def parse_spans(text: str) -> tuple:
    """'30:60,120:150' -> ((30, 60), (120, 150))."""
    out = []
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        a, _, b = chunk.partition(":")
        out.append((int(a), int(b)))
    return tuple(out)


def random_events(rng: np.random.Generator, frames: int, kinds=("rgb_blackout", "deformation"),
                  per_kind: int = 1, length=(25, 45)) -> dict:
    """Non-overlapping spans per kind, kept clear of the first 20 frames."""
    taken: list = []
    events: dict = {k: [] for k in kinds}
    for kind in kinds:
        for _ in range(per_kind):
            for _attempt in range(50):
                n = int(rng.integers(length[0], length[1] + 1))
                start = int(rng.integers(20, max(21, frames - n)))
                end = min(frames, start + n)
                if all(end <= a or start >= b for a, b in taken):
                    taken.append((start, end))
                    events[kind].append((start, end))
                    break
    return {k: tuple(sorted(v)) for k, v in events.items()}


def _smooth_field(rng: np.random.Generator, h: int, w: int, channels: int, lo: float, hi: float,
                  cells: int = 6) -> np.ndarray:
    coarse = rng.uniform(lo, hi, size=(cells, cells, channels)).astype(np.float32)
    out = cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC)
    return out.reshape(h, w, channels)


def _texture(rng: np.random.Generator, n: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Two-tone block texture in RGB and its thermal shading in [-1, 1]."""
    colors = rng.uniform(30, 255, size=(2, 3)).astype(np.float32)
    while np.abs(colors[0] - colors[1]).sum() < 120:
        colors[1] = rng.uniform(30, 255, size=3)
    pattern = rng.integers(0, 2, size=(n, n))
    pattern[0, 0], pattern[-1, -1] = 0, 1
    return colors[pattern], (pattern * 2.0 - 1.0).astype(np.float32)


class _Actor:
    def __init__(self, rng, frames, h, w, size, speed, scale_amp):
        self.w0, self.h0 = size
        margin = max(size) * 0.8 + 4
        pos = np.array([rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)])
        vel = rng.normal(0, speed / 2, size=2)
        phase, period = rng.uniform(0, 2 * math.pi), rng.uniform(80, 160)
        self.centers = np.zeros((frames, 2))
        self.scales = 1.0 + scale_amp * np.sin(2 * math.pi * np.arange(frames) / period + phase)
        for t in range(frames):
            self.centers[t] = pos
            vel = 0.92 * vel + rng.normal(0, speed * 0.25, size=2)
            norm = np.linalg.norm(vel)
            if norm > speed:
                vel *= speed / norm
            pos = pos + vel
            for k, lim in ((0, w), (1, h)):
                if pos[k] < margin or pos[k] > lim - margin:
                    vel[k] = -vel[k]
                    pos[k] = np.clip(pos[k], margin, lim - margin)


class SyntheticSequence:
    """Deterministic scene; ``frame(t)`` renders on demand from the seed."""

    def __init__(self, cfg: SynthConfig, name: str | None = None):
        self.cfg = cfg
        self.name = name or f"synth_{cfg.seed:04d}"
        rng = np.random.default_rng([cfg.seed, 7])
        h, w, n = cfg.height, cfg.width, cfg.frames
        tw = cfg.target_w or float(rng.uniform(14, 24))
        th = cfg.target_h or float(rng.uniform(14, 24))
        self.bg_rgb = _smooth_field(rng, h, w, 3, 50, 170)
        self.bg_tir = _smooth_field(rng, h, w, 1, 40, 90)[..., 0]
        self.target = _Actor(rng, n, h, w, (tw, th), cfg.speed, cfg.scale_amp)
        self.tex = [_texture(rng)]
        self.target_ellipse = [bool(rng.integers(0, 2))]
        # deformation: new appearance from the span start, aspect ratio morphs over the span
        aspect = np.ones(n)
        self.appearance = np.zeros(n, dtype=int)
        for start, end in cfg.deformation:
            self.tex.append(_texture(rng))
            self.target_ellipse.append(not self.target_ellipse[-1])
            target_aspect = float(rng.choice([0.6, 1.6]))
            ramp = np.clip((np.arange(n) - start) / max(1, end - start), 0, 1)
            aspect = aspect * (1 + (target_aspect - 1) * ramp)
            self.appearance[start:] += 1
        self.aspect = aspect
        self.distractors = []
        for _ in range(cfg.distractors):
            size = (float(rng.uniform(12, 24)), float(rng.uniform(12, 24)))
            self.distractors.append((_Actor(rng, n, h, w, size, cfg.speed, cfg.scale_amp),
                                     _texture(rng), float(rng.uniform(105, 140)), bool(rng.integers(0, 2))))
        self.occluder_side = rng.integers(0, 2, size=n)
        boxes = np.zeros((n, 4))
        for t in range(n):
            cx, cy = self.target.centers[t]
            s = self.target.scales[t]
            bw = tw * s * math.sqrt(aspect[t])
            bh = th * s / math.sqrt(aspect[t])
            boxes[t] = (cx - bw / 2, cy - bh / 2, bw, bh)
        self.boxes = np.round(boxes, 3)
        self._masks = {kind: self._span_mask(getattr(cfg, kind)) for kind in EVENT_CODES}

    def _span_mask(self, spans) -> np.ndarray:
        m = np.zeros(self.cfg.frames, dtype=bool)
        for a, b in spans:
            m[a:b] = True
        return m

    def __len__(self) -> int:
        return self.cfg.frames

    @property
    def attributes(self) -> dict:
        out: dict = {}
        for kind, code in EVENT_CODES.items():
            for span in getattr(self.cfg, kind):
                out.setdefault(code, []).append(tuple(span))
        return out

    def attribute_mask(self, code: str) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        for a, b in self.attributes.get(code, ()):
            m[a:b] = True
        return m

    def event_active(self, kind: str, t: int) -> bool:
        return bool(self._masks[kind][t])

    @staticmethod
    def _paint(rgb, tir, box, tex, tir_level, tir_amp, ellipse, draw_tir=True):
        x, y, bw, bh = box
        h, w = tir.shape
        x0, x1 = max(0, int(math.floor(x))), min(w, int(math.ceil(x + bw)))
        y0, y1 = max(0, int(math.floor(y))), min(h, int(math.ceil(y + bh)))
        if x1 <= x0 or y1 <= y0:
            return
        yy, xx = np.mgrid[y0:y1, x0:x1] + 0.5
        u = (xx - x) / bw
        v = (yy - y) / bh
        if ellipse:
            mask = (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
        else:
            mask = (u >= 0) & (u < 1) & (v >= 0) & (v < 1)
        color, shade = tex
        n = color.shape[0]
        iu = np.clip((u * n).astype(int), 0, n - 1)
        iv = np.clip((v * n).astype(int), 0, n - 1)
        region = rgb[y0:y1, x0:x1]
        region[mask] = color[iv[mask], iu[mask]]
        if draw_tir:
            tregion = tir[y0:y1, x0:x1]
            tregion[mask] = tir_level + tir_amp * shade[iv[mask], iu[mask]]

    def frame(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        cfg = self.cfg
        rgb = self.bg_rgb.copy()
        tir = self.bg_tir.copy()
        for actor, tex, level, ellipse in self.distractors:
            c, s = actor.centers[t], actor.scales[t]
            bw, bh = actor.w0 * s, actor.h0 * s
            self._paint(rgb, tir, (c[0] - bw / 2, c[1] - bh / 2, bw, bh), tex, level, 8.0, ellipse)
        box = self.boxes[t]
        k = self.appearance[t]
        self._paint(rgb, tir, box, self.tex[k], 205.0, 15.0, self.target_ellipse[k],
                    draw_tir=not self.event_active("tir_crossover", t))
        if self.event_active("occlusion", t):
            x, y, bw, bh = box
            ox = x if self.occluder_side[t] == 0 else x + bw / 2
            x0, x1 = int(max(0, ox)), int(min(cfg.width, ox + bw / 2 + 1))
            y0, y1 = int(max(0, y - 2)), int(min(cfg.height, y + bh + 2))
            rgb[y0:y1, x0:x1] = (128.0, 128.0, 128.0)
            tir[y0:y1, x0:x1] = 60.0
        if self.event_active("rgb_blackout", t):
            rgb[...] = 12.0
        noise_rng = np.random.default_rng([cfg.seed, 11, t])
        rgb += noise_rng.standard_normal(rgb.shape, dtype=np.float32) * np.float32(cfg.noise)
        tir += noise_rng.standard_normal(tir.shape, dtype=np.float32) * np.float32(cfg.noise)
        rgb8 = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
        tir8 = np.clip(np.rint(tir), 0, 255).astype(np.uint8)
        return rgb8, np.repeat(tir8[..., None], 3, axis=2)

    def frames(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        for t in range(len(self)):
            yield self.frame(t)


def generate_synthetic(cfg: SynthConfig, out_dir, name: str | None = None) -> Path:
    seq = SyntheticSequence(cfg, name)
    root = Path(out_dir)
    (root / "visible").mkdir(parents=True, exist_ok=True)
    (root / "infrared").mkdir(parents=True, exist_ok=True)
    for t, (rgb, tir) in enumerate(seq.frames()):
        _write_rgb(root / "visible" / f"{t:06d}.png", rgb)
        _write_rgb(root / "infrared" / f"{t:06d}.png", tir)
    (root / "groundtruth.txt").write_text(
        "".join(f"{x:.3f},{y:.3f},{w:.3f},{h:.3f}\n" for x, y, w, h in seq.boxes))
    lines = [f"{code} {a} {b}" for code, spans in sorted(seq.attributes.items()) for a, b in spans]
    (root / "attributes.txt").write_text("".join(line + "\n" for line in lines))
    meta = [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg)]
    (root / "synth_config.txt").write_text("\n".join(meta) + "\n")
    return root


def synth_suite_configs(n: int, seed: int, frames: int = 200, size: int = 128,
                        kinds=("rgb_blackout", "deformation"), per_kind: int = 1) -> list[SynthConfig]:
    rng = np.random.default_rng([seed, 3])
    out = []
    for i in range(n):
        ev = random_events(rng, frames, kinds, per_kind)
        out.append(SynthConfig(frames=frames, height=size, width=size, seed=seed * 1000 + i, **ev))
    return out


def generate_suite(root, n: int, seed: int, **kw) -> list[Path]:
    root = Path(root)
    return [generate_synthetic(c, root / f"seq_{i:03d}") for i, c in enumerate(synth_suite_configs(n, seed, **kw))]
