"""Component and insertion-layer ablations over a synthetic test suite."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import metrics
from . import tensor as T
from .backbone import BackboneConfig
from .checkpoint import load_checkpoint
from .errors import ConfigError, LoadError
from .model import ModelConfig, TATrack
from .tracker import Tracker, track_sequences


@dataclass(frozen=True)
class Variant:
    key: str
    label: str
    mcp: bool
    sti: bool
    ots: bool
    checkpoint: str  # which trained checkpoint the variant runs
    update_interval: int | None

    def marks(self) -> str:
        return " ".join("x" if f else "." for f in (self.mcp, self.sti, self.ots))


# ③ reuses the full checkpoint with a per-frame update instead of OTS.
# "STI removed" is the dual model with MCP and OTS but no interaction blocks.
VARIANTS = (
    Variant("rgb", "(1)", False, False, False, "rgb", None),
    Variant("mcp", "(2)", True, False, False, "mcp", None),
    Variant("per_frame", "(3)", True, True, False, "full", 1),
    Variant("no_sti", "(4)", True, False, True, "no_sti", 50),
    Variant("full", "TATrack", True, True, True, "full", 50),
)

INSERTION_ROWS = ((), (4,), (4, 7), (4, 7, 10))


def expected_flags(model_cfg: ModelConfig) -> tuple[bool, bool]:
    return model_cfg.use_mcp, bool(model_cfg.sti_layers)


@dataclass
class AblationRow:
    variant: Variant
    report: metrics.MetricsReport | None
    errors: list | None = None

    @property
    def absent(self) -> bool:
        return self.report is None

    def format(self) -> str:
        v = self.variant
        head = f"{v.label:<8} {v.marks():<6}"
        if self.report is None:
            return f"{head} absent"
        r = self.report
        li = r.per_attribute.get("LI")
        li_txt = f"{li.success_rate:7.4f}" if li is not None else "  absent"
        return (f"{head} {r.precision_rate:7.4f} {r.normalized_precision:7.4f} {r.success_rate:7.4f} "
                f"{li_txt} {r.fps or 0.0:8.1f}")


TABLE_HEADER = f"{'model':<8} {'M S O':<6} {'PR':>7} {'NPR':>7} {'SR':>7} {'LI.SR':>7} {'fps':>8}"


def _load(source):
    if source is None:
        return None
    if isinstance(source, TATrack):
        return source
    path = Path(source)
    if not (path / "manifest.txt").exists():
        return None
    return load_checkpoint(path)


def evaluate_tracker(tracker: Tracker, sequences, attributes=("LI",), max_frames=None):
    results = track_sequences(tracker, sequences, max_frames)
    errs, masks = [], []
    for res, seq in zip(results, sequences):
        n = len(res.boxes)
        errs.append(metrics.eval_sequence(res.boxes, seq.boxes[:n]))
        masks.append({code: seq.attribute_mask(code)[:n] for code in attributes})
    frames = sum(len(r.boxes) - 1 for r in results)
    seconds = sum(r.seconds for r in results)
    fps = frames / seconds if seconds > 0 else None
    return metrics.aggregate(errs, masks, attributes=attributes, fps=fps), errs


def run_ablation(checkpoints: dict, sequences, variants=VARIANTS, max_frames=None) -> list[AblationRow]:
    """``checkpoints`` maps "rgb", "mcp", "no_sti", "full" to a directory or model.

    Missing or unreadable entries produce absent rows instead of failing.
    """
    cache: dict = {}
    rows = []
    for v in variants:
        if v.checkpoint not in cache:
            try:
                cache[v.checkpoint] = _load(checkpoints.get(v.checkpoint))
            except LoadError:
                cache[v.checkpoint] = None
        model = cache[v.checkpoint]
        if model is None:
            rows.append(AblationRow(v, None))
            continue
        if expected_flags(model.cfg) != (v.mcp, v.sti):
            raise ConfigError(f"checkpoint for {v.key} has mcp={model.cfg.use_mcp} "
                              f"sti={model.cfg.sti_layers}, expected mcp={v.mcp} sti={v.sti}")
        interval = v.update_interval if model.cfg.dual else None
        report, errs = evaluate_tracker(Tracker(model, update_interval=interval), sequences,
                                        max_frames=max_frames)
        rows.append(AblationRow(v, report, errs))
    return rows


def format_table(rows: list[AblationRow]) -> str:
    return "\n".join([TABLE_HEADER] + [r.format() for r in rows])


# -- insertion-layer sweep ------------------------------------------------------


def sweep_backbone() -> BackboneConfig:
    """Desk width with the full 12-layer depth so layers 4, 7 and 10 exist."""
    return BackboneConfig.desk().with_(depth=12)


def measure_fps(models: list[TATrack], frames: int = 30, repeats: int = 5, seed: int = 0) -> list[float]:
    """Forward passes per second for each model on identical random inputs.

    Rounds are interleaved across models and each model is scored by its
    fastest single forward, which filters out scheduler noise on a shared CPU.
    """
    rng = np.random.default_rng(seed)
    best = [math.inf] * len(models)
    inputs = []
    for model in models:
        bb = model.cfg.backbone
        tpl = rng.standard_normal((3, bb.template_side, bb.template_side)).astype(np.float32)
        srch = rng.standard_normal((3, bb.search_side, bb.search_side)).astype(np.float32)
        inputs.append(((tpl, tpl), (srch, srch)))
        model.eval()
    with T.no_grad():
        for _ in range(repeats):
            for k, model in enumerate(models):
                tpl, srch = inputs[k]
                for _ in range(frames):
                    t0 = time.perf_counter()
                    model(tpl, srch, tpl)
                    best[k] = min(best[k], time.perf_counter() - t0)
    return [1.0 / b for b in best]


def insertion_sweep(rows=INSERTION_ROWS, backbone: BackboneConfig | None = None,
                    checkpoints: dict | None = None, sequences=None, frames: int = 30,
                    repeats: int = 5) -> list[dict]:
    """fps for each insertion set; accuracy too when trained checkpoints are given.

    ``checkpoints`` maps a layer tuple to a checkpoint; accuracy columns stay
    absent for layer sets without one.
    """
    bb = backbone or sweep_backbone()
    models = [TATrack(ModelConfig(bb, True, True, layers), seed=0) for layers in rows]
    fps = measure_fps(models, frames, repeats)
    out = []
    for layers, f in zip(rows, fps):
        rec = {"layers": tuple(layers), "fps": f, "report": None}
        model = _load((checkpoints or {}).get(tuple(layers)))
        if model is not None and sequences is not None:
            rec["report"], _ = evaluate_tracker(Tracker(model), sequences)
        out.append(rec)
    return out


def format_sweep(records: list[dict], slots=(4, 7, 10)) -> str:
    lines = [" ".join(f"{s:>3}" for s in slots) + f" {'PR':>7} {'SR':>7} {'fps':>8}"]
    for rec in records:
        marks = " ".join(f"{'x' if s in rec['layers'] else '.':>3}" for s in slots)
        rep = rec["report"]
        acc = f"{rep.precision_rate:7.4f} {rep.success_rate:7.4f}" if rep else f"{'absent':>7} {'absent':>7}"
        lines.append(f"{marks} {acc} {rec['fps']:8.1f}")
    return "\n".join(lines)
