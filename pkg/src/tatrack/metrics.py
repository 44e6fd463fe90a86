"""Tracking metrics computed from result boxes only (x, y, w, h in pixels)."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

PR_THRESHOLD = 20.0
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 51)
NPR_THRESHOLDS = np.linspace(0.0, 0.5, 51)


@dataclass
class FrameErrors:
    center: np.ndarray
    normalized: np.ndarray
    iou: np.ndarray

    def __len__(self) -> int:
        return len(self.iou)

    def subset(self, mask) -> "FrameErrors":
        return FrameErrors(self.center[mask], self.normalized[mask], self.iou[mask])

    @classmethod
    def pool(cls, items) -> "FrameErrors":
        items = list(items)
        return cls(*(np.concatenate([getattr(it, k) for it in items]) for k in ("center", "normalized", "iou")))


def _as_boxes(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    return arr.reshape(-1, 4)


def iou(a, b) -> np.ndarray:
    a, b = _as_boxes(a), _as_boxes(b)
    x1 = np.maximum(a[:, 0], b[:, 0])
    y1 = np.maximum(a[:, 1], b[:, 1])
    x2 = np.minimum(a[:, 0] + a[:, 2], b[:, 0] + b[:, 2])
    y2 = np.minimum(a[:, 1] + a[:, 3], b[:, 1] + b[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def center_error(a, b) -> np.ndarray:
    a, b = _as_boxes(a), _as_boxes(b)
    ca = a[:, :2] + a[:, 2:] / 2
    cb = b[:, :2] + b[:, 2:] / 2
    return np.linalg.norm(ca - cb, axis=1)


def eval_sequence(results, gt) -> FrameErrors:
    results, gt = _as_boxes(results), _as_boxes(gt)
    if len(results) != len(gt):
        raise InputError(f"{len(results)} result boxes for {len(gt)} ground-truth boxes")
    ce = center_error(results, gt)
    scale = np.sqrt(np.clip(gt[:, 2] * gt[:, 3], 1e-12, None))
    return FrameErrors(ce, ce / scale, iou(results, gt))


def precision_rate(center, threshold: float = PR_THRESHOLD) -> float:
    return float(np.mean(np.asarray(center) <= threshold))


def success_curve(ious) -> np.ndarray:
    ious = np.asarray(ious)
    return np.array([np.mean(ious >= t) for t in SUCCESS_THRESHOLDS])


def precision_curve(normalized) -> np.ndarray:
    normalized = np.asarray(normalized)
    return np.array([np.mean(normalized <= t) for t in NPR_THRESHOLDS])


def success_rate(ious) -> float:
    return float(success_curve(ious).mean())


def normalized_precision(normalized) -> float:
    return float(precision_curve(normalized).mean())


@dataclass
class MetricsReport:
    precision_rate: float
    normalized_precision: float
    success_rate: float
    frames: int
    per_attribute: dict = field(default_factory=dict)
    fps: float | None = None

    def as_lines(self) -> list[str]:
        lines = [f"PR={self.precision_rate:.6f}", f"NPR={self.normalized_precision:.6f}",
                 f"SR={self.success_rate:.6f}", f"frames={self.frames}"]
        if self.fps is not None:
            lines.append(f"fps={self.fps:.3f}")
        for code, rep in sorted(self.per_attribute.items()):
            if rep is None:
                lines.append(f"{code}=absent")
            else:
                lines.append(f"{code}.PR={rep.precision_rate:.6f}")
                lines.append(f"{code}.SR={rep.success_rate:.6f}")
                lines.append(f"{code}.NPR={rep.normalized_precision:.6f}")
        return lines


def summarize(errors: FrameErrors) -> MetricsReport:
    return MetricsReport(precision_rate(errors.center), normalized_precision(errors.normalized),
                         success_rate(errors.iou), len(errors))


def aggregate(per_sequence: list[FrameErrors], masks: list | None = None,
              attribute: str | None = None, attributes=(), fps: float | None = None) -> MetricsReport | None:
    """Frame-pooled metrics over sequences.

    ``masks`` holds, per sequence, a dict mapping attribute code to a boolean
    frame mask. With ``attribute`` set only flagged frames count; an empty
    selection returns None (absent, not zero).
    """
    if not per_sequence:
        raise InputError("aggregate needs at least one sequence")
    if attribute is not None:
        if masks is None:
            return None
        chosen = [e.subset(m[attribute]) for e, m in zip(per_sequence, masks) if attribute in m]
        chosen = [c for c in chosen if len(c)]
        if not chosen:
            return None
        return summarize(FrameErrors.pool(chosen))
    report = summarize(FrameErrors.pool(per_sequence))
    report.fps = fps
    for code in attributes:
        report.per_attribute[code] = aggregate(per_sequence, masks, code)
    return report


def read_boxes(path) -> np.ndarray:
    from .data import parse_groundtruth

    return parse_groundtruth(path)


def write_report(path, report: MetricsReport) -> None:
    from pathlib import Path

    Path(path).write_text("\n".join(report.as_lines()) + "\n")


def plot_curves(path, named_errors: dict) -> None:
    """Success and normalized-precision curves for each named tracker."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for name, err in named_errors.items():
        ax1.plot(SUCCESS_THRESHOLDS, success_curve(err.iou), label=f"{name} [{success_rate(err.iou):.3f}]")
        ax2.plot(NPR_THRESHOLDS, precision_curve(err.normalized),
                 label=f"{name} [{normalized_precision(err.normalized):.3f}]")
    ax1.set(xlabel="Overlap threshold", ylabel="Success rate", title="Success plot")
    ax2.set(xlabel="Normalized location error threshold", ylabel="Precision", title="Normalized precision plot")
    for ax in (ax1, ax2):
        ax.grid(True, alpha=0.3)
        ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
