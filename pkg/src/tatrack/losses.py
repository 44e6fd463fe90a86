"""Tracking objective: weighted focal classification plus L1 and GIoU box regression."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import InputError
from .model import BBox
from .tensor import Tensor

FOCAL_ALPHA = 2
FOCAL_BETA = 4
PROB_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0

    def __post_init__(self):
        if self.lambda_iou < 0 or self.lambda_l1 < 0:
            raise InputError("loss weights must be nonnegative")


def _check_box(box) -> None:
    if not (box.w > 0 and box.h > 0):
        raise InputError(f"degenerate box {tuple(box)}")


def center_cell(box: BBox, s: int) -> tuple[int, int]:
    i = min(s - 1, max(0, int(np.floor(box.cy * s))))
    j = min(s - 1, max(0, int(np.floor(box.cx * s))))
    return i, j


def gaussian_target_map(gt_box: BBox, s: int, dtype=None) -> np.ndarray:
    """Gaussian splat around the ground-truth center cell; that cell is exactly 1."""
    _check_box(gt_box)
    i0, j0 = center_cell(gt_box, s)
    sigma = max(1.0, s * min(gt_box.w, gt_box.h) / 6.0)
    ii, jj = np.mgrid[0:s, 0:s]
    d2 = (ii - i0) ** 2 + (jj - j0) ** 2
    out = np.exp(-d2 / (2.0 * sigma * sigma))
    out[i0, j0] = 1.0
    return out[None].astype(dtype or T.get_default_dtype())


def weighted_focal(pred: Tensor, gt) -> Tensor:
    """CornerNet focal loss, normalized by the number of positive cells."""
    gt = np.asarray(gt, dtype=pred.dtype)
    pos = (gt == 1.0).astype(pred.dtype)
    neg_w = ((1.0 - gt) ** FOCAL_BETA) * (1.0 - pos)
    p = T.clip(pred, PROB_EPS, 1.0 - PROB_EPS)
    one_minus = 1.0 - p
    pos_term = T.power(one_minus, FOCAL_ALPHA) * T.log(p) * pos
    neg_term = T.power(p, FOCAL_ALPHA) * T.log(one_minus) * neg_w
    num_pos = max(float(pos.sum()), 1.0)
    return (pos_term + neg_term).sum() * (-1.0 / num_pos)


def _as_t(v, dtype) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=dtype), dtype=dtype)


def giou_terms(pred: Sequence, gt: Sequence):
    """IoU and GIoU for (cx, cy, w, h) boxes whose entries may be tensors or arrays."""
    dtype = next((v.dtype for v in list(pred) + list(gt) if isinstance(v, Tensor)),
                 T.get_default_dtype())
    pcx, pcy, pw, ph = (_as_t(v, dtype) for v in pred)
    gcx, gcy, gw, gh = (_as_t(v, dtype) for v in gt)
    if (pw.data <= 0).any() or (ph.data <= 0).any() or (gw.data <= 0).any() or (gh.data <= 0).any():
        raise InputError("GIoU needs boxes with positive area")
    px1, px2 = pcx - pw * 0.5, pcx + pw * 0.5
    py1, py2 = pcy - ph * 0.5, pcy + ph * 0.5
    gx1, gx2 = gcx - gw * 0.5, gcx + gw * 0.5
    gy1, gy2 = gcy - gh * 0.5, gcy + gh * 0.5
    iw = T.relu(T.minimum(px2, gx2) - T.maximum(px1, gx1))
    ih = T.relu(T.minimum(py2, gy2) - T.maximum(py1, gy1))
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    hull = (T.maximum(px2, gx2) - T.minimum(px1, gx1)) * (T.maximum(py2, gy2) - T.minimum(py1, gy1))
    iou = inter / union
    giou = iou - (hull - union) / hull
    return iou, giou


def giou_loss(pred, gt) -> Tensor:
    """Mean of 1 - GIoU over the batch."""
    _, giou = giou_terms(pred, gt)
    return (1.0 - giou).mean()


def weighted_sum(l_cls, l_iou, l_l1, w: LossWeights = LossWeights()):
    return l_cls + l_iou * w.lambda_iou + l_l1 * w.lambda_l1


def regression_at_gt_cell(offset: Tensor, size: Tensor, gt_boxes: Sequence[BBox]):
    """Predicted (cx, cy, w, h) read at each sample's ground-truth center cell."""
    s = offset.shape[-1]
    cells = np.array([center_cell(b, s) for b in gt_boxes])
    ii, jj = cells[:, 0], cells[:, 1]
    rows = np.arange(len(gt_boxes))
    off = offset[rows, :, ii, jj]
    sz = size[rows, :, ii, jj]
    cx = (off[:, 0] + jj.astype(off.dtype)) * (1.0 / s)
    cy = (off[:, 1] + ii.astype(off.dtype)) * (1.0 / s)
    return cx, cy, sz[:, 0], sz[:, 1]


def total_loss(score: Tensor, offset: Tensor, size: Tensor, gt_boxes: Sequence[BBox],
               w: LossWeights = LossWeights()) -> tuple[Tensor, dict]:
    """Batched objective. Maps are [B, k, S, S]; one ground-truth box per sample."""
    s = score.shape[-1]
    gt_maps = np.stack([gaussian_target_map(b, s, score.dtype) for b in gt_boxes])
    l_cls = weighted_focal(score, gt_maps)
    pred = regression_at_gt_cell(offset, size, gt_boxes)
    gt = [np.array([getattr(b, k) for b in gt_boxes], dtype=score.dtype) for k in ("cx", "cy", "w", "h")]
    l_iou = giou_loss(pred, gt)
    diffs = [T.abs_(p - g) for p, g in zip(pred, gt)]
    l_l1 = (diffs[0] + diffs[1] + diffs[2] + diffs[3]).mean() * 0.25
    loss = weighted_sum(l_cls, l_iou, l_l1, w)
    parts = {"cls": l_cls.item(), "iou": l_iou.item(), "l1": l_l1.item(), "total": loss.item()}
    return loss, parts
