"""Detection losses: BCE classification, CIoU and distribution focal loss."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .. import ops
from ..errors import InvalidBoxError
from ..tensor import Tensor, as_tensor, atan, clip, concat, maximum, minimum, no_grad
from .assign import task_aligned_assign
from .model import HeadOutput


def make_anchors(heads: list[HeadOutput]) -> tuple[np.ndarray, np.ndarray]:
    """Cell centres in input pixels ``[A, 2]`` and per-point strides ``[A]``."""
    points, strides = [], []
    for head in heads:
        h, w = head.cls_logits.shape[2:]
        s = head.stride
        ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        points.append(np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1))
        strides.append(np.full(h * w, s, dtype=np.float64))
    return np.concatenate(points), np.concatenate(strides)


def flatten_heads(heads: list[HeadOutput]) -> tuple[Tensor, Tensor]:
    """Class logits ``[N, A, nc]`` and box logits ``[N, A, 4, reg_max+1]``."""
    cls_parts, box_parts = [], []
    for head in heads:
        n, nc, h, w = head.cls_logits.shape
        nb = head.box_logits.shape[1]
        cls_parts.append(head.cls_logits.reshape(n, nc, h * w).transpose(0, 2, 1))
        box_parts.append(head.box_logits.reshape(n, nb, h * w).transpose(0, 2, 1))
    cls = concat(cls_parts, axis=1)
    box = concat(box_parts, axis=1)
    n, a, nb = box.shape
    return cls, box.reshape(n, a, 4, nb // 4)


def distribution_expectation(box_logits: Tensor) -> Tensor:
    """Expected bin index of the softmaxed per-side distribution, ``[..., 4]``."""
    bins = box_logits.shape[-1]
    probs = ops.softmax(box_logits, axis=-1)
    proj = Tensor(np.arange(bins, dtype=box_logits.dtype).reshape(bins, 1))
    return ops.matmul(probs, proj).reshape(*box_logits.shape[:-1])


def distances_to_boxes(ltrb: Tensor, points: np.ndarray, strides: np.ndarray) -> Tensor:
    """``ltrb`` in stride units around ``points`` -> xyxy pixel boxes."""
    s = Tensor(strides.reshape(-1, 1).astype(ltrb.dtype))
    px = Tensor(points[:, :1].astype(ltrb.dtype))
    py = Tensor(points[:, 1:].astype(ltrb.dtype))
    lt = ltrb * s
    return concat([px - lt[..., 0:1], py - lt[..., 1:2], px + lt[..., 2:3], py + lt[..., 3:4]], axis=-1)


def _check_boxes(b: np.ndarray, what: str) -> None:
    if np.any(b[..., 2] <= b[..., 0]) or np.any(b[..., 3] <= b[..., 1]):
        raise InvalidBoxError(f"degenerate (zero-area) {what} box")


def ciou_loss(pred, gt, eps: float = 1e-7, detach_alpha: bool = True) -> Tensor:
    """Per-box ``1 - IoU + rho^2/c^2 + alpha*v`` for aligned xyxy boxes ``[..., 4]``.

    By default ``alpha`` is treated as a constant in the backward pass;
    ``detach_alpha=False`` differentiates through it.
    """
    pred = as_tensor(pred)
    gt = as_tensor(gt, pred)
    _check_boxes(pred.data, "predicted")
    _check_boxes(gt.data, "ground-truth")
    px1, py1, px2, py2 = (pred[..., i] for i in range(4))
    gx1, gy1, gx2, gy2 = (gt[..., i] for i in range(4))
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1
    iw = clip(minimum(px2, gx2) - maximum(px1, gx1), 0.0)
    ih = clip(minimum(py2, gy2) - maximum(py1, gy1), 0.0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter
    iou = inter / union
    cw = maximum(px2, gx2) - minimum(px1, gx1)
    ch = maximum(py2, gy2) - minimum(py1, gy1)
    diag2 = cw * cw + ch * ch
    dx = gx1 + gx2 - px1 - px2
    dy = gy1 + gy2 - py1 - py2
    rho2 = (dx * dx + dy * dy) * 0.25
    dv = atan(gw / gh) - atan(pw / ph)
    v = dv * dv * (4 / math.pi ** 2)
    if detach_alpha:
        with no_grad():
            alpha = Tensor(v.data / (v.data - iou.data + (1 + eps)))
    else:
        alpha = v / (v - iou + (1 + eps))
    return 1.0 - iou + rho2 / diag2 + v * alpha


def dfl_loss(dist_logits: Tensor, target, reg_max: int | None = None) -> Tensor:
    """Distribution focal loss per distribution, ``[...]`` from ``[..., reg_max+1]``.

    Targets are interpolated between bin ``floor(t)`` and ``floor(t)+1``;
    values outside ``[0, reg_max]`` are clamped with a warning.
    """
    bins = dist_logits.shape[-1]
    reg_max = bins - 1 if reg_max is None else reg_max
    t = np.asarray(target, dtype=np.float64)
    if np.any(t < 0) or np.any(t > reg_max):
        warnings.warn("dfl target outside [0, reg_max]; clamping", RuntimeWarning, stacklevel=2)
        t = np.clip(t, 0, reg_max)
    left = np.floor(t).astype(np.int64)
    w_right = t - left
    w_left = 1.0 - w_right
    right = np.minimum(left + 1, reg_max)
    logp = ops.log_softmax(dist_logits, axis=-1)
    flat = logp.reshape(-1, bins)
    rows = np.arange(flat.shape[0])
    lp_left = flat[rows, left.ravel()].reshape(t.shape)
    lp_right = flat[rows, right.ravel()].reshape(t.shape)
    dt = dist_logits.dtype
    return -(lp_left * Tensor(w_left.astype(dt)) + lp_right * Tensor(w_right.astype(dt)))


def bce_loss(logits, targets) -> Tensor:
    """Mean binary cross-entropy on logits."""
    return ops.bce_with_logits(as_tensor(logits), targets, reduction="mean")


@dataclass
class LossWeights:
    box: float = 7.5
    cls: float = 0.5
    dfl: float = 1.5


@dataclass
class LossBreakdown:
    total: Tensor
    box: float
    cls: float
    dfl: float
    num_foreground: int
    assignments: list = None


class DetectionLoss:
    """Task-aligned assignment followed by the weighted BCE + CIoU + DFL stack."""

    def __init__(self, num_classes: int, reg_max: int = 16, weights: LossWeights | None = None,
                 alpha: float = 0.5, beta: float = 6.0, topk: int = 10, detach_alpha: bool = True):
        self.num_classes = num_classes
        self.reg_max = reg_max
        self.weights = weights or LossWeights()
        self.alpha = alpha
        self.beta = beta
        self.topk = topk
        self.detach_alpha = detach_alpha

    def __call__(self, heads: list[HeadOutput], targets: list[tuple[np.ndarray, np.ndarray]],
                 assignments: list | None = None) -> LossBreakdown:
        """``targets[i] = (boxes [G,4] xyxy px, labels [G])`` for image ``i``.

        Assignments (and the soft targets derived from them) are constants of
        the loss; pass a previous breakdown's ``assignments`` to reuse them.
        """
        cls_logits, box_logits = flatten_heads(heads)
        points, strides = make_anchors(heads)
        n, n_anchor, _ = cls_logits.shape
        ltrb = distribution_expectation(box_logits)
        pred_boxes = distances_to_boxes(ltrb, points, strides)
        dt = cls_logits.dtype

        scores = 1.0 / (1.0 + np.exp(-cls_logits.data.astype(np.float64)))
        target_scores = np.zeros((n, n_anchor, self.num_classes))
        fg_rows, fg_cols, fg_weight, fg_boxes = [], [], [], []
        used = []
        for i, (gt_boxes, gt_labels) in enumerate(targets):
            if assignments is not None:
                res = assignments[i]
            else:
                res = task_aligned_assign(scores[i], pred_boxes.data[i].astype(np.float64), points,
                                          gt_boxes, gt_labels, self.num_classes, self.alpha, self.beta,
                                          self.topk)
            used.append(res)
            target_scores[i] = res.target_scores
            idx = np.flatnonzero(res.fg_mask)
            fg_rows.append(np.full(len(idx), i))
            fg_cols.append(idx)
            fg_weight.append(res.target_scores[idx].sum(axis=1))
            fg_boxes.append(res.target_boxes[idx])
        norm = max(target_scores.sum(), 1.0)

        cls_term = ops.bce_with_logits(cls_logits, target_scores.astype(dt), reduction="sum") * (1.0 / norm)
        rows = np.concatenate(fg_rows).astype(np.int64)
        cols = np.concatenate(fg_cols).astype(np.int64)
        num_fg = len(rows)
        if num_fg:
            weight = Tensor(np.concatenate(fg_weight).astype(dt))
            gt = np.concatenate(fg_boxes)
            box_term = (ciou_loss(pred_boxes[rows, cols], gt.astype(dt),
                                           detach_alpha=self.detach_alpha) * weight).sum() * (1.0 / norm)
            s = strides[cols].reshape(-1, 1)
            p = points[cols]
            target_ltrb = np.concatenate([p - gt[:, :2], gt[:, 2:] - p], axis=1) / s
            target_ltrb = np.clip(target_ltrb, 0, self.reg_max - 0.01)
            dfl = dfl_loss(box_logits[rows, cols], target_ltrb, self.reg_max).mean(axis=-1)
            dfl_term = (dfl * weight).sum() * (1.0 / norm)
        else:
            box_term = Tensor(np.zeros((), dtype=dt))
            dfl_term = Tensor(np.zeros((), dtype=dt))
        w = self.weights
        total = box_term * w.box + cls_term * w.cls + dfl_term * w.dfl
        return LossBreakdown(total, float(box_term.data), float(cls_term.data), float(dfl_term.data), num_fg,
                             used)
