"""Task-aligned positive sample selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..boxes import box_iou_matrix


@dataclass
class AssignmentResult:
    fg_mask: np.ndarray        # [A] bool
    gt_index: np.ndarray       # [A] int, -1 for background
    align: np.ndarray          # [A] alignment t = s^alpha * u^beta with the matched GT
    target_scores: np.ndarray  # [A, num_classes] soft class targets
    target_boxes: np.ndarray   # [A, 4] matched GT box (zeros for background)

    @property
    def num_foreground(self) -> int:
        return int(self.fg_mask.sum())


def points_in_boxes(points: np.ndarray, boxes: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    """``[G, A]`` mask of anchor centres strictly inside each box."""
    px = points[None, :, 0]
    py = points[None, :, 1]
    return (
        (px - boxes[:, None, 0] > eps) & (boxes[:, None, 2] - px > eps)
        & (py - boxes[:, None, 1] > eps) & (boxes[:, None, 3] - py > eps)
    )


def task_aligned_assign(pred_scores: np.ndarray, pred_boxes: np.ndarray, anchor_points: np.ndarray,
                        gt_boxes: np.ndarray, gt_labels: np.ndarray, num_classes: int,
                        alpha: float = 0.5, beta: float = 6.0, topk: int = 10) -> AssignmentResult:
    """Assign anchor points of one image to ground truths.

    ``pred_scores`` are post-sigmoid class scores ``[A, nc]``, ``pred_boxes``
    decoded ``[A, 4]`` xyxy, ``anchor_points`` ``[A, 2]``. For every GT the
    ``topk`` points inside it with the largest ``t = s^alpha * u^beta`` become
    candidates; a point claimed by several GTs keeps the one with largest
    ``t`` (first GT on ties). Class targets are ``t`` normalised per GT to
    that GT's best IoU among its positives.
    """
    n_anchor = anchor_points.shape[0]
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    n_gt = len(gt_boxes)
    target_scores = np.zeros((n_anchor, num_classes), dtype=np.float64)
    if n_gt == 0:
        return AssignmentResult(np.zeros(n_anchor, bool), np.full(n_anchor, -1), np.zeros(n_anchor),
                                target_scores, np.zeros((n_anchor, 4)))

    inside = points_in_boxes(anchor_points, gt_boxes)
    ious = np.clip(box_iou_matrix(gt_boxes, pred_boxes), 0.0, None)
    scores = np.asarray(pred_scores, dtype=np.float64)[:, gt_labels].T
    align = np.where(inside, scores ** alpha * ious ** beta, 0.0)

    positive = np.zeros((n_gt, n_anchor), dtype=bool)
    for g in range(n_gt):
        candidates = np.flatnonzero(inside[g])
        if candidates.size == 0:
            continue
        order = np.argsort(-align[g, candidates], kind="stable")
        positive[g, candidates[order[:topk]]] = True

    fg = positive.any(axis=0)
    claim = np.where(positive, align, -1.0)
    gt_index = np.where(fg, claim.argmax(axis=0), -1)
    final = np.zeros_like(positive)
    final[gt_index[fg], np.flatnonzero(fg)] = True

    point_align = np.where(fg, align[np.maximum(gt_index, 0), np.arange(n_anchor)], 0.0)
    point_iou = np.where(final, ious, 0.0)
    best_align = np.where(final, align, 0.0).max(axis=1)
    best_iou = point_iou.max(axis=1)
    fg_idx = np.flatnonzero(fg)
    for a in fg_idx:
        g = gt_index[a]
        norm = point_align[a] / best_align[g] * best_iou[g] if best_align[g] > 0 else 0.0
        target_scores[a, gt_labels[g]] = norm
    target_boxes = np.zeros((n_anchor, 4))
    target_boxes[fg_idx] = gt_boxes[gt_index[fg_idx]]
    return AssignmentResult(fg, gt_index, point_align, target_scores, target_boxes)
