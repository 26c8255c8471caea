"""Turn head outputs into scored boxes with class-wise greedy NMS."""
from __future__ import annotations

import numpy as np

from .. import kernels
from ..boxes import DetectionBox
from ..tensor import no_grad
from .loss import distances_to_boxes, distribution_expectation, flatten_heads, make_anchors
from .model import HeadOutput


def nms_detections(dets: list[DetectionBox], iou_threshold: float = 0.65,
                   max_det: int = 300) -> list[DetectionBox]:
    """Class-wise greedy NMS; output is score-descending (stable) and capped."""
    if not dets:
        return []
    boxes = np.array([d.xyxy() for d in dets], dtype=np.float64)
    scores = np.array([d.confidence for d in dets], dtype=np.float64)
    labels = np.array([d.class_id for d in dets])
    kept: list[int] = []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        kept.extend(idx[kernels.nms(boxes[idx], scores[idx], iou_threshold)].tolist())
    kept_arr = np.array(sorted(kept))
    order = kept_arr[np.argsort(-scores[kept_arr], kind="stable")]
    return [dets[i] for i in order[:max_det]]


def decode_predictions(heads: list[HeadOutput], conf_threshold: float = 0.25, nms_iou: float = 0.65,
                       max_det: int = 300, image_size: tuple[int, int] | None = None
                       ) -> list[list[DetectionBox]]:
    """Per-image detections. Each point keeps its best class if above ``conf_threshold``.

    Boxes are the expectation of each side's softmaxed distance distribution
    times the level stride, around the cell centre; clipped to ``image_size``
    (``(height, width)``) when given.
    """
    with no_grad():
        cls_logits, box_logits = flatten_heads(heads)
        points, strides = make_anchors(heads)
        boxes = distances_to_boxes(distribution_expectation(box_logits), points, strides).data
    scores = 1.0 / (1.0 + np.exp(-cls_logits.data.astype(np.float64)))
    results = []
    for i in range(scores.shape[0]):
        best = scores[i].argmax(axis=1)
        conf = scores[i, np.arange(len(best)), best]
        keep = np.flatnonzero(conf > conf_threshold)
        b = boxes[i, keep].astype(np.float64)
        if image_size is not None:
            b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, image_size[1])
            b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, image_size[0])
        dets = [
            DetectionBox(float(x1), float(y1), float(x2), float(y2), int(c), float(s))
            for (x1, y1, x2, y2), c, s in zip(b, best[keep], conf[keep])
            if x2 > x1 and y2 > y1
        ]
        results.append(nms_detections(dets, nms_iou, max_det))
    return results
