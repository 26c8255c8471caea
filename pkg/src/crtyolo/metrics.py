"""Detection metrics: greedy matching, 101-point interpolated AP, mAP@[.50:.95]."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .boxes import DetectionBox, GroundTruthBox, box_iou_matrix

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def iou(a, b) -> float:
    """IoU of two xyxy boxes (records or 4-sequences)."""
    a = a.xyxy() if hasattr(a, "xyxy") else a
    b = b.xyxy() if hasattr(b, "xyxy") else b
    return float(box_iou_matrix(np.array([a]), np.array([b]))[0, 0])


def match_detections(preds: Sequence[DetectionBox], gts: Sequence[GroundTruthBox],
                     iou_threshold: float = 0.5) -> list[bool]:
    """TP/FP label per prediction, in the input order of ``preds``.

    Predictions are visited by descending confidence (stable on ties); each
    takes the unmatched same-class GT with the highest IoU if that IoU is at
    least ``iou_threshold``.
    """
    labels = [False] * len(preds)
    if not preds:
        return labels
    order = sorted(range(len(preds)), key=lambda i: -preds[i].confidence)
    ious = box_iou_matrix(np.array([p.xyxy() for p in preds]),
                          np.array([g.xyxy() for g in gts]).reshape(-1, 4))
    used = np.zeros(len(gts), dtype=bool)
    for i in order:
        best, best_iou = -1, iou_threshold
        for j, gt in enumerate(gts):
            if used[j] or gt.class_id != preds[i].class_id:
                continue
            if ious[i, j] >= best_iou:
                if best < 0 or ious[i, j] > ious[i, best]:
                    best, best_iou = j, ious[i, j]
        if best >= 0:
            used[best] = True
            labels[i] = True
    return labels


def average_precision(tp_labels: Sequence[bool], num_gt: int) -> float | None:
    """101-point interpolated AP of TP/FP labels already sorted by confidence.

    Returns ``None`` (undefined) when there are no GTs and no predictions,
    and 0.0 when there are predictions but no GTs.
    """
    tp = np.asarray(tp_labels, dtype=bool)
    if num_gt == 0:
        return None if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    recall = tp_cum / num_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


@dataclass
class ClassStats:
    num_gt: int = 0
    num_pred: int = 0
    tp: dict[float, int] = field(default_factory=dict)
    fp: dict[float, int] = field(default_factory=dict)
    ap: dict[float, float | None] = field(default_factory=dict)


@dataclass
class EvalReport:
    class_names: list[str]
    per_class: dict[int, ClassStats]
    mAP: float
    mAP50: float
    mAP75: float
    thresholds: tuple[float, ...] = IOU_THRESHOLDS

    def as_dict(self) -> dict[str, float]:
        out = {"mAP": self.mAP, "mAP50": self.mAP50, "mAP75": self.mAP75}
        for c, stats in self.per_class.items():
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            for t in (0.5, 0.75):
                if stats.ap.get(t) is not None:
                    out[f"AP{int(round(t * 100))}/{name}"] = stats.ap[t]
        return out

    def to_keyvalue(self) -> str:
        lines = [f"mAP = {self.mAP:.6f}", f"mAP50 = {self.mAP50:.6f}", f"mAP75 = {self.mAP75:.6f}"]
        for c, stats in self.per_class.items():
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            lines.append(f"class.{name}.gt = {stats.num_gt}")
            lines.append(f"class.{name}.tp50 = {stats.tp.get(0.5, 0)}")
            lines.append(f"class.{name}.fp50 = {stats.fp.get(0.5, 0)}")
            for t in self.thresholds:
                ap = stats.ap.get(t)
                lines.append(f"class.{name}.ap{int(round(t * 100))} = {'nan' if ap is None else f'{ap:.6f}'}")
        return "\n".join(lines) + "\n"

    def to_table(self) -> str:
        header = f"{'class':<16}{'GT':>6}{'TP@.5':>8}{'FP@.5':>8}{'AP50':>9}{'AP75':>9}{'AP':>9}"
        rows = [header, "-" * len(header)]
        for c, stats in self.per_class.items():
            name = self.class_names[c] if c < len(self.class_names) else str(c)
            defined = [v for v in stats.ap.values() if v is not None]
            mean_ap = np.mean(defined) if defined else float("nan")

            def show(v):
                return f"{'-':>9}" if v is None else f"{v:>9.4f}"

            rows.append(f"{name:<16}{stats.num_gt:>6}{stats.tp.get(0.5, 0):>8}{stats.fp.get(0.5, 0):>8}"
                        f"{show(stats.ap.get(0.5))}{show(stats.ap.get(0.75))}{mean_ap:>9.4f}")
        rows.append("-" * len(header))
        rows.append(f"mAP50 = {self.mAP50:.4f}   mAP75 = {self.mAP75:.4f}   mAP = {self.mAP:.4f}")
        return "\n".join(rows) + "\n"


def evaluate(preds: Mapping[str, Sequence[DetectionBox]], gts: Mapping[str, Sequence[GroundTruthBox]],
             class_names: Sequence[str] | int | None = None,
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> EvalReport:
    """COCO-style mAP over the union of image ids in ``preds`` and ``gts``.

    Per class and threshold, each image is matched greedily; the pooled
    detections are then ranked by confidence (ties: image id, then input
    order) to build the PR curve. Classes with neither GTs nor predictions
    are left out of the means.
    """
    if isinstance(class_names, int):
        class_names = [str(i) for i in range(class_names)]
    seen = {b.class_id for v in gts.values() for b in v} | {b.class_id for v in preds.values() for b in v}
    n_cls = max([len(class_names or [])] + [c + 1 for c in seen])
    names = list(class_names or []) + [str(i) for i in range(len(class_names or []), n_cls)]
    image_ids = sorted(set(preds) | set(gts))

    per_class: dict[int, ClassStats] = {}
    for c in range(n_cls):
        stats = ClassStats()
        per_image = []
        for img in image_ids:
            p = [d for d in preds.get(img, ()) if d.class_id == c]
            g = [b for b in gts.get(img, ()) if b.class_id == c]
            stats.num_gt += len(g)
            stats.num_pred += len(p)
            per_image.append((p, g))
        for t in thresholds:
            conf, labels = [], []
            for p, g in per_image:
                conf.extend(d.confidence for d in p)
                labels.extend(match_detections(p, g, t))
            order = np.argsort(-np.asarray(conf, dtype=np.float64), kind="stable")
            ranked = [labels[i] for i in order]
            stats.tp[t] = int(sum(labels))
            stats.fp[t] = len(labels) - stats.tp[t]
            stats.ap[t] = average_precision(ranked, stats.num_gt)
        per_class[c] = stats

    def mean_at(ts) -> float:
        vals = [s.ap[t] for s in per_class.values() for t in ts if s.ap.get(t) is not None]
        return float(np.mean(vals)) if vals else 0.0

    # mAP averages each class's mean over thresholds, then over classes
    class_means = []
    for s in per_class.values():
        defined = [s.ap[t] for t in thresholds if s.ap.get(t) is not None]
        if defined:
            class_means.append(float(np.mean(defined)))
    m_all = float(np.mean(class_means)) if class_means else 0.0
    m50 = mean_at([t for t in thresholds if abs(t - 0.5) < 1e-9])
    m75 = mean_at([t for t in thresholds if abs(t - 0.75) < 1e-9])
    return EvalReport(names, per_class, m_all, m50, m75, tuple(thresholds))
