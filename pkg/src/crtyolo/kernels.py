"""Hot inner loops with a compiled backend and a numpy fallback.

The compiled module ``crtyolo._kernels`` is used when it was built and
``CRT_KERNELS`` is not set to ``python``. Both backends return bit-identical
results; ``tests/test_kernels.py`` holds them to that.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    out = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
    return out


def _col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    n, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride] += cols[:, :, ki, kj]
    if pad:
        out = np.ascontiguousarray(out[:, :, pad:pad + h, pad:pad + w])
    return out


def _nms(boxes: np.ndarray, order: np.ndarray, iou_threshold: float) -> np.ndarray:
    b = boxes[order]
    areas = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    suppressed = np.zeros(len(order), dtype=bool)
    keep = []
    for a in range(len(order)):
        if suppressed[a]:
            continue
        keep.append(order[a])
        rest = slice(a + 1, None)
        iw = np.minimum(b[a, 2], b[rest, 2]) - np.maximum(b[a, 0], b[rest, 0])
        ih = np.minimum(b[a, 3], b[rest, 3]) - np.maximum(b[a, 1], b[rest, 1])
        overlap = (iw > 0) & (ih > 0)
        inter = np.where(overlap, iw * ih, 0.0)
        union = areas[a] + areas[rest] - inter
        with np.errstate(divide="ignore", invalid="ignore"):
            hit = overlap & (union > 0) & (inter / union > iou_threshold)
        suppressed[rest] |= hit
    return np.asarray(keep, dtype=np.int64)


python = SimpleNamespace(im2col=_im2col, col2im=_col2im, nms=_nms)

try:
    from . import _kernels as _compiled_module
except ImportError:  # extension not built
    _compiled_module = None

compiled = (
    SimpleNamespace(
        im2col=_compiled_module.im2col,
        col2im=_compiled_module.col2im,
        nms=_compiled_module.nms,
    )
    if _compiled_module is not None
    else None
)

_active = python if compiled is None or os.environ.get("CRT_KERNELS") == "python" else compiled
BACKEND = "python" if _active is python else "compiled"


def use_backend(name: str) -> None:
    """Switch the process-wide backend to ``"python"`` or ``"compiled"``."""
    global _active, BACKEND
    if name == "compiled":
        if compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e .`")
        _active = compiled
    elif name == "python":
        _active = python
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    """Unfold ``x[N,C,H,W]`` into ``[N,C,kh,kw,Ho,Wo]`` patches (zero padding)."""
    return _active.im2col(np.ascontiguousarray(x), kh, kw, stride, pad)


def col2im(cols: np.ndarray, h: int, w: int, stride: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add patches back to ``[N,C,h,w]``."""
    return _active.col2im(np.ascontiguousarray(cols), h, w, stride, pad)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy NMS. Visits boxes by descending score (stable), returns kept indices."""
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)
    return _active.nms(np.ascontiguousarray(boxes, dtype=np.float64), order, float(iou_threshold))
