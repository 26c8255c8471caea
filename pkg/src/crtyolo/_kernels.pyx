# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution unfolding and box suppression.

Every routine here has a numpy twin in ``crtyolo.kernels`` and must produce
bit-identical results: accumulation order in ``col2im`` follows the
``(ki, kj)`` order of the fallback.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


cdef inline void _col_range(Py_ssize_t kj, Py_ssize_t w, Py_ssize_t wo, int stride, int pad,
                            Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # valid output columns oj satisfy 0 <= oj*stride + kj - pad < w
    cdef Py_ssize_t a = pad - kj
    lo[0] = 0 if a <= 0 else (a + stride - 1) // stride
    a = w - 1 + pad - kj
    hi[0] = 0 if a < 0 else a // stride + 1
    if hi[0] > wo:
        hi[0] = wo
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_img = x.shape[0], chans = x.shape[1]
    cdef Py_ssize_t h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n_img, chans, kh, kw, ho, wo), dtype=dtype)
    if out_arr.size == 0:
        return out_arr
    cdef floating[:, :, :, :, :, ::1] out = out_arr
    cdef floating* src = &x[0, 0, 0, 0] if x.size else NULL
    cdef floating* dst = &out[0, 0, 0, 0, 0, 0]
    cdef floating* plane
    cdef floating* row
    cdef Py_ssize_t p, ki, kj, oi, oj, ii, lo, hi
    with nogil:
        for p in range(n_img * chans):
            plane = src + p * h * w
            for ki in range(kh):
                for kj in range(kw):
                    _col_range(kj, w, wo, stride, pad, &lo, &hi)
                    for oi in range(ho):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            for oj in range(wo):
                                dst[oj] = 0
                        else:
                            row = plane + ii * w + kj - pad
                            for oj in range(lo):
                                dst[oj] = 0
                            for oj in range(lo, hi):
                                dst[oj] = row[oj * stride]
                            for oj in range(hi, wo):
                                dst[oj] = 0
                        dst += wo
    return out_arr


def col2im(floating[:, :, :, :, :, ::1] cols, int h, int w, int stride, int pad):
    cdef Py_ssize_t n_img = cols.shape[0], chans = cols.shape[1]
    cdef Py_ssize_t kh = cols.shape[2], kw = cols.shape[3]
    cdef Py_ssize_t ho = cols.shape[4], wo = cols.shape[5]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n_img, chans, h, w), dtype=dtype)
    if cols.size == 0 or out_arr.size == 0:
        return out_arr
    cdef floating[:, :, :, ::1] out = out_arr
    cdef floating* src = &cols[0, 0, 0, 0, 0, 0]
    cdef floating* dst = &out[0, 0, 0, 0]
    cdef floating* plane
    cdef floating* row
    cdef Py_ssize_t p, ki, kj, oi, oj, ii, lo, hi
    with nogil:
        for p in range(n_img * chans):
            plane = dst + p * h * w
            for ki in range(kh):
                for kj in range(kw):
                    _col_range(kj, w, wo, stride, pad, &lo, &hi)
                    for oi in range(ho):
                        ii = oi * stride + ki - pad
                        if ii >= 0 and ii < h:
                            row = plane + ii * w + kj - pad
                            for oj in range(lo, hi):
                                row[oj * stride] += src[oj]
                        src += wo
    return out_arr


def nms(double[:, ::1] boxes, long[::1] order, double iou_threshold):
    """Greedy suppression over ``boxes`` visited in ``order``; returns kept indices."""
    cdef Py_ssize_t m = order.shape[0]
    cdef Py_ssize_t a, b, ia, ib, n_keep = 0
    cdef double ix1, iy1, ix2, iy2, iw, ih, inter, area_a, area_b, union
    suppressed_arr = np.zeros(m, dtype=np.uint8)
    keep_arr = np.empty(m, dtype=np.int64)
    cdef unsigned char[::1] suppressed = suppressed_arr
    cdef long[::1] keep = keep_arr
    with nogil:
        for a in range(m):
            if suppressed[a]:
                continue
            ia = order[a]
            keep[n_keep] = ia
            n_keep += 1
            area_a = (boxes[ia, 2] - boxes[ia, 0]) * (boxes[ia, 3] - boxes[ia, 1])
            for b in range(a + 1, m):
                if suppressed[b]:
                    continue
                ib = order[b]
                ix1 = boxes[ia, 0] if boxes[ia, 0] > boxes[ib, 0] else boxes[ib, 0]
                iy1 = boxes[ia, 1] if boxes[ia, 1] > boxes[ib, 1] else boxes[ib, 1]
                ix2 = boxes[ia, 2] if boxes[ia, 2] < boxes[ib, 2] else boxes[ib, 2]
                iy2 = boxes[ia, 3] if boxes[ia, 3] < boxes[ib, 3] else boxes[ib, 3]
                iw = ix2 - ix1
                ih = iy2 - iy1
                if iw <= 0 or ih <= 0:
                    continue
                inter = iw * ih
                area_b = (boxes[ib, 2] - boxes[ib, 0]) * (boxes[ib, 3] - boxes[ib, 1])
                union = area_a + area_b - inter
                if union > 0 and inter / union > iou_threshold:
                    suppressed[b] = 1
    return keep_arr[:n_keep].copy()
