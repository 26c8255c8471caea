"""Differentiable neural-network operations on :class:`~crtyolo.tensor.Tensor`.

Image tensors use ``[N, C, H, W]`` layout. Convolution is cross-correlation
(no kernel flip). Normalisations use the biased variance.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import kernels
from .errors import InvalidArgumentError, InvalidGroupsError, InvalidInputError, InvalidShapeError
from .tensor import Tensor, _sigmoid_array, concat, make_result, matmul, mean, sigmoid, silu

__all__ = [
    "conv2d",
    "group_norm",
    "batch_norm",
    "directional_avg_pool",
    "global_avg_pool_2d",
    "softmax",
    "log_softmax",
    "sigmoid",
    "silu",
    "matmul",
    "upsample_nearest",
    "pad_replicate",
    "concat",
    "fully_connected",
    "max_pool2d",
    "drop_path",
    "bce_with_logits",
]


def _require_4d(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise InvalidShapeError(f"{name} expects a 4-D [N,C,H,W] tensor, got shape {t.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation. ``weight`` is ``[Cout, Cin/groups, kh, kw]``."""
    _require_4d("conv2d input", x)
    _require_4d("conv2d weight", weight)
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if groups < 1 or cin % groups or cout % groups:
        raise InvalidShapeError(
            f"conv2d groups={groups} must divide Cin={cin} and Cout={cout}"
        )
    if cin_g != cin // groups:
        raise InvalidShapeError(
            f"conv2d weight dim1={cin_g} must equal Cin/groups={cin // groups} (Cin={cin}, groups={groups})"
        )
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise InvalidShapeError(
            f"conv2d kernel {kh}x{kw} does not fit padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    if bias is not None and bias.shape != (cout,):
        raise InvalidShapeError(f"conv2d bias shape {bias.shape} must be ({cout},)")
    if stride < 1 or padding < 0:
        raise InvalidArgumentError(f"conv2d stride={stride}, padding={padding} invalid")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    g = groups
    cout_g = cout // g
    k = cin_g * kh * kw
    ell = ho * wo
    cols = kernels.im2col(x.data, kh, kw, stride, padding).reshape(n, g, k, ell)
    wmat = weight.data.reshape(g, cout_g, k)
    depthwise = cout_g == 1 and cin_g == 1

    if g == 1:
        out = np.matmul(wmat[0], cols[:, 0])
    elif depthwise:
        out = np.einsum("gk,ngkl->ngl", wmat[:, 0], cols)
    else:
        out = np.matmul(wmat[None], cols)
    out = out.reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)

    def backward(gout):
        go = gout.reshape(n, g, cout_g, ell)
        gx = gw = gb = None
        if weight.requires_grad:
            if g == 1:
                gw = np.tensordot(go[:, 0], cols[:, 0], axes=([0, 2], [0, 2]))
            elif depthwise:
                gw = np.einsum("ngl,ngkl->gk", go[:, :, 0], cols)
            else:
                gw = np.stack([
                    np.tensordot(go[:, i], cols[:, i], axes=([0, 2], [0, 2])) for i in range(g)
                ])
            gw = gw.reshape(weight.shape).astype(weight.dtype, copy=False)
        if x.requires_grad:
            if g == 1:
                dcols = np.matmul(wmat[0].T, go[:, 0])
            elif depthwise:
                dcols = wmat[None, :, 0, :, None] * go[:, :, 0, None, :]
            else:
                dcols = np.matmul(np.swapaxes(wmat, 1, 2)[None], go)
            dcols = dcols.reshape(n, cin, kh, kw, ho, wo)
            gx = kernels.col2im(dcols, h, w, stride, padding)
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def _normalize(x: np.ndarray, axes: tuple[int, ...], eps: float):
    mu = x.mean(axis=axes, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return centered * inv_std, inv_std, mu, var


def _normalize_backward(gxhat: np.ndarray, xhat: np.ndarray, inv_std: np.ndarray, axes) -> np.ndarray:
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (gxhat - m1 - xhat * m2)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each (sample, channel-group) to zero mean / unit variance, then affine."""
    if x.ndim < 2:
        raise InvalidShapeError(f"group_norm expects [N,C,...], got {x.shape}")
    n, c = x.shape[:2]
    if num_groups < 1 or c % num_groups:
        raise InvalidGroupsError(f"group_norm: C={c} is not divisible by num_groups={num_groups}")
    if eps <= 0:
        raise InvalidArgumentError("group_norm eps must be > 0")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise InvalidShapeError(f"group_norm affine shapes {gamma.shape}/{beta.shape} must be ({c},)")
    spatial = x.shape[2:]
    xg = x.data.reshape(n, num_groups, -1)
    xhat_g, inv_std, _, _ = _normalize(xg, (2,), eps)
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, c) + (1,) * len(spatial)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = (g * gamma.data.reshape(bshape)).reshape(n, num_groups, -1)
            gx = _normalize_backward(gxhat, xhat_g, inv_std, (2,)).reshape(x.shape)
        ggamma = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        gbeta = g.sum(axis=red) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "group_norm")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, eps: float = 1e-5, momentum: float = 0.1,
               training: bool = True) -> Tensor:
    """Per-channel (axis 1) normalisation over every other axis.

    In training mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In inference mode the running statistics are used.
    """
    if x.ndim < 2:
        raise InvalidShapeError(f"batch_norm expects [N,C,...], got {x.shape}")
    if x.size == 0:
        raise InvalidInputError("batch_norm on a zero-element batch")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean),
                      ("running_var", running_var)):
        if arr.shape != (c,):
            raise InvalidShapeError(f"batch_norm {name} shape {arr.shape} must be ({c},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)

    if training:
        xhat, inv_std, mu, var = _normalize(x.data, axes, eps)
        count = x.size // c
        running_mean *= 1 - momentum
        running_mean += momentum * mu.reshape(c)
        unbiased = var.reshape(c) * (count / max(count - 1, 1))
        running_var *= 1 - momentum
        running_var += momentum * unbiased
    else:
        inv_std = (1.0 / np.sqrt(running_var + eps)).reshape(bshape).astype(x.dtype)
        xhat = (x.data - running_mean.reshape(bshape).astype(x.dtype)) * inv_std
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            gx = _normalize_backward(gxhat, xhat, inv_std, axes) if training else gxhat * inv_std
        ggamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gbeta = g.sum(axis=axes) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def directional_avg_pool(x: Tensor, axis: str) -> Tensor:
    """``horizontal``: mean over width -> ``[N,C,H,1]``; ``vertical``: mean over height -> ``[N,C,1,W]``."""
    _require_4d("directional_avg_pool", x)
    if axis == "horizontal":
        return mean(x, axis=3, keepdims=True)
    if axis == "vertical":
        return mean(x, axis=2, keepdims=True)
    raise InvalidArgumentError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def global_avg_pool_2d(x: Tensor) -> Tensor:
    _require_4d("global_avg_pool_2d", x)
    return mean(x, axis=(2, 3), keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward, "log_softmax")


def pad_replicate(x: Tensor, pad: int) -> Tensor:
    """Pad H and W by repeating edge values."""
    _require_4d("pad_replicate", x)
    if pad == 0:
        return x
    h, w = x.shape[2:]
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    return x[:, :, rows[:, None], cols[None, :]]


def upsample_nearest(x: Tensor, scale: int) -> Tensor:
    _require_4d("upsample_nearest", x)
    if not isinstance(scale, (int, np.integer)) or scale < 1:
        raise InvalidArgumentError(f"upsample scale must be an integer >= 1, got {scale!r}")
    if scale == 1:
        return x
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "upsample_nearest")


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``[N,Cin] x [Cout,Cin]^T + [Cout]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise InvalidShapeError(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "fully_connected")


def max_pool2d(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    _require_4d("max_pool2d", x)
    n, c, h, w = x.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                constant_values=-np.inf) if padding else x.data
    cols = kernels.im2col(xp, kernel, kernel, stride, 0)
    _, _, _, _, ho, wo = cols.shape
    flat = cols.reshape(n, c, kernel * kernel, ho, wo)
    arg = flat.argmax(axis=2)
    out = np.take_along_axis(flat, arg[:, :, None], axis=2)[:, :, 0]

    def backward(g):
        onehot = np.zeros_like(flat)
        np.put_along_axis(onehot, arg[:, :, None], g[:, :, None], axis=2)
        gp = kernels.col2im(onehot.reshape(cols.shape), h + 2 * padding, w + 2 * padding, stride, 0)
        if padding:
            gp = gp[:, :, padding:padding + h, padding:padding + w]
        return (gp,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Stochastic depth: zero whole samples with prob ``rate``, rescale survivors.

    Identity when not training or ``rate == 0``.
    """
    if not training or rate <= 0.0:
        return x
    if rng is None:
        raise InvalidArgumentError("drop_path in training mode needs an rng")
    keep = 1.0 - rate
    if keep <= 0.0:
        return x * 0.0
    shape = (x.shape[0],) + (1,) * (x.ndim - 1)
    mask = (rng.random(shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * Tensor(mask)


def bce_with_logits(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on logits, ``max(x,0) - x*y + log(1+exp(-|x|))``."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=logits.dtype)
    if y.shape != logits.shape:
        raise InvalidShapeError(f"bce targets {y.shape} vs logits {logits.shape}")
    x = logits.data
    per = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    if reduction == "none":
        out, scale = per, None
    elif reduction == "sum":
        out, scale = np.asarray(per.sum(), dtype=x.dtype), 1.0
    elif reduction == "mean":
        out, scale = np.asarray(per.mean(), dtype=x.dtype), 1.0 / max(per.size, 1)
    else:
        raise InvalidArgumentError(f"unknown reduction {reduction!r}")

    def backward(g):
        grad = _sigmoid_array(x) - y
        return (grad * g if scale is None else grad * (g * scale),)

    return make_result(out, (logits,), backward, "bce_with_logits")

