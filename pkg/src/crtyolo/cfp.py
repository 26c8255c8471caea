"""Centralized feature pyramid: explicit visual center and top-down regulation.

The explicit visual center (EVC) runs on the deepest pyramid level. A 7x7
stem smooths the input; a lightweight MLP branch and a learnable visual
center (codebook) branch run in parallel on the stem output; their outputs
are concatenated and fused back to the neck width. Global centralized
regulation (GCR) then upsamples the EVC output onto every shallower level,
concatenates and projects each level with a 1x1 conv.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import InvalidArgumentError, InvalidCodebookError, InvalidPyramidError
from .nn import BatchNorm, Conv2d, ConvBNAct, GroupNorm, Linear, Module, get_activation, parameter
from .tensor import Tensor, concat, relu, sigmoid, softplus

FULL_NECK_WIDTH = 256


@dataclass
class FeaturePyramid:
    """Three feature levels at strides 8, 16 and 32."""

    f3: Tensor
    f4: Tensor
    f5: Tensor

    strides = (8, 16, 32)

    def levels(self) -> list[Tensor]:
        return [self.f3, self.f4, self.f5]


class Stem(Module):
    """7x7 conv -> batch norm -> activation, stride 1, spatial size kept."""

    def __init__(self, cin: int, width: int = FULL_NECK_WIDTH, rng: np.random.Generator | None = None,
                 act: str = "silu"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv = Conv2d(cin, width, 7, rng, padding=3, bias=False)
        self.bn = BatchNorm(width)
        self.act = get_activation(act)

    def forward(self, x: Tensor) -> Tensor:
        return self.act(self.bn(self.conv(x)))


class LightweightMLP(Module):
    """Depthwise-conv residual block followed by a channel-MLP residual block.

    Each branch output is multiplied by a learnable per-channel layer scale
    and passed through drop-path (training only) before the residual add.
    ``dconv_kernel`` defaults to 1; 3 gives a spatial depthwise conv.
    """

    def __init__(self, width: int, rng: np.random.Generator | None = None, ratio: int = 4,
                 dconv_kernel: int = 1, layer_scale_init: float = 1e-2, drop_path_rate: float = 0.1,
                 norm_groups: int = 1, act: str = "silu"):
        super().__init__()
        if dconv_kernel not in (1, 3):
            raise InvalidArgumentError(f"dconv_kernel must be 1 or 3, got {dconv_kernel}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.drop_path_rate = drop_path_rate
        self.rng: np.random.Generator | None = None
        self.norm1 = GroupNorm(norm_groups, width)
        self.dconv = Conv2d(width, width, dconv_kernel, rng, groups=width)
        self.layer_scale1 = parameter(np.full(width, layer_scale_init))
        self.norm2 = GroupNorm(norm_groups, width)
        self.fc1 = Conv2d(width, width * ratio, 1, rng)
        self.fc2 = Conv2d(width * ratio, width, 1, rng)
        self.layer_scale2 = parameter(np.full(width, layer_scale_init))
        self.act = get_activation(act)

    def channel_mlp(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))

    def forward(self, x: Tensor) -> Tensor:
        c = x.shape[1]
        scale1 = self.layer_scale1.reshape(1, c, 1, 1)
        scale2 = self.layer_scale2.reshape(1, c, 1, 1)
        branch = scale1 * self.dconv(self.norm1(x))
        x = x + ops.drop_path(branch, self.drop_path_rate, self.training, self.rng)
        branch = scale2 * self.channel_mlp(self.norm2(x))
        return x + ops.drop_path(branch, self.drop_path_rate, self.training, self.rng)


class LearnableVisualCenter(Module):
    """Codebook encoding of spatial features plus channel-wise impact-factor gating.

    Each of the ``H*W`` feature vectors ``x_i`` is softly assigned to the
    ``K`` codewords ``b_k`` with weights ``softmax_k(-s_k * |x_i - b_k|^2)``;
    ``e_k`` sums the weighted residuals ``x_i - b_k`` over positions.
    Smoothing factors are kept positive through ``s = softplus(raw)``.
    """

    def __init__(self, width: int, num_codes: int = 64, rng: np.random.Generator | None = None):
        super().__init__()
        if num_codes < 1:
            raise InvalidCodebookError("codebook needs at least one codeword")
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(width)
        self.codewords = parameter(rng.uniform(-bound, bound, size=(num_codes, width)))
        s0 = rng.uniform(0.0, 1.0, size=num_codes)
        s0 = np.maximum(s0, 1e-3)
        self.smoothing_raw = parameter(np.log(np.expm1(s0)))
        self.code_norm = BatchNorm(num_codes)
        self.fc = Linear(width, width, rng)

    @property
    def num_codes(self) -> int:
        return self.codewords.shape[0]

    def smoothing(self) -> Tensor:
        return softplus(self.smoothing_raw)

    def assignment(self, x: Tensor) -> Tensor:
        """Soft-assignment weights ``[N, H*W, K]`` (rows sum to one)."""
        feats = self._positions(x)
        return self._assign(feats, self.codewords, self.smoothing())

    def _positions(self, x: Tensor) -> Tensor:
        n, c, h, w = x.shape
        if c != self.codewords.shape[1]:
            raise InvalidCodebookError(
                f"codeword dimension {self.codewords.shape[1]} does not match input channels {c}"
            )
        return x.reshape(n, c, h * w).transpose(0, 2, 1)

    @staticmethod
    def _assign(feats: Tensor, codes: Tensor, smoothing: Tensor) -> Tensor:
        # |x - b|^2 = |x|^2 - 2 x.b + |b|^2
        sq = (feats * feats).sum(axis=2, keepdims=True)
        cross = ops.matmul(feats, codes.transpose(1, 0))
        code_sq = (codes * codes).sum(axis=1).reshape(1, 1, -1)
        dist = sq - 2.0 * cross + code_sq
        return ops.softmax(-(smoothing.reshape(1, 1, -1) * dist), axis=2)

    def codeword_residuals(self, x: Tensor) -> Tensor:
        """Per-codeword encodings ``e_k`` as ``[N, K, C]``."""
        feats = self._positions(x)
        weights = self._assign(feats, self.codewords, self.smoothing())
        # sum_i a_ik (x_i - b_k) = (A^T X)_k - (sum_i a_ik) b_k
        weighted = ops.matmul(weights.transpose(0, 2, 1), feats)
        mass = weights.sum(axis=1).reshape(weights.shape[0], -1, 1)
        return weighted - mass * self.codewords.reshape(1, *self.codewords.shape)

    def encode(self, x: Tensor) -> Tensor:
        """Aggregate ``e = sum_k ReLU(BN(e_k))`` -> ``[N, C]``."""
        return relu(self.code_norm(self.codeword_residuals(x))).sum(axis=1)

    def gate(self, x: Tensor, e: Tensor) -> Tensor:
        """``x + x * sigmoid(FC(e))`` with the gate broadcast over H, W."""
        n, c = e.shape
        impact = sigmoid(self.fc(e)).reshape(n, c, 1, 1)
        return x + x * impact

    def forward(self, x: Tensor) -> Tensor:
        return self.gate(x, self.encode(x))


def lvc_encode(x: Tensor, lvc: LearnableVisualCenter) -> Tensor:
    return lvc.encode(x)


def lvc_gate(x: Tensor, e: Tensor, lvc: LearnableVisualCenter) -> Tensor:
    return lvc.gate(x, e)


class ExplicitVisualCenter(Module):
    """Stem, then concat of MLP and LVC branches, fused by a 1x1 conv to ``width``.

    Either branch can be disabled (ablations); at least one must remain.
    """

    def __init__(self, cin: int, width: int = FULL_NECK_WIDTH, rng: np.random.Generator | None = None,
                 use_mlp: bool = True, use_lvc: bool = True, num_codes: int = 64, mlp_ratio: int = 4,
                 dconv_kernel: int = 1, layer_scale_init: float = 1e-2, drop_path_rate: float = 0.1,
                 act: str = "silu"):
        super().__init__()
        if not (use_mlp or use_lvc):
            raise InvalidArgumentError("EVC needs the MLP branch, the LVC branch, or both")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = Stem(cin, width, rng, act=act)
        self.mlp = LightweightMLP(width, rng, mlp_ratio, dconv_kernel, layer_scale_init,
                                  drop_path_rate) if use_mlp else None
        self.lvc = LearnableVisualCenter(width, num_codes, rng) if use_lvc else None
        branches = int(use_mlp) + int(use_lvc)
        self.fuse = ConvBNAct(branches * width, width, 1, rng, act=act)

    def branches(self, x: Tensor) -> Tensor:
        """Channel concat of the branch outputs on the stem features."""
        x_in = self.stem(x)
        outs = []
        if self.mlp is not None:
            outs.append(self.mlp(x_in))
        if self.lvc is not None:
            outs.append(self.lvc(x_in))
        return concat(outs, axis=1) if len(outs) > 1 else outs[0]

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(self.branches(x))


def _upsample_ratio(level: Tensor, top: Tensor) -> int:
    lh, lw = level.shape[2:]
    th, tw = top.shape[2:]
    if lh % th or lw % tw or lh // th != lw // tw:
        raise InvalidPyramidError(f"level {lh}x{lw} is not an integer multiple of top {th}x{tw}")
    ratio = lh // th
    if ratio & (ratio - 1):
        raise InvalidPyramidError(f"stride ratio {ratio} between levels is not a power of two")
    return ratio


class GlobalCentralizedRegulation(Module):
    """Regulate shallow levels with the upsampled EVC output (concat + 1x1 conv)."""

    def __init__(self, level_channels: list[int], width: int = FULL_NECK_WIDTH,
                 rng: np.random.Generator | None = None, act: str = "silu"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.proj = [ConvBNAct(c + width, width, 1, rng, act=act) for c in level_channels]

    def forward(self, shallow: list[Tensor], top: Tensor) -> list[Tensor]:
        if len(shallow) != len(self.proj):
            raise InvalidPyramidError(f"expected {len(self.proj)} shallow levels, got {len(shallow)}")
        out = []
        for level, proj in zip(shallow, self.proj):
            ratio = _upsample_ratio(level, top)
            out.append(proj(concat([level, ops.upsample_nearest(top, ratio)], axis=1)))
        return out


def gcr_regulate(pyramid: FeaturePyramid, evc_out: Tensor, gcr: GlobalCentralizedRegulation) -> FeaturePyramid:
    p3, p4 = gcr([pyramid.f3, pyramid.f4], evc_out)
    return FeaturePyramid(p3, p4, evc_out)


class CFPNeck(Module):
    """EVC on the deepest level, GCR on the two shallower levels.

    Disabled parts are replaced by plain 1x1 lateral projections so every
    output level still has ``width`` channels.
    """

    def __init__(self, in_channels: tuple[int, int, int], width: int = FULL_NECK_WIDTH,
                 rng: np.random.Generator | None = None, use_evc: bool = True, use_mlp: bool = True,
                 use_lvc: bool = True, use_gcr: bool = True, num_codes: int = 64, mlp_ratio: int = 4,
                 dconv_kernel: int = 1, layer_scale_init: float = 1e-2, drop_path_rate: float = 0.1,
                 act: str = "silu"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        c3, c4, c5 = in_channels
        self.width = width
        if use_evc:
            self.top = ExplicitVisualCenter(c5, width, rng, use_mlp, use_lvc, num_codes, mlp_ratio,
                                            dconv_kernel, layer_scale_init, drop_path_rate, act)
        else:
            self.top = ConvBNAct(c5, width, 1, rng, act=act)
        if use_gcr:
            self.gcr = GlobalCentralizedRegulation([c3, c4], width, rng, act)
            self.lateral = None
        else:
            self.gcr = None
            self.lateral = [ConvBNAct(c, width, 1, rng, act=act) for c in (c3, c4)]

    def forward(self, pyramid: FeaturePyramid) -> FeaturePyramid:
        top = self.top(pyramid.f5)
        if self.gcr is not None:
            return gcr_regulate(pyramid, top, self.gcr)
        p3 = self.lateral[0](pyramid.f3)
        p4 = self.lateral[1](pyramid.f4)
        return FeaturePyramid(p3, p4, top)
