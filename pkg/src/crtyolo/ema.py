"""Efficient multi-scale attention over grouped sub-features.

The channel dimension is split into ``groups`` sub-features of ``c`` channels
each. All groups share one set of weights (the groups are folded into the
batch axis), so the block is equivariant to any permutation of the groups.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .errors import InvalidGroupsError
from .nn import Module, parameter, uniform_fan_in
from .tensor import Tensor, concat, sigmoid, split


class EMA(Module):
    """Shape-preserving attention block for ``[N, C, H, W]`` maps.

    Per group: a 1x1 branch gates the input with sigmoid(H-pool) and
    sigmoid(W-pool) encodings and group-normalises it; a 3x3 branch encodes
    local context. Each branch's pooled, softmaxed channel descriptor is
    multiplied with the other branch's flattened map, the two spatial maps
    are summed and squashed by a sigmoid, and the group input is reweighted.
    """

    def __init__(self, channels: int, groups: int = 8, rng: np.random.Generator | None = None,
                 eps: float = 1e-5):
        super().__init__()
        if groups < 1 or channels % groups:
            raise InvalidGroupsError(f"EMA: channels={channels} not divisible by groups={groups}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.channels = channels
        self.groups = groups
        self.eps = eps
        c = channels // groups
        self.conv1x1_weight = parameter(uniform_fan_in(rng, (c, c, 1, 1), c))
        self.conv1x1_bias = parameter(uniform_fan_in(rng, (c,), c))
        self.conv3x3_weight = parameter(uniform_fan_in(rng, (c, c, 3, 3), 9 * c))
        self.conv3x3_bias = parameter(uniform_fan_in(rng, (c,), 9 * c))
        self.gn_gamma = parameter(np.ones(c))
        self.gn_beta = parameter(np.zeros(c))

    def forward(self, x: Tensor, return_attention: bool = False):
        n, ch, h, w = x.shape
        if ch != self.channels:
            raise InvalidGroupsError(f"EMA built for {self.channels} channels, got {ch}")
        g = self.groups
        c = ch // g
        gx = x.reshape(n * g, c, h, w)

        # 1x1 branch: directional pools share one conv, then split back
        pool_h = ops.directional_avg_pool(gx, "horizontal")                      # [nG, c, h, 1]
        pool_w = ops.directional_avg_pool(gx, "vertical").transpose(0, 1, 3, 2)  # [nG, c, w, 1]
        hw = ops.conv2d(concat([pool_h, pool_w], axis=2), self.conv1x1_weight, self.conv1x1_bias)
        gate_h, gate_w = split(hw, [h, w], axis=2)
        gated = gx * sigmoid(gate_h) * sigmoid(gate_w.transpose(0, 1, 3, 2))
        g1 = ops.group_norm(gated, c, self.gn_gamma, self.gn_beta, self.eps)

        # 3x3 branch; edge-replicate padding keeps constant maps constant
        g2 = ops.conv2d(ops.pad_replicate(gx, 1), self.conv3x3_weight, self.conv3x3_bias)

        # cross-spatial aggregation
        d1 = ops.softmax(ops.global_avg_pool_2d(g1).reshape(n * g, 1, c), axis=-1)
        d2 = ops.softmax(ops.global_avg_pool_2d(g2).reshape(n * g, 1, c), axis=-1)
        m1 = ops.matmul(d1, g2.reshape(n * g, c, h * w))
        m2 = ops.matmul(d2, g1.reshape(n * g, c, h * w))
        attention = sigmoid((m1 + m2).reshape(n * g, 1, h, w))

        out = (gx * attention).reshape(n, ch, h, w)
        if return_attention:
            return out, attention.reshape(n, g, h, w)
        return out


def ema_forward(x: Tensor, block: EMA) -> Tensor:
    return block(x)
