"""Detector assembly: backbone stub -> per-level EMA -> CFP neck -> decoupled heads."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .. import ops
from ..cfp import CFPNeck, FeaturePyramid
from ..ema import EMA
from ..errors import InvalidArgumentError, InvalidInputSizeError
from ..nn import Conv2d, ConvBNAct, Module
from ..tensor import Tensor, concat

STRIDES = (8, 16, 32)


@dataclass
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 3
    widths: tuple[int, int, int] = (16, 32, 64)
    neck_width: int = 64
    backbone_depth: int = 1
    sppf: bool = False
    ema_groups: int = 8
    num_codes: int = 64
    mlp_ratio: int = 4
    dconv_kernel: int = 1
    layer_scale_init: float = 1e-2
    drop_path_rate: float = 0.1
    head_depth: int = 2
    reg_max: int = 16
    act: str = "silu"
    use_ema: bool = True
    use_evc: bool = True
    use_mlp: bool = True
    use_lvc: bool = True
    use_gcr: bool = True

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise InvalidArgumentError(f"widths must be three positive ints, got {self.widths}")
        if self.num_classes < 1 or self.in_channels < 1 or self.neck_width < 1:
            raise InvalidArgumentError("num_classes, in_channels and neck_width must be positive")
        if self.use_evc and not (self.use_mlp or self.use_lvc):
            raise InvalidArgumentError("EVC enabled with both MLP and LVC disabled; use use_evc=False")

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Widths of the full-size model (backbone 64/128/256, neck 256)."""
        base = dict(widths=(64, 128, 256), neck_width=256)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: (tuple(v) if k == "widths" else v) for k, v in data.items() if k in known})

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode("utf-8")).digest()


# The six structural variants of the ablation table.
ABLATIONS: dict[str, dict[str, bool]] = {
    "full": {},
    "no_ema": {"use_ema": False},
    "no_evc": {"use_evc": False},
    "no_mlp": {"use_mlp": False},
    "no_lvc": {"use_lvc": False},
    "no_gcr": {"use_gcr": False},
}


class Backbone(Module):
    """Strided conv-BN-SiLU stack emitting three levels at strides 8/16/32."""

    def __init__(self, cin: int, widths=(64, 128, 256), rng: np.random.Generator | None = None,
                 depth: int = 1, sppf: bool = False, act: str = "silu"):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w3, w4, w5 = widths
        stem = max(8, w3 // 2)
        self.stem = [
            ConvBNAct(cin, stem, 3, rng, stride=2, act=act),
            ConvBNAct(stem, stem, 3, rng, stride=2, act=act),
        ]
        self.down = [
            ConvBNAct(stem, w3, 3, rng, stride=2, act=act),
            ConvBNAct(w3, w4, 3, rng, stride=2, act=act),
            ConvBNAct(w4, w5, 3, rng, stride=2, act=act),
        ]
        self.blocks = [[ConvBNAct(w, w, 3, rng, act=act) for _ in range(depth)] for w in widths]
        self.sppf = SPPF(w5, rng, act=act) if sppf else None

    def children(self):
        yield from super().children()
        for i, level in enumerate(self.blocks):
            for j, block in enumerate(level):
                yield f"blocks.{i}.{j}", block

    def forward(self, image: Tensor) -> FeaturePyramid:
        if image.ndim != 4:
            raise InvalidInputSizeError(f"backbone expects [N,C,S,S], got {image.shape}")
        s_h, s_w = image.shape[2:]
        if s_h % 32 or s_w % 32:
            raise InvalidInputSizeError(f"input size {s_h}x{s_w} is not divisible by 32")
        x = image
        for layer in self.stem:
            x = layer(x)
        levels = []
        for down, blocks in zip(self.down, self.blocks):
            x = down(x)
            for block in blocks:
                x = x + block(x)
            levels.append(x)
        if self.sppf is not None:
            levels[2] = self.sppf(levels[2])
        return FeaturePyramid(*levels)


class SPPF(Module):
    """Three chained 5x5 max-pools, concatenated with the input, 1x1 projected."""

    def __init__(self, channels: int, rng: np.random.Generator, act: str = "silu"):
        super().__init__()
        hidden = max(1, channels // 2)
        self.reduce = ConvBNAct(channels, hidden, 1, rng, act=act)
        self.expand = ConvBNAct(hidden * 4, channels, 1, rng, act=act)

    def forward(self, x: Tensor) -> Tensor:
        x = self.reduce(x)
        p1 = ops.max_pool2d(x, 5, 1, 2)
        p2 = ops.max_pool2d(p1, 5, 1, 2)
        p3 = ops.max_pool2d(p2, 5, 1, 2)
        return self.expand(concat([x, p1, p2, p3], axis=1))


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


@dataclass
class HeadOutput:
    """Raw logits of one pyramid level."""

    cls_logits: Tensor   # [N, num_classes, h, w]
    box_logits: Tensor   # [N, 4 * (reg_max + 1), h, w]
    stride: int


class DecoupledHead(Module):
    """Separate classification and box-distribution conv branches for one level."""

    def __init__(self, width: int, num_classes: int, reg_max: int, rng: np.random.Generator,
                 depth: int = 2, stride: int = 8, act: str = "silu", prior: float = 0.01):
        super().__init__()
        self.stride = stride
        self.cls_branch = [ConvBNAct(width, width, 3, rng, act=act) for _ in range(depth)]
        self.box_branch = [ConvBNAct(width, width, 3, rng, act=act) for _ in range(depth)]
        self.cls_out = Conv2d(width, num_classes, 1, rng)
        self.box_out = Conv2d(width, 4 * (reg_max + 1), 1, rng)
        self.cls_out.bias.data[:] = -np.log((1 - prior) / prior)
        self.box_out.bias.data[:] = 1.0

    def forward(self, x: Tensor) -> HeadOutput:
        c = x
        for layer in self.cls_branch:
            c = layer(c)
        b = x
        for layer in self.box_branch:
            b = layer(b)
        return HeadOutput(self.cls_out(c), self.box_out(b), self.stride)


class CRTYolo(Module):
    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        super().__init__()
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(config.in_channels, config.widths, rng, config.backbone_depth,
                                 config.sppf, config.act)
        if config.use_ema:
            self.ema = [EMA(w, config.ema_groups, rng) for w in config.widths]
        else:
            self.ema = [Identity() for _ in config.widths]
        self.neck = CFPNeck(config.widths, config.neck_width, rng, config.use_evc, config.use_mlp,
                            config.use_lvc, config.use_gcr, config.num_codes, config.mlp_ratio,
                            config.dconv_kernel, config.layer_scale_init, config.drop_path_rate,
                            config.act)
        self.heads = [DecoupledHead(config.neck_width, config.num_classes, config.reg_max, rng,
                                    config.head_depth, s, config.act) for s in STRIDES]
        self.set_rng(np.random.default_rng([seed, 1]))

    def set_rng(self, rng: np.random.Generator | None) -> None:
        """Random source for drop-path in training mode."""
        for m in self.modules():
            if hasattr(m, "drop_path_rate"):
                m.rng = rng

    def features(self, image: Tensor) -> FeaturePyramid:
        pyr = self.backbone(image)
        refined = FeaturePyramid(*(ema(f) for ema, f in zip(self.ema, pyr.levels())))
        return self.neck(refined)

    def forward(self, image: Tensor) -> list[HeadOutput]:
        neck = self.features(image)
        return [head(level) for head, level in zip(self.heads, neck.levels())]


def backbone_forward(image: Tensor, backbone: Backbone) -> FeaturePyramid:
    return backbone(image)


def model_forward(image: Tensor, model: CRTYolo) -> list[HeadOutput]:
    return model(image)


def build_variant(name: str, base: ModelConfig | None = None, seed: int = 0) -> CRTYolo:
    """Build one of :data:`ABLATIONS` on top of ``base``."""
    if name not in ABLATIONS:
        raise InvalidArgumentError(f"unknown variant {name!r}; choose from {sorted(ABLATIONS)}")
    cfg = asdict(base or ModelConfig())
    cfg.update(ABLATIONS[name])
    return CRTYolo(ModelConfig.from_dict(cfg), seed)
