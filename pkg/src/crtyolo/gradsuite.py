"""Finite-difference gradient suite over every differentiable block.

Each case builds float64 inputs (and module parameters) at toy shapes from a
seed and hands them to :func:`finite_diff_gradcheck`. Large parameter tensors
are checked on a random subset of coordinates.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import ops
from . import tensor as T
from .cfp import ExplicitVisualCenter, GlobalCentralizedRegulation, LearnableVisualCenter, LightweightMLP, Stem
from .detector.loss import DetectionLoss, ciou_loss, dfl_loss
from .detector.model import CRTYolo, DecoupledHead, HeadOutput, ModelConfig
from .ema import EMA
from .gradcheck import GradcheckReport, finite_diff_gradcheck
from .nn import BatchNorm, Module
from .tensor import Tensor, no_grad

Case = tuple[Callable, list[Tensor], list[str]]
MAX_ELEMENTS = 24


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _away(rng, shape, margin: float = 0.1) -> np.ndarray:
    """Values bounded away from zero, so kinks at 0 are never straddled."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _module_case(module: Module, fn, xs: list[Tensor], x_names: list[str]) -> Case:
    module.to(np.float64)
    named = list(module.named_parameters())
    n = len(xs)

    def call(*args):
        # parameters are perturbed in place; only the data inputs are passed on
        return fn(*args[:n])
    return call, xs + [p for _, p in named], x_names + [n for n, _ in named]


def calibrate_batch_norm(model: Module, x: Tensor) -> None:
    """Set every running mean/var to the batch statistics of ``x``; leaves ``model`` in eval mode."""
    bns = [m for m in model.modules() if isinstance(m, BatchNorm)]
    saved = [m.momentum for m in bns]
    for m in bns:
        m.momentum = 1.0
    model.train()
    with no_grad():
        model(x)
    for m, mom in zip(bns, saved):
        m.momentum = mom
    model.eval()


def _elementwise_cases() -> dict[str, Callable[[np.random.Generator], Case]]:
    def unary(op, positive=False, away=False):
        def build(rng):
            if positive:
                x = rng.uniform(0.2, 2.0, (3, 4))
            elif away:
                x = _away(rng, (3, 4))
            else:
                x = rng.standard_normal((3, 4))
            return op, [_t(x)], ["x"]
        return build

    def binary(op, positive_b=False, separated=False):
        def build(rng):
            a = rng.standard_normal((3, 4))
            b = rng.standard_normal((1, 4))
            if positive_b:
                b = rng.uniform(0.5, 2.0, (1, 4))
            if separated:
                b = a[:1] + _away(rng, (1, 4), 0.2)
                a = a + 0.0
            return op, [_t(a), _t(b)], ["a", "b"]
        return build

    def separated_pair(op):
        def build(rng):
            a = rng.standard_normal((3, 4))
            b = a + _away(rng, (3, 4), 0.2)
            return op, [_t(a), _t(b)], ["a", "b"]
        return build

    return {
        "add": binary(T.add),
        "sub": binary(T.sub),
        "mul": binary(T.mul),
        "div": binary(T.div, positive_b=True),
        "neg": unary(T.neg),
        "power": unary(lambda x: T.power(x, 2.5), positive=True),
        "exp": unary(T.exp),
        "log": unary(T.log, positive=True),
        "sqrt": unary(T.sqrt, positive=True),
        "atan": unary(T.atan),
        "sigmoid": unary(T.sigmoid),
        "silu": unary(T.silu),
        "relu": unary(T.relu, away=True),
        "softplus": unary(T.softplus),
        "maximum": separated_pair(T.maximum),
        "minimum": separated_pair(T.minimum),
        "clip": unary(lambda x: T.clip(x, -0.5, 0.5), away=True),
    }


def _structural_cases() -> dict[str, Callable[[np.random.Generator], Case]]:
    def c(fn, *shapes, names=None):
        def build(rng):
            xs = [_t(rng.standard_normal(s)) for s in shapes]
            return fn, xs, names or [f"x{i}" for i in range(len(xs))]
        return build

    def where_case(rng):
        cond = rng.random((3, 4)) < 0.5
        return (lambda a, b: T.where(cond, a, b)), [_t(rng.standard_normal((3, 4))),
                                                     _t(rng.standard_normal((3, 4)))], ["a", "b"]

    def drop_path_case(rng):
        seed = int(rng.integers(1 << 30))
        return (lambda x: ops.drop_path(x, 0.4, True, np.random.default_rng(seed))), \
            [_t(rng.standard_normal((6, 2, 3, 3)))], ["x"]

    def max_pool_case(rng):
        # distinct values spaced well apart avoid ties in the window max
        x = rng.permutation(2 * 2 * 5 * 5).reshape(2, 2, 5, 5) * 0.1
        return (lambda t: ops.max_pool2d(t, 3, 1, 1)), [_t(x)], ["x"]

    def batch_norm_case(training):
        def build(rng):
            rm = rng.standard_normal(3) * 0.1
            rv = rng.uniform(0.5, 1.5, 3)

            def fn(x, g, b):
                return ops.batch_norm(x, g, b, rm.copy(), rv.copy(), training=training)
            return fn, [_t(rng.standard_normal((4, 3, 2, 2))), _t(rng.uniform(0.5, 1.5, 3)),
                        _t(rng.standard_normal(3))], ["x", "gamma", "beta"]
        return build

    def bce_case(rng):
        y = rng.random((3, 5))
        return (lambda x: ops.bce_with_logits(x, y, reduction="none")), [_t(rng.standard_normal((3, 5)) * 3)], ["logits"]

    return {
        "sum": c(lambda x: T.tsum(x, axis=1, keepdims=True), (3, 4, 2)),
        "mean": c(lambda x: T.mean(x, axis=(0, 2)), (3, 4, 2)),
        "reshape": c(lambda x: T.reshape(x, (4, 6)), (2, 3, 4)),
        "transpose": c(lambda x: T.transpose(x, (2, 0, 1)), (2, 3, 4)),
        "getitem": c(lambda x: T.getitem(x, (slice(1, 3), slice(None, None, 2))), (4, 5)),
        "getitem_advanced": c(lambda x: T.getitem(x, (np.array([0, 2, 2, 1]), np.array([1, 0, 0, 3]))), (3, 4)),
        "concat": c(lambda a, b: T.concat([a, b], axis=1), (2, 3, 2), (2, 1, 2)),
        "split": c(lambda x: T.split(x, [1, 3], axis=1), (2, 4)),
        "where": where_case,
        "matmul": c(T.matmul, (2, 3, 4), (4, 5)),
        "conv2d": c(lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1), (2, 3, 5, 5), (4, 3, 3, 3), (4,)),
        "conv2d_strided": c(lambda x, w: ops.conv2d(x, w, None, stride=2, padding=1), (1, 2, 6, 6), (3, 2, 3, 3)),
        "conv2d_grouped": c(lambda x, w, b: ops.conv2d(x, w, b, groups=2, padding=0), (2, 4, 4, 4), (6, 2, 3, 3), (6,)),
        "conv2d_depthwise": c(lambda x, w: ops.conv2d(x, w, None, groups=3, padding=1), (2, 3, 4, 4), (3, 1, 3, 3)),
        "group_norm": c(lambda x, g, b: ops.group_norm(x, 2, g, b), (2, 4, 3, 3), (4,), (4,)),
        "batch_norm_train": batch_norm_case(True),
        "batch_norm_eval": batch_norm_case(False),
        "directional_pool_h": c(lambda x: ops.directional_avg_pool(x, "horizontal"), (2, 3, 4, 5)),
        "directional_pool_w": c(lambda x: ops.directional_avg_pool(x, "vertical"), (2, 3, 4, 5)),
        "global_avg_pool": c(ops.global_avg_pool_2d, (2, 3, 4, 5)),
        "softmax": c(lambda x: ops.softmax(x, axis=-1), (3, 5)),
        "log_softmax": c(lambda x: ops.log_softmax(x, axis=1), (3, 5, 2)),
        "pad_replicate": c(lambda x: ops.pad_replicate(x, 2), (1, 2, 3, 4)),
        "upsample_nearest": c(lambda x: ops.upsample_nearest(x, 2), (1, 2, 3, 3)),
        "fully_connected": c(ops.fully_connected, (3, 5), (4, 5), (4,)),
        "max_pool2d": max_pool_case,
        "drop_path": drop_path_case,
        "bce_with_logits": bce_case,
    }


def _block_cases() -> dict[str, Callable[[np.random.Generator], Case]]:
    def ema(rng):
        block = EMA(16, 4, rng)
        return _module_case(block, block, [_t(rng.standard_normal((2, 16, 6, 6)))], ["x"])

    def stem(rng):
        block = Stem(3, 4, rng)
        return _module_case(block, block, [_t(rng.standard_normal((2, 3, 5, 5)))], ["x"])

    def mlp(rng):
        block = LightweightMLP(4, rng, ratio=2, dconv_kernel=3, layer_scale_init=0.5)
        block.rng = None
        block.eval()        # drop-path off; the residual branches stay differentiable
        return _module_case(block, block, [_t(rng.standard_normal((2, 4, 4, 4)))], ["x"])

    def lvc(rng):
        block = LearnableVisualCenter(6, 4, rng)
        x = rng.standard_normal((3, 6, 3, 3)) * 0.5
        return _module_case(block, block, [_t(x)], ["x"])

    def lvc_gate(rng):
        block = LearnableVisualCenter(5, 3, rng)
        return _module_case(block, block.gate, [_t(rng.standard_normal((2, 5, 3, 3))),
                                                _t(rng.standard_normal((2, 5)))], ["x", "e"])

    def evc(rng):
        block = ExplicitVisualCenter(3, 4, rng, num_codes=3, mlp_ratio=2, layer_scale_init=0.5)
        block.eval()
        return _module_case(block, block, [_t(rng.standard_normal((2, 3, 4, 4)))], ["x"])

    def gcr(rng):
        block = GlobalCentralizedRegulation([2, 3], 4, rng)
        xs = [_t(rng.standard_normal((2, 2, 8, 8))), _t(rng.standard_normal((2, 3, 4, 4))),
              _t(rng.standard_normal((2, 4, 2, 2)))]
        return _module_case(block, lambda a, b, top: block([a, b], top), xs, ["f3", "f4", "top"])

    def head(rng):
        block = DecoupledHead(4, 3, 4, rng, depth=2)

        def fn(x):
            out = block(x)
            return [out.cls_logits, out.box_logits]
        return _module_case(block, fn, [_t(rng.standard_normal((2, 4, 3, 3)))], ["x"])

    def model(rng):
        cfg = ModelConfig(widths=(8, 8, 16), neck_width=8, ema_groups=4, num_codes=4, mlp_ratio=2,
                          head_depth=1, reg_max=4, drop_path_rate=0.0, layer_scale_init=0.5)
        net = CRTYolo(cfg, seed=int(rng.integers(1 << 30)))
        image = _t(rng.standard_normal((1, 1, 64, 64)))
        # Batch statistics would cancel per-channel shifts exactly, leaving
        # structurally zero gradients that only round-off can "measure", so
        # the check runs in inference mode with running stats set from this input.
        net.to(np.float64)
        calibrate_batch_norm(net, image)

        def fn(x):
            return [t for h in net(x) for t in (h.cls_logits, h.box_logits)]
        return _module_case(net, fn, [image], ["image"])

    return {"ema": ema, "stem": stem, "mlp": mlp, "lvc_encode_gate": lvc, "lvc_gate": lvc_gate,
            "evc": evc, "gcr": gcr, "head": head, "model": model}


def _loss_cases() -> dict[str, Callable[[np.random.Generator], Case]]:
    def ciou(rng):
        xy = rng.uniform(0, 10, (6, 2))
        wh = rng.uniform(2, 6, (6, 2))
        gxy = xy + rng.uniform(-2, 2, (6, 2))
        gwh = wh * rng.uniform(0.6, 1.4, (6, 2))
        pred = np.concatenate([xy, xy + wh], axis=1)
        gt = np.concatenate([gxy, gxy + gwh], axis=1)
        return (lambda p, g: ciou_loss(p, g, detach_alpha=False)), [_t(pred), _t(gt)], ["pred", "gt"]

    def dfl(rng):
        target = rng.uniform(0.1, 7.9, (5, 4))
        target[np.abs(target - np.round(target)) < 0.05] += 0.1
        return (lambda z: dfl_loss(z, target, 8)), [_t(rng.standard_normal((5, 4, 9)))], ["logits"]

    def bce(rng):
        y = rng.random((4, 3))
        return (lambda x: ops.bce_with_logits(x, y, reduction="mean")), [_t(rng.standard_normal((4, 3)))], ["logits"]

    def detection(rng):
        reg_max, nc = 4, 2
        shapes = [(4, 4, 8), (2, 2, 16)]
        inputs, names = [], []
        for h, w, s in shapes:
            inputs.append(_t(rng.standard_normal((1, nc, h, w))))
            inputs.append(_t(rng.standard_normal((1, 4 * (reg_max + 1), h, w))))
            names += [f"cls_s{s}", f"box_s{s}"]
        gt = (np.array([[3.0, 4.0, 19.0, 22.0], [12.0, 2.0, 30.0, 14.0]]), np.array([0, 1]))
        loss = DetectionLoss(nc, reg_max, topk=3, detach_alpha=False)

        def heads_of(ts):
            return [HeadOutput(ts[2 * i], ts[2 * i + 1], s) for i, (_, _, s) in enumerate(shapes)]

        # the assignment is a constant of the loss, so freeze it at the unperturbed point
        frozen = loss(heads_of(inputs), [gt]).assignments

        def fn(*ts):
            return loss(heads_of(ts), [gt], frozen).total
        return fn, inputs, names

    return {"ciou_loss": ciou, "dfl_loss": dfl, "bce_loss": bce, "detection_loss": detection}


def all_cases() -> dict[str, Callable[[np.random.Generator], Case]]:
    cases = {}
    for group in (_elementwise_cases(), _structural_cases(), _block_cases(), _loss_cases()):
        cases.update(group)
    return cases


@dataclass
class CaseResult:
    name: str
    seed: int
    report: GradcheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tol)

    tol: float = 1e-4


def run_case(name: str, seed: int, tol: float = 1e-4, max_elements: int | None = MAX_ELEMENTS) -> CaseResult:
    build = all_cases()[name]
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    start = time.perf_counter()
    fn, inputs, names = build(rng)
    report = finite_diff_gradcheck(fn, inputs, seed=seed, max_elements=max_elements, names=names)
    return CaseResult(name, seed, report, time.perf_counter() - start, tol)


def run_suite(seeds: Iterable[int] = range(5), names: Iterable[str] | None = None, tol: float = 1e-4,
              progress: Callable[[CaseResult], None] | None = None) -> list[CaseResult]:
    results = []
    for name in (list(names) if names is not None else list(all_cases())):
        for seed in seeds:
            res = run_case(name, seed, tol)
            results.append(res)
            if progress is not None:
                progress(res)
    return results


def summarize(results: list[CaseResult]) -> list[str]:
    """One line per case: worst relative error over seeds and the offending input."""
    lines = []
    by_name: dict[str, list[CaseResult]] = {}
    for r in results:
        by_name.setdefault(r.name, []).append(r)
    for name, rs in by_name.items():
        worst = max(rs, key=lambda r: r.report.max_rel_err)
        status = "ok" if all(r.passed for r in rs) else "FAIL"
        lines.append(f"{name:<22} seeds={len(rs)} max_rel_err={worst.report.max_rel_err:.3e} "
                     f"worst={worst.report.worst_input} seconds={sum(r.seconds for r in rs):.2f} {status}")
    return lines
