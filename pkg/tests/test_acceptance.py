"""Acceptance gate: one test (and one printed PASS/FAIL line) per criterion.

Run alone with ``pytest tests/test_acceptance.py -v``; the summary lines are
written straight to the terminal so they show up without ``-s``.
"""
import itertools
import time

import numpy as np
import pytest

from crtyolo import ops
from crtyolo.boxes import DetectionBox
from crtyolo.cfp import (FULL_NECK_WIDTH, CFPNeck, ExplicitVisualCenter, FeaturePyramid,
                         LearnableVisualCenter)
from crtyolo.data import SceneConfig, generate_dataset
from crtyolo.detector import ABLATIONS, ModelConfig, build_variant, nms_detections
from crtyolo.ema import EMA
from crtyolo.gradsuite import all_cases, run_suite
from crtyolo.metrics import average_precision, evaluate, match_detections
from crtyolo.tensor import Tensor
from crtyolo.train import TrainConfig, train

from test_cfp import brute_force_residuals
from test_metrics import exhaustive_labels, micro_dataset, random_instance

# Full-scale results (mAP50, mAP in %) from GPU training on the FLIR and LLVIP
# thermal benchmarks. Documentation only: they need the real datasets and
# hundreds of GPU epochs, so the desk-scale criteria below stand in for them.
FULL_SCALE_REFERENCE = {
    "full":   {"FLIR": (79.6, 39.6), "LLVIP": (95.1, 59.7)},
    "no_ema": {"FLIR": (78.5, 39.1), "LLVIP": (94.0, 56.8)},
    "no_evc": {"FLIR": (75.3, 36.2), "LLVIP": (90.1, 52.5)},
    "no_mlp": {"FLIR": (76.8, 37.7), "LLVIP": (92.5, 54.3)},
    "no_lvc": {"FLIR": (76.0, 36.8), "LLVIP": (92.2, 53.3)},
    "no_gcr": {"FLIR": (77.1, 37.4), "LLVIP": (91.5, 52.4)},
}


@pytest.fixture
def report(request, pytestconfig):
    """Collect checks; print one PASS/FAIL line for the criterion at teardown."""
    checks: list[tuple[str, bool]] = []
    yield checks
    ok = bool(checks) and all(flag for _, flag in checks)
    failed = [name for name, flag in checks if not flag]
    detail = "; ".join(name for name, _ in checks) if ok else "failed: " + "; ".join(failed)
    line = f"[acceptance] {request.node.name}: {'PASS' if ok else 'FAIL'} ({detail})"
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")
    with capman.global_and_fixture_disabled():
        print("\n" + line)


def check(checks, name, flag):
    checks.append((name, bool(flag)))
    assert flag, name


def test_criterion_1_full_scale_numbers_are_reference_only(report):
    check(report, "six reference rows present", set(FULL_SCALE_REFERENCE) == set(ABLATIONS))
    full = FULL_SCALE_REFERENCE["full"]
    check(report, "FLIR 79.6/39.6, LLVIP 95.1/59.7", full == {"FLIR": (79.6, 39.6), "LLVIP": (95.1, 59.7)})
    check(report, "full model best in every column",
          all(full[d][i] >= row[d][i] for row in FULL_SCALE_REFERENCE.values() for d in full for i in (0, 1)))
    desk = ModelConfig()
    check(report, "desk scale differs from full scale (not a reproduction)",
          desk.widths != ModelConfig.full_scale().widths and TrainConfig().resolution != 640)


def test_criterion_2_gradient_suite(report):
    start = time.perf_counter()
    results = run_suite(seeds=range(5))
    elapsed = time.perf_counter() - start
    names = {r.name for r in results}
    worst = max(results, key=lambda r: r.report.max_rel_err)
    required = {"ema", "stem", "mlp", "lvc_encode_gate", "evc", "gcr", "head", "ciou_loss", "dfl_loss",
                "bce_loss", "conv2d", "softmax", "group_norm", "batch_norm_train", "matmul"}
    check(report, f"{len(names)} blocks incl. every op, block and loss", required <= names == set(all_cases()))
    check(report, ">=5 seeds each", all(sum(r.name == n for r in results) >= 5 for n in names))
    check(report, f"max rel err {worst.report.max_rel_err:.2e} ({worst.name}) < 1e-4",
          all(r.report.max_rel_err < 1e-4 for r in results))
    check(report, f"runtime {elapsed:.0f}s < 300s", elapsed < 300)


def test_criterion_3_codebook_equation_oracles(report):
    rng = np.random.default_rng(0)
    lvc = LearnableVisualCenter(8, 4, rng).to(np.float64)
    x = rng.standard_normal((1, 8, 4, 4))       # 16 positions
    got = lvc.codeword_residuals(Tensor(x)).data
    ref = brute_force_residuals(x, lvc.codewords.data, lvc.smoothing().data)
    err = float(np.abs(got - ref).max())
    check(report, f"K=4 C=8 vs double loop, err {err:.1e} <= 1e-6", err <= 1e-6)

    one = LearnableVisualCenter(8, 1, rng).to(np.float64)
    one.codewords.data[:] = rng.integers(-8, 8, (1, 8)) / 4.0      # exactly representable
    xi = rng.integers(-5, 6, (2, 8, 4, 4)).astype(np.float64)
    e = one.codeword_residuals(Tensor(xi)).data[:, 0]
    closed = xi.sum(axis=(2, 3)) - 16 * one.codewords.data[0]
    check(report, "K=1 closed form exact", np.array_equal(e, closed))

    weights = lvc.assignment(Tensor(rng.standard_normal((3, 8, 5, 5)) * 3)).data
    check(report, "assignment weights sum to 1 +- 1e-6", np.abs(weights.sum(axis=-1) - 1).max() <= 1e-6)


def test_criterion_4_shapes_and_structure(report):
    rng = np.random.default_rng(0)
    for c, g in ((16, 4), (32, 8), (64, 8)):
        x = Tensor(rng.standard_normal((2, c, 6, 6)).astype(np.float32))
        check(report, f"EMA({c},{g}) shape kept", EMA(c, g, rng)(x).shape == x.shape)

    evc = ExplicitVisualCenter(256, FULL_NECK_WIDTH, rng, num_codes=64).eval()
    out = evc(Tensor(rng.standard_normal((1, 256, 2, 2)).astype(np.float32)))
    check(report, "EVC output width 256", out.shape == (1, 256, 2, 2))
    neck = CFPNeck((64, 128, 256), FULL_NECK_WIDTH, rng, num_codes=64).eval()
    pyr = FeaturePyramid(*(Tensor(rng.standard_normal((1, c, s, s)).astype(np.float32))
                           for c, s in ((64, 8), (128, 4), (256, 2))))
    check(report, "GCR outputs width 256", all(t.shape[1] == 256 for t in neck(pyr).levels()))

    models = {name: build_variant(name, ModelConfig(), seed=0) for name in ABLATIONS}
    x = Tensor(np.zeros((1, 1, 96, 96), dtype=np.float32))
    built = all(len(m.eval()(x)) == 3 for m in models.values())
    distinct = len({m.num_parameters() for m in models.values()}) == 6
    check(report, "6 ablation variants build and run", len(models) == 6 and built and distinct)


def test_criterion_5_metrics_oracles(report):
    instances = 0
    agree = True
    for n_pred, n_gt in itertools.product(range(4), range(4)):
        rng = np.random.default_rng(17 * n_pred + n_gt)
        for _ in range(100):
            preds, gts = random_instance(rng, n_pred, n_gt)
            for thr in (0.5, 0.75):
                instances += 1
                agree &= match_detections(preds, gts, thr) == exhaustive_labels(preds, gts, thr)
    check(report, f"greedy == exhaustive on {instances} instances (<=3 preds, <=3 GTs)", agree)
    ap = average_precision([False, True], 1)
    check(report, f"[FP@0.9, TP@0.8], 1 GT -> AP {ap:.6f}", abs(ap - 0.5) <= 1e-6)
    _, gts = micro_dataset(1)
    perfect = {k: [DetectionBox(*g.xyxy(), g.class_id, 0.8) for g in v] for k, v in gts.items()}
    r = evaluate(perfect, gts, 3)
    check(report, "perfect predictions -> mAP50 = mAP75 = mAP = 1", r.mAP50 == r.mAP75 == r.mAP == 1.0)


def test_criterion_6_training(report, tmp_path):
    scene = SceneConfig(seed=0)
    sample = generate_dataset(scene, 1)
    smoke = train(TrainConfig(batch_size=1, epochs=200, train_images=1, eval_images=0, augment=False),
                  scene, train_samples=sample)
    drop = 1 - smoke.losses[-1] / smoke.losses[0]
    check(report, f"overfit 200 iters: loss {smoke.losses[0]:.2f} -> {smoke.losses[-1]:.2f} "
                  f"({drop:.0%} drop >= 50%)", drop >= 0.5)

    config = TrainConfig(train_images=200, eval_images=50, epochs=30, schedule="cosine", eval_every=5)
    start = time.perf_counter()
    full = train(config, out_dir=tmp_path / "run1")
    elapsed = time.perf_counter() - start
    check(report, f"200 images x 30 epochs: held-out mAP50 {full.report.mAP50:.3f} >= 0.85",
          full.report.mAP50 >= 0.85)
    check(report, f"wall time {elapsed / 60:.1f} min < 30 min", elapsed < 1800)

    train(config, out_dir=tmp_path / "run2")
    log1 = (tmp_path / "run1" / "metrics.log").read_bytes()
    log2 = (tmp_path / "run2" / "metrics.log").read_bytes()
    check(report, f"re-run metrics log byte-identical ({len(log1)} bytes)", log1 == log2)


def test_criterion_7_invariances(report):
    rng = np.random.default_rng(3)
    g, c = 8, 4
    ema = EMA(g * c, g, rng).to(np.float64)
    x = rng.standard_normal((2, g * c, 5, 5))
    perm = rng.permutation(g)
    idx = (perm[:, None] * c + np.arange(c)).ravel()
    err = np.abs(ema(Tensor(x[:, idx])).data - ema(Tensor(x)).data[:, idx]).max()
    check(report, f"EMA group-permutation equivariance ({err:.1e})", err < 1e-12)

    lvc = LearnableVisualCenter(8, 4, rng).to(np.float64)
    x = rng.standard_normal((2, 8, 4, 4))
    shuffled = x.reshape(2, 8, 16)[:, :, rng.permutation(16)].reshape(2, 8, 4, 4)
    err = np.abs(lvc.encode(Tensor(x)).data - lvc.encode(Tensor(shuffled)).data).max()
    check(report, f"LVC spatial-permutation invariance ({err:.1e} <= 1e-6)", err <= 1e-6)

    z = rng.standard_normal((4, 7)) * 10
    err = np.abs(ops.softmax(Tensor(z)).data - ops.softmax(Tensor(z + 123.4)).data).max()
    check(report, f"softmax shift invariance ({err:.1e})", err < 1e-12)

    same = True
    for seed in range(20):
        preds, gts = micro_dataset(seed)
        mapped = {k: [DetectionBox(*d.xyxy(), d.class_id, d.confidence ** 3) for d in v]
                  for k, v in preds.items()}
        same &= evaluate(preds, gts, 3).to_keyvalue() == evaluate(mapped, gts, 3).to_keyvalue()
    check(report, "evaluator confidence-rank invariance", same)

    idempotent = True
    for seed in range(20):
        r = np.random.default_rng(seed)
        xy = r.uniform(0, 60, (40, 2))
        dets = [DetectionBox(*xy[i], *(xy[i] + r.uniform(5, 30, 2)), int(r.integers(3)), float(r.random()))
                for i in range(40)]
        once = nms_detections(dets, 0.5)
        idempotent &= nms_detections(once, 0.5) == once
    check(report, "NMS idempotence", idempotent)
