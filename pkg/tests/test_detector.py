import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crtyolo.boxes import DetectionBox, box_iou_matrix
from crtyolo.detector import (ABLATIONS, Backbone, CRTYolo, DetectionLoss, HeadOutput, ModelConfig,
                              bce_loss, build_variant, ciou_loss, decode_predictions, dfl_loss,
                              nms_detections, task_aligned_assign)
from crtyolo.detector.assign import points_in_boxes
from crtyolo.errors import InvalidArgumentError, InvalidBoxError, InvalidInputSizeError
from crtyolo.tensor import Tensor

TINY = ModelConfig(widths=(8, 8, 16), neck_width=8, ema_groups=4, num_codes=4, mlp_ratio=2,
                   head_depth=1, reg_max=4)


# -- backbone / model ---------------------------------------------------------

def test_backbone_full_widths_at_64():
    bb = Backbone(1, (64, 128, 256), np.random.default_rng(0))
    pyr = bb(Tensor(np.zeros((2, 1, 64, 64), dtype=np.float32)))
    assert [t.shape for t in pyr.levels()] == [(2, 64, 8, 8), (2, 128, 4, 4), (2, 256, 2, 2)]


@pytest.mark.parametrize("size", [48, 65, 100])
def test_backbone_rejects_bad_size(size):
    bb = Backbone(1, (8, 8, 8), np.random.default_rng(0))
    with pytest.raises(InvalidInputSizeError):
        bb(Tensor(np.zeros((1, 1, size, size), dtype=np.float32)))


def test_sppf_tail_keeps_shape():
    bb = Backbone(1, (8, 8, 16), np.random.default_rng(0), sppf=True)
    assert bb(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32))).f5.shape == (1, 16, 2, 2)


def test_model_heads_shapes():
    model = CRTYolo(TINY, seed=0)
    heads = model(Tensor(np.random.default_rng(0).random((2, 1, 96, 96)).astype(np.float32)))
    assert [h.stride for h in heads] == [8, 16, 32]
    for h, s in zip(heads, (12, 6, 3)):
        assert h.cls_logits.shape == (2, TINY.num_classes, s, s)
        assert h.box_logits.shape == (2, 4 * (TINY.reg_max + 1), s, s)


def test_model_deterministic_under_seed():
    x = Tensor(np.random.default_rng(1).random((1, 1, 64, 64)).astype(np.float32))
    a = CRTYolo(TINY, seed=3).eval()
    b = CRTYolo(TINY, seed=3).eval()
    assert np.array_equal(a(x)[0].cls_logits.data, b(x)[0].cls_logits.data)


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_ablation_variants_build_and_run(name):
    model = build_variant(name, TINY)
    heads = model.eval()(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))
    assert len(heads) == 3
    cfg = model.config
    for flag, value in ABLATIONS[name].items():
        assert getattr(cfg, flag) == value


def test_ablations_differ_structurally():
    counts = {name: build_variant(name, TINY).num_parameters() for name in ABLATIONS}
    assert len(set(counts.values())) == len(counts)
    assert type(build_variant("no_ema", TINY).ema[0]).__name__ == "Identity"


def test_unknown_variant():
    with pytest.raises(InvalidArgumentError):
        build_variant("no_head")


def test_config_json_round_trip():
    cfg = ModelConfig(widths=(8, 16, 32), use_lvc=False)
    again = ModelConfig.from_dict(__import__("json").loads(cfg.to_json()))
    assert again == cfg and again.digest() == cfg.digest()


# -- assignment ---------------------------------------------------------------

def grid_points(n, stride):
    ys, xs = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    return np.stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride], axis=1)


def test_no_gts_all_background():
    pts = grid_points(3, 8)
    res = task_aligned_assign(np.full((9, 2), 0.5), np.tile([0, 0, 8, 8.0], (9, 1)), pts,
                              np.zeros((0, 4)), np.zeros(0), 2)
    assert not res.fg_mask.any() and np.all(res.gt_index == -1)
    assert res.target_scores.sum() == 0


def test_single_cell_gt_topk1_exhaustive():
    """Every placement of a one-cell GT on a 2x2 grid picks exactly that cell."""
    pts = grid_points(2, 8)
    rng = np.random.default_rng(0)
    for cell in range(4):
        cx, cy = pts[cell]
        gt = np.array([[cx - 4, cy - 4, cx + 4, cy + 4]])
        pred_boxes = np.tile(gt, (4, 1)) + rng.uniform(-1, 1, (4, 4))
        res = task_aligned_assign(rng.uniform(0.1, 1, (4, 1)), pred_boxes, pts, gt, [0], 1, topk=1)
        assert res.fg_mask.tolist() == [i == cell for i in range(4)]


def test_alignment_monotone_in_iou():
    pts = np.array([[4.0, 4.0], [6.0, 6.0]])
    gt = np.array([[0.0, 0.0, 10.0, 10.0]])
    pred = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 5.0]])   # IoU 1 and 0.5
    for beta in (0.5, 1.0, 6.0):
        res = task_aligned_assign(np.ones((2, 1)), pred, pts, gt, [0], 1, beta=beta, topk=1)
        assert res.fg_mask.tolist() == [True, False]


@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_assignment_properties(seed, n_gt, topk):
    rng = np.random.default_rng(seed)
    pts = grid_points(6, 8)
    xy = rng.uniform(0, 36, (n_gt, 2))
    gts = np.concatenate([xy, xy + rng.uniform(6, 20, (n_gt, 2))], axis=1)
    pxy = rng.uniform(0, 40, (36, 2))
    preds = np.concatenate([pxy, pxy + rng.uniform(2, 16, (36, 2))], axis=1)
    res = task_aligned_assign(rng.random((36, 3)), preds, pts, gts, rng.integers(0, 3, n_gt), 3, topk=topk)
    inside = points_in_boxes(pts, gts)
    fg = np.flatnonzero(res.fg_mask)
    assert np.all(inside[res.gt_index[fg], fg])
    assert np.all(np.bincount(res.gt_index[fg], minlength=n_gt) <= topk)
    assert np.all(res.gt_index[~res.fg_mask] == -1)
    assert np.all((res.target_scores >= 0) & (res.target_scores <= 1 + 1e-12))


# -- losses -------------------------------------------------------------------

def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def test_ciou_identical_boxes_zero():
    b = t64([[1, 2, 5, 9], [0, 0, 3, 3]])
    np.testing.assert_allclose(ciou_loss(b, b).data, 0, atol=1e-12)


def test_ciou_concentric_same_aspect_reduces_to_one_minus_iou():
    pred = t64([[2, 2, 6, 8]])         # 4x6 centred at (4, 5)
    gt = t64([[0, -1, 8, 11]])         # 8x12, same centre and aspect
    iou = 24 / 96
    np.testing.assert_allclose(ciou_loss(pred, gt).data, [1 - iou], atol=1e-12)


def ciou_reference(p, g):
    """Term-by-term scalar definition."""
    iw = max(0.0, min(p[2], g[2]) - max(p[0], g[0]))
    ih = max(0.0, min(p[3], g[3]) - max(p[1], g[1]))
    inter = iw * ih
    ap = (p[2] - p[0]) * (p[3] - p[1])
    ag = (g[2] - g[0]) * (g[3] - g[1])
    iou = inter / (ap + ag - inter)
    cw = max(p[2], g[2]) - min(p[0], g[0])
    ch = max(p[3], g[3]) - min(p[1], g[1])
    rho2 = ((p[0] + p[2] - g[0] - g[2]) ** 2 + (p[1] + p[3] - g[1] - g[3]) ** 2) / 4
    v = 4 / math.pi ** 2 * (math.atan((g[2] - g[0]) / (g[3] - g[1])) - math.atan((p[2] - p[0]) / (p[3] - p[1]))) ** 2
    alpha = v / (v - iou + 1 + 1e-7)
    return 1 - iou + rho2 / (cw * cw + ch * ch) + alpha * v


@pytest.mark.parametrize("seed", range(10))
def test_ciou_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(0, 10, (8, 2))
    p = np.concatenate([xy, xy + rng.uniform(0.5, 8, (8, 2))], axis=1)
    gxy = rng.uniform(0, 10, (8, 2))
    g = np.concatenate([gxy, gxy + rng.uniform(0.5, 8, (8, 2))], axis=1)
    got = ciou_loss(t64(p), t64(g)).data
    ref = [ciou_reference(a, b) for a, b in zip(p, g)]
    np.testing.assert_allclose(got, ref, atol=1e-12)
    assert np.all((got >= 0) & (got <= 2.5))


def test_ciou_decreases_as_pred_approaches_gt():
    gt = np.array([[10.0, 10.0, 20.0, 16.0]])
    losses = [ciou_loss(t64(gt + [dx, 0, dx, 0]), t64(gt)).item() for dx in np.linspace(15, 0, 61)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_ciou_rejects_degenerate():
    with pytest.raises(InvalidBoxError):
        ciou_loss(t64([[0, 0, 0, 5]]), t64([[0, 0, 1, 1]]))
    with pytest.raises(InvalidBoxError):
        ciou_loss(t64([[0, 0, 1, 1]]), t64([[2, 2, 1, 3]]))


def test_ciou_alpha_detached_by_default(rng):
    p = t64(rng.uniform(0, 2, (3, 2)).repeat(2, axis=1) + [0, 0, 3, 5])
    g = t64([[0.5, 0.2, 2.5, 6.0]] * 3)
    p_full = Tensor(p.data.copy(), requires_grad=True)
    p_det = Tensor(p.data.copy(), requires_grad=True)
    ciou_loss(p_full, g, detach_alpha=False).sum().backward()
    ciou_loss(p_det, g).sum().backward()
    assert not np.allclose(p_full.grad, p_det.grad)
    np.testing.assert_allclose(ciou_loss(p_full, g, detach_alpha=False).data, ciou_loss(p_det, g).data)


@pytest.mark.parametrize("n", [2, 5, 17])
def test_dfl_uniform_integer_target_is_log_n(n):
    for t in range(n):
        loss = dfl_loss(Tensor(np.zeros(n)), np.array(float(t)), n - 1).item()
        assert loss == pytest.approx(math.log(n), abs=1e-12)


def test_dfl_confident_integer_target_near_zero():
    logits = np.full(9, -30.0)
    logits[4] = 30.0
    assert dfl_loss(Tensor(logits), np.array(4.0), 8).item() < 1e-12


def test_dfl_half_target_weights_both_bins_equally():
    logits = np.array([0.3, -1.0, 2.0, 0.5, 0.0])
    logp = logits - np.log(np.exp(logits).sum())
    expected = -(0.5 * logp[1] + 0.5 * logp[2])
    assert dfl_loss(Tensor(logits), np.array(1.5), 4).item() == pytest.approx(expected, abs=1e-12)


def test_dfl_clamps_with_warning():
    with pytest.warns(RuntimeWarning):
        a = dfl_loss(Tensor(np.zeros(5)), np.array(7.0), 4).item()
    b = dfl_loss(Tensor(np.zeros(5)), np.array(4.0), 4).item()
    assert a == pytest.approx(b)


def test_bce_loss_closed_form():
    assert bce_loss(t64([0.0, 0.0]), np.array([0.5, 0.5])).item() == pytest.approx(math.log(2))


def random_heads(rng, n=1, nc=2, reg_max=4, sizes=((4, 8), (2, 16), (1, 32))):
    return [HeadOutput(Tensor(rng.standard_normal((n, nc, s, s))),
                       Tensor(rng.standard_normal((n, 4 * (reg_max + 1), s, s))), stride)
            for s, stride in sizes]


def test_detection_loss_finite_and_reuses_assignment(rng):
    heads = random_heads(rng)
    loss = DetectionLoss(2, 4)
    targets = [(np.array([[2.0, 3.0, 20.0, 25.0]]), np.array([1]))]
    first = loss(heads, targets)
    again = loss(heads, targets, first.assignments)
    assert np.isfinite(first.total.item()) and first.num_foreground > 0
    assert again.total.item() == first.total.item()


def test_detection_loss_no_targets_is_classification_only(rng):
    out = DetectionLoss(2, 4)(random_heads(rng), [(np.zeros((0, 4)), np.zeros(0))])
    assert out.box == 0 and out.dfl == 0 and out.cls > 0


# -- decoding / NMS -----------------------------------------------------------

def test_decode_empty_below_threshold(rng):
    heads = random_heads(rng)
    for h in heads:
        h.cls_logits.data[:] = -20
    assert decode_predictions(heads, conf_threshold=0.25) == [[]]


def test_identical_boxes_one_survives():
    d = [DetectionBox(0, 0, 10, 10, 0, 0.9), DetectionBox(0, 0, 10, 10, 0, 0.8)]
    assert nms_detections(d) == [d[0]]


def test_nms_is_class_wise():
    d = [DetectionBox(0, 0, 10, 10, 0, 0.9), DetectionBox(0, 0, 10, 10, 1, 0.8)]
    assert nms_detections(d) == d


def brute_force(dets, thr):
    kept = []
    for d in sorted(dets, key=lambda x: -x.confidence):
        if all(k.class_id != d.class_id or box_iou_matrix([k.xyxy()], [d.xyxy()])[0, 0] <= thr for k in kept):
            kept.append(d)
    return kept


def random_dets(rng, n=20, classes=2):
    xy = rng.uniform(0, 50, (n, 2))
    wh = rng.uniform(5, 30, (n, 2))
    return [DetectionBox(*xy[i], *(xy[i] + wh[i]), int(rng.integers(classes)), float(rng.random()))
            for i in range(n)]


@pytest.mark.parametrize("seed", range(30))
def test_nms_matches_brute_force(seed):
    dets = random_dets(np.random.default_rng(seed))
    assert nms_detections(dets, 0.5) == brute_force(dets, 0.5)


@pytest.mark.parametrize("seed", range(10))
def test_nms_idempotent(seed):
    once = nms_detections(random_dets(np.random.default_rng(seed), 40), 0.4)
    assert nms_detections(once, 0.4) == once


def test_decode_idempotent_and_bounded(rng):
    heads = random_heads(rng, n=2)
    out = decode_predictions(heads, conf_threshold=0.2, nms_iou=0.5, max_det=7, image_size=(32, 32))
    for dets in out:
        assert len(dets) <= 7
        assert nms_detections(dets, 0.5, 7) == dets
        conf = [d.confidence for d in dets]
        assert conf == sorted(conf, reverse=True)
        for d in dets:
            assert d.x2 > d.x1 and d.y2 > d.y1 and 0 <= d.confidence <= 1
            assert 0 <= d.x1 and d.x2 <= 32


def test_decode_box_geometry():
    """One confident point with peaked distance distributions decodes to a known box."""
    reg_max = 4
    cls = np.full((1, 1, 2, 2), -20.0)
    cls[0, 0, 1, 0] = 20.0                      # point centre (4, 12) at stride 8
    box = np.full((1, 4, reg_max + 1, 2, 2), -30.0)
    for side, bin_ in enumerate((1, 0, 2, 3)):  # l, t, r, b in stride units
        box[0, side, bin_] = 30.0
    heads = [HeadOutput(Tensor(cls), Tensor(box.reshape(1, 4 * (reg_max + 1), 2, 2)), 8)]
    (det,), = decode_predictions(heads)
    np.testing.assert_allclose(det.xyxy(), (4 - 8, 12 - 0, 4 + 16, 12 + 24), atol=1e-6)
