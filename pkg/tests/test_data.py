import warnings

import numpy as np
import pytest

from crtyolo.boxes import DetectionBox, GroundTruthBox
from crtyolo.data import (ClassSpec, SceneConfig, augment, format_annotation, generate_dataset,
                          read_annotations, read_dataset, read_predictions, scene_rng, synth_scene,
                          write_annotations, write_dataset, write_predictions)
from crtyolo.errors import InvalidArgumentError, InvalidInputError


def test_fixed_seed_bit_identical():
    cfg = SceneConfig(seed=7)
    a_img, a_boxes = synth_scene(cfg, scene_rng(7, 3))
    b_img, b_boxes = synth_scene(cfg, scene_rng(7, 3))
    assert np.array_equal(a_img.data, b_img.data) and a_boxes == b_boxes
    assert a_img.shape == (1, 1, 96, 96) and a_img.dtype == np.float32


def test_generation_is_order_independent():
    cfg = SceneConfig(seed=2)
    full = generate_dataset(cfg, 6)
    tail = generate_dataset(cfg, 3, start=3)
    for a, b in zip(full[3:], tail):
        assert a.image_id == b.image_id and np.array_equal(a.image, b.image) and a.boxes == b.boxes


def test_zero_objects_gives_no_annotations():
    img, boxes = synth_scene(SceneConfig(objects_per_image=(0, 0)), scene_rng(0, 0))
    assert boxes == []
    assert 0.0 <= img.data.min() and img.data.max() <= 1.0


@pytest.mark.slow
def test_ten_thousand_objects_inside_image_with_positive_area():
    cfg = SceneConfig(seed=11, objects_per_image=(4, 4), max_overlap_iou=1.0)
    total = 0
    index = 0
    while total < 10_000:
        _, boxes = synth_scene(cfg, scene_rng(cfg.seed, index))
        for b in boxes:
            assert 0 <= b.x1 < b.x2 <= 96 and 0 <= b.y1 < b.y2 <= 96
        total += len(boxes)
        index += 1
    assert total >= 10_000


def test_box_is_ten_percent_extent():
    """A lone blob on a zero, noise-free background: box edges bracket the 10% contour."""
    cfg = SceneConfig(classes=(ClassSpec("b", "blob", (0.8, 0.8)),), objects_per_image=(1, 1),
                      background_level=0.0, noise_amplitude=0.0)
    img, (box,) = synth_scene(cfg, scene_rng(0, 5))
    data = img.data[0, 0]
    mask = data > 0.08
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    assert (box.x1, box.y1, box.x2, box.y2) == (cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)


def test_unplaceable_object_warns_and_is_skipped():
    cfg = SceneConfig(image_size=32, classes=(ClassSpec("big", "blob", (0.9, 0.9)),),
                      blob_sigma=(20.0, 20.0), objects_per_image=(1, 1))
    with pytest.warns(RuntimeWarning, match="could not place"):
        _, boxes = synth_scene(cfg, scene_rng(0, 0))
    assert boxes == []


@pytest.mark.parametrize("kwargs", [dict(image_size=100), dict(classes=()),
                                    dict(classes=(ClassSpec("x", "blob", (0.5, 1.5)),)),
                                    dict(objects_per_image=(3, 1)), dict(noise_amplitude=-0.1)])
def test_scene_config_validation(kwargs):
    with pytest.raises(InvalidArgumentError):
        SceneConfig(**kwargs)


def test_class_intensities_are_separated():
    cfg = SceneConfig(seed=4, noise_amplitude=0.0, max_overlap_iou=0.0)
    peaks = {0: [], 1: [], 2: []}
    for s in generate_dataset(cfg, 40):
        for b in s.boxes:
            patch = s.image[0, int(b.y1):int(b.y2), int(b.x1):int(b.x2)]
            peaks[b.class_id].append(patch.max())
    assert max(peaks[1]) < min(peaks[0]) and max(peaks[1]) < min(peaks[2])


def test_augment_flip_mirrors_boxes():
    s = generate_dataset(SceneConfig(seed=1), 1)[0]
    rng = np.random.default_rng(0)
    out = augment(s, rng, flip_prob=1.0, gain=(1.0, 1.0), offset=(0.0, 0.0))
    np.testing.assert_array_equal(out.image, s.image[..., ::-1])
    for a, b in zip(s.boxes, out.boxes):
        assert (b.x1, b.x2) == (96 - a.x2, 96 - a.x1) and (b.y1, b.y2) == (a.y1, a.y2)


def test_annotation_round_trip(tmp_path):
    items = [("img0", GroundTruthBox(1.5, 2.25, 10.0, 20.125, 2)), ("img1", GroundTruthBox(0, 0, 1, 1, 0))]
    write_annotations(tmp_path / "a.txt", items)
    back = read_annotations(tmp_path / "a.txt")
    assert back == {"img0": [items[0][1]], "img1": [items[1][1]]}
    assert format_annotation(*items[0]) == "img0 2 1.5 2.25 10 20.125"


def test_prediction_round_trip(tmp_path):
    d = DetectionBox(1.0, 2.0, 3.0, 4.0, 1, 0.123456789)
    write_predictions(tmp_path / "p.txt", [("x", d)])
    assert read_predictions(tmp_path / "p.txt") == {"x": [d]}


def test_malformed_line(tmp_path):
    (tmp_path / "bad.txt").write_text("img 0 1 2 3\n")
    with pytest.raises(InvalidInputError, match="bad.txt:1"):
        read_annotations(tmp_path / "bad.txt")


def test_dataset_round_trip(tmp_path):
    cfg = SceneConfig(seed=9)
    samples = generate_dataset(cfg, 4, prefix="s")
    write_dataset(tmp_path, samples, cfg.class_names)
    back, names = read_dataset(tmp_path)
    assert names == cfg.class_names
    for a, b in zip(samples, back):
        assert a.image_id == b.image_id and np.array_equal(a.image, b.image) and a.boxes == b.boxes
