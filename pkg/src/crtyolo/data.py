"""Synthetic thermal scenes and the plain-text annotation format.

Annotation lines are ``image_id class_id x1 y1 x2 y2`` in pixels; prediction
lines append a confidence. Images on disk are CRTT tensor dumps.
"""
from __future__ import annotations

import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .boxes import DetectionBox, GroundTruthBox, box_iou_matrix
from .errors import InvalidArgumentError, InvalidInputError
from .serialize import dump_tensor, load_tensor
from .tensor import Tensor

# Gaussian profile falls to 10% of its peak at this many standard deviations.
TEN_PERCENT_RADIUS = float(np.sqrt(2.0 * np.log(10.0)))


@dataclass(frozen=True)
class ClassSpec:
    name: str
    shape: str                      # "blob" or "bar"
    peak: tuple[float, float]       # intensity added at the centre


DEFAULT_CLASSES = (
    ClassSpec("hot-blob", "blob", (0.70, 0.95)),
    ClassSpec("warm-blob", "blob", (0.30, 0.45)),
    ClassSpec("hot-bar", "bar", (0.70, 0.95)),
)


@dataclass
class SceneConfig:
    image_size: int = 96
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    objects_per_image: tuple[int, int] = (1, 4)
    background_level: float = 0.15
    noise_amplitude: float = 0.03
    blob_sigma: tuple[float, float] = (2.5, 6.5)
    bar_width_sigma: tuple[float, float] = (1.5, 2.5)
    bar_aspect: tuple[float, float] = (2.5, 4.0)
    max_overlap_iou: float = 0.3
    max_tries: int = 100
    seed: int = 0

    def __post_init__(self):
        self.classes = tuple(c if isinstance(c, ClassSpec) else ClassSpec(*c) for c in self.classes)
        if self.image_size < 32 or self.image_size % 32:
            raise InvalidArgumentError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if not self.classes:
            raise InvalidArgumentError("class catalog is empty")
        for spec in self.classes:
            lo, hi = spec.peak
            if not (0.0 <= lo <= hi <= 1.0):
                raise InvalidArgumentError(f"class {spec.name}: intensity range {spec.peak} not within [0,1]")
            if spec.shape not in ("blob", "bar"):
                raise InvalidArgumentError(f"class {spec.name}: unknown shape {spec.shape!r}")
        for name in ("background_level", "noise_amplitude"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0,1]")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise InvalidArgumentError(f"objects_per_image range {self.objects_per_image} invalid")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    @property
    def num_classes(self) -> int:
        return len(self.classes)


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Per-image generator; images can be produced in any order."""
    return np.random.default_rng([seed, index])


def _patch(spec: ClassSpec, config: SceneConfig, rng: np.random.Generator):
    """Sample shape parameters; returns (profile fn(dx, dy), half extents)."""
    if spec.shape == "blob":
        sigma = rng.uniform(*config.blob_sigma)
        half = (TEN_PERCENT_RADIUS * sigma,) * 2

        def profile(dx, dy):
            return np.exp(-(dx * dx + dy * dy) / (2 * sigma * sigma))

        return profile, half
    s_short = rng.uniform(*config.bar_width_sigma)
    s_long = s_short * rng.uniform(*config.bar_aspect)
    theta = rng.uniform(0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    half = (
        TEN_PERCENT_RADIUS * np.sqrt((s_long * c) ** 2 + (s_short * s) ** 2),
        TEN_PERCENT_RADIUS * np.sqrt((s_long * s) ** 2 + (s_short * c) ** 2),
    )

    def profile(dx, dy):
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return np.exp(-(u * u) / (2 * s_long ** 2) - (v * v) / (2 * s_short ** 2))

    return profile, half


def synth_scene(config: SceneConfig, rng: np.random.Generator) -> tuple[Tensor, list[GroundTruthBox]]:
    """One ``[1,1,S,S]`` float32 image and its tight boxes.

    A box is the pixel extent where the object's own profile exceeds 10% of
    its peak. Objects that cannot be placed inside the image (or that would
    overlap an earlier box above ``max_overlap_iou``) within ``max_tries``
    attempts are skipped with a warning.
    """
    size = config.image_size
    image = config.background_level + config.noise_amplitude * rng.standard_normal((size, size))
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    count = int(rng.integers(config.objects_per_image[0], config.objects_per_image[1] + 1))
    boxes: list[GroundTruthBox] = []
    for _ in range(count):
        class_id = int(rng.integers(config.num_classes))
        spec = config.classes[class_id]
        peak = rng.uniform(*spec.peak)
        profile, (hx, hy) = _patch(spec, config, rng)
        placed = False
        for _try in range(config.max_tries):
            cx = rng.uniform(hx, size - hx) if size > 2 * hx else -1.0
            cy = rng.uniform(hy, size - hy) if size > 2 * hy else -1.0
            if cx < 0 or cy < 0:
                continue
            values = profile(xx - cx, yy - cy)
            mask = values > 0.1
            if not mask.any():
                continue
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            box = (
                float(max(cols[0], 0)), float(max(rows[0], 0)),
                float(min(cols[-1] + 1, size)), float(min(rows[-1] + 1, size)),
            )
            if boxes and box_iou_matrix(np.array([box]), np.array([b.xyxy() for b in boxes])).max() \
                    > config.max_overlap_iou:
                continue
            image += peak * values
            boxes.append(GroundTruthBox(*box, class_id))
            placed = True
            break
        if not placed:
            warnings.warn(f"could not place a {spec.name} after {config.max_tries} tries; skipped",
                          RuntimeWarning, stacklevel=2)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Tensor(image.reshape(1, 1, size, size)), boxes


@dataclass
class Sample:
    image_id: str
    image: np.ndarray                       # [C, S, S] float32
    boxes: list[GroundTruthBox] = field(default_factory=list)

    def targets(self) -> tuple[np.ndarray, np.ndarray]:
        b = np.array([x.xyxy() for x in self.boxes], dtype=np.float64).reshape(-1, 4)
        labels = np.array([x.class_id for x in self.boxes], dtype=np.int64)
        return b, labels


def generate_dataset(config: SceneConfig, count: int, start: int = 0, prefix: str = "") -> list[Sample]:
    samples = []
    for index in range(start, start + count):
        image, boxes = synth_scene(config, scene_rng(config.seed, index))
        samples.append(Sample(f"{prefix}{index:06d}", image.data[0], boxes))
    return samples


def augment(sample: Sample, rng: np.random.Generator, flip_prob: float = 0.5,
            gain: tuple[float, float] = (0.9, 1.1), offset: tuple[float, float] = (-0.05, 0.05)) -> Sample:
    """Random horizontal flip and intensity gain/offset jitter."""
    image = sample.image
    boxes = sample.boxes
    if rng.random() < flip_prob:
        width = image.shape[-1]
        image = image[..., ::-1]
        boxes = [GroundTruthBox(width - b.x2, b.y1, width - b.x1, b.y2, b.class_id) for b in boxes]
    image = np.clip(image * rng.uniform(*gain) + rng.uniform(*offset), 0.0, 1.0).astype(np.float32)
    return Sample(sample.image_id, np.ascontiguousarray(image), list(boxes))


# -- text formats -----------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".9g")


def format_annotation(image_id: str, box: GroundTruthBox) -> str:
    return " ".join([image_id, str(box.class_id)] + [_fmt(v) for v in box.xyxy()])


def format_prediction(image_id: str, det: DetectionBox) -> str:
    return " ".join([image_id, str(det.class_id)] + [_fmt(v) for v in det.xyxy()] + [_fmt(det.confidence)])


def write_annotations(path: str | Path, items: Iterable[tuple[str, GroundTruthBox]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, box in items:
            fh.write(format_annotation(image_id, box) + "\n")


def write_predictions(path: str | Path, items: Iterable[tuple[str, DetectionBox]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, det in items:
            fh.write(format_prediction(image_id, det) + "\n")


def _parse_lines(path: str | Path, fields_expected: int):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != fields_expected:
                raise InvalidInputError(
                    f"{path}:{lineno}: expected {fields_expected} fields, got {len(parts)}"
                )
            try:
                yield parts[0], int(parts[1]), [float(v) for v in parts[2:]]
            except ValueError as exc:
                raise InvalidInputError(f"{path}:{lineno}: {exc}") from None


def read_annotations(path: str | Path) -> dict[str, list[GroundTruthBox]]:
    out: dict[str, list[GroundTruthBox]] = defaultdict(list)
    for image_id, cls, vals in _parse_lines(path, 6):
        out[image_id].append(GroundTruthBox(*vals, cls))
    return dict(out)


def read_predictions(path: str | Path) -> dict[str, list[DetectionBox]]:
    out: dict[str, list[DetectionBox]] = defaultdict(list)
    for image_id, cls, vals in _parse_lines(path, 7):
        out[image_id].append(DetectionBox(*vals[:4], cls, vals[4]))
    return dict(out)


def write_dataset(root: str | Path, samples: list[Sample], class_names: list[str]) -> None:
    """``root/images/<id>.crtt``, ``root/annotations.txt``, ``root/classes.txt``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    for s in samples:
        dump_tensor(root / "images" / f"{s.image_id}.crtt", s.image)
    write_annotations(root / "annotations.txt", ((s.image_id, b) for s in samples for b in s.boxes))
    (root / "classes.txt").write_text("".join(f"{n}\n" for n in class_names), encoding="utf-8")


def read_images(root: str | Path) -> dict[str, np.ndarray]:
    folder = Path(root) / "images" if (Path(root) / "images").is_dir() else Path(root)
    return {p.stem: load_tensor(p) for p in sorted(folder.glob("*.crtt"))}


def read_dataset(root: str | Path) -> tuple[list[Sample], list[str]]:
    root = Path(root)
    images = read_images(root)
    ann_path = root / "annotations.txt"
    anns = read_annotations(ann_path) if ann_path.exists() else {}
    classes_path = root / "classes.txt"
    names = classes_path.read_text(encoding="utf-8").split() if classes_path.exists() else []
    samples = [Sample(k, v, anns.get(k, [])) for k, v in images.items()]
    return samples, names
