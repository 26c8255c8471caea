"""SGD with momentum, the training loop, checkpointing and held-out evaluation.

All randomness is derived from ``seed`` and the iteration/epoch index, so a
run resumed from a checkpoint at step ``k`` continues exactly as the
uninterrupted run would.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .data import SceneConfig, Sample, augment, generate_dataset
from .detector.decode import decode_predictions
from .detector.loss import DetectionLoss
from .detector.model import CRTYolo, ModelConfig
from .errors import CheckpointError, InvalidArgumentError, TrainingError
from .metrics import EvalReport, evaluate
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad

OPTIM_PREFIX = "optim."


@dataclass
class TrainConfig:
    batch_size: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lr: float = 1e-2
    epochs: int = 30
    resolution: int = 96
    seed: int = 0
    train_images: int = 200
    eval_images: int = 50
    schedule: str = "constant"          # or "cosine"
    warmup_iters: int = 0
    grad_clip: float = 0.0              # global-norm clip; 0 disables
    augment: bool = True
    eval_every: int = 0                 # epochs between evaluations; 0 = only at the end
    eval_conf: float = 0.01
    eval_max_det: int = 100
    checkpoint_every: int = 0           # epochs between checkpoints; 0 = only at the end
    use_ema: bool = True
    use_evc: bool = True
    use_mlp: bool = True
    use_lvc: bool = True
    use_gcr: bool = True

    def __post_init__(self):
        for name in ("batch_size", "epochs", "resolution", "train_images"):
            if int(getattr(self, name)) <= 0:
                raise InvalidArgumentError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("momentum", "weight_decay", "lr", "warmup_iters", "grad_clip", "eval_images",
                     "eval_every", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.resolution % 32:
            raise InvalidArgumentError(f"resolution must be divisible by 32, got {self.resolution}")
        if self.schedule not in ("constant", "cosine"):
            raise InvalidArgumentError(f"unknown schedule {self.schedule!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        """Full-size recipe: batch 4, 640x640, 300 epochs."""
        base = dict(batch_size=4, resolution=640, epochs=300)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def toggles(self) -> dict[str, bool]:
        return {k: getattr(self, k) for k in ("use_ema", "use_evc", "use_mlp", "use_lvc", "use_gcr")}


def sgd_step(params: list[np.ndarray], grads: list[np.ndarray | None], velocities: list[np.ndarray],
             lr: float, momentum: float, weight_decay: float) -> None:
    """In place: ``v = momentum*v + g + weight_decay*p``; ``p -= lr*v``."""
    for p, g, v in zip(params, grads, velocities):
        step = weight_decay * p
        if g is not None:
            step = step + g
        v *= momentum
        v += step.astype(v.dtype)
        p -= (lr * v).astype(p.dtype)


class SGD:
    def __init__(self, named_params: list[tuple[str, Tensor]], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.named_params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr: float) -> None:
        sgd_step([p.data for _, p in self.named_params], [p.grad for _, p in self.named_params],
                 [self.velocity[name] for name, _ in self.named_params], lr, self.momentum,
                 self.weight_decay)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {OPTIM_PREFIX + k: v for k, v in self.velocity.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, v in self.velocity.items():
            key = OPTIM_PREFIX + name
            if key in state:
                v[...] = state[key]


def learning_rate(config: TrainConfig, iteration: int, total: int) -> float:
    lr = config.lr
    if config.schedule == "cosine" and total > 1:
        lr = 0.5 * config.lr * (1 + math.cos(math.pi * iteration / total))
    if config.warmup_iters and iteration < config.warmup_iters:
        lr *= (iteration + 1) / config.warmup_iters
    return lr


def clip_gradients(params: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * np.asarray(scale, dtype=p.grad.dtype)
    return total


def collate(samples: list[Sample]) -> tuple[Tensor, list[tuple[np.ndarray, np.ndarray]]]:
    images = np.stack([s.image for s in samples]).astype(np.float32)
    return Tensor(images), [s.targets() for s in samples]


def predict(model: CRTYolo, images: np.ndarray, batch_size: int = 16, conf_threshold: float = 0.25,
            nms_iou: float = 0.65, max_det: int = 300):
    """Detections per image for an ``[N, C, S, S]`` array, model in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                chunk = Tensor(np.asarray(images[i:i + batch_size], dtype=np.float32))
                out.extend(decode_predictions(model(chunk), conf_threshold, nms_iou, max_det,
                                              image_size=chunk.shape[2:]))
    finally:
        model.train(was_training)
    return out


def evaluate_model(model: CRTYolo, samples: list[Sample], class_names, conf_threshold: float = 0.01,
                   max_det: int = 100) -> EvalReport:
    dets = predict(model, np.stack([s.image for s in samples]), conf_threshold=conf_threshold,
                   max_det=max_det)
    preds = {s.image_id: d for s, d in zip(samples, dets)}
    gts = {s.image_id: s.boxes for s in samples}
    return evaluate(preds, gts, class_names)


def model_config_for(train_config: TrainConfig, scene_config: SceneConfig,
                     base: ModelConfig | None = None) -> ModelConfig:
    cfg = asdict(base or ModelConfig())
    cfg.update(train_config.toggles())
    cfg["num_classes"] = scene_config.num_classes
    if not (cfg["use_mlp"] or cfg["use_lvc"]):
        cfg["use_evc"] = False
    return ModelConfig.from_dict(cfg)


def save_training_checkpoint(path, model: CRTYolo, optimizer: SGD | None, step: int) -> None:
    entries = dict(model.state_dict())
    if optimizer is not None:
        entries.update(optimizer.state_dict())
    save_checkpoint(path, model.config.to_json(), model.config.digest(), step, entries)


def load_model(path) -> tuple[CRTYolo, "object"]:
    """Rebuild a model from a checkpoint; returns ``(model, checkpoint)``."""
    import json
    ckpt = load_checkpoint(path)
    config = ModelConfig.from_dict(json.loads(ckpt.config_json))
    if config.digest() != ckpt.config_hash:
        raise CheckpointError(f"{path}: config hash does not match the stored config")
    model = CRTYolo(config)
    model.load_state_dict({k: v for k, v in ckpt.entries.items() if not k.startswith(OPTIM_PREFIX)})
    return model, ckpt


def _fmt(x: float) -> str:
    return format(float(x), ".8g")


@dataclass
class TrainResult:
    model: CRTYolo
    step: int
    log_lines: list[str] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    report: EvalReport | None = None


def train(config: TrainConfig, scene_config: SceneConfig | None = None, *,
          model_config: ModelConfig | None = None, out_dir: str | Path | None = None,
          train_samples: list[Sample] | None = None, eval_samples: list[Sample] | None = None,
          resume: str | Path | None = None, max_iterations: int | None = None,
          log: Callable[[str], None] | None = None) -> TrainResult:
    """Train a detector on synthetic scenes.

    ``train_samples``/``eval_samples`` override the generated splits (the
    held-out split uses scene indices after the training ones). With
    ``out_dir`` set, writes ``metrics.log``, ``last.crtc`` and per-epoch
    checkpoints when ``checkpoint_every`` is set.
    """
    scene_config = scene_config or SceneConfig(image_size=config.resolution, seed=config.seed)
    if scene_config.image_size != config.resolution:
        raise InvalidArgumentError(
            f"scene size {scene_config.image_size} differs from training resolution {config.resolution}")
    if train_samples is None:
        train_samples = generate_dataset(scene_config, config.train_images, prefix="train")
    if eval_samples is None and config.eval_images:
        eval_samples = generate_dataset(scene_config, config.eval_images, start=config.train_images,
                                        prefix="eval")
    class_names = scene_config.class_names

    mcfg = model_config_for(config, scene_config, model_config)
    model = CRTYolo(mcfg, seed=config.seed)
    model.train()
    optimizer = SGD(list(model.named_parameters()), config.momentum, config.weight_decay)
    criterion = DetectionLoss(mcfg.num_classes, mcfg.reg_max)

    start = 0
    if resume is not None:
        ckpt = load_checkpoint(resume)
        if ckpt.config_hash != mcfg.digest():
            raise CheckpointError(f"{resume}: checkpoint was written for a different model config")
        model.load_state_dict({k: v for k, v in ckpt.entries.items() if not k.startswith(OPTIM_PREFIX)})
        optimizer.load_state_dict(ckpt.entries)
        start = ckpt.step

    n = len(train_samples)
    per_epoch = math.ceil(n / config.batch_size)
    total = per_epoch * config.epochs
    stop = total if max_iterations is None else min(total, start + max_iterations)

    out = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_fh = open(out / "metrics.log", "a" if resume is not None else "w", encoding="utf-8")
    result = TrainResult(model, start)

    def emit(line: str) -> None:
        result.log_lines.append(line)
        if log_fh is not None:
            log_fh.write(line + "\n")
            log_fh.flush()
        if log is not None:
            log(line)

    params = model.parameters()
    order = None
    try:
        for it in range(start, stop):
            epoch, pos = divmod(it, per_epoch)
            if pos == 0 or order is None:
                order = np.random.default_rng([config.seed, 1, epoch]).permutation(n)
            idx = order[pos * config.batch_size:(pos + 1) * config.batch_size]
            aug_rng = np.random.default_rng([config.seed, 2, it])
            batch = [augment(train_samples[i], aug_rng) if config.augment else train_samples[i] for i in idx]
            images, targets = collate(batch)
            model.set_rng(np.random.default_rng([config.seed, 3, it]))

            heads = model(images)
            losses = criterion(heads, targets)
            for name, value in (("box", losses.box), ("cls", losses.cls), ("dfl", losses.dfl),
                                ("total", float(losses.total.data))):
                if not np.isfinite(value):
                    raise TrainingError(f"non-finite {name} loss ({value}) at iteration {it}")
            model.zero_grad()
            losses.total.backward()
            gnorm = clip_gradients(params, config.grad_clip)
            if not np.isfinite(gnorm):
                raise TrainingError(f"non-finite gradient norm at iteration {it}")
            lr = learning_rate(config, it, total)
            optimizer.step(lr)

            total_loss = float(losses.total.data)
            result.losses.append(total_loss)
            emit(f"iter={it} epoch={epoch} lr={_fmt(lr)} loss={_fmt(total_loss)} box={_fmt(losses.box)} "
                 f"cls={_fmt(losses.cls)} dfl={_fmt(losses.dfl)} fg={losses.num_foreground}")
            result.step = it + 1

            end_of_epoch = pos == per_epoch - 1
            if end_of_epoch and eval_samples and config.eval_every and (epoch + 1) % config.eval_every == 0 \
                    and it + 1 < total:
                report = evaluate_model(model, eval_samples, class_names, config.eval_conf, config.eval_max_det)
                emit(f"eval epoch={epoch} mAP50={_fmt(report.mAP50)} mAP75={_fmt(report.mAP75)} "
                     f"mAP={_fmt(report.mAP)}")
            if out is not None and end_of_epoch and config.checkpoint_every \
                    and (epoch + 1) % config.checkpoint_every == 0:
                save_training_checkpoint(out / f"epoch{epoch + 1:04d}.crtc", model, optimizer, it + 1)

        if eval_samples and result.step == total:
            result.report = evaluate_model(model, eval_samples, class_names, config.eval_conf,
                                           config.eval_max_det)
            r = result.report
            emit(f"eval final mAP50={_fmt(r.mAP50)} mAP75={_fmt(r.mAP75)} mAP={_fmt(r.mAP)}")
        if out is not None:
            save_training_checkpoint(out / "last.crtc", model, optimizer, result.step)
            if result.report is not None:
                (out / "eval.txt").write_text(result.report.to_keyvalue(), encoding="utf-8")
    finally:
        if log_fh is not None:
            log_fh.close()
    return result
