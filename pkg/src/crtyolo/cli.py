"""Command-line entry point: ``crtyolo {synth,train,eval,infer,gradcheck}``.

Exit codes: 0 success, 1 invalid arguments or inputs, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import ast
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import (SceneConfig, generate_dataset, read_annotations, read_dataset, read_images,
                   read_predictions, write_dataset, write_predictions)
from .detector.model import ModelConfig
from .errors import CrtError
from .metrics import evaluate

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
TOGGLES = ("ema", "evc", "mlp", "lvc", "gcr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_config_file(path: str | Path) -> dict[str, object]:
    """``key = value`` lines; values are Python literals or bare strings; ``#`` starts a comment."""
    out: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            out[key] = value
    return out


def _split_config(values: dict[str, object]) -> tuple[dict, dict, dict]:
    """Route keys to train / ``model.`` / ``scene.`` settings."""
    from .train import TrainConfig
    train_keys = TrainConfig.field_names()
    model_keys = {f.name for f in fields(ModelConfig)}
    scene_keys = {f.name for f in fields(SceneConfig)}
    train, model, scene = {}, {}, {}
    for key, value in values.items():
        if key.startswith("model.") and key[6:] in model_keys:
            model[key[6:]] = value
        elif key.startswith("scene.") and key[6:] in scene_keys:
            scene[key[6:]] = value
        elif key in train_keys:
            train[key] = value
        else:
            raise UsageError(f"unknown config key {key!r}")
    return train, model, scene


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--out-dir", help="output directory")

    parser = _Parser(prog="crtyolo", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--start", type=int, default=0, help="first scene index")
    p.add_argument("--prefix", default="")

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--data", help="training dataset directory (default: generate)")
    p.add_argument("--eval-data", help="held-out dataset directory (default: generate)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true", help="do not echo the metrics log")
    for name in TOGGLES:
        p.add_argument(f"--no-{name}", action="store_true", help=f"disable the {name.upper()} block")

    p = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    p.add_argument("--pred", required=True, help="predictions file")
    p.add_argument("--gt", required=True, help="annotations file")
    p.add_argument("--classes", help="class-name file, one per line")

    p = sub.add_parser("infer", parents=[common], help="run a checkpoint over images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True, help="directory of .crtt images (or a dataset root)")
    p.add_argument("--output", help="predictions file (default: <out-dir>/predictions.txt)")
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms-iou", type=float, default=0.65)
    p.add_argument("--max-det", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=16)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every block")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds per block")
    p.add_argument("--only", nargs="*", help="restrict to these block names")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--list", action="store_true", help="list block names and exit")
    return parser


def _out_dir(args, default: str = ".") -> Path:
    out = Path(args.out_dir or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(args) -> int:
    cfg = parse_config_file(args.config) if args.config else {}
    _, _, scene = _split_config({k if k.startswith("scene.") else f"scene.{k}": v for k, v in cfg.items()})
    if args.seed is not None:
        scene["seed"] = args.seed
    config = SceneConfig(**scene)
    if args.count < 0 or args.start < 0:
        raise UsageError("--count and --start must be non-negative")
    samples = generate_dataset(config, args.count, args.start, args.prefix)
    out = _out_dir(args)
    write_dataset(out, samples, config.class_names)
    print(f"wrote {len(samples)} images, {sum(len(s.boxes) for s in samples)} objects to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train
    values = parse_config_file(args.config) if args.config else {}
    train_kw, model_kw, scene_kw = _split_config(values)
    if args.seed is not None:
        train_kw["seed"] = args.seed
    if args.epochs is not None:
        train_kw["epochs"] = args.epochs
    for name in TOGGLES:
        if getattr(args, f"no_{name}"):
            train_kw[f"use_{name}"] = False
    config = TrainConfig(**train_kw)
    scene_kw.setdefault("seed", config.seed)
    scene_kw.setdefault("image_size", config.resolution)
    scene = SceneConfig(**scene_kw)

    train_samples = eval_samples = None
    if args.data:
        train_samples, names = read_dataset(args.data)
        if not train_samples:
            raise UsageError(f"no images found in {args.data}")
        if names and len(names) != scene.num_classes:
            raise UsageError(f"{args.data} has {len(names)} classes, scene config has {scene.num_classes}")
    if args.eval_data:
        eval_samples, _ = read_dataset(args.eval_data)
    model_cfg = ModelConfig.from_dict(model_kw) if model_kw else None
    out = _out_dir(args, "runs/train")
    result = train(config, scene, model_config=model_cfg, out_dir=out, train_samples=train_samples,
                   eval_samples=eval_samples, resume=args.resume,
                   log=None if args.quiet else print)
    if result.report is not None:
        print(result.report.to_table(), end="")
    print(f"checkpoint: {out / 'last.crtc'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    preds = read_predictions(args.pred)
    gts = read_annotations(args.gt)
    names = None
    classes = args.classes or (Path(args.gt).parent / "classes.txt")
    if Path(classes).exists():
        names = Path(classes).read_text(encoding="utf-8").split()
    report = evaluate(preds, gts, names)
    print(report.to_table(), end="")
    print(report.to_keyvalue(), end="")
    if args.out_dir:
        out = _out_dir(args)
        (out / "report.txt").write_text(report.to_table(), encoding="utf-8")
        (out / "report.kv").write_text(report.to_keyvalue(), encoding="utf-8")
    return EXIT_OK


def cmd_infer(args) -> int:
    from .train import load_model, predict
    model, _ = load_model(args.checkpoint)
    images = read_images(args.images)
    if not images:
        raise UsageError(f"no .crtt images in {args.images}")
    ids = list(images)
    dets = predict(model, np.stack([images[i] for i in ids]), args.batch_size, args.conf, args.nms_iou,
                   args.max_det)
    output = Path(args.output) if args.output else _out_dir(args) / "predictions.txt"
    write_predictions(output, ((i, d) for i, ds in zip(ids, dets) for d in ds))
    print(f"wrote {sum(len(d) for d in dets)} detections for {len(ids)} images to {output}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import all_cases, run_suite, summarize
    names = list(all_cases())
    if args.list:
        print("\n".join(names))
        return EXIT_OK
    if args.only:
        unknown = sorted(set(args.only) - set(names))
        if unknown:
            raise UsageError(f"unknown block(s): {', '.join(unknown)}")
        names = args.only
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    base = args.seed or 0
    results = run_suite(range(base, base + args.seeds), names, args.tol)
    lines = summarize(results)
    print("\n".join(lines))
    worst = max(results, key=lambda r: r.report.max_rel_err)
    failed = [r for r in results if not r.passed]
    print(f"worst: {worst.name} seed={worst.seed} max_rel_err={worst.report.max_rel_err:.3e}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed (tol {args.tol:g})")
    if args.out_dir:
        (_out_dir(args) / "gradcheck.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK if not failed else EXIT_RUNTIME


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck}


def _thread_limit():
    value = os.environ.get("CRT_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"CRT_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"CRT_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with _thread_limit():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    except (ValueError, FileNotFoundError, IsADirectoryError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CrtError, RuntimeError, FloatingPointError, OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
