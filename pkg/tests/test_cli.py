import numpy as np
import pytest

from crtyolo.cli import main, parse_config_file
from crtyolo.data import read_annotations, read_predictions


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def test_unknown_flag_exits_1_with_usage(capsys):
    code, _, err = run(["train", "--bogus"], capsys)
    assert code == 1 and "usage:" in err


def test_missing_subcommand(capsys):
    code, _, err = run([], capsys)
    assert code == 1 and "usage:" in err


def test_synth_then_perfect_eval(tmp_path, capsys):
    code, out, _ = run(["synth", "--out-dir", str(tmp_path / "ds"), "--count", "5", "--seed", "2"], capsys)
    assert code == 0 and "wrote 5 images" in out
    gts = read_annotations(tmp_path / "ds" / "annotations.txt")
    lines = [f"{img} {b.class_id} {b.x1} {b.y1} {b.x2} {b.y2} 0.9" for img, bs in gts.items() for b in bs]
    (tmp_path / "pred.txt").write_text("\n".join(lines) + "\n")
    code, out, _ = run(["eval", "--pred", str(tmp_path / "pred.txt"),
                        "--gt", str(tmp_path / "ds" / "annotations.txt")], capsys)
    assert code == 0
    assert "mAP50 = 1.000000" in out and "hot-blob" in out


def test_eval_missing_file_exits_1(tmp_path, capsys):
    code, _, err = run(["eval", "--pred", str(tmp_path / "none.txt"), "--gt", str(tmp_path / "x.txt")], capsys)
    assert code == 1 and "error" in err


def test_train_and_infer(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("epochs = 1\ntrain_images = 4\neval_images = 2\nbatch_size = 2  # small\n"
                   "model.widths = (8, 8, 16)\nmodel.neck_width = 8\nmodel.ema_groups = 4\n")
    code, out, _ = run(["train", "--config", str(cfg), "--out-dir", str(tmp_path / "run"), "--no-lvc",
                        "--quiet"], capsys)
    assert code == 0 and (tmp_path / "run" / "last.crtc").exists()
    run(["synth", "--out-dir", str(tmp_path / "imgs"), "--count", "2"], capsys)
    code, out, _ = run(["infer", "--checkpoint", str(tmp_path / "run" / "last.crtc"), "--images",
                        str(tmp_path / "imgs"), "--output", str(tmp_path / "p.txt"), "--conf", "0.0"], capsys)
    assert code == 0
    preds = read_predictions(tmp_path / "p.txt")
    assert set(preds) <= {"000000", "000001"}


def test_train_rejects_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rate = 3\n")
    code, _, err = run(["train", "--config", str(cfg)], capsys)
    assert code == 1 and "learning_rate" in err


def test_train_invalid_value_exits_1(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("resolution = 100\n")
    code, _, _ = run(["train", "--config", str(cfg), "--out-dir", str(tmp_path)], capsys)
    assert code == 1


def test_infer_bad_checkpoint_exits_1(tmp_path, capsys):
    (tmp_path / "x.crtc").write_bytes(b"garbage")
    code, _, _ = run(["infer", "--checkpoint", str(tmp_path / "x.crtc"), "--images", str(tmp_path)], capsys)
    assert code == 1


def test_gradcheck_subset_passes(capsys):
    code, out, _ = run(["gradcheck", "--only", "ema", "softmax", "dfl_loss", "--seeds", "2"], capsys)
    assert code == 0
    assert "6/6 checks passed" in out


def test_gradcheck_unknown_block(capsys):
    code, _, _ = run(["gradcheck", "--only", "nope"], capsys)
    assert code == 1


def test_crt_threads_validation(monkeypatch, capsys):
    monkeypatch.setenv("CRT_THREADS", "zero")
    code, _, _ = run(["gradcheck", "--list"], capsys)
    assert code == 1
    monkeypatch.setenv("CRT_THREADS", "1")
    code, out, _ = run(["gradcheck", "--list"], capsys)
    assert code == 0 and "ema" in out.split()


def test_parse_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nlr = 0.02\nschedule = cosine\nmodel.widths = (8, 8, 8)\n\n")
    assert parse_config_file(p) == {"lr": 0.02, "schedule": "cosine", "model.widths": (8, 8, 8)}
