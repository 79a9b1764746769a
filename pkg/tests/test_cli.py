"""Command-line behavior: subcommands, config merging, exit codes."""

import filecmp
import os
from pathlib import Path

import numpy as np
import pytest

from thermoseg.cli import cli_main
from thermoseg.pgmio import read_pgm, write_pgm
from thermoseg.phantom import PhantomParams, generate_subject


def tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


def synth(out, tmp_path, frames=3, hw=32, patients=1, volunteers=1, seed=7):
    rc = cli_main(["synth", "--out", str(out), "--patients", str(patients),
                   "--volunteers", str(volunteers), "--seed", str(seed),
                   "--image-hw", str(hw), "--frames", str(frames)])
    assert rc == 0


def test_synth_is_byte_identical_across_runs(tmp_path):
    synth(tmp_path / "a", tmp_path)
    synth(tmp_path / "b", tmp_path)
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 0
    assert all(a[k] == b[k] for k in a)


def test_preprocess_single_file(tmp_path):
    sub = generate_subject(5, PhantomParams(image_hw=32, frames_per_subject=1),
                           "volunteer")
    src = tmp_path / "raw.pgm"
    write_pgm(src, sub.frames[0].pixels)
    dst = tmp_path / "clean.pgm"
    assert cli_main(["preprocess", "--input", str(src), "--out", str(dst)]) == 0
    out = read_pgm(dst)
    assert out.dtype == np.uint8
    assert out.shape == (32, 32)
    assert (out == 0).mean() > 0.3  # background suppressed


def test_gradcheck_exits_zero(capsys):
    assert cli_main(["gradcheck"]) == 0
    printed = capsys.readouterr().out
    assert "worst" in printed


def test_usage_errors_exit_2(tmp_path):
    assert cli_main([]) == 2                                  # no subcommand
    assert cli_main(["loocv", "--arch", "resnet", "--subjects-dir", "x",
                     "--out-dir", str(tmp_path)]) == 2        # unknown arch
    assert cli_main(["train", "--arch", "unet", "--pairs", "nope.txt",
                     "--out", str(tmp_path / "m.tseg")]) == 1  # missing file


def test_config_file_unknown_key_rejected(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("bogus=1\n")
    assert cli_main(["--config", str(cfg), "synth", "--out", str(tmp_path / "d")]) == 2
    missing = tmp_path / "missing.cfg"
    assert cli_main(["--config", str(missing), "synth",
                     "--out", str(tmp_path / "d")]) == 2


def test_config_precedence_defaults_file_flags(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\nseed=11\nimage-hw=16\nframes=2\n")
    out = tmp_path / "ds"
    assert cli_main(["--config", str(cfg), "synth", "--out", str(out),
                     "--seed", "22"]) == 0  # flag beats file
    printed = capsys.readouterr().out
    assert "seed=22" in printed       # flag won
    assert "image_hw=16" in printed   # file beat the default
    frame = read_pgm(out / "P1" / "frame_00.pgm")
    assert frame.shape == (16, 16)
    assert len(list((out / "P1").glob("frame_*.pgm"))) == 2


def test_train_subcommand_runs(tmp_path):
    synth(tmp_path / "ds", tmp_path, frames=2, hw=32)
    prep = tmp_path / "prep"
    assert cli_main(["preprocess", "--input", str(tmp_path / "ds" / "P1"),
                     "--out", str(prep)]) == 0
    pairs = tmp_path / "pairs.txt"
    mask = tmp_path / "ds" / "P1" / "mask.pgm"
    pairs.write_text("".join(f"{prep}/frame_0{i}.pgm {mask}\n" for i in range(2)))
    ckpt = tmp_path / "m.tseg"
    assert cli_main(["train", "--arch", "unet", "--pairs", str(pairs),
                     "--out", str(ckpt), "--history", str(tmp_path / "h.csv"),
                     "--epochs", "2", "--depth", "2", "--base-width", "6",
                     "--input-hw", "32"]) == 0
    assert ckpt.read_bytes().startswith(b"TSEG1")
    assert (tmp_path / "h.csv").read_text().startswith("epoch,loss,seconds")


def test_loocv_summary_recomputes_from_frame_csv(tmp_path):
    synth(tmp_path / "ds", tmp_path, frames=2, hw=32)
    out = tmp_path / "out"
    assert cli_main(["loocv", "--arch", "multiresunet", "--subjects-dir",
                     str(tmp_path / "ds"), "--out-dir", str(out), "--seed", "7",
                     "--depth", "2", "--base-width", "6", "--input-hw", "32",
                     "--epochs", "1", "--single-thread"]) == 0
    frames = (out / "frames.csv").read_text().strip().splitlines()
    assert frames[0] == "subject_id,kind,model,frame,tanimoto,iou"
    by_subject = {}
    for line in frames[1:]:
        sid, _, _, _, t, _ = line.split(",")
        by_subject.setdefault(sid, []).append(float(t))
    recomputed = np.mean([np.mean(v) for v in by_subject.values()])
    summary = (out / "summary.csv").read_text().strip().splitlines()
    mean_t = float(summary[1].split(",")[1])
    assert mean_t == pytest.approx(recomputed, abs=1e-6)
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == \
        ["multiresunet_P1.tseg", "multiresunet_V1.tseg"]


def test_report_is_byte_stable(tmp_path):
    synth(tmp_path / "ds", tmp_path, frames=2, hw=32)
    out = tmp_path / "out"
    assert cli_main(["loocv", "--arch", "cdcnn", "--subjects-dir",
                     str(tmp_path / "ds"), "--out-dir", str(out), "--seed", "1",
                     "--input-hw", "32", "--epochs", "1", "--single-thread"]) == 0
    r1, r2 = tmp_path / "r1", tmp_path / "r2"
    for rdir in (r1, r2):
        assert cli_main(["report", "--frames", str(out / "frames.csv"),
                         "--out-dir", str(rdir)]) == 0
    assert filecmp.cmp(r1 / "summary.csv", r2 / "summary.csv", shallow=False)
    assert filecmp.cmp(r1 / "per_subject.csv", r2 / "per_subject.csv", shallow=False)
