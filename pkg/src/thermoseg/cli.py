"""Command-line entry point tying the whole pipeline together.

Subcommands: synth, preprocess, train, loocv, report, gradcheck.  Settings
merge as defaults < config file (key=value lines) < command-line flags; the
effective configuration is printed at startup for provenance.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import nets, evalkit
from .irprep import PreprocessConfig, preprocess_pipeline
from .nets import NetConfig, build_network, save_checkpoint
from .pgmio import read_pgm, write_pgm
from .phantom import PhantomParams, generate_dataset, read_dataset, write_dataset
from .rng import Rng
from .tensor import (PaddingMode, Tensor, add, concat_channels, conv2d,
                     grad_check, linear, maxpool2, mul, relu, sigmoid, tsum,
                     upsample2)
from .trainer import TrainConfig, bce_loss, train


class CliError(Exception):
    """Usage-level failure -> exit code 2."""


def _parse_crop(text):
    parts = text.split(",")
    if len(parts) != 4:
        raise argparse.ArgumentTypeError("crop must be x0,y0,x1,y1")
    return tuple(int(v) for v in parts)


def _add_net_flags(p):
    p.add_argument("--depth", type=int, default=4)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--input-hw", type=int, default=64)


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch-size", type=int, default=3)
    p.add_argument("--learning-rate", type=float, default=1e-3)


def _add_prep_flags(p):
    p.add_argument("--smooth-kernel", type=int, default=None,
                   help="odd box-filter size (default: scaled from image height)")
    p.add_argument("--compensation", type=int, default=0,
                   help="signed offset added to the Otsu threshold")
    p.add_argument("--crop", type=_parse_crop, default=None, metavar="X0,Y0,X1,Y1")
    p.add_argument("--use-smoothed", action="store_true",
                   help="remap the smoothed frame instead of the raw one")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="thermoseg",
                                     description="thermal breast segmentation laboratory")
    parser.add_argument("--config", type=str, default=None,
                        help="key=value settings file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=5)
    p.add_argument("--volunteers", type=int, default=5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--image-hw", type=int, default=64)
    p.add_argument("--frames", type=int, default=15)
    p.add_argument("--noise-sigma", type=float, default=120.0)
    p.add_argument("--cooldown-rate", type=float, default=0.012)

    p = sub.add_parser("preprocess", help="raw 16-bit PGM -> clean 8-bit PGM")
    p.add_argument("--input", required=True, help="PGM file or directory of PGMs")
    p.add_argument("--out", required=True, help="output file or directory")
    _add_prep_flags(p)

    p = sub.add_parser("train", help="train one model on an explicit pair list")
    p.add_argument("--arch", required=True, choices=nets.ARCHS)
    p.add_argument("--pairs", required=True,
                   help="text file: one 'image.pgm mask.pgm' pair per line")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--history", default=None, help="training-history CSV path")
    p.add_argument("--seed", type=int, default=0)
    _add_net_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("loocv", help="leave-one-subject-out cross-validation")
    p.add_argument("--arch", required=True,
                   help="comma-separated list drawn from " + ",".join(nets.ARCHS))
    p.add_argument("--subjects-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="parallel folds")
    p.add_argument("--single-thread", action="store_true",
                   help="force sequential folds (bit-reproducible golden mode)")
    _add_net_flags(p)
    _add_train_flags(p)
    _add_prep_flags(p)

    p = sub.add_parser("report", help="aggregate frame CSVs into summary tables")
    p.add_argument("--frames", nargs="+", required=True, help="frame-score CSV files")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _apply_config_file(parser, argv):
    """Install config-file values as parser defaults so flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config", type=str, default=None)
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.exists():
        raise CliError(f"config file not found: {path}")
    subcommand = next((a for a in argv if not a.startswith("-") and a != known.config), None)
    subparsers = next(a for a in parser._actions
                      if isinstance(a, argparse._SubParsersAction))
    target = subparsers.choices.get(subcommand)
    if target is None:
        raise CliError(f"config file requires a known subcommand, got {subcommand!r}")
    actions = {a.dest: a for a in target._actions}
    overrides = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{lineno}: expected key=value, got {line!r}")
        dest = key.strip().replace("-", "_")
        if dest not in actions or dest == "help":
            raise CliError(f"{path}:{lineno}: unknown setting {key.strip()!r}")
        action = actions[dest]
        value = value.strip()
        if isinstance(action, argparse._StoreTrueAction):
            overrides[dest] = value.lower() in ("1", "true", "yes")
        elif action.type is not None:
            overrides[dest] = action.type(value)
        else:
            overrides[dest] = value
    target.set_defaults(**overrides)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    params = PhantomParams(image_hw=args.image_hw, frames_per_subject=args.frames,
                           noise_sigma=args.noise_sigma, cooldown_rate=args.cooldown_rate)
    subjects = generate_dataset(args.patients, args.volunteers, args.seed, params)
    write_dataset(subjects, args.out)
    print(f"wrote {len(subjects)} subjects "
          f"({sum(len(s.frames) for s in subjects)} frames) to {args.out}")
    return 0


def _prep_cfg(args) -> PreprocessConfig:
    return PreprocessConfig(smooth_kernel=args.smooth_kernel,
                            compensation=args.compensation,
                            crop=args.crop, use_smoothed=args.use_smoothed)


def _cmd_preprocess(args) -> int:
    cfg = _prep_cfg(args)
    src = Path(args.input)
    if src.is_dir():
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        count = 0
        for path in sorted(src.glob("*.pgm")):
            result = preprocess_pipeline(read_pgm(path).astype(np.uint16), cfg)
            write_pgm(out_dir / path.name, result.frame.pixels)
            count += 1
        if not count:
            raise CliError(f"no PGM files in {src}")
        print(f"preprocessed {count} frames into {out_dir}")
    else:
        result = preprocess_pipeline(read_pgm(src).astype(np.uint16), cfg)
        write_pgm(args.out, result.frame.pixels)
        print(f"threshold={result.threshold} degenerate={result.degenerate} -> {args.out}")
    return 0


def _cmd_train(args) -> int:
    pairs = []
    for lineno, line in enumerate(Path(args.pairs).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise CliError(f"{args.pairs}:{lineno}: expected 'image.pgm mask.pgm'")
        pairs.append((read_pgm(parts[0]), read_pgm(parts[1])))
    if not pairs:
        raise CliError(f"no pairs listed in {args.pairs}")
    cfg = NetConfig(arch=args.arch, depth=args.depth, base_width=args.base_width,
                    input_hw=args.input_hw, seed=args.seed)
    graph = build_network(cfg)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, seed=args.seed)
    history = train(graph, pairs, tcfg)
    save_checkpoint(graph, args.out)
    if args.history:
        history.save_csv(args.history)
    print(f"final loss {history.losses[-1]:.6f} after {len(history.losses)} epochs; "
          f"checkpoint -> {args.out}")
    return 0


def _cmd_loocv(args) -> int:
    archs = [a.strip() for a in args.arch.split(",") if a.strip()]
    for arch in archs:
        if arch not in nets.ARCHS:
            raise CliError(f"unknown arch {arch!r}")
    subjects = read_dataset(args.subjects_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = 1 if args.single_thread else max(args.jobs, 1)
    net_cfg = NetConfig(depth=args.depth, base_width=args.base_width,
                        input_hw=args.input_hw)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                            learning_rate=args.learning_rate)
    rows = []
    for arch in archs:
        rows.extend(evalkit.run_loocv(subjects, arch, args.seed, net_cfg, train_cfg,
                                      prep_cfg=_prep_cfg(args),
                                      checkpoint_dir=out_dir / "checkpoints",
                                      jobs=jobs))
    report = evalkit.aggregate(rows)
    evalkit.write_frame_csv(rows, out_dir / "frames.csv")
    evalkit.write_summary_csv(report, out_dir / "summary.csv")
    evalkit.write_subject_csv(report, out_dir / "per_subject.csv")
    _print_summary(report)
    return 0


def _print_summary(report):
    models = sorted(report.overall)
    print("Model               " + "".join(f"{m:>16}" for m in models))
    print("Accuracy (Tanimoto) " + "".join(
        f"{report.overall[m]['tanimoto'] * 100:>15.2f}%" for m in models))
    print("IoU at 0.5          " + "".join(
        f"{report.overall[m]['iou'] * 100:>15.2f}%" for m in models))


def _cmd_report(args) -> int:
    rows = []
    for path in args.frames:
        rows.extend(evalkit.read_frame_csv(path))
    if not rows:
        raise CliError("no score rows found")
    report = evalkit.aggregate(rows)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evalkit.write_summary_csv(report, out_dir / "summary.csv")
    evalkit.write_subject_csv(report, out_dir / "per_subject.csv")
    _print_summary(report)
    return 0


def _cmd_gradcheck(args) -> int:
    rng = Rng(args.seed)

    def sample(shape):
        # keep values away from the relu kink at 0
        return Tensor(np.sign(rng.normal(shape)) * (0.1 + np.abs(rng.normal(shape))),
                      requires_grad=True)

    w3 = Tensor(rng.normal((3, 2, 3, 3)), requires_grad=True)
    b3 = Tensor(rng.normal(3), requires_grad=True)
    lw = Tensor(rng.normal((8, 4)), requires_grad=True)
    lb = Tensor(rng.normal(4), requires_grad=True)
    fixed = Tensor(rng.normal((1, 2, 4, 4)))
    checks = [
        ("conv2d/same", lambda x: tsum(conv2d(x, w3, b3)), (1, 2, 5, 5)),
        ("conv2d/valid", lambda x: tsum(conv2d(x, w3, b3, PaddingMode.VALID)), (1, 2, 5, 5)),
        ("conv2d/kernel", lambda w: tsum(conv2d(fixed, w, b3)), w3),
        ("conv2d/bias", lambda b: tsum(conv2d(fixed, w3, b)), b3),
        ("maxpool2", lambda x: tsum(maxpool2(x)), (1, 2, 4, 4)),
        ("upsample2", lambda x: tsum(upsample2(x)), (1, 2, 3, 3)),
        ("concat", lambda x: tsum(concat_channels(x, fixed)), (1, 3, 4, 4)),
        ("add", lambda x: tsum(add(x, mul(x, x))), (1, 2, 4, 4)),
        ("relu", lambda x: tsum(relu(x)), (2, 2, 3, 3)),
        ("sigmoid", lambda x: tsum(sigmoid(x)), (2, 1, 3, 3)),
        ("linear", lambda x: tsum(linear(x, lw, lb)), (3, 8)),
        ("conv-relu-chain", lambda x: tsum(relu(conv2d(x, w3, b3))), (1, 2, 6, 6)),
        ("bce", lambda x: bce_loss(sigmoid(x), (np.arange(16).reshape(1, 1, 4, 4) % 2)
                                   .astype(float)), (1, 1, 4, 4)),
    ]
    worst = 0.0
    for name, fn, arg in checks:
        x = sample(arg) if isinstance(arg, tuple) else arg
        err = grad_check(fn, x, eps=1e-3)
        worst = max(worst, err)
        print(f"{name:18s} max rel err {err:.3e}")
    print(f"worst {worst:.3e} (tolerance {args.tolerance:g})")
    return 0 if worst < args.tolerance else 1


_COMMANDS = {"synth": _cmd_synth, "preprocess": _cmd_preprocess, "train": _cmd_train,
             "loocv": _cmd_loocv, "report": _cmd_report, "gradcheck": _cmd_gradcheck}


def _print_provenance(args):
    settings = {k: v for k, v in sorted(vars(args).items()) if k != "command"}
    rendered = " ".join(f"{k}={v}" for k, v in settings.items())
    print(f"[thermoseg {args.command}] {rendered}")


def cli_main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # argparse reports usage errors by exiting
        return int(exc.code or 0)
    _print_provenance(args)
    try:
        return _COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
