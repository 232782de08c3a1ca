"""Command-line entry point: ``voxelseg <subcommand> [flags]``.

Exit codes: 0 success, 1 user/config error, 2 data/format error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import losses_metrics as lm
from . import nifti_io, pipeline, plotting, synth, volume_prep
from .errors import ConfigError, DataError, EmptyDataset, VoxelSegError

log = logging.getLogger("voxelseg")

SEED_ENV = "VOXELSEG_SEED"


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad usage; here 2 means bad data, so map usage errors to 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag values (keys as flag names); explicit flags win")
    common.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")

    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="voxelseg", description="Volumetric brain-tumor segmentation toolkit.", formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("inspect", parents=[common], formatter_class=fmt, help="print a NIfTI header summary")
    p.add_argument("path", help="a .nii or .nii.gz file")

    p = sub.add_parser("synth", parents=[common], formatter_class=fmt, help="generate a synthetic case tree")
    p.add_argument("--out-dir", required=True, help="directory to write case folders into")
    p.add_argument("--n-cases", type=_positive_int, default=8, help="number of cases")
    p.add_argument("--size", type=_positive_int, nargs=3, default=list(synth.DEFAULT_SIZE), metavar=("X", "Y", "Z"), help="volume shape")
    p.add_argument("--seed", type=int, default=seed, help=f"generator seed (default from {SEED_ENV})")
    p.add_argument("--gzip", action=argparse.BooleanOptionalAction, default=True, help="write .nii.gz files")

    p = sub.add_parser("preprocess", parents=[common], formatter_class=fmt, help="normalize, crop, filter and split a case tree")
    p.add_argument("--in-dir", required=True, help="directory of case folders")
    p.add_argument("--out-dir", required=True, help="directory for sample archives and manifest.json")
    p.add_argument(
        "--crop-window",
        type=int,
        nargs=6,
        default=[v for pair in volume_prep.DEFAULT_WINDOW for v in pair],
        metavar=("X0", "X1", "Y0", "Y1", "Z0", "Z1"),
        help="half-open crop bounds per axis",
    )
    p.add_argument("--threshold", type=float, default=volume_prep.DEFAULT_THRESHOLD, help="minimum annotated fraction to keep a case")
    p.add_argument("--split", type=float, default=volume_prep.DEFAULT_SPLIT, help="training fraction")
    p.add_argument("--seed", type=int, default=seed, help=f"split seed (default from {SEED_ENV})")

    p = sub.add_parser("train", parents=[common], formatter_class=fmt, help="train a U-Net on a preprocessed dataset")
    p.add_argument("--data-dir", required=True, help="directory holding manifest.json and sample archives")
    p.add_argument("--out-dir", default="run", help="directory for checkpoints and history.csv")
    p.add_argument("--epochs", type=int, default=100, help="training epochs")
    p.add_argument("--batch-size", type=int, default=2, help="samples per optimizer step")
    p.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    p.add_argument("--gamma", type=float, default=2.0, help="focal loss focusing parameter")
    p.add_argument("--focal-weight", type=float, default=1.0, help="weight of the focal term in the total loss")
    p.add_argument("--base-filters", type=int, default=32, help="filters at the top level; doubles per level")
    p.add_argument("--checkpoint-every", type=int, default=10, help="epochs between checkpoints")
    p.add_argument("--seed", type=int, default=seed, help=f"initialization and shuffling seed (default from {SEED_ENV})")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--max-steps", type=_positive_int, help="stop after this many optimizer steps")

    p = sub.add_parser("predict", parents=[common], formatter_class=fmt, help="write a predicted label mask")
    p.add_argument("--checkpoint", required=True, help="checkpoint archive written by train")
    p.add_argument("--input", required=True, help="a raw case folder or a preprocessed .npz sample")
    p.add_argument("--out", required=True, help="output mask path (.nii or .nii.gz)")

    p = sub.add_parser("evaluate", parents=[common], formatter_class=fmt, help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True, help="checkpoint archive written by train")
    p.add_argument("--manifest", required=True, help="manifest.json written by preprocess")
    p.add_argument("--split", choices=("val", "train", "all"), default="val", help="which manifest files to score")
    p.add_argument("--iou-threshold", type=float, default=lm.IOU_THRESHOLD, help="probability threshold for IoU")
    p.add_argument("--exclude-background", action="store_true", help="average IoU over tumor classes only")
    p.add_argument("--out", default="metrics.json", help="metrics JSON path")

    p = sub.add_parser("plot", parents=[common], formatter_class=fmt, help="render accuracy/loss/IoU SVG charts")
    p.add_argument("--history", required=True, help="history.csv written by train")
    p.add_argument("--out-dir", required=True, help="directory for accuracy.svg, loss.svg and iou.svg")
    return parser


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    # find --config and the subcommand first: required flags may live in the file
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    early, _ = pre.parse_known_args(argv)
    subparsers = parser._subparsers._group_actions[0].choices
    if not early.config or early.command not in subparsers:
        return parser.parse_args(argv)
    try:
        values = json.loads(Path(early.config).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {early.config}: {exc}") from exc
    except ValueError as exc:
        raise UsageError(f"config {early.config} is not valid JSON: {exc}") from exc
    if not isinstance(values, dict):
        raise UsageError(f"config {early.config} must hold a JSON object")
    args = argparse.Namespace(config=early.config, command=early.command)
    subparser = subparsers[args.command]
    known = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known:
            raise UsageError(f"config {args.config}: unknown key {key!r} for '{args.command}'")
        action = known[dest]
        if action.type is not None and value is not None:
            try:
                value = [action.type(v) for v in value] if isinstance(value, list) else action.type(value)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"config {args.config}: bad value for {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"config {args.config}: {key!r} must be one of {sorted(action.choices)}")
        defaults[dest] = value
    # file values become defaults, so anything given on the command line overrides them
    subparser.set_defaults(**defaults)
    for action in subparser._actions:
        if action.dest in defaults:
            action.required = False
    return parser.parse_args(argv)


def _setup_logging(args: argparse.Namespace) -> None:
    level = logging.WARNING if args.quiet else logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def cmd_inspect(args) -> None:
    hdr, is_gz = nifti_io.read_header(args.path)
    print(f"path: {args.path}")
    print(f"shape: {'x'.join(str(n) for n in hdr.shape)}")
    print(f"datatype: {hdr.datatype_code} ({hdr.element_kind})")
    print(f"bitpix: {hdr.bitpix}")
    print(f"vox_offset: {hdr.vox_offset:g}")
    print(f"scaling: {'slope=%g inter=%g' % (hdr.scl_slope, hdr.scl_inter) if hdr.has_scaling else 'none'}")
    print(f"endianness: {hdr.endianness}")
    print(f"gzip: {'yes' if is_gz else 'no'}")


def cmd_synth(args) -> None:
    dirs = synth.synth_tree(args.out_dir, args.n_cases, tuple(args.size), args.seed, args.gzip)
    print(f"wrote {len(dirs)} cases to {args.out_dir}")


def cmd_preprocess(args) -> None:
    w = args.crop_window
    window = ((w[0], w[1]), (w[2], w[3]), (w[4], w[5]))
    manifest, failures = volume_prep.preprocess_tree(args.in_dir, args.out_dir, window, args.threshold, args.split, args.seed)
    print(
        f"kept={manifest.kept_count} dropped={manifest.dropped_count} failed={len(failures)} "
        f"train={len(manifest.train_files)} val={len(manifest.val_files)}"
    )
    if manifest.kept_count == 0:
        raise EmptyDataset(f"no case under {args.in_dir} survived preprocessing")


def _epoch_line(row: dict) -> str:
    return " ".join(f"{k}={row[k]:.6g}" if k != "epoch" else f"epoch={row[k]}" for k in pipeline.HISTORY_COLUMNS)


def cmd_train(args) -> None:
    fields = {f.name for f in dataclasses.fields(pipeline.TrainConfig)}
    config = pipeline.TrainConfig(**{k: v for k, v in vars(args).items() if k in fields})
    pipeline.train(config, resume=args.resume, max_steps=args.max_steps, on_epoch=lambda row: print(_epoch_line(row), flush=True))
    print(f"checkpoint: {Path(config.out_dir) / 'checkpoint_final.zip'}")


def cmd_predict(args) -> None:
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    labels = pipeline.predict_case(ckpt, args.input)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    pipeline.write_mask(labels, args.out)
    print(f"wrote {args.out} ({'x'.join(str(n) for n in labels.shape)}, uint8)")


def cmd_evaluate(args) -> None:
    manifest = volume_prep.DatasetManifest.load(args.manifest)
    names = {"val": manifest.val_files, "train": manifest.train_files, "all": manifest.train_files + manifest.val_files}[args.split]
    files = manifest.resolve(names, Path(args.manifest).parent)
    if not files:
        raise EmptyDataset(f"{args.manifest}: split '{args.split}' lists no files")
    ckpt = pipeline.load_checkpoint(args.checkpoint)
    m = pipeline.evaluate(ckpt, files, args.iou_threshold, not args.exclude_background)
    print(f"loss={m['loss']:.6f} acc={m['accuracy']:.6f} iou={m['iou']:.6f}")
    report = dict(m, split=args.split, n_files=len(files), iou_threshold=args.iou_threshold, include_background=not args.exclude_background)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_plot(args) -> None:
    for path in plotting.plot_history(plotting.read_history(args.history), args.out_dir):
        print(f"wrote {path}")


COMMANDS = {
    "inspect": cmd_inspect,
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "plot": cmd_plot,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    _setup_logging(args)
    resolved = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose", "quiet")}
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))
    try:
        COMMANDS[args.command](args)
    except VoxelSegError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    except (ValueError, argparse.ArgumentTypeError) as exc:
        log.error("%s", exc)
        return ConfigError.exit_code
    except OSError as exc:
        log.error("%s", exc)
        return DataError.exit_code
    except Exception:
        log.exception("internal error")
        return VoxelSegError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
