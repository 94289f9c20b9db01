"""Command-line surface wiring the pipeline stages into batch runs.

Subcommands: convert, preprocess, phantom, train, evaluate, report.
Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure.  All randomness flows from named seed keys in the run config —
no wall-clock or OS entropy anywhere — so every command is deterministic
given its config, and the train/evaluate output directories record the
config hash and toolkit version.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import DEFAULTS, KEY_HELP, RunConfig
from .dicom_reader import assemble_series, parse_dicom_slice
from .errors import ConfigError, FormatError, NumericError, ToolkitError
from .manifest import ManifestRecord, read_manifest, write_manifest
from .metrics import confusion, accuracy, percent, roc_auc, sensitivity, specificity
from .nifti import read_nifti, write_nifti
from .phantom import generate_dataset
from .preprocess import WINDOW_CATALOG, resize_trilinear, window_normalize
from .trainer import DatasetManifest, evaluate_test, format_history, run_cv


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's default 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ctpe", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"ctpe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("convert", help="assemble a directory of DICOM slices into one NIfTI volume")
    p.add_argument("dicom_dir", type=Path)
    p.add_argument("out_nifti", type=Path)

    p = sub.add_parser("preprocess", help="window-normalize and resize every manifest volume")
    p.add_argument("manifest", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    p.add_argument(
        "--allow-custom-window",
        action="store_true",
        help="permit a window outside the ten-entry catalog",
    )

    p = sub.add_parser("phantom", help="generate a deterministic synthetic dataset")
    p.add_argument("--pos", type=int, required=True, help="number of positive cases")
    p.add_argument("--neg", type=int, required=True, help="number of negative cases")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dims", default="64x64x32", help="phantom dims XxYxZ (default 64x64x32)")
    p.add_argument("--test", type=int, default=0, help="mark this many cases as the fixed test group")
    p.add_argument("--noise", type=float, default=0.0, help="additive Gaussian HU noise sigma (default off)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", help="5-fold cross-validated training on a preprocessed manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("evaluate", help="score the manifest's test group with a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("manifest", type=Path)
    p.add_argument("out_json", type=Path)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("report", help="tabulate evaluation results (text + CSV)")
    p.add_argument("results_dir", type=Path)
    p.add_argument("--out-text", type=Path, default=None)
    p.add_argument("--out-csv", type=Path, default=None)

    p = sub.add_parser("config-keys", help="list every config key with its default")
    return parser


def _load_config(args) -> RunConfig:
    overrides = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    return RunConfig.from_file(getattr(args, "config", None), overrides)


def _cmd_convert(args) -> int:
    files = sorted(p for p in args.dicom_dir.iterdir() if p.is_file())
    if not files:
        raise FormatError(f"no slices found in {args.dicom_dir}")
    slices = []
    failures = []
    for path in files:
        try:
            slices.append(parse_dicom_slice(path.read_bytes()))
        except ToolkitError as exc:
            failures.append(f"{path.name}: {exc}")
    if failures:
        for line in failures:
            print(line, file=sys.stderr)
        raise FormatError(f"{len(failures)} of {len(files)} slices failed to parse")
    vol = assemble_series(slices)
    written = write_nifti(vol, args.out_nifti)
    print(f"wrote {args.out_nifti} ({written} bytes, dims {vol.dims}, spacing {vol.spacing})")
    return 0


def _cmd_preprocess(args) -> int:
    cfg = _load_config(args)
    window = cfg.window()
    if window not in WINDOW_CATALOG and not args.allow_custom_window:
        raise ConfigError(
            f"window {window} is outside the ten-entry catalog; pass --allow-custom-window to use it anyway"
        )
    train_cfg = cfg.to_train_config()
    records = read_manifest(args.manifest)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for rec in records:
        vol = read_nifti(args.manifest.parent / rec.path)
        out = resize_trilinear(window_normalize(vol, window), train_cfg.input_dims)
        write_nifti(out, args.out_dir / rec.path)
    write_manifest(args.out_dir / "manifest.tsv", records)
    print(f"preprocessed {len(records)} volumes into {args.out_dir} (window {window}, dims {train_cfg.input_dims})")
    return 0


def _cmd_phantom(args) -> int:
    from .config import _parse_dims

    dims = _parse_dims("--dims", args.dims)
    records = generate_dataset(
        args.pos,
        args.neg,
        args.seed,
        args.out,
        dims=dims,
        test_count=args.test,
        noise_hu_sigma=args.noise,
        workers=args.workers,
    )
    n_test = sum(1 for r in records if r.group == "test")
    print(f"generated {len(records)} phantoms ({args.pos} positive / {args.neg} negative, {n_test} test) in {args.out}")
    return 0


def _write_run_info(out_dir: Path, cfg: RunConfig) -> None:
    info = f"ctpe {__version__}\nconfig_hash {cfg.hash_hex()}\n\n{cfg.canonical()}"
    (out_dir / "run_info.txt").write_text(info, encoding="utf-8")


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    train_cfg = cfg.to_train_config()
    manifest = DatasetManifest.load(args.manifest)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    _write_run_info(args.out_dir, cfg)

    summary = run_cv(manifest, train_cfg)
    lines = ["fold best_epoch val_acc val_loss val_auc"]
    for result in summary.folds:
        (args.out_dir / f"history_fold{result.fold}.txt").write_text(
            format_history(result.history), encoding="utf-8"
        )
        (args.out_dir / f"fold{result.fold}.ckpt").write_bytes(result.checkpoint)
        auc = roc_auc(result.val_scores, result.val_labels).auc
        lines.append(
            f"{result.fold} {result.best_epoch} {result.best.val_acc:.4f} {result.best.val_loss:.4f} {auc:.4f}"
        )
    lines.append(f"mean_val_acc {summary.mean_val_accuracy:.4f}")
    lines.append(f"mean_val_loss {summary.mean_val_loss:.4f}")
    (args.out_dir / "summary.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    train_cfg = cfg.to_train_config()
    manifest = DatasetManifest.load(args.manifest)
    scores, labels = evaluate_test(args.checkpoint, manifest, train_cfg)
    cm = confusion(scores, labels, train_cfg.eval_threshold)
    curve = roc_auc(scores, labels)
    result = {
        "window_lo": train_cfg.window.lo,
        "window_hi": train_cfg.window.hi,
        "n_test": int(labels.size),
        "tp": cm.tp,
        "tn": cm.tn,
        "fp": cm.fp,
        "fn": cm.fn,
        "accuracy": accuracy(cm),
        "sensitivity": sensitivity(cm),
        "specificity": specificity(cm),
        "auc": curve.auc,
        "config_hash": cfg.hash_hex(),
        "version": __version__,
    }
    args.out_json.parent.mkdir(parents=True, exist_ok=True)
    args.out_json.write_text(json.dumps(result, indent=2) + "\n", encoding="utf-8")
    args.out_json.with_suffix(".roc.txt").write_text(curve.as_text(), encoding="utf-8")
    print(
        f"window {train_cfg.window}: accuracy {percent(result['accuracy'])}% "
        f"sensitivity {percent(result['sensitivity'])}% specificity {percent(result['specificity'])}% "
        f"auc {curve.auc:.2f}"
    )
    return 0


def _format_window(lo: float, hi: float) -> str:
    return f"{lo:+.0f} to {hi:+.0f}"


def _cmd_report(args) -> int:
    rows = []
    for path in sorted(args.results_dir.glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        if not {"window_lo", "window_hi", "accuracy", "sensitivity", "specificity", "auc"} <= data.keys():
            continue
        rows.append(data)
    if not rows:
        raise FormatError(f"no evaluation results found in {args.results_dir}")
    rows.sort(key=lambda d: (d["window_lo"], d["window_hi"]))

    header = ("HU", "Accuracy", "Sensitivity", "Specificity", "AUC")
    table = [
        (
            _format_window(d["window_lo"], d["window_hi"]),
            f"{percent(d['accuracy'])}%",
            f"{percent(d['sensitivity'])}%",
            f"{percent(d['specificity'])}%",
            f"{d['auc']:.2f}",
        )
        for d in rows
    ]
    widths = [max(len(h), *(len(r[i]) for r in table)) for i, h in enumerate(header)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in table]
    text = "\n".join(lines) + "\n"
    csv_text = "\n".join([",".join(header)] + [",".join(row) for row in table]) + "\n"

    print(text, end="")
    if args.out_text:
        args.out_text.write_text(text, encoding="utf-8")
    if args.out_csv:
        args.out_csv.write_text(csv_text, encoding="utf-8")
    return 0


def _cmd_config_keys(_args) -> int:
    width = max(len(k) for k in DEFAULTS)
    for key in DEFAULTS:
        print(f"{key.ljust(width)}  default={DEFAULTS[key]!r:<18} {KEY_HELP[key]}")
    return 0


_COMMANDS = {
    "convert": _cmd_convert,
    "preprocess": _cmd_preprocess,
    "phantom": _cmd_phantom,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
    "config-keys": _cmd_config_keys,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"ctpe {args.command}: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ToolkitError, OSError, ValueError) as exc:
        print(f"ctpe {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
