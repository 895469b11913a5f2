"""Command-line entry point: ``dfn <command> [flags]``.

Every command that produces files first writes ``manifest.json`` next to its
outputs. The manifest holds the fully resolved arguments, the tool version and
SHA-256 hashes of the inputs; ``dfn rerun --manifest PATH`` replays it.

Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import LAMBDA_SWEEP, PRESETS, ablation_run, lambda_rows
from .checkpoint import load_checkpoint
from .data.io import export_pgm, read_dataset, write_dataset
from .data.synth import DatasetSpec, generate_dataset
from .errors import DFNError, NumericalError, UsageError
from .evaluate import (
    boundary_counts,
    boundary_probability,
    confusion_matrix,
    f_from_counts,
    iou_from_confusion,
    ms_flip_infer,
    predict_scores,
)
from .gradsuite import CHECKS, TOLERANCE, run_suite
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig, train

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3


class CLIUsageError(UsageError):
    """Bad flag value; the message names the flag."""


# argument parsing helpers


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _size(text: str) -> tuple[int, int]:
    try:
        parts = [int(x) for x in text.lower().split("x")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}") from None
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected N or HxW, got {text!r}")
    return parts[0], parts[1]


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(path: Path, command: str, args: dict, inputs: list, outputs: list) -> None:
    """Record the resolved run before any work starts."""
    manifest = {
        "tool": "dfn",
        "version": __version__,
        "command": command,
        "args": {k: (list(v) if isinstance(v, tuple) else v) for k, v in args.items()},
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _require_file(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIUsageError(f"{flag}: no such file {p}")
    return p


def _model_config(a) -> ModelConfig:
    return ModelConfig(
        num_classes=a.classes,
        stage_channels=a.stage_channels,
        unified_channels=a.unified_channels,
        use_rrb=not a.no_rrb,
        use_gp=not a.no_gp,
        use_cab=not a.no_cab,
        use_ds=not a.no_ds,
        use_border=not a.no_border,
        init_seed=a.seed,
    )


def _train_config(a, seed: int | None = None) -> TrainConfig:
    if a.max_iter < 0:
        raise CLIUsageError(f"--max-iter must be >= 0, got {a.max_iter}")
    if a.batch_size < 1:
        raise CLIUsageError(f"--batch-size must be >= 1, got {a.batch_size}")
    return TrainConfig(
        max_iter=a.max_iter,
        batch_size=a.batch_size,
        base_lr=a.base_lr,
        power=a.power,
        momentum=a.momentum,
        weight_decay=a.weight_decay,
        loss=LossConfig(lam=a.lam, gamma=a.gamma, alpha_f=a.alpha_f),
        scales=a.train_scales,
        flip=not a.no_flip,
        seed=a.seed if seed is None else seed,
        checkpoint_every=getattr(a, "checkpoint_every", 0),
        log_every=a.log_every,
    )


def _check_dataset_classes(spec: DatasetSpec, num_classes: int, flag: str = "--classes") -> None:
    if spec.num_classes != num_classes:
        raise CLIUsageError(f"{flag} {num_classes} does not match dataset num_classes {spec.num_classes}")


# commands


def cmd_gen_data(a) -> int:
    h, w = a.size
    if h % 32 or w % 32 or h < 32 or w < 32:
        raise CLIUsageError(f"--size {h}x{w}: both sides must be positive multiples of 32")
    if a.count < 0:
        raise CLIUsageError(f"--count must be >= 0, got {a.count}")
    if not 3 <= a.classes <= 256:
        raise CLIUsageError(f"--classes must lie in [3, 256], got {a.classes}")
    mix = a.scenario_mix
    if len(mix) != 3 or min(mix) < 0 or sum(mix) <= 0:
        raise CLIUsageError(f"--scenario-mix needs 3 non-negative weights, got {','.join(map(str, mix))}")
    mix = tuple(m / sum(mix) for m in mix)
    out = Path(a.out)
    write_manifest(_manifest_path(a, out.with_suffix(out.suffix + ".manifest.json")), "gen-data", vars_of(a), [], [out])
    spec, samples = generate_dataset(
        DatasetSpec(count=a.count, height=h, width=w, num_classes=a.classes, mix=mix, seed=a.seed, thickness=a.thickness)
    )
    out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(samples, spec, out)
    print(f"wrote {len(samples)} samples ({h}x{w}, K={a.classes}) to {out}")
    return EXIT_OK


def cmd_train(a) -> int:
    data = _require_file(a.data, "--data")
    if a.resume is not None:
        _require_file(a.resume, "--resume")
    spec, samples = read_dataset(data)
    _check_dataset_classes(spec, a.classes)
    model_cfg = _model_config(a)
    train_cfg = _train_config(a)
    out = Path(a.out)
    inputs = [data] + ([Path(a.resume)] if a.resume else [])
    write_manifest(_manifest_path(a, out / "manifest.json"), "train", vars_of(a), inputs, [out / "final.dfnc", out / "train_log.csv"])
    mean = spec.mean or (0.0, 0.0, 0.0)
    meta = {"height": str(spec.height), "width": str(spec.width)}
    try:
        _, tlog = train(model_cfg, train_cfg, samples, mean, out_dir=out, resume=a.resume, stop_at=a.stop_at, thickness=spec.thickness, meta=meta)
    except NumericalError as exc:
        print(f"error: training aborted at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    last = tlog.records[-1] if tlog.records else None
    if last is not None:
        print(f"iter {last.iter}: L {last.L:.4f} (l_s {last.l_s:.4f}, l_b {last.l_b:.4f})")
    print(f"checkpoint {tlog.checkpoint}")
    return EXIT_OK


def _metrics_rows(miou, per_class, boundary) -> list[tuple[str, float]]:
    rows = [("miou", miou)] + [(f"iou_class_{k}", v) for k, v in enumerate(per_class)]
    if boundary is not None:
        p, r, f = boundary
        rows += [("boundary_precision", p), ("boundary_recall", r), ("boundary_f1", f)]
    return rows


def cmd_eval(a) -> int:
    ckpt = _require_file(a.checkpoint, "--checkpoint")
    data = _require_file(a.data, "--data")
    model, meta = load_checkpoint(ckpt)
    spec, samples = read_dataset(data)
    k = model.cfg.num_classes
    if spec.num_classes != k:
        raise CLIUsageError(f"checkpoint num_classes {k} does not match dataset num_classes {spec.num_classes}")
    if "height" in meta and (int(meta["height"]), int(meta["width"])) != (spec.height, spec.width):
        raise CLIUsageError(
            f"checkpoint trained at {meta['height']}x{meta['width']} but dataset is {spec.height}x{spec.width}"
        )
    if not 0 < a.threshold < 1:
        raise CLIUsageError(f"--threshold must lie in (0, 1), got {a.threshold}")
    out = Path(a.out)
    viz = Path(a.export_viz) if a.export_viz else None
    write_manifest(_manifest_path(a, out.with_suffix(".manifest.json")), "eval", vars_of(a), [ckpt, data], [out] + ([viz] if viz else []))
    mean = tuple(float(x) for x in meta["mean"].split(",")) if "mean" in meta else (spec.mean or (0.0, 0.0, 0.0))
    if not samples:
        raise CLIUsageError(f"--data {data} holds no samples")
    images = np.stack([s.image for s in samples]) - np.asarray(mean, np.float32).reshape(1, 3, 1, 1)
    gt = np.stack([s.labels for s in samples])
    seg, border = predict_scores(model, images)
    if a.ms_flip:
        chunks = [ms_flip_infer(model, images[i : i + 16], a.scales, not a.no_eval_flip) for i in range(0, len(images), 16)]
        probs = np.concatenate(chunks)
        pred = probs.argmax(axis=1)
    else:
        pred = seg.argmax(axis=1)
    miou, per_class = iou_from_confusion(confusion_matrix(pred, gt, k))
    boundary, bprob = None, None
    if border:
        bprob = boundary_probability(border)
        gb = np.stack([s.boundary for s in samples])
        boundary = f_from_counts(*boundary_counts(bprob, gb, a.threshold, a.tol))
    rows = _metrics_rows(miou, per_class, boundary)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("metric,value\n" + "".join(f"{n},{v!r}\n" for n, v in rows), encoding="utf-8")
    for n, v in rows:
        print(f"{n:20s} {v:.4f}")
    if viz is not None:
        viz.mkdir(parents=True, exist_ok=True)
        for i in range(len(samples)):
            export_pgm(pred[i].astype(np.uint8), viz / f"pred_{i:04d}.pgm", k)
            export_pgm(gt[i], viz / f"gt_{i:04d}.pgm", k)
            if bprob is not None:
                export_pgm(bprob[i], viz / f"boundary_{i:04d}.pgm")
    return EXIT_OK


def _load_pair(a):
    train_path = _require_file(a.train_data, "--train-data")
    val_path = _require_file(a.val_data, "--val-data")
    tspec, tr = read_dataset(train_path)
    vspec, va = read_dataset(val_path)
    _check_dataset_classes(tspec, a.classes)
    _check_dataset_classes(vspec, a.classes, "--classes (validation)")
    if not a.seeds:
        raise CLIUsageError("--seeds needs at least one seed")
    return train_path, val_path, tspec, tr, va


def _run_rows(a, rows, command: str, extra_outputs):
    train_path, val_path, tspec, tr, va = _load_pair(a)
    out = Path(a.out)
    csv_path = out / "ablation.csv"
    write_manifest(_manifest_path(a, out / "manifest.json"), command, vars_of(a), [train_path, val_path], [csv_path, out / "ablation.txt", *extra_outputs])
    base = _model_config(a)
    train_cfg = _train_config(a)
    report = ablation_run(
        base,
        rows,
        list(a.seeds),
        train_cfg,
        tr,
        va,
        tspec.mean or (0.0, 0.0, 0.0),
        tspec.thickness,
        cache_dir=a.cache_dir,
        csv_path=csv_path,
        on_cell=lambda c: print(f"  {c.row} seed {c.seed}: mIoU {100 * c.miou:.2f}", flush=True),
    )
    csv_path.write_text(report.to_csv(), encoding="utf-8")
    table = report.to_table()
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    return report, out


def cmd_ablate(a) -> int:
    _run_rows(a, PRESETS[a.preset], "ablate", [])
    return EXIT_OK


def cmd_lambda_sweep(a) -> int:
    if any(v < 0 for v in a.lambdas):
        raise CLIUsageError(f"--lambdas must be non-negative, got {a.lambdas}")
    out = Path(a.out)
    report, out = _run_rows(a, lambda_rows(a.lambdas, _model_config(a).toggles()), "lambda-sweep", [out / "lambda.csv"])
    (out / "lambda.csv").write_text(report.to_lambda_csv(), encoding="utf-8")
    return EXIT_OK


def cmd_grad_check(a) -> int:
    only = list(a.only) if a.only else None
    if only:
        unknown = [n for n in only if n not in CHECKS]
        if unknown:
            raise CLIUsageError(f"--only: unknown checks {unknown}; choose from {', '.join(CHECKS)}")
    if a.manifest:
        write_manifest(Path(a.manifest), "grad-check", vars_of(a), [], [])
    results = run_suite(a.eps, only, a.seed)
    for r in results:
        print(f"{r.name:14s} max_rel_err {r.max_rel_error:.3e}  {r.seconds:6.2f}s  {'ok' if r.passed else 'FAIL'}")
    bad = [r.name for r in results if not r.passed]
    if bad:
        print(f"checks above {TOLERANCE:g}: {', '.join(bad)}", file=sys.stderr)
        return EXIT_CHECK
    print(f"all {len(results)} checks below {TOLERANCE:g}")
    return EXIT_OK


def cmd_rerun(a) -> int:
    path = _require_file(a.manifest_in, "--manifest")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        command, stored = manifest["command"], manifest["args"]
    except (ValueError, KeyError) as exc:
        raise CLIUsageError(f"--manifest {path}: not a run manifest ({exc})") from None
    if command not in COMMANDS or command == "rerun":
        raise CLIUsageError(f"--manifest {path}: cannot replay command {command!r}")
    args = argparse.Namespace(**{k: tuple(v) if isinstance(v, list) else v for k, v in stored.items()})
    args.command = command
    return COMMANDS[command](args)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "lambda-sweep": cmd_lambda_sweep,
    "grad-check": cmd_grad_check,
    "rerun": cmd_rerun,
}


def vars_of(a) -> dict:
    return {k: v for k, v in vars(a).items() if k not in ("command", "verbose")}


def _manifest_path(a, default: Path) -> Path:
    return Path(a.manifest) if getattr(a, "manifest", None) else default


# parser


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows the default of every flag, including ones without help text."""

    def _get_help_string(self, action):
        text = action.help
        if "%(default)" not in text and action.default is not argparse.SUPPRESS and action.option_strings:
            text += " (default: %(default)s)"
        return text


def _add_model_flags(p) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--classes", type=int, default=4, help="number of classes K")
    g.add_argument("--stage-channels", type=_ints, default=(16, 32, 64, 128, 256), help="backbone widths, 5 values")
    g.add_argument("--unified-channels", type=int, default=32, help="width after the 1x1 unifying convs")
    for t in ("rrb", "gp", "cab", "ds", "border"):
        g.add_argument(f"--no-{t}", action="store_true", help=f"disable {t.upper()}")


def _add_train_flags(p) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--max-iter", type=int, default=2000, help="iterations of the poly schedule")
    g.add_argument("--batch-size", type=int, default=4)
    g.add_argument("--base-lr", type=float, default=4e-3)
    g.add_argument("--power", type=float, default=0.9, help="poly schedule exponent")
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--weight-decay", type=float, default=1e-4)
    g.add_argument("--lambda", dest="lam", type=float, default=0.1, help="border loss weight")
    g.add_argument("--gamma", type=float, default=2.0, help="focal loss focusing parameter")
    g.add_argument("--alpha-f", type=float, default=0.75, help="focal loss positive-class weight")
    g.add_argument("--train-scales", type=_floats, default=(0.5, 0.75, 1.0, 1.5, 1.75), help="augmentation scales")
    g.add_argument("--no-flip", action="store_true", help="disable random horizontal flips")
    g.add_argument("--log-every", type=int, default=10)
    g.add_argument("--seed", type=int, default=0, help="root seed for initialisation and batches")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="dfn", description=__doc__.splitlines()[0], formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"dfn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic DFND dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="dataset file to write")
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--size", type=_size, default=(64, 64), help="N or HxW, multiples of 32")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scenario-mix", type=_floats, default=(1.0, 1.0, 1.0), help="weights of intra,inter,mixed scenes")
    p.add_argument("--thickness", type=int, default=1, help="boundary thickness in pixels")
    p.add_argument("--manifest", default=None, help="manifest path; <out>.manifest.json when unset")

    p = sub.add_parser("train", help="train a model", formatter_class=fmt)
    p.add_argument("--data", required=True, help="DFND training set")
    p.add_argument("--out", required=True, help="output directory")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--checkpoint-every", type=int, default=0, help="0 writes only final.dfnc")
    p.add_argument("--stop-at", type=int, default=None, help="stop early, keeping the max-iter schedule")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--manifest", default=None, help="manifest path; <out>/manifest.json when unset")

    p = sub.add_parser("eval", help="score a checkpoint", formatter_class=fmt)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="metrics CSV to write")
    p.add_argument("--ms-flip", action="store_true", help="multi-scale plus flip inference")
    p.add_argument("--scales", type=_floats, default=(0.5, 0.75, 1.0, 1.5, 1.75), help="scales for --ms-flip")
    p.add_argument("--no-eval-flip", action="store_true", help="skip the flipped pass of --ms-flip")
    p.add_argument("--threshold", type=float, default=0.5, help="boundary probability threshold")
    p.add_argument("--tol", type=int, default=1, help="boundary match tolerance in pixels")
    p.add_argument("--export-viz", default=None, help="directory for prediction/boundary PGMs")
    p.add_argument("--manifest", default=None, help="manifest path; next to --out when unset")

    for name, helptext in (("ablate", "train and score a row preset"), ("lambda-sweep", "sweep the border loss weight")):
        p = sub.add_parser(name, help=helptext, formatter_class=fmt)
        p.add_argument("--train-data", required=True)
        p.add_argument("--val-data", required=True)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", type=_ints, default=(0, 1, 2))
        p.add_argument("--cache-dir", default=None, help="reuse finished cells across runs")
        p.add_argument("--manifest", default=None, help="manifest path; <out>/manifest.json when unset")
        if name == "ablate":
            p.add_argument("--preset", choices=sorted(PRESETS), default="table2")
        else:
            p.add_argument("--lambdas", type=_floats, default=LAMBDA_SWEEP)
        _add_model_flags(p)
        _add_train_flags(p)

    p = sub.add_parser("grad-check", help="finite-difference gradient suite", formatter_class=fmt)
    p.add_argument("--eps", type=float, default=1e-5, help="central difference step")
    p.add_argument("--only", nargs="+", default=None, help=f"subset of: {' '.join(CHECKS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--manifest", default=None, help="optional manifest path")

    p = sub.add_parser("rerun", help="replay a run from its manifest", formatter_class=fmt)
    p.add_argument("--manifest", dest="manifest_in", required=True, help="manifest.json of an earlier run")
    for sp in [parser, *sub.choices.values()]:
        for action in sp._actions:
            if action.help is None:
                action.help = action.dest.replace("_", " ")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DFNError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
