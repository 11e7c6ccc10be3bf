"""Command-line entry point: ``python -m vcfseq <subcommand> ...``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .detector import DetectorParams, DetectorTrainConfig, sample_training_slices, train_detector
from .experiment import evaluate_records, run_aggregation_experiment, select_ensemble
from .model import TTA_ALIASES, VARIANT_ALIASES, Checkpoint, ModelConfig, ensemble_member_scores, predict_series
from .phantom import make_dataset, read_centerline, read_manifest
from .pipeline import DESK_PREP, PrepConfig, load_items, prepare_volume
from .render import render_overlay
from .training import DESK_SCHEDULE, train, with_overrides
from .volume import WindowSpec, load_volume


def _triple(text: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected H,W,Z integers, got {text!r}") from exc
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected H,W,Z, got {text!r}")
    return vals


def _csv(text: str) -> list:
    return [v for v in text.split(",") if v]


def _add_window(p):
    p.add_argument("--window-center", type=float, help="HU window centre (default 370)")
    p.add_argument("--window-width", type=float, help="HU window width (default 840)")


def _window(args, base: WindowSpec = WindowSpec()) -> WindowSpec:
    return WindowSpec(base.center if args.window_center is None else args.window_center,
                      base.width if args.window_width is None else args.window_width)


def _add_training(p):
    p.add_argument("--data", required=True, help="dataset directory or manifest.tsv")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--iters", type=int, help="iterations per epoch")
    p.add_argument("--lambda", dest="lam", type=float, help="weight of the per-patch loss")
    p.add_argument("--smooth-width", type=int, default=3)
    p.add_argument("--patch", type=_triple, default=DESK_PREP.patch_size, help="patch size H,W,Z (default 16,16,8)")
    p.add_argument("--tile-length", type=int, default=DESK_PREP.tile_length,
                   help="sagittal rows per tile; 0 means patch H (default 32)")
    p.add_argument("--detector", help="cord-detector checkpoint; default uses the label sidecar tracks")
    _add_window(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcfseq", description="Vertebral compression fracture pipeline on spine volumes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a phantom dataset")
    p.add_argument("--n", type=int, required=True, help="number of series")
    p.add_argument("--pos", type=float, default=0.33, help="positive fraction")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-detector", help="train the cord detector on random axial slices")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slices", type=int, default=300)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--batch", type=int, default=16)
    _add_window(p)

    p = sub.add_parser("train", help="train one VCF model")
    _add_training(p)
    p.add_argument("--variant", choices=sorted(VARIANT_ALIASES), default="max")
    p.add_argument("--out", required=True)

    p = sub.add_parser("experiment", help="compare aggregation variants and pick an ensemble")
    _add_training(p)
    p.add_argument("--out", required=True, help="output directory")

    for name, help_text in (("eval", "evaluate an ensemble on a partition"), ("predict", "score one volume")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--ensemble", required=True, type=_csv, help="comma-separated model checkpoints")
        p.add_argument("--tta", type=_csv, help="per-model TTA: id or flip")
        p.add_argument("--detector")
        _add_window(p)
        if name == "eval":
            p.add_argument("--data", required=True)
            p.add_argument("--partition", default="test", choices=("train", "tune", "test"))
        else:
            p.add_argument("--volume", required=True)
            p.add_argument("--label", help="label file with the cord centreline (instead of a detector)")

    p = sub.add_parser("render", help="write a mid-sagittal overlay PGM")
    p.add_argument("--volume", required=True)
    p.add_argument("--ensemble", required=True, type=_csv, help="model checkpoint(s); the first localises")
    p.add_argument("--tta", type=_csv)
    p.add_argument("--detector")
    p.add_argument("--label")
    p.add_argument("--out", required=True)
    _add_window(p)
    return parser


# --------------------------------------------------------------- commands


def _prep(args) -> PrepConfig:
    return PrepConfig(patch_size=tuple(args.patch), tile_length=args.tile_length or None, window=_window(args))


def _train_config(args):
    return with_overrides(DESK_SCHEDULE, lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                          iters_per_epoch=args.iters, lambda_seq=args.lam, seed=args.seed)


def _items(args, prep):
    manifest = read_manifest(args.data)
    detector = DetectorParams.load(args.detector) if args.detector else None
    train_items = load_items(manifest, manifest.partition("train"), prep, detector)
    tune_items = load_items(manifest, manifest.partition("tune"), prep, detector)
    return train_items, tune_items


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_gen(args):
    manifest = make_dataset(args.out, args.n, args.pos, seed=args.seed)
    n_pos = sum(r.positive for r in manifest.records)
    print(f"series={len(manifest.records)} positives={n_pos} out={Path(args.out) / 'manifest.tsv'}")


def cmd_train_detector(args):
    manifest = read_manifest(args.data)
    records = manifest.partition("train") or manifest.records
    pool = []
    for rec in records:
        centerline, radius = read_centerline(manifest.label_path(rec))
        pool.append((load_volume(manifest.volume_path(rec)), centerline, radius))
    rng = np.random.default_rng(args.seed)
    images, boxes = sample_training_slices(pool, args.slices, rng, _window(args))
    config = DetectorTrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed)
    det, history = train_detector(images, boxes, config=config, log=_log)
    det.save(args.out)
    print(f"initial_loss={history[0]:.6f} final_loss={history[-1]:.6f} out={args.out}")


def cmd_train(args):
    prep = _prep(args)
    config = ModelConfig(patch_size=prep.patch_size, seq_variant=VARIANT_ALIASES[args.variant],
                         smooth_width=args.smooth_width, **({} if args.lam is None else {"lambda_seq": args.lam}))
    train_items, tune_items = _items(args, prep)
    result = train(config, train_items, tune_items, _train_config(args), prep, log=_log)
    result.checkpoint.save(args.out)
    auc = "n/a" if result.best_auc is None else f"{result.best_auc:.6f}"
    print(f"best_epoch={result.best_epoch} tune_auc={auc} out={args.out}")


def cmd_experiment(args):
    prep = _prep(args)
    base = ModelConfig(patch_size=prep.patch_size, smooth_width=args.smooth_width,
                       **({} if args.lam is None else {"lambda_seq": args.lam}))
    train_items, tune_items = _items(args, prep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_aggregation_experiment(train_items, tune_items, base, _train_config(args), prep=prep, log=_log)
    paths = []
    for r in report.results:
        path = out / f"{r.variant}.ckpt"
        r.checkpoint.save(path)
        paths.append(str(path))
    choice = select_ensemble([r.checkpoint for r in report.results], tune_items, size=min(3, len(report.results)))
    text = report.to_text()
    text += (f"ensemble={','.join(paths[i] for i in choice.members)} "
             f"tta={','.join(choice.ttas)} tune_auc={choice.tune_auc:.6f}\n")
    (out / "report.txt").write_text(text)
    print(text, end="")


def _ensemble(args):
    checkpoints = [Checkpoint.load(p) for p in args.ensemble]
    ttas = None
    if args.tta:
        unknown = [t for t in args.tta if t not in TTA_ALIASES]
        if unknown:
            raise ValueError(f"unknown TTA {unknown[0]!r}; use id or flip")
        ttas = [TTA_ALIASES[t] for t in args.tta]
    prep = PrepConfig.from_meta(checkpoints[0].meta)
    if args.window_center is not None or args.window_width is not None:
        prep = replace(prep, window=_window(args, prep.window))
    return checkpoints, ttas, prep


def _track_source(args, volume_path):
    if args.detector:
        return DetectorParams.load(args.detector)
    label = args.label or Path(volume_path).with_suffix(".label")
    if not Path(label).exists():
        raise ValueError("no cord track: pass --detector or --label (no sidecar label found)")
    return read_centerline(label)[0]


def cmd_eval(args):
    checkpoints, ttas, prep = _ensemble(args)
    manifest = read_manifest(args.data)
    records = manifest.partition(args.partition)
    if len({r.positive for r in records}) < 2:
        raise ValueError(f"partition {args.partition!r} holds a single class; AUC undefined")
    detector = DetectorParams.load(args.detector) if args.detector else None
    metrics, mean_s = evaluate_records(manifest, records, checkpoints, ttas, detector, prep)
    print(metrics.report(mean_s), end="")


def cmd_predict(args):
    checkpoints, ttas, prep = _ensemble(args)
    volume = load_volume(args.volume)
    seq = prepare_volume(volume, _track_source(args, args.volume), prep).patches
    score = float(np.mean(ensemble_member_scores(seq, checkpoints, ttas)))
    print(f"score={score:.6f}")


def cmd_render(args):
    checkpoints, ttas, prep = _ensemble(args)
    volume = load_volume(args.volume)
    prepared = prepare_volume(volume, _track_source(args, args.volume), prep)
    pred = predict_series(prepared.patches, checkpoints[0], (ttas or ["identity"])[0],
                          sagittal_shape=prepared.sagittal.data.shape[1:])
    render_overlay(prepared.sagittal, pred, args.out)
    print(f"score={pred.series_score:.6f} box={','.join(map(str, pred.box))} out={args.out}")


COMMANDS = {
    "gen": cmd_gen,
    "train-detector": cmd_train_detector,
    "train": cmd_train,
    "experiment": cmd_experiment,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "render": cmd_render,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 and usage on bad flags
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a diagnostic and exit code
        print(f"vcfseq {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
