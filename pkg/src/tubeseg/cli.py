"""Command-line entry point: ``tubeseg <subcommand> ...``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import augment, data, io, pipeline, postprocess
from .config import apply_overrides, desk_train_config, dump_config, full_train_config, load_config, parse_config_text
from .metrics import MetricsReport
from .nn import ConfigError

log = logging.getLogger("tubeseg")


class UsageError(Exception):
    pass


def _on_off(value: str) -> bool:
    v = value.lower()
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return v == "on"


def _add_train_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training configuration")
    g.add_argument("--config", type=Path, help="key = value config file")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key (repeatable)")
    g.add_argument("--paper-scale", action="store_true", help="start from the full-size profile instead of the desk profile")
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--loss", choices=["tversky", "dice_wce"])
    g.add_argument("--augment", choices=["none", "low", "high"])
    g.add_argument("--tta", type=_on_off, metavar="on|off")
    g.add_argument("--seed", type=int)
    g.add_argument("--num-classes", type=int, choices=[2, 3])


def build_config(args):
    base = full_train_config() if args.paper_scale else desk_train_config()
    cfg = load_config(args.config, base) if args.config else base
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.update(parse_config_text(item))
    for key in ("epochs", "lr", "loss", "augment", "tta", "seed", "num_classes"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return apply_overrides(cfg, overrides) if overrides else cfg.validate()


def _add_postprocess_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("post-processing")
    seeds = g.add_mutually_exclusive_group()
    seeds.add_argument("--seeds", type=Path, help="seed file with one 'x y' pair per line")
    seeds.add_argument("--auto-seeds", action="store_true", help="detect seeds from distance-map peaks (default)")
    g.add_argument("--min-distance", type=float, help="minimum spacing between automatic seeds in pixels")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tubeseg", description="Tubule epithelium segmentation on CPU.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset and its manifest")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--count", type=int, default=40)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--palette", choices=sorted(data.PALETTES), default="pas")
    p.add_argument("--size", type=int, default=128, help="square image side, a multiple of 32")
    p.add_argument("--touching-probability", type=float, default=0.3)
    p.add_argument("--split", default="train")

    p = sub.add_parser("stats", help="per-channel normalisation statistics of a manifest")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, help="write JSON here instead of stdout")

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--fold", type=int, help="hold out this fold of a k-fold split for validation")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--resume", type=Path, help="continue from a checkpoint")
    _add_train_options(p)

    p = sub.add_parser("cross-validate", help="k-fold cross-validation")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k", type=int, default=5)
    _add_train_options(p)

    p = sub.add_parser("infer", help="segment images with a trained checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True, help="image file or directory of images")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--tta", type=_on_off, default=True, metavar="on|off")
    _add_postprocess_options(p)

    p = sub.add_parser("eval", help="metrics CSV from prediction and ground-truth manifests")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-classes", type=int, choices=[2, 3], default=2)

    p = sub.add_parser("postprocess", help="split touching objects in a class mask")
    p.add_argument("--mask", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--three-class", action="store_true", help="mask uses the border class; label from it")
    _add_postprocess_options(p)
    return parser


def cmd_generate(args) -> int:
    base = data.SyntheticSceneSpec()
    scale = args.size / base.width  # radii are tuned for the default side
    spec = data.SyntheticSceneSpec(
        width=args.size,
        height=args.size,
        outer_radius=tuple(r * scale for r in base.outer_radius),
        palette=args.palette,
        touching_probability=args.touching_probability,
    )
    manifest = data.generate_dataset(args.out, args.count, args.seed, spec, split=args.split)
    print(f"wrote {args.count} records to {manifest}")
    return 0


def cmd_stats(args) -> int:
    stats = augment.dataset_stats(io.read_image(r.image) for r in io.read_manifest(args.manifest, check=False))
    if args.out:
        stats.save(args.out)
    else:
        print(json.dumps({"mean": stats.mean, "std": stats.std}))
    return 0


def _train_val_indices(records: list, manifest_records: list, fold, k: int, seed: int):
    n = len(records)
    if fold is not None:
        if not 0 <= fold < k:
            raise UsageError(f"--fold must lie in 0..{k - 1}")
        return data.kfold_split(n, k, seed).train_val(fold)
    val = [i for i, r in enumerate(manifest_records) if r.split == "val"]
    train = [i for i, r in enumerate(manifest_records) if r.split != "val"]
    return train, (val or train)


def cmd_train(args) -> int:
    cfg = build_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    io.atomic_write_text(args.out / "config.txt", dump_config(cfg))
    mrecs = io.read_manifest(args.manifest)
    records = [io.load_record(r) for r in mrecs]
    train_idx, val_idx = _train_val_indices(records, mrecs, args.fold, args.k, cfg.seed)
    state = pipeline.load_checkpoint(args.resume) if args.resume else None
    result = pipeline.train(records, train_idx, val_idx, cfg, out_dir=args.out, state=state)
    last = result.log[-1] if result.log else {}
    print(f"trained {result.state.epoch} epochs in {result.seconds:.1f}s; last val F-score {last.get('val_fscore')}")
    print(f"checkpoints: {result.best_path} {result.final_path}")
    return 0


def cmd_cross_validate(args) -> int:
    cfg = build_config(args)
    args.out.mkdir(parents=True, exist_ok=True)
    io.atomic_write_text(args.out / "config.txt", dump_config(cfg))
    records = pipeline.load_records(args.manifest)

    def report(fold, summary, result):
        print(f"fold {fold}: " + " ".join(f"{m} {summary[m]:.4f}" for m in MetricsReport.METRICS) + f" ({result.seconds:.0f}s)")

    rep = pipeline.cross_validate(records, cfg, k=args.k, out_dir=args.out, on_fold=report)
    for m, (mean, half) in rep.aggregate().items():
        print(f"{m}: {mean:.4f} +/- {half:.4f}")
    return 0


def _seeds_arg(args):
    return postprocess.read_seeds(args.seeds) if args.seeds else None


def cmd_infer(args) -> int:
    if not args.checkpoint.exists():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    manifest = pipeline.infer(args.input, args.checkpoint, args.out, tta=args.tta, seeds=_seeds_arg(args), min_distance=args.min_distance)
    print(f"wrote predictions to {manifest}")
    return 0


def cmd_eval(args) -> int:
    pred = io.read_manifest(args.pred)
    gt = io.read_manifest(args.gt)
    report = pipeline.evaluate_manifests(pred, gt, args.num_classes)
    report.write_csv(args.out)
    f = report.folds[0]
    print(" ".join(f"{m} {f[m]:.6f}" for m in MetricsReport.METRICS) + f" over {len(report.rows)} images")
    return 0


def cmd_postprocess(args) -> int:
    mask = io.read_mask(args.mask)
    if args.three_class and args.seeds is None:
        inst = postprocess.instances_from_three_class(mask)
    else:
        fg = (mask > 0).astype(np.uint8)
        md = 6.0 if args.min_distance is None else args.min_distance
        inst = postprocess.split_touching(fg, seeds=_seeds_arg(args), min_distance=md)
    io.write_mask(args.out, inst, instances=True)
    print(f"{int(inst.max())} instances written to {args.out}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "stats": cmd_stats,
    "train": cmd_train,
    "cross-validate": cmd_cross_validate,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "postprocess": cmd_postprocess,
}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError) as exc:
        print(f"tubeseg {args.command}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"tubeseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
