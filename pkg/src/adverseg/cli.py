"""Command-line interface: data generation, training, evaluation, sweeps.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command refuses to clobber an existing non-empty output without
``--force``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import data as dsets
from . import evaluate as ev
from .data import IngestionError
from .losses import HyperParams
from .maps import InvalidLabelError, InvalidThresholdError
from .networks import ConfigError, DiscNetConfig
from .trainer import (CheckpointError, ScheduleError, TrainConfig, Trainer,
                      load_trainer, train, write_train_log)

USAGE_ERRORS = (ConfigError, IngestionError, CheckpointError, ScheduleError,
                InvalidLabelError, InvalidThresholdError, ValueError,
                FileNotFoundError, NotADirectoryError)

DEFAULT_THRESHOLDS = (0.0, 0.1, 0.2, 0.3, 1.0)


def _parse_size(text: str):
    parts = text.lower().split("x")
    if len(parts) == 1:
        h = w = int(parts[0])
    elif len(parts) == 2:
        h, w = int(parts[0]), int(parts[1])
    else:
        raise ValueError(f"bad --size {text!r}; use H or HxW")
    return h, w


def _prepare_out_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()):
        if not force:
            raise ValueError(f"output {path} exists and is not empty; pass --force")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)


def _load_config(path, class_count=None) -> TrainConfig:
    if path is None:
        cfg = TrainConfig()
    else:
        with open(path) as fh:
            cfg = TrainConfig.from_dict(json.load(fh))
    return cfg


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _run_manifest(cfg: TrainConfig, samples, split, out_dir: Path) -> dict:
    fingerprint = dsets.dataset_fingerprint(samples)
    run_id = hashlib.sha256(
        json.dumps([cfg.to_dict(), fingerprint], sort_keys=True).encode()
    ).hexdigest()[:16]
    return {
        "run_id": run_id,
        "config": cfg.to_dict(),
        "dataset_fingerprint": fingerprint,
        "labeled_count": len(split.labeled_ids),
        "unlabeled_count": len(split.unlabeled_ids),
        "fraction": split.fraction,
        "seeds": [cfg.seed],
        "layout": {
            "config": "config.snapshot",
            "log": "train_log.csv",
            "checkpoints": "checkpoints/",
            "metrics": "metrics.csv",
            "exports": "exports/",
        },
    }


# ---- commands -------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    samples = dsets.generate_shapes_dataset(
        args.n, *_parse_size(args.size), args.classes, args.seed)
    dsets.save_folder_dataset(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def _apply_ablation_flags(cfg: TrainConfig, args) -> TrainConfig:
    hp = cfg.hp
    if args.no_adv and not args.no_semi and not args.allow_degenerate:
        raise ValueError(
            "semi-supervised training without the adversarial loss degrades "
            "results (the discriminator's confidence maps carry no signal); "
            "pass --allow-degenerate to run it anyway"
        )
    if args.no_adv:
        hp = dataclasses.replace(hp, lambda_adv_labeled=0.0, lambda_adv_unlabeled=0.0)
    if args.no_semi:
        hp = dataclasses.replace(hp, lambda_semi=0.0, lambda_adv_unlabeled=0.0)
    return dataclasses.replace(cfg, hp=hp)


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise ValueError(f"missing data directory {data_dir}")
    samples = dsets.load_folder_dataset(data_dir)
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.iterations is not None:
        warm = min(cfg.warm_up_iterations, args.iterations)
        cfg = dataclasses.replace(cfg, max_iterations=args.iterations,
                                  warm_up_iterations=warm)
    cfg = _apply_ablation_flags(cfg, args)
    if args.global_disc:
        if samples:
            if cfg.augment is not None:
                hw = (cfg.augment.crop_h, cfg.augment.crop_w)
            else:
                hw = samples[0].image.shape[:2]
        else:
            raise ValueError("cannot size the dense discriminator on an empty dataset")
        cfg = dataclasses.replace(cfg, disc=DiscNetConfig(
            class_count=cfg.disc.class_count,
            base_channels=cfg.disc.base_channels,
            fully_convolutional=False, input_hw=hw))

    labeled_only = [s for s in samples if s.label is not None]
    if not labeled_only:
        raise ValueError(f"no labeled samples in {data_dir}")
    split = dsets.split_labeled(samples, args.fraction, cfg.seed)

    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    _write_json(cfg.to_dict(), out / "config.snapshot")
    _write_json(_run_manifest(cfg, samples, split, out), out / "manifest.json")

    trainer = train(samples, split, cfg, out_dir=out)
    print(f"trained {trainer.iteration} iterations "
          f"({len(split.labeled_ids)} labeled / {len(split.unlabeled_ids)} unlabeled); "
          f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        raise ValueError(f"missing checkpoint {checkpoint}")
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise ValueError(f"missing data directory {data_dir}")
    trainer = load_trainer(checkpoint)
    samples = [s for s in dsets.load_folder_dataset(data_dir) if s.label is not None]
    if not samples:
        raise ValueError(f"no labeled samples in {data_dir}")
    num_classes = trainer.cfg.seg.class_count
    trainer.seg.eval()
    trainer.disc.eval()

    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    # Build everything in a scratch directory, then rename into place so the
    # output appears atomically.
    tmp_dir = Path(tempfile.mkdtemp(dir=out.parent, prefix=out.name + ".tmp"))
    try:
        (tmp_dir / "predictions").mkdir()
        matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
        for s in samples:
            prob = ev.predict_probabilities(trainer.seg, s.image)
            pred = ev.argmax_labels(prob)
            matrix += ev.confusion(pred, s.label, num_classes)
            ev.export_prediction_png(pred, None, tmp_dir / "predictions" / f"{s.id}.png")
        per_class, mean = ev.mean_iou(matrix)
        ev.write_metrics_csv(per_class, mean, tmp_dir / "metrics.csv")
        thresholds = [float(t) for t in args.thresholds.split(",")]
        rows = ev.selected_pixel_report(trainer.seg, trainer.disc, samples, thresholds)
        ev.write_selected_csv(rows, tmp_dir / "selected_pixels.csv")
        _write_json({
            "checkpoint": str(checkpoint),
            "n_images": len(samples),
            "mean_iu": mean,
            "per_class_iou": per_class,
        }, tmp_dir / "summary.json")
        os.rmdir(out)  # empty after _prepare_out_dir; rename replaces it
        os.rename(tmp_dir, out)
    except BaseException:
        shutil.rmtree(tmp_dir, ignore_errors=True)
        raise
    print(f"mean IU {mean:.4f} over {len(samples)} images; results in {out}")
    return 0


def cmd_sweep(args) -> int:
    values = [float(v) for v in args.values.split(",") if v != ""]
    if not values:
        raise ValueError("--values must list at least one value")
    if args.param not in ("lambda_semi", "t_semi", "lambda_adv"):
        raise ValueError(f"unknown sweep parameter {args.param!r}")
    if args.seeds < 1:
        raise ValueError("--seeds must be >= 1")
    data_dir = Path(args.data)
    val_dir = Path(args.val_data)
    samples = dsets.load_folder_dataset(data_dir)
    val_samples = [s for s in dsets.load_folder_dataset(val_dir)
                   if s.label is not None]
    if not val_samples:
        raise ValueError(f"no labeled samples in {val_dir}")
    base_cfg = _load_config(args.config)
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    if args.seeds == 1:
        print("note: single seed, no averaging")

    rows = []
    for value in values:
        scores = []
        for k in range(args.seeds):
            seed = base_cfg.seed + k
            hp = base_cfg.hp
            if args.param == "lambda_semi":
                hp = dataclasses.replace(hp, lambda_semi=value)
            elif args.param == "t_semi":
                hp = dataclasses.replace(hp, t_semi=value)
            else:
                hp = dataclasses.replace(hp, lambda_adv_labeled=value)
            cfg = dataclasses.replace(base_cfg, hp=hp, seed=seed)
            run_dir = out / "runs" / f"{args.param}={value:g}" / f"seed{seed}"
            run_dir.mkdir(parents=True, exist_ok=True)
            split = dsets.split_labeled(samples, args.fraction, seed)
            _write_json(cfg.to_dict(), run_dir / "config.snapshot")
            trainer = train(samples, split, cfg, out_dir=run_dir)
            trainer.seg.eval()
            _, _, mean = ev.evaluate_samples(trainer.seg, val_samples,
                                             cfg.seg.class_count)
            scores.append(mean)
            print(f"{args.param}={value:g} seed={seed}: mean IU {mean:.4f}")
        hp_row = dataclasses.replace(base_cfg.hp, **{
            {"lambda_semi": "lambda_semi", "t_semi": "t_semi",
             "lambda_adv": "lambda_adv_labeled"}[args.param]: value})
        rows.append((args.fraction, hp_row.lambda_adv_labeled, hp_row.lambda_semi,
                     hp_row.t_semi, float(np.mean(scores))))

    import csv as _csv
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["data_amount", "lambda_adv", "lambda_semi", "t_semi",
                         "mean_iu"])
        for row in rows:
            writer.writerow([repr(float(v)) for v in row])
    print(f"sweep table in {out / 'sweep.csv'}")
    return 0


def cmd_confidence(args) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        raise ValueError(f"missing checkpoint {checkpoint}")
    image_path = Path(args.image)
    if not image_path.is_file():
        raise ValueError(f"missing image {image_path}")
    from PIL import Image, UnidentifiedImageError
    try:
        with Image.open(image_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except UnidentifiedImageError as exc:
        raise ValueError(f"{image_path} is not a readable image: {exc}") from exc
    trainer = load_trainer(checkpoint)
    trainer.seg.eval()
    trainer.disc.eval()
    out = Path(args.out)
    _prepare_out_dir(out, args.force)
    prob = ev.predict_probabilities(trainer.seg, image)
    pred = ev.argmax_labels(prob)
    conf = ev.predict_confidence(trainer.disc, prob)
    stem = image_path.stem
    ev.export_prediction_png(pred, None, out / f"{stem}_prediction.png")
    ev.export_confidence_png(conf, out / f"{stem}_confidence.png")
    print(f"wrote {stem}_prediction.png and {stem}_confidence.png to {out}")
    return 0


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adverseg",
        description="Adversarial semi-supervised semantic segmentation, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shapes dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--size", default="64", help="image size, H or HxW (default 64)")
    p.add_argument("--classes", type=int, default=4,
                   help="class count incl. background (default 4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true", help="overwrite existing output")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train on a folder dataset")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--config", help="JSON training config (defaults: desk scale)")
    p.add_argument("--fraction", type=float, default=1.0,
                   help="labeled fraction of the dataset (default 1.0)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--iterations", type=int, help="override max_iterations")
    p.add_argument("--no-adv", action="store_true",
                   help="drop the adversarial loss")
    p.add_argument("--no-semi", action="store_true",
                   help="drop the semi-supervised loss (labeled data only)")
    p.add_argument("--global-disc", action="store_true",
                   help="dense single-output discriminator (ablation)")
    p.add_argument("--allow-degenerate", action="store_true",
                   help="permit semi-supervised training without adversarial loss")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="training checkpoint file")
    p.add_argument("--data", required=True, help="validation dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--thresholds", default=",".join(str(t) for t in DEFAULT_THRESHOLDS),
                   help="comma list for the selected-pixel report")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="hyper-parameter grid with seed averaging")
    p.add_argument("--param", required=True,
                   choices=("lambda_semi", "t_semi", "lambda_adv"))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--seeds", type=int, default=3,
                   help="number of seeds to average (default 3)")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--val-data", required=True, help="validation dataset directory")
    p.add_argument("--fraction", type=float, default=0.125,
                   help="labeled fraction (default 1/8)")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("confidence", help="export prediction + confidence PNGs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_confidence)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
