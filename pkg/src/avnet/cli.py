"""Command line: ``avnet train | eval | predict | analyze``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from . import data as D
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .model import ModelConfig, analyze, build_model, format_report, report_json
from .train import evaluate, predict, restore_model, train

log = logging.getLogger("avnet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else parse_config({})
    return cfg.with_overrides(seed=getattr(args, "seed", None), output_dir=getattr(args, "out", None))


def _run_dir(cfg: RunConfig, command: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run = Path(cfg.output_dir) / f"{command}-{cfg.digest()}-{stamp}"
    suffix = 1
    while run.exists():
        run = Path(cfg.output_dir) / f"{command}-{cfg.digest()}-{stamp}-{suffix}"
        suffix += 1
    run.mkdir(parents=True)
    (run / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return run


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _config(args).with_overrides(**{
        "train.iterations": args.iters, "train.batch_size": args.batch_size,
        "train.base_lr": args.lr, "train.optimizer": args.optimizer})
    weights = cfg.train.class_weights
    if args.fold >= cfg.data.folds:
        raise UsageError(f"--fold {args.fold} out of range for {cfg.data.folds} folds")

    if args.synthetic:
        samples = [D.generate_synthetic(cfg.data.synthetic_size, cfg.seed + k, weights) for k in range(args.synthetic)]
        ids = [s.source_id for s in samples]
        by_id = dict(zip(ids, samples))
        if len(ids) >= cfg.data.folds:
            train_ids, val_ids = D.split_folds(ids, cfg.data.folds, cfg.seed)[args.fold]
        else:
            train_ids, val_ids = ids, ids
        train_set = [by_id[i] for i in train_ids]
        val_set = [by_id[i] for i in val_ids]
    else:
        if not cfg.data.manifest:
            raise UsageError("no data: set data.manifest in the config or pass --synthetic N")
        manifest = D.load_manifest(cfg.data.manifest)
        ids = manifest.ids("train") or manifest.ids()
        if len(ids) < cfg.data.folds:
            raise UsageError(f"manifest has {len(ids)} training ids, fewer than {cfg.data.folds} folds")
        train_ids, val_ids = D.split_folds(ids, cfg.data.folds, manifest.seed)[args.fold]
        train_set = manifest.load(train_ids, weights)
        val_set = manifest.load(val_ids, weights)
        if cfg.augmentation.enabled:
            train_set = D.AugmentedDataset(train_set, cfg.augmentation.build(cfg.seed))

    run = _run_dir(cfg, "train")
    snapshot = {**cfg.to_dict(), "fold": args.fold, "train_ids": list(train_ids), "val_ids": list(val_ids)}
    _write_json(run / "config.json", snapshot)
    model = build_model(cfg.model.build(), seed=cfg.seed)
    ckpt_dir = run / "checkpoints"
    ckpt_dir.mkdir()
    every = max(1, cfg.train.iterations // 10)

    def progress(rec):
        if rec["iteration"] % every == 0 or rec["iteration"] == cfg.train.iterations - 1:
            log.info("iter %d epoch %d lr %.3g loss %.5f", rec["iteration"], rec["epoch"], rec["lr"], rec["loss"])

    log.info("training %d iterations on %d samples -> %s", cfg.train.iterations, len(train_set), run)
    result = train(model, train_set, cfg.train.build(), seed=cfg.seed, callbacks=[progress],
                   checkpoint_dir=ckpt_dir, log_path=run / "train.csv", config_snapshot=snapshot,
                   split_seed=cfg.seed if args.synthetic else manifest.seed)
    save_checkpoint(result.checkpoint, run / "final.ckpt")
    _, report = evaluate(model, val_set, recall=cfg.report_recall, pad_mode=_pad_mode(cfg.eval_padding))
    report["final_loss"] = result.losses[-1] if result.losses else None
    report["config"] = snapshot
    _write_json(run / "metrics.json", report)
    print(json.dumps({k: report[k] for k in ("tpr_at", "tpr_ve", "accuracy", "final_loss")}))
    print(run)
    return EXIT_OK


def _pad_mode(name: str) -> str:
    return "constant" if name == "zero" else "reflect"


def _load_model(path):
    ckpt = load_checkpoint(path)
    snap = ckpt.config
    model_cfg = ModelConfig.from_dict(snap.get("model", {}))
    try:
        model_cfg.validate()
    except ValueError as e:
        raise CheckpointError(f"{path}: stored model config is invalid: {e}") from None
    if model_cfg.input_channels != 3:
        raise CheckpointError(f"{path}: model expects {model_cfg.input_channels} input channels, images have 3")
    if model_cfg.num_classes != D.NUM_CLASSES:
        raise CheckpointError(f"{path}: model has {model_cfg.num_classes} classes, labels define {D.NUM_CLASSES}")
    model = build_model(model_cfg)
    restore_model(model, ckpt)
    return model, snap


def cmd_eval(args) -> int:
    model, snap = _load_model(args.checkpoint)
    if args.config:
        want = _config(args).model.build().to_dict()
        if want != model.config.to_dict():
            raise CheckpointError(f"{args.checkpoint}: model config differs from {args.config}")
    weights = snap.get("train", {}).get("class_weights", D.DEFAULT_CLASS_WEIGHTS)
    if args.image or args.label:
        if not (args.image and args.label):
            raise UsageError("--image and --label go together")
        samples = [D.load_sample(args.image, args.label, weights)]
    elif args.data:
        samples = D.scan_directory(args.data, n_test=0).load(class_weights=weights)
    elif args.manifest:
        m = D.load_manifest(args.manifest)
        samples = m.load(m.ids(args.split) if args.split != "all" else m.ids(), weights)
    else:
        raise UsageError("give --manifest, --data or --image/--label")
    if not samples:
        raise UsageError("no samples to evaluate")
    pad = _pad_mode(snap.get("eval_padding", "reflect"))
    counts, report = evaluate(model, samples, recall=args.recall or snap.get("report_recall", False), pad_mode=pad)
    report["samples"] = [s.source_id for s in samples]
    report["checkpoint"] = str(args.checkpoint)
    text = json.dumps(report, indent=2, sort_keys=True)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, snap = _load_model(args.checkpoint)
    try:
        image = D.read_image(args.image)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        raise UsageError(f"cannot read image {args.image}: {e}") from None
    ignore = None
    if args.label:
        ignore = D.encode_labels(np.asarray(Image.open(args.label).convert("RGB")))[1]
    probs = predict(model, image, _pad_mode(snap.get("eval_padding", "reflect")))
    overlay = D.decode_predictions(probs, ignore)
    out = Path(args.out)
    if out.is_dir():
        out = out / f"{Path(args.image).stem}_overlay.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(overlay).save(out)
    print(out)
    return EXIT_OK


def cmd_analyze(args) -> int:
    cfg = _config(args)
    step = 2 ** cfg.model.build().downsamplings
    if args.input_size < step or args.input_size % step:
        raise UsageError(f"--input-size must be a positive multiple of {step}, got {args.input_size}")
    model = build_model(cfg.model.build(), seed=cfg.seed)
    report = analyze(model, args.input_size)
    text = format_report(report)
    as_json = report_json(report)
    print(as_json if args.format == "json" else text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "analysis.txt").write_text(text + "\n")
        (out / "analysis.json").write_text(as_json + "\n")
    return EXIT_OK


# --------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="output directory (predict: output PNG path or directory)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="avnet", description="Artery/vein segmentation network")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train on a manifest fold or synthetic data")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--iters", type=int, help="override train.iterations")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float, help="override train.base_lr")
    t.add_argument("--optimizer", choices=["sgd", "adam"])
    t.add_argument("--synthetic", type=int, default=0, metavar="N",
                   help="train on N generated samples instead of the manifest (no augmentation)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="full-image evaluation with A/V metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest")
    e.add_argument("--split", default="test", help="manifest split to evaluate (train, test, all)")
    e.add_argument("--data", help="directory of <id>.png / <id>_av.png pairs")
    e.add_argument("--image")
    e.add_argument("--label")
    e.add_argument("--recall", action="store_true", help="also report TP/(TP+FN)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", parents=[common], help="write a colour overlay PNG")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--label", help="optional annotation; its white pixels stay white")
    r.set_defaults(func=cmd_predict)

    a = sub.add_parser("analyze", parents=[common], help="shapes, parameter count, receptive fields")
    a.add_argument("--input-size", type=int, default=512)
    a.add_argument("--format", choices=["text", "json"], default="text")
    a.set_defaults(func=cmd_analyze)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    if args.command == "train" and args.fold < 0:
        parser.error("--fold must be non-negative")
    if args.command == "predict" and not args.out:
        parser.error("predict needs --out")
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError, CheckpointError, D.DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        log.exception("command failed")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
