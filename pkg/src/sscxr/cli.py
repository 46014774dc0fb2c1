"""``sscxr`` command-line entry point.

Subcommands: synth, pretrain, finetune, eval, heatmap.
Exit codes: 0 success, 1 runtime error, 2 configuration/validation error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as cfgmod
from . import data as data_mod
from . import metrics
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classify import (
    ClsHeadConfig,
    FinetuneConfig,
    HeadConfigError,
    attach_cls_head,
    finetune_cls,
    load_classifier,
    predict_proba,
    train_accuracy,
)
from .heatmap import class_token_heatmap, contour_overlay, overlay, save_rgb
from .pretrain import run_pretraining, write_loss_csv
from .segment import (
    SegConfigError,
    SegDecoderConfig,
    SegFinetuneConfig,
    binarize,
    build_segmenter,
    default_taps,
    finetune_seg,
    load_segmenter,
    seg_forward,
)
from .vit import VisionTransformer

logger = logging.getLogger("sscxr")

VALIDATION_ERRORS = (cfgmod.ConfigError, data_mod.ManifestError, HeadConfigError, SegConfigError)


def _out_dir(cfg: dict, flag) -> Path:
    out = Path(flag) if flag else cfg.get("output_dir")
    if out is None:
        raise cfgmod.ConfigError("config key 'output_dir' is required (or pass --out)")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    manifest = data_mod.synth_dataset(args.kind, args.count, args.out, seed=args.seed, size=args.size)
    print(f"wrote {len(manifest)} {args.kind} samples; manifest {manifest.source}")
    return 0


# ---------------------------------------------------------------------------
# pretrain
# ---------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = cfgmod.resolve("pretrain", args.config, args.set, seed=args.seed)
    cfgmod.require(cfg, "manifest")
    out = _out_dir(cfg, args.out)
    enc = cfgmod.encoder_config(cfg)
    pcfg = cfgmod.pretrain_config(cfg)
    dcfg = cfgmod.decoder_config(cfg)
    cfgmod.write_resolved(cfg, out)
    manifest = data_mod.load_manifest(cfg["manifest"], split_tag="pretrain")
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt = run_pretraining(manifest, pcfg, enc, dcfg, out_dir=out, resume=resume)
    ckpt.meta["resolved_config"] = cfgmod.to_jsonable(cfg)
    save_checkpoint(ckpt, out / "checkpoint.sscxr")
    history = ckpt.provenance["loss_history"]
    write_loss_csv(history, out / "loss.csv")
    print(f"pretrained {len(history)} steps; final loss {history[-1]:.6f}; checkpoint {out / 'checkpoint.sscxr'}")
    return 0


# ---------------------------------------------------------------------------
# finetune
# ---------------------------------------------------------------------------


def _init_source(init: str, enc):
    if init == "scratch":
        return enc
    ckpt = load_checkpoint(init, encoder_only=True)
    if ckpt.encoder_config != enc:
        raise cfgmod.ConfigError(
            f"--init checkpoint encoder {ckpt.encoder_config} does not match the configured encoder {enc}"
        )
    return ckpt


def cmd_finetune(args) -> int:
    command = f"finetune-{args.task}"
    cfg = cfgmod.resolve(command, args.config, args.set, seed=args.seed)
    cfgmod.require(cfg, "manifest")
    out = _out_dir(cfg, args.out)
    enc = cfgmod.encoder_config(cfg)
    cfg_echo = {**cfg, "init": args.init}
    cfgmod.write_resolved(cfg_echo, out)
    source = _init_source(args.init, enc)
    manifest = data_mod.load_manifest(cfg["manifest"], split_tag="train")

    if args.task == "cls":
        if manifest.task != "cls":
            raise cfgmod.ConfigError("finetune cls needs a labeled manifest")
        samples = data_mod.load_samples(manifest, enc.image_size)
        bad = [s.label for s in samples if not 0 <= s.label < cfg["num_classes"]]
        if bad:
            raise cfgmod.ConfigError(f"label {bad[0]} outside [0, {cfg['num_classes']})")
        model = attach_cls_head(source, ClsHeadConfig(cfg["num_classes"]), seed=cfg["seed"])
        fcfg = FinetuneConfig(
            learning_rate=cfg["learning_rate"],
            weight_decay=cfg["weight_decay"],
            min_lr=cfg["min_lr"],
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            seed=cfg["seed"],
            max_steps=cfg["max_steps"],
            linear_probe=cfg["linear_probe"],
            class_weights=cfg["class_weights"],
        )
        result = finetune_cls(samples, model, fcfg)
        images = np.stack([s.pixels for s in samples])
        labels = np.array([s.label for s in samples])
        acc = train_accuracy(result.model, images, labels)
        _write_log(out / "train_log.csv", ["step", "loss", "train_acc"],
                   zip(range(1, result.steps + 1), result.loss_history, result.accuracy_history))
        summary = {"task": "cls", "steps": result.steps, "train_acc": acc,
                   "steps_to_100": result.steps_to_accuracy(100.0), "first_loss": result.loss_history[0]}
    else:
        if manifest.task != "seg":
            raise cfgmod.ConfigError("finetune seg needs a mask-bearing manifest")
        samples = data_mod.load_samples(manifest, enc.image_size)
        taps = tuple(cfg["seg_tap_layers"]) if cfg["seg_tap_layers"] else default_taps(enc.depth)
        seg_cfg = SegDecoderConfig(taps, cfg["seg_feature_size"])
        model = build_segmenter(source, seg_cfg, seed=cfg["seed"])
        fcfg = SegFinetuneConfig(
            learning_rate=cfg["learning_rate"],
            weight_decay=cfg["weight_decay"],
            min_lr=cfg["min_lr"],
            epochs=cfg["epochs"],
            batch_size=cfg["batch_size"],
            seed=cfg["seed"],
            max_steps=cfg["max_steps"],
            threshold=cfg["threshold"],
        )
        result = finetune_seg(samples, model, fcfg)
        _write_log(out / "train_log.csv", ["step", "loss"], zip(range(1, len(result.loss_history) + 1), result.loss_history))
        _write_log(out / "dice_log.csv", ["step", "train_dice"], zip(result.steps_history, result.dice_history))
        summary = {"task": "seg", "steps": len(result.loss_history),
                   "train_dice": result.dice_history[-1] if result.dice_history else None,
                   "first_loss": result.loss_history[0]}
        if args.overlays:
            odir = out / "overlays"
            odir.mkdir(exist_ok=True)
            probs = seg_forward(result.model, np.stack([s.pixels for s in samples]))
            for i, (s, pr) in enumerate(zip(samples, probs)):
                stem = Path(s.path).stem if s.path else f"sample{i:05d}"
                save_rgb(contour_overlay(s.pixels, binarize(pr, fcfg.threshold), s.mask), odir / f"{stem}_overlay.png")

    # content hash rather than path, so reruns elsewhere give identical bytes
    init_id = args.init if args.init == "scratch" else "sha256:" + hashlib.sha256(Path(args.init).read_bytes()).hexdigest()
    result.checkpoint.meta["resolved_config"] = cfgmod.to_jsonable({**cfg, "init": init_id})
    save_checkpoint(result.checkpoint, out / "model.sscxr")
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    if args.task == "cls":
        print(f"fine-tuned {summary['steps']} steps; train ACC {summary['train_acc']:.2f}%")
    else:
        print(f"fine-tuned {summary['steps']} steps; train Dice {summary['train_dice']:.4f}")
    return 0


def _write_log(path: Path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.task != args.task:
        raise cfgmod.ConfigError(f"checkpoint task is {ckpt.task!r}, not {args.task!r}")
    cohorts = args.cohort or []
    if cohorts and len(cohorts) != len(args.manifest):
        raise cfgmod.ConfigError("give one --cohort per --manifest (or none)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = ckpt.encoder_config.image_size
    model = load_classifier(ckpt) if args.task == "cls" else load_segmenter(ckpt)
    rows = []
    for i, mpath in enumerate(args.manifest):
        tag = cohorts[i] if cohorts else Path(mpath).stem if len(args.manifest) == 1 else f"{Path(mpath).stem}{i}"
        manifest = data_mod.load_manifest(mpath, split_tag="test")
        if manifest.task != args.task:
            raise cfgmod.ConfigError(f"{mpath}: {manifest.task} manifest given to eval {args.task}")
        samples = data_mod.load_samples(manifest, size)
        images = np.stack([s.pixels for s in samples])
        if args.task == "cls":
            labels = np.array([s.label for s in samples])
            if labels.max() >= model.num_classes:
                raise cfgmod.ConfigError(
                    f"{mpath}: label {labels.max()} but the checkpoint has {model.num_classes} classes"
                )
            probs = predict_proba(model, images)
            rel = [os.path.relpath(e.image_path, Path(mpath).parent) for e in manifest.entries]
            metrics.write_predictions(rel, labels, probs,
                                      out / f"predictions_{tag}.csv")
            report = metrics.classification_report(labels, probs, cohort=tag)
        else:
            probs = seg_forward(model, images)
            preds = binarize(probs)
            pred_dir = out / f"pred_masks_{tag}"
            pred_dir.mkdir(exist_ok=True)
            entries = []
            for e, pm in zip(manifest.entries, preds):
                mp = pred_dir / f"{Path(e.image_path).stem}_pred.png"
                Image.fromarray(pm * 255, mode="L").save(mp)
                entries.append(data_mod.ManifestEntry(e.image_path, None, mp))
            data_mod.write_manifest(data_mod.SampleManifest(entries, "test"), pred_dir / "manifest.csv")
            report = metrics.segmentation_report(preds, [s.mask for s in samples], cohort=tag)
        report.write(out)
        rows.append(report)
        print(f"[{tag}] " + ", ".join(f"{k}={_short(v)}" for k, v in report.values.items()))
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        for j, r in enumerate(rows):
            fh.write(r.to_csv(header=(j == 0)))
    return 0


def _short(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------


def cmd_heatmap(args) -> int:
    ckpt: Checkpoint = load_checkpoint(args.checkpoint, encoder_only=True)
    if not ckpt.encoder_config.use_class_token:
        raise cfgmod.ConfigError("heatmaps need an encoder with a class token")
    encoder = VisionTransformer(ckpt.encoder_config)
    encoder.load_state_dict(ckpt.encoder_state())
    paths = [Path(p) for p in args.images]
    if args.manifest:
        paths += [e.image_path for e in data_mod.load_manifest(args.manifest, check_files=True).entries]
    if not paths:
        raise cfgmod.ConfigError("no images given")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    size = ckpt.encoder_config.image_size
    for p in paths:
        sample = data_mod.load_image(p, size)
        heat = class_token_heatmap(encoder, sample.pixels, layer=args.layer, head=args.head)
        save_rgb(overlay(sample.pixels, heat), out / f"{p.stem}_heatmap.png")
        data_mod.save_image(heat, out / f"{p.stem}_heat.png")
    print(f"wrote {len(paths)} heatmaps to {out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sscxr", description="Group-masked autoencoder pretraining and fine-tuning for X-ray images.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest")
    p.add_argument("--kind", required=True, choices=data_mod.SYNTH_KINDS)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64, help="image side length in pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", help="group-masked autoencoder pretraining")
    p.add_argument("config", nargs="?", help="JSON run configuration")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--resume", help="continue from a checkpoint written by pretrain")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune for classification or segmentation")
    p.add_argument("task", choices=("cls", "seg"))
    p.add_argument("config", nargs="?")
    p.add_argument("--init", default="scratch", help="'scratch' or a .sscxr checkpoint (encoder only is used)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--overlays", action="store_true", help="write predicted-contour overlays (seg)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint on one or more cohorts")
    p.add_argument("task", choices=("cls", "seg"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True, action="append")
    p.add_argument("--cohort", action="append", help="tag per manifest, in order")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("heatmap", help="class-token attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--layer", type=int, help="raw attention of this layer (1-based) instead of rollout")
    p.add_argument("--head", type=int, help="head for --layer (default 0)")
    p.set_defaults(func=cmd_heatmap)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"sscxr {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level diagnostic
        logger.debug("failure", exc_info=True)
        print(f"sscxr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
