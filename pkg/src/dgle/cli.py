"""Command-line entry points; one subcommand per pipeline stage.

Every stage reads and writes only on-disk artifacts, so a full run can be
driven stage by stage from a shell. Settings resolve as: command-line flag,
then the DGLE_OUT environment variable (output root only), then the config
file value.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import diffprop as dp
from . import evalkit as ek
from . import pipeline as pl
from . import seedgen as sg
from . import segmodel as sm
from . import synthdata as sd
from .core import read_labelmap, write_labelmap, write_probmap


def _out_root(flag_value: str | None, config_value: str | None = None) -> str:
    """Output directory precedence: flag, then DGLE_OUT, then config."""
    if flag_value:
        return flag_value
    env = os.environ.get("DGLE_OUT")
    if env:
        return env
    if config_value:
        return config_value
    raise SystemExit("no output directory: pass --out or set DGLE_OUT")


def _cmd_synth(args) -> int:
    shift = {"source": sd.source_shift(), "target": sd.target_shift()}[args.domain]
    spec = sd.SceneSpec(
        num_classes=args.num_classes, image_size=args.image_size, rng_seed=args.seed
    )
    pairs = sd.generate_domain(spec, shift, args.count)
    sd.write_domain(_out_root(args.out), pairs, with_labels=not args.no_labels)
    print(f"wrote {args.count} {args.domain} images to {_out_root(args.out)}")
    return 0


def _load_pairs(root: str, num_classes: int, need_labels: bool):
    data = sd.load_folder_dataset(root, num_classes if need_labels else None)
    if need_labels and any(lab is None for _, lab in data):
        raise SystemExit(f"{root}: labels/ directory required")
    return data


def _cmd_train_source(args) -> int:
    data = _load_pairs(args.data, args.num_classes, need_labels=True)
    model = sm.fresh_model(args.num_classes, seed=args.seed)
    report = sm.train_source(
        model,
        data,
        sm.OptimizerConfig(epochs=args.epochs, seed=args.seed),
        checkpoint_path=args.out,
    )
    print(f"trained {report.steps} steps, final loss {report.epoch_losses[-1]:.4f} -> {args.out}")
    return 0


def _cmd_infer(args) -> int:
    model = sm.load_checkpoint(args.model)
    images = sd.load_folder_images(args.images)
    stems = sd.folder_stems(args.images)
    probs = sm.infer_batch(model, images)
    out = _out_root(args.out_probmaps)
    os.makedirs(out, exist_ok=True)
    for stem, p in zip(stems, probs):
        write_probmap(os.path.join(out, stem + ".dglp"), p)
    print(f"wrote {len(probs)} probability maps to {out}")
    return 0


def _cmd_refine(args) -> int:
    model = sm.load_checkpoint(args.model)
    images = sd.load_folder_images(args.images)
    stems = sd.folder_stems(args.images)
    labels = [
        read_labelmap(os.path.join(args.labels, stem + ".png"), model.num_classes)
        for stem in stems
    ]
    report = sm.finetune(
        model,
        list(zip(images, labels)),
        sm.OptimizerConfig(epochs=args.epochs, seed=args.seed),
        checkpoint_path=args.out,
    )
    print(f"refined {report.steps} steps, final loss {report.epoch_losses[-1]:.4f} -> {args.out}")
    return 0


def _cmd_seed(args) -> int:
    model = sm.load_checkpoint(args.model)
    images = sd.load_folder_images(args.images)
    stems = sd.folder_stems(args.images)
    enhancer = sg.Enhancer(args.enhancer)
    seeds, stats = sg.generate_seeds(
        lambda ims: sm.infer_batch(model, ims),
        images,
        args.n,
        model.num_classes,
        enhancer,
    )
    out = _out_root(args.out)
    os.makedirs(out, exist_ok=True)
    for stem, seed_map in zip(stems, seeds):
        write_labelmap(os.path.join(out, stem + ".png"), seed_map)
    import json

    with open(os.path.join(out, "stats.json"), "w") as f:
        json.dump(
            {
                "total_pixels": stats.total_pixels,
                "kept_view_a": stats.kept_view_a,
                "kept_view_b": stats.kept_view_b,
                "kept_fused": stats.kept_fused,
                "coverage": stats.coverage,
                "thresholds_a": {str(k): v for k, v in stats.thresholds_a.items()},
                "thresholds_b": {str(k): v for k, v in stats.thresholds_b.items()},
            },
            f,
            indent=2,
        )
    print(f"wrote {len(seeds)} seed maps to {out} (coverage {stats.coverage:.3f})")
    return 0


def _cmd_propagate_train(args) -> int:
    images = sd.load_folder_images(args.images)
    stems = sd.folder_stems(args.images)
    seeds = [
        read_labelmap(os.path.join(args.seeds, stem + ".png"), args.num_classes)
        for stem in stems
    ]
    model = dp.fresh_diffusion_model(args.num_classes, seed=args.seed)
    if args.init_from:
        dp.warm_start_condition(model, sm.load_checkpoint(args.init_from))
    report = dp.train_diffusion(
        model,
        list(zip(images, seeds)),
        dp.DiffusionOptConfig(epochs=args.epochs, seed=args.seed),
        checkpoint_path=args.out,
    )
    print(f"trained {report.steps} steps, final loss {report.epoch_losses[-1]:.4f} -> {args.out}")
    return 0


def _cmd_propagate_infer(args) -> int:
    model = dp.load_checkpoint(args.ckpt)
    images = sd.load_folder_images(args.images)
    stems = sd.folder_stems(args.images)
    labels = dp.propagate(
        model,
        images,
        dp.SamplerConfig(steps=args.steps),
        np.random.default_rng(args.seed),
    )
    out = _out_root(args.out)
    os.makedirs(out, exist_ok=True)
    for stem, lab in zip(stems, labels):
        write_labelmap(os.path.join(out, stem + ".png"), lab)
    print(f"wrote {len(labels)} dense label maps to {out}")
    return 0


def _cmd_evaluate(args) -> int:
    gt_stems = sorted(os.path.splitext(f)[0] for f in os.listdir(args.gt) if f.endswith(".png"))
    if not gt_stems:
        raise SystemExit(f"{args.gt}: no label PNGs")
    cm = ek.ConfusionMatrix(args.num_classes)
    for stem in gt_stems:
        gt = read_labelmap(os.path.join(args.gt, stem + ".png"), args.num_classes)
        pred = read_labelmap(os.path.join(args.pred, stem + ".png"), args.num_classes)
        cm = ek.accumulate(cm, gt, pred)
    ek.write_report(args.out, cm)
    print(f"mIoU {ek.miou(cm):.4f}, pixel accuracy {ek.pixel_accuracy(cm):.4f} -> {args.out}")
    return 0


def _pipeline_config(args) -> pl.PipelineConfig:
    overrides = {}
    for key in ("n", "sampler_steps", "outer_iterations", "seed"):
        v = getattr(args, key.replace("-", "_"), None)
        if v is not None:
            overrides[key] = v
    cfg = pl.PipelineConfig.from_yaml(args.config, overrides)
    out = args.out or os.environ.get("DGLE_OUT") or cfg.out_dir
    if not out:
        raise SystemExit("no output directory: pass --out, set DGLE_OUT, or set out_dir in config")
    if out != cfg.out_dir:
        from dataclasses import replace

        cfg = replace(cfg, out_dir=out)
    return cfg


def _cmd_pipeline(args) -> int:
    cfg = _pipeline_config(args)
    ledger = pl.run(cfg, resume=args.resume)
    miou = ledger.final_miou()
    print(f"pipeline complete; final mIoU {'n/a' if miou is None else f'{miou:.4f}'}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _pipeline_config(args)
    ledger = pl.ablate(cfg, args.variant, resume=args.resume)
    miou = ledger.final_miou()
    print(f"ablation {args.variant}; final mIoU {'n/a' if miou is None else f'{miou:.4f}'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgle", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic domain")
    p.add_argument("--out", help="output directory (or DGLE_OUT)")
    p.add_argument("--domain", choices=["source", "target"], required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--no-labels", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-source", help="train the segmenter on labeled data")
    p.add_argument("--data", required=True, help="dataset dir with images/ and labels/")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_source)

    p = sub.add_parser("infer", help="write per-pixel probability maps")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="dataset dir with images/")
    p.add_argument("--out-probmaps", help="output directory (or DGLE_OUT)")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("refine", help="fine-tune the segmenter on label maps")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True, help="directory of label PNGs")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_refine)

    p = sub.add_parser("seed", help="generate sparse seed pseudo-labels")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--n", type=float, default=0.6, help="per-class discard fraction")
    p.add_argument("--enhancer", default="builtin", help="builtin or cmd:<template>")
    p.add_argument("--out", help="output directory (or DGLE_OUT)")
    p.set_defaults(func=_cmd_seed)

    p = sub.add_parser("propagate-train", help="train the diffusion propagator on seeds")
    p.add_argument("--seeds", required=True, help="directory of seed PNGs")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--init-from", help="segmenter checkpoint to warm-start the condition encoder")
    p.set_defaults(func=_cmd_propagate_train)

    p = sub.add_parser("propagate-infer", help="sample dense labels from the propagator")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--steps", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="output directory (or DGLE_OUT)")
    p.set_defaults(func=_cmd_propagate_infer)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--gt", required=True, help="directory of ground-truth PNGs")
    p.add_argument("--pred", required=True, help="directory of predicted PNGs")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--num-classes", type=int, default=5)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("pipeline", help="run the full iterative pipeline")
    p.add_argument("--config", required=True, help="YAML config file")
    p.add_argument("--resume", action="store_true", help="skip completed stages")
    p.add_argument("--out", help="output root (overrides DGLE_OUT and config)")
    p.add_argument("--n", type=float)
    p.add_argument("--sampler-steps", type=int)
    p.add_argument("--outer-iterations", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_pipeline)

    p = sub.add_parser("ablate", help="run a reduced pipeline variant")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", required=True, choices=list(pl.VARIANTS))
    p.add_argument("--resume", action="store_true")
    p.add_argument("--out", help="output root (overrides DGLE_OUT and config)")
    p.add_argument("--n", type=float)
    p.add_argument("--sampler-steps", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
