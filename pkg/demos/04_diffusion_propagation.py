#!/usr/bin/env python3
"""Propagate sparse seeds to dense labels with the conditional diffusion model.

Trains the denoiser on target images paired with sparse seed labels: clean
one-hot encodings are masked at IGNORE pixels, noised according to a cosine
schedule at a random time, and the model learns to recover the seeded classes
given the image as conditioning. Sampling then runs a short deterministic
denoising trajectory from pure noise, which predicts a label for every pixel,
including ones no seed ever covered; seed pixels keep their seed labels (as
in the pipeline). The script reports accuracy of the argmax baseline, the
seeds, and the propagated labels, and writes a visual comparison.

Expects the cached source checkpoint from demos/02_source_training_and_gap.py
(trains one if missing, like demo 03).

Usage:
    python3 demos/04_diffusion_propagation.py [--out demo_out/propagate] [--quick]
"""

import argparse
import os

import numpy as np

from dgle.core import IGNORE, write_image
from dgle.diffprop import (
    DiffusionOptConfig,
    SamplerConfig,
    fresh_diffusion_model,
    propagate,
    train_diffusion,
)
from dgle.evalkit import seed_quality
from dgle.pipeline import colorize, default_palette
from dgle.seedgen import generate_seeds
from dgle.segmodel import OptimizerConfig, fresh_model, infer_batch, load_checkpoint, train_source
from dgle.synthdata import SceneSpec, generate_domain, source_shift, target_shift


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="demo_out/propagate")
    parser.add_argument("--model", default="demo_out/source/source.pt")
    parser.add_argument("--quick", action="store_true", help="fewer images and epochs")
    parser.add_argument("--steps", type=int, default=3, help="sampling steps")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    os.makedirs(args.out, exist_ok=True)

    count, epochs = (60, 10) if args.quick else (200, 30)
    target = generate_domain(SceneSpec(rng_seed=args.seed + 1), target_shift(), count)
    images = [im for im, _ in target]

    if os.path.exists(args.model):
        model = load_checkpoint(args.model)
    else:
        print(f"{args.model} missing; training a source model first")
        src = generate_domain(SceneSpec(rng_seed=args.seed), source_shift(), 200)
        model = fresh_model(5, seed=args.seed)
        os.makedirs(os.path.dirname(args.model) or ".", exist_ok=True)
        train_source(model, src, OptimizerConfig(seed=args.seed), checkpoint_path=args.model)

    seeds, stats = generate_seeds(
        lambda ims: infer_batch(model, ims), images, 0.6, 5
    )
    print(f"seeds ready: coverage {100 * stats.coverage:.1f}%")

    ckpt = os.path.join(args.out, "diffusion.pt")
    dmodel = fresh_diffusion_model(5, seed=args.seed)
    report = train_diffusion(
        dmodel,
        list(zip(images, seeds)),
        DiffusionOptConfig(epochs=epochs, seed=args.seed),
        checkpoint_path=ckpt,
    )
    print(
        f"diffusion trained {report.steps} steps in {report.wall_time:.0f}s, "
        f"loss {report.epoch_losses[0]:.3f} -> {report.epoch_losses[-1]:.3f}"
    )

    dense = propagate(
        dmodel, images, SamplerConfig(steps=args.steps), np.random.default_rng(args.seed)
    )
    assert all(not np.any(d.data == IGNORE) for d in dense), "propagation must be dense"
    for d, s in zip(dense, seeds):
        known = s.data != IGNORE
        d.data[known] = s.data[known]

    probs = infer_batch(model, images)
    for name, maps in (
        ("argmax baseline", [p.argmax_labels() for p in probs]),
        ("seeds", seeds),
        ("propagated", dense),
    ):
        precisions, coverages = [], []
        for (_, gt), m in zip(target, maps):
            p, c = seed_quality(gt, m)
            if p is not None:
                precisions.append(p)
            coverages.append(c)
        print(f"{name:16s} accuracy {np.mean(precisions):.4f}  coverage {100 * np.mean(coverages):5.1f}%")

    palette = default_palette(5)
    rows = []
    for idx in range(min(4, len(target))):
        img, gt = target[idx]
        rows.append([
            img.data,
            colorize(seeds[idx], palette).data,
            colorize(dense[idx], palette).data,
            colorize(gt, palette).data,
        ])
    tile_h, tile_w = rows[0][0].shape[:2]
    sheet = np.ones((len(rows) * (tile_h + 2) - 2, 4 * (tile_w + 2) - 2, 3), dtype=np.float32)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            sheet[i * (tile_h + 2):i * (tile_h + 2) + tile_h,
                  j * (tile_w + 2):j * (tile_w + 2) + tile_w] = tile
    path = os.path.join(args.out, "propagation.png")
    write_image(path, sheet)
    print(f"wrote {path} (columns: target image, seeds, propagated, ground truth)")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
