"""Small encoder-decoder segmentation network and its training loops.

The network is a 4-level U-Net (~0.5M parameters) predicting per-pixel class
logits. Training minimizes cross-entropy over supervised pixels only: IGNORE
pixels contribute exactly zero loss and zero gradient, which is what lets
sparse pseudo-label maps drive fine-tuning.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import IGNORE, ImageTensor, LabelMap, ProbMap
from .evalkit import ConfusionMatrix, accumulate

logger = logging.getLogger(__name__)

SEG_CHECKPOINT_KIND = "dgle-segmodel"
CHECKPOINT_VERSION = 1


@dataclass
class OptimizerConfig:
    """SGD settings for source training and pseudo-label fine-tuning."""

    lr: float = 2.5e-4
    momentum: float = 0.9
    poly_power: float = 0.9
    batch_size: int = 4
    epochs: int = 20
    seed: int = 0


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    wall_time: float = 0.0
    checkpoint_path: str | None = None


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.n1 = nn.GroupNorm(4, cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.n2 = nn.GroupNorm(4, cout)

    def forward(self, x):
        x = F.silu(self.n1(self.c1(x)))
        return F.silu(self.n2(self.c2(x)))


class SegModel(nn.Module):
    """4-level U-Net pixel classifier with skip connections."""

    def __init__(self, num_classes: int, in_channels: int = 3,
                 channels: tuple[int, ...] = (16, 32, 64, 128)):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.downsample_factor = 2 ** (len(channels) - 1)
        self.enc = nn.ModuleList()
        c = in_channels
        for co in channels:
            self.enc.append(ConvBlock(c, co))
            c = co
        self.dec = nn.ModuleList(
            ConvBlock(channels[i] + channels[i - 1], channels[i - 1])
            for i in range(len(channels) - 1, 0, -1)
        )
        self.head = nn.Conv2d(channels[0], num_classes, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for block, skip in zip(self.dec, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1))
        return self.head(x)


def fresh_model(num_classes: int, seed: int = 0, in_channels: int = 3) -> SegModel:
    """Deterministically initialized model: same seed, same parameters."""
    torch.manual_seed(seed)
    return SegModel(num_classes, in_channels=in_channels)


def masked_cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over non-IGNORE pixels; IGNORE pixels carry no gradient."""
    return F.cross_entropy(logits, labels, ignore_index=IGNORE)


def _to_batch(images: list[ImageTensor]) -> torch.Tensor:
    arr = np.stack([im.data for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def _labels_to_batch(labels: list[LabelMap]) -> torch.Tensor:
    return torch.from_numpy(np.stack([l.data for l in labels]).astype(np.int64))


def _poly_lr(base_lr: float, step: int, total_steps: int, power: float) -> float:
    return base_lr * (1.0 - step / max(total_steps, 1)) ** power


def _train(
    model: SegModel,
    data: list[tuple[ImageTensor, LabelMap]],
    opt: OptimizerConfig,
    checkpoint_path: str | None,
    meta: dict | None,
) -> TrainReport:
    if not data:
        raise ValueError("training requires a non-empty dataset")
    if all(bool((l.data == IGNORE).all()) for _, l in data):
        raise ValueError("training requires at least one supervised pixel in the dataset")
    for im, l in data:
        if im.channels != model.in_channels:
            raise ValueError(f"image has {im.channels} channels, model expects {model.in_channels}")
        if (im.height, im.width) != l.data.shape:
            raise ValueError("image / label shape mismatch")

    torch.manual_seed(opt.seed)
    optimizer = torch.optim.SGD(model.parameters(), lr=opt.lr, momentum=opt.momentum)
    steps_per_epoch = math.ceil(len(data) / opt.batch_size)
    total_steps = opt.epochs * steps_per_epoch

    model.train()
    report = TrainReport()
    t0 = time.time()
    step = 0
    for epoch in range(opt.epochs):
        order = np.random.default_rng([opt.seed, epoch]).permutation(len(data))
        losses = []
        for start in range(0, len(data), opt.batch_size):
            idx = order[start : start + opt.batch_size]
            labels = _labels_to_batch([data[i][1] for i in idx])
            if (labels == IGNORE).all():
                logger.warning("skipping batch with zero supervised pixels (epoch %d)", epoch)
                step += 1
                continue
            images = _to_batch([data[i][0] for i in idx])
            lr = _poly_lr(opt.lr, step, total_steps, opt.poly_power)
            for group in optimizer.param_groups:
                group["lr"] = lr
            logits = model(images)
            loss = masked_cross_entropy(logits, labels)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss {loss.item()} at step {step} (lr={lr:.3e}); aborting"
                )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())
            step += 1
        report.epoch_losses.append(float(np.mean(losses)) if losses else float("nan"))
    report.steps = step
    report.wall_time = time.time() - t0
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, meta=meta)
        report.checkpoint_path = checkpoint_path
    return report


def train_source(
    model: SegModel,
    data: list[tuple[ImageTensor, LabelMap]],
    opt: OptimizerConfig,
    checkpoint_path: str | None = None,
    meta: dict | None = None,
) -> TrainReport:
    """Supervised training on labeled source-domain data."""
    return _train(model, data, opt, checkpoint_path, meta)


def finetune(
    model: SegModel,
    data: list[tuple[ImageTensor, LabelMap]],
    opt: OptimizerConfig,
    checkpoint_path: str | None = None,
    meta: dict | None = None,
) -> TrainReport:
    """Self-training refinement on (possibly sparse) pseudo-label maps."""
    return _train(model, data, opt, checkpoint_path, meta)


def infer(model: SegModel, image: ImageTensor) -> ProbMap:
    """Per-pixel softmax probabilities at the input resolution."""
    return infer_batch(model, [image])[0]


def infer_batch(model: SegModel, images: list[ImageTensor], batch_size: int = 8) -> list[ProbMap]:
    """Batched inference; inputs are padded to the model stride and cropped back."""
    for im in images:
        if im.channels != model.in_channels:
            raise ValueError(f"image has {im.channels} channels, model expects {model.in_channels}")
    model.eval()
    out: list[ProbMap] = []
    factor = model.downsample_factor
    groups: dict[tuple[int, int], list[int]] = {}
    for i, im in enumerate(images):
        groups.setdefault((im.height, im.width), []).append(i)
    results: dict[int, ProbMap] = {}
    with torch.no_grad():
        for (h, w), idxs in groups.items():
            pad_h = (-h) % factor
            pad_w = (-w) % factor
            for start in range(0, len(idxs), batch_size):
                chunk = idxs[start : start + batch_size]
                x = _to_batch([images[i] for i in chunk])
                if pad_h or pad_w:
                    x = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect")
                probs = torch.softmax(model(x), dim=1)[:, :, :h, :w]
                arr = probs.permute(0, 2, 3, 1).numpy()
                for j, i in enumerate(chunk):
                    results[i] = ProbMap(arr[j])
    for i in range(len(images)):
        out.append(results[i])
    return out


def evaluate(model: SegModel, data: list[tuple[ImageTensor, LabelMap]]) -> ConfusionMatrix:
    """Confusion matrix of model argmax predictions against ground truth."""
    if not data:
        raise ValueError("evaluation requires a non-empty dataset")
    cm = ConfusionMatrix(model.num_classes)
    probs = infer_batch(model, [im for im, _ in data])
    for p, (_, gt) in zip(probs, data):
        cm = accumulate(cm, gt, p.argmax_labels())
    return cm


def save_checkpoint(model: SegModel, path: str, meta: dict | None = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(
        {
            "kind": SEG_CHECKPOINT_KIND,
            "version": CHECKPOINT_VERSION,
            "num_classes": model.num_classes,
            "in_channels": model.in_channels,
            "channels": model.channels,
            "state_dict": model.state_dict(),
            "meta": meta or {},
        },
        path,
    )


def load_checkpoint(path: str) -> SegModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != SEG_CHECKPOINT_KIND or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} segmentation checkpoint")
    model = SegModel(blob["num_classes"], in_channels=blob["in_channels"], channels=blob["channels"])
    model.load_state_dict(blob["state_dict"])
    return model
