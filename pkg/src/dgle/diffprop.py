"""Conditional diffusion propagation of sparse seed labels to dense maps.

Labels are embedded as signed one-hot vectors and treated as the clean signal
of a continuous-time diffusion process. A small image-conditioned U-Net is
trained to predict class logits from a noised embedding, with cross-entropy
evaluated only at seed pixels; unlabeled pixels contribute nothing, and at
inference the model fills them in from image evidence. Sampling runs a short
deterministic reverse trajectory and decodes the final logits, so every pixel
of the output carries a label.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import IGNORE, DiffusionState, ImageTensor, LabelMap
from .segmodel import TrainReport

logger = logging.getLogger(__name__)

DIFF_CHECKPOINT_KIND = "dgle-diffusion"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine signal-retention schedule on continuous time t in [0, 1].

    alpha_bar(t) is the squared-cosine curve normalized to 1 at t=0 and
    clipped away from {0, 1} so both sqrt terms stay well conditioned.
    """

    offset: float = 0.008
    clip_eps: float = 1e-5

    def alpha_bar(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("t must lie in [0, 1]")
        num = np.cos((t + self.offset) / (1.0 + self.offset) * np.pi / 2.0) ** 2
        den = math.cos(self.offset / (1.0 + self.offset) * math.pi / 2.0) ** 2
        out = np.clip(num / den, self.clip_eps, 1.0 - self.clip_eps)
        return float(out) if out.ndim == 0 else out


def add_noise(
    x0: np.ndarray, t: float, rng: np.random.Generator, schedule: NoiseSchedule | None = None
) -> DiffusionState:
    """Forward process: z = sqrt(ab)*x0 + sqrt(1-ab)*eps with eps ~ N(0, I)."""
    if schedule is None:
        schedule = NoiseSchedule()
    ab = schedule.alpha_bar(float(t))
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    z = np.sqrt(ab, dtype=np.float32) * x0.astype(np.float32) + np.sqrt(
        1.0 - ab, dtype=np.float32
    ) * eps
    return DiffusionState(z.astype(np.float32), float(t))


@dataclass
class DiffusionOptConfig:
    """AdamW settings for denoiser training."""

    lr: float = 6e-5
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 60
    seed: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse-process settings; ``steps`` is the number of denoising steps."""

    steps: int = 3
    scale: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.scale <= 0:
            raise ValueError("embedding scale must be positive")


def _time_features(t: torch.Tensor, dim: int = 32) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=t.dtype) / half)
    ang = t[:, None] * 1000.0 * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class TimedBlock(nn.Module):
    """Two 3x3 convolutions with a per-channel time-embedding bias in between."""

    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.c1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.n1 = nn.GroupNorm(4, cout)
        self.temb = nn.Linear(tdim, cout)
        self.c2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.n2 = nn.GroupNorm(4, cout)

    def forward(self, x, temb):
        x = F.silu(self.n1(self.c1(x)))
        x = x + self.temb(temb)[:, :, None, None]
        return F.silu(self.n2(self.c2(x)))


class CondEncoder(nn.Module):
    """Image feature extractor shared across all denoising steps."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        c = out_channels
        self.c1 = nn.Conv2d(in_channels, c, 3, padding=1)
        self.n1 = nn.GroupNorm(4, c)
        self.c2 = nn.Conv2d(c, c, 3, padding=1)
        self.n2 = nn.GroupNorm(4, c)
        self.down = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.n3 = nn.GroupNorm(4, 2 * c)
        self.up = nn.Conv2d(2 * c, c, 3, padding=1)
        self.n4 = nn.GroupNorm(4, c)
        self.mix = nn.Conv2d(2 * c, c, 3, padding=1)
        self.n5 = nn.GroupNorm(4, c)

    def forward(self, x):
        a = F.silu(self.n1(self.c1(x)))
        a = F.silu(self.n2(self.c2(a)))
        b = F.silu(self.n3(self.down(a)))
        b = F.interpolate(b, size=a.shape[-2:], mode="nearest")
        b = F.silu(self.n4(self.up(b)))
        return F.silu(self.n5(self.mix(torch.cat([a, b], dim=1))))


class DiffusionModel(nn.Module):
    """Image-conditioned denoiser mapping (noised embedding, t, image) to logits."""

    def __init__(self, num_classes: int, in_channels: int = 3,
                 cond_channels: int = 16, channels: tuple[int, ...] = (32, 64, 128),
                 time_dim: int = 32):
        super().__init__()
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.cond_channels = cond_channels
        self.channels = tuple(channels)
        self.time_dim = time_dim
        self.downsample_factor = 2 ** (len(channels) - 1)
        self.cond = CondEncoder(in_channels, cond_channels)
        self.tmlp = nn.Sequential(
            nn.Linear(time_dim, 2 * time_dim), nn.SiLU(), nn.Linear(2 * time_dim, 2 * time_dim)
        )
        tdim = 2 * time_dim
        self.enc = nn.ModuleList()
        c = num_classes + cond_channels
        for co in channels:
            self.enc.append(TimedBlock(c, co, tdim))
            c = co
        self.dec = nn.ModuleList(
            TimedBlock(channels[i] + channels[i - 1], channels[i - 1], tdim)
            for i in range(len(channels) - 1, 0, -1)
        )
        self.head = nn.Conv2d(channels[0], num_classes, 1)

    def encode_condition(self, images: torch.Tensor) -> torch.Tensor:
        return self.cond(images)

    def denoise(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        temb = self.tmlp(_time_features(t, self.time_dim))
        x = torch.cat([z, cond], dim=1)
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x, temb)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = F.max_pool2d(x, 2)
        for block, skip in zip(self.dec, reversed(skips)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skip], dim=1), temb)
        return self.head(x)

    def forward(self, z, t, images):
        return self.denoise(z, t, self.encode_condition(images))


def fresh_diffusion_model(num_classes: int, seed: int = 0, in_channels: int = 3) -> DiffusionModel:
    """Deterministically initialized denoiser: same seed, same parameters."""
    torch.manual_seed(seed)
    return DiffusionModel(num_classes, in_channels=in_channels)


def warm_start_condition(model: DiffusionModel, segmenter: nn.Module) -> list[str]:
    """Copy the segmenter's early encoder filters into the condition encoder.

    The condition encoder's stem (c1/n1/c2/n2) and downsampling conv (down/n3)
    have the same tensor shapes as the segmenter's first two encoder blocks.
    Starting from a segmenter that already separates the classes removes most
    of the draw-to-draw variance of training the extractor from scratch; the
    copied weights keep training afterwards. Returns the copied state keys.
    """
    pairs = [
        ("c1", segmenter.enc[0].c1), ("n1", segmenter.enc[0].n1),
        ("c2", segmenter.enc[0].c2), ("n2", segmenter.enc[0].n2),
        ("down", segmenter.enc[1].c1), ("n3", segmenter.enc[1].n1),
    ]
    copied = []
    with torch.no_grad():
        for name, src in pairs:
            dst = getattr(model.cond, name)
            for pname, sp in src.named_parameters():
                dp_ = getattr(dst, pname)
                if dp_.shape != sp.shape:
                    raise ValueError(
                        f"cond.{name}.{pname}: shape {tuple(dp_.shape)} != "
                        f"segmenter {tuple(sp.shape)}"
                    )
                dp_.copy_(sp)
                copied.append(f"cond.{name}.{pname}")
    return copied


def diffusion_training_loss(
    model: DiffusionModel,
    x0: torch.Tensor,
    labels: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    cond: torch.Tensor,
    schedule: NoiseSchedule,
) -> torch.Tensor:
    """Masked denoising loss for one batch.

    The clean embedding is multiplied by the label mask before noising, so
    whatever values ``x0`` holds at IGNORE pixels cannot reach the model, and
    cross-entropy skips those pixels; together the loss is invariant to any
    finite perturbation of ``x0`` at unlabeled positions.
    """
    mask = (labels != IGNORE).unsqueeze(1).to(x0.dtype)
    x0 = x0 * mask
    ab = torch.as_tensor(
        schedule.alpha_bar(t.numpy()), dtype=x0.dtype
    ).view(-1, 1, 1, 1)
    z = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    logits = model.denoise(z, t, cond)
    return F.cross_entropy(logits, labels, ignore_index=IGNORE)


def encode_labels_torch(labels: torch.Tensor, num_classes: int, scale: float) -> torch.Tensor:
    """Signed one-hot embedding (+scale target class, -scale others, 0 at IGNORE)."""
    safe = labels.clamp(max=num_classes - 1).long()
    onehot = F.one_hot(safe, num_classes).permute(0, 3, 1, 2).to(torch.float32)
    x0 = scale * (2.0 * onehot - 1.0)
    return x0 * (labels != IGNORE).unsqueeze(1).to(x0.dtype)


def train_diffusion(
    model: DiffusionModel,
    data: list[tuple[ImageTensor, LabelMap]],
    opt: DiffusionOptConfig,
    schedule: NoiseSchedule | None = None,
    scale: float = 1.0,
    checkpoint_path: str | None = None,
    meta: dict | None = None,
) -> TrainReport:
    """Train the denoiser on (image, sparse seed) pairs with masked loss."""
    if schedule is None:
        schedule = NoiseSchedule()
    if not data:
        raise ValueError("training requires a non-empty dataset")
    if all(bool((l.data == IGNORE).all()) for _, l in data):
        raise ValueError("training requires at least one seed pixel in the dataset")
    for im, l in data:
        if im.channels != model.in_channels:
            raise ValueError(f"image has {im.channels} channels, model expects {model.in_channels}")
        if (im.height, im.width) != l.data.shape:
            raise ValueError("image / label shape mismatch")

    optimizer = torch.optim.AdamW(model.parameters(), lr=opt.lr, weight_decay=opt.weight_decay)
    rng = np.random.default_rng([opt.seed, 1])
    model.train()
    report = TrainReport()
    t0 = time.time()
    step = 0
    for epoch in range(opt.epochs):
        order = np.random.default_rng([opt.seed, 0, epoch]).permutation(len(data))
        losses = []
        for start in range(0, len(data), opt.batch_size):
            idx = order[start : start + opt.batch_size]
            labels_np = np.stack([data[i][1].data for i in idx]).astype(np.int64)
            if (labels_np == IGNORE).all():
                logger.warning("skipping batch with zero seed pixels (epoch %d)", epoch)
                step += 1
                continue
            labels = torch.from_numpy(labels_np)
            images = torch.from_numpy(
                np.ascontiguousarray(
                    np.stack([data[i][0].data for i in idx]).transpose(0, 3, 1, 2)
                )
            )
            x0 = encode_labels_torch(labels, model.num_classes, scale)
            t = torch.from_numpy(rng.uniform(0.0, 1.0, size=len(idx)).astype(np.float32))
            eps = torch.from_numpy(rng.standard_normal(x0.shape, dtype=np.float32))
            cond = model.encode_condition(images)
            loss = diffusion_training_loss(model, x0, labels, t, eps, cond, schedule)
            if not torch.isfinite(loss):
                raise RuntimeError(f"non-finite loss {loss.item()} at step {step}; aborting")
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


def sample(
    model: DiffusionModel,
    image: ImageTensor,
    cfg: SamplerConfig,
    rng: np.random.Generator,
    schedule: NoiseSchedule | None = None,
) -> LabelMap:
    """Deterministic reverse trajectory from Gaussian noise to a dense label map.

    The time grid is t_i = 1 - i/steps; at each step the model's logits give a
    clean-signal estimate, the implied noise is recomputed, and the state is
    re-projected to the next time. The final step's logits are decoded by
    argmax, so the output covers every pixel.
    """
    return propagate(model, [image], cfg, rng, schedule)[0]


def propagate(
    model: DiffusionModel,
    images: list[ImageTensor],
    cfg: SamplerConfig,
    rng: np.random.Generator,
    schedule: NoiseSchedule | None = None,
    batch_size: int = 8,
) -> list[LabelMap]:
    """Sample a dense label map for each image, one child rng per image."""
    if schedule is None:
        schedule = NoiseSchedule()
    if not images:
        return []
    rngs = rng.spawn(len(images))
    grid = [1.0 - i / cfg.steps for i in range(cfg.steps)]
    ab = [schedule.alpha_bar(t) for t in grid]
    K = model.num_classes
    factor = model.downsample_factor
    model.eval()
    results: dict[int, LabelMap] = {}
    groups: dict[tuple[int, int], list[int]] = {}
    for i, im in enumerate(images):
        if im.channels != model.in_channels:
            raise ValueError(f"image has {im.channels} channels, model expects {model.in_channels}")
        groups.setdefault((im.height, im.width), []).append(i)
    with torch.no_grad():
        for (h, w), idxs in groups.items():
            hp = h + ((-h) % factor)
            wp = w + ((-w) % factor)
            for start in range(0, len(idxs), batch_size):
                chunk = idxs[start : start + batch_size]
                x = torch.from_numpy(
                    np.ascontiguousarray(
                        np.stack([images[i].data for i in chunk]).transpose(0, 3, 1, 2)
                    )
                )
                if hp != h or wp != w:
                    x = F.pad(x, (0, wp - w, 0, hp - h), mode="reflect")
                cond = model.encode_condition(x)
                z = torch.from_numpy(
                    np.stack(
                        [rngs[i].standard_normal((K, hp, wp), dtype=np.float32) for i in chunk]
                    )
                )
                logits = None
                for step in range(cfg.steps):
                    t = torch.full((len(chunk),), grid[step], dtype=torch.float32)
                    logits = model.denoise(z, t, cond)
                    if step == cfg.steps - 1:
                        break
                    x0_hat = cfg.scale * (2.0 * torch.softmax(logits, dim=1) - 1.0)
                    a_t = ab[step]
                    a_n = ab[step + 1]
                    eps_hat = (z - math.sqrt(a_t) * x0_hat) / math.sqrt(1.0 - a_t)
                    z = math.sqrt(a_n) * x0_hat + math.sqrt(1.0 - a_n) * eps_hat
                arr = logits[:, :, :h, :w].numpy()
                for j, i in enumerate(chunk):
                    labels = np.argmax(arr[j], axis=0).astype(np.uint8)
                    results[i] = LabelMap(labels, K)
    return [results[i] for i in range(len(images))]


def save_checkpoint(model: DiffusionModel, path: str, meta: dict | None = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save(
        {
            "kind": DIFF_CHECKPOINT_KIND,
            "version": CHECKPOINT_VERSION,
            "num_classes": model.num_classes,
            "in_channels": model.in_channels,
            "cond_channels": model.cond_channels,
            "channels": model.channels,
            "time_dim": model.time_dim,
            "state_dict": model.state_dict(),
            "meta": meta or {},
        },
        path,
    )


def load_checkpoint(path: str) -> DiffusionModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("kind") != DIFF_CHECKPOINT_KIND or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} diffusion checkpoint")
    model = DiffusionModel(
        blob["num_classes"],
        in_channels=blob["in_channels"],
        cond_channels=blob["cond_channels"],
        channels=blob["channels"],
        time_dim=blob["time_dim"],
    )
    model.load_state_dict(blob["state_dict"])
    return model
