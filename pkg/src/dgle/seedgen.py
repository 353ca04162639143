"""Seed pseudo-label generation: confidence filtering and two-view fusion.

Seeds are sparse, high-precision pseudo-labels. For each class, a confidence
threshold is set at a dataset-wide percentile of that class's argmax
confidences, so every class keeps roughly the same fraction of its pixels
regardless of how calibrated the model is on it. Two prediction views (the
image as-is and a detail-enhanced rendition) are filtered independently and
fused by per-pixel agreement, which trades coverage for precision.
"""

from __future__ import annotations

import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import IGNORE, ConfidenceRecord, ImageTensor, LabelMap, ProbMap, read_image, write_image

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SeedStats:
    """Per-view and fused retention accounting for one seed-generation pass."""

    total_pixels: int
    kept_view_a: int
    kept_view_b: int
    kept_fused: int
    thresholds_a: dict[int, float]
    thresholds_b: dict[int, float]

    @property
    def coverage(self) -> float:
        return self.kept_fused / self.total_pixels if self.total_pixels else 0.0


class Enhancer:
    """Detail-enhancement transform applied before the second prediction view.

    The built-in transform upsamples 2x with bicubic interpolation and applies
    a mild unsharp mask. An external command can be substituted with
    ``Enhancer("cmd:<template>")`` where the template contains ``{in}`` and
    ``{out}`` placeholders for PNG paths; the command must write an image
    exactly ``factor`` times larger on each side.
    """

    def __init__(self, spec: str = "builtin", factor: int = 2,
                 sharpen_amount: float = 0.5, sharpen_sigma: float = 1.0):
        if factor < 1:
            raise ValueError("enhancement factor must be >= 1")
        self.spec = spec
        self.factor = factor
        self.sharpen_amount = sharpen_amount
        self.sharpen_sigma = sharpen_sigma

    def __call__(self, image: ImageTensor) -> ImageTensor:
        if self.spec.startswith("cmd:"):
            return self._run_external(image)
        zoom = (self.factor, self.factor, 1)
        up = ndimage.zoom(image.data, zoom, order=3, mode="reflect", grid_mode=True)
        if self.sharpen_amount > 0:
            blurred = ndimage.gaussian_filter(
                up, sigma=(self.sharpen_sigma, self.sharpen_sigma, 0), mode="reflect"
            )
            up = up + self.sharpen_amount * (up - blurred)
        return ImageTensor(np.clip(up, 0.0, 1.0).astype(np.float32))

    def _run_external(self, image: ImageTensor) -> ImageTensor:
        template = self.spec[len("cmd:"):]
        with tempfile.TemporaryDirectory() as td:
            src = f"{td}/in.png"
            dst = f"{td}/out.png"
            write_image(src, image)
            cmd = [part.replace("{in}", src).replace("{out}", dst)
                   for part in shlex.split(template)]
            proc = subprocess.run(cmd, capture_output=True, text=True)
            if proc.returncode != 0:
                raise RuntimeError(
                    f"enhancement command failed (exit {proc.returncode}): {proc.stderr.strip()}"
                )
            out = read_image(dst)
        want = (image.height * self.factor, image.width * self.factor)
        if (out.height, out.width) != want:
            raise ValueError(
                f"enhancement command produced {out.height}x{out.width}, expected {want[0]}x{want[1]}"
            )
        return out


def collect_class_confidences(probs: list[ProbMap]) -> list[ConfidenceRecord]:
    """Flatten argmax predictions into per-pixel records for threshold fitting."""
    records: list[ConfidenceRecord] = []
    for image_index, p in enumerate(probs):
        labels = p.argmax_labels().data.ravel()
        conf = p.confidences().ravel()
        for pixel_index in range(labels.size):
            records.append(
                ConfidenceRecord(
                    image_index=image_index,
                    pixel_index=pixel_index,
                    class_id=int(labels[pixel_index]),
                    confidence=float(conf[pixel_index]),
                )
            )
    return records


def compute_threshold(confidences: np.ndarray, fraction: float) -> float | None:
    """Confidence cutoff discarding the lowest ``fraction`` of values.

    Values are sorted ascending and the cutoff is the element at 1-based rank
    ceil(fraction * count), clamped to [1, count]; pixels with confidence >=
    the cutoff survive filtering. Returns None when there are no values (the
    class is absent). ``fraction`` 0 keeps everything, 1 keeps only the top
    value(s).
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must be in [0, 1]")
    values = np.asarray(confidences, dtype=np.float32).ravel()
    if values.size == 0:
        return None
    if fraction == 0.0:
        return float("-inf")
    rank = int(np.ceil(fraction * values.size))
    rank = min(max(rank, 1), values.size)
    return float(np.sort(values, kind="stable")[rank - 1])


def class_thresholds(probs: list[ProbMap], fraction: float, num_classes: int) -> dict[int, float]:
    """Per-class percentile cutoffs over every pixel of every map; absent classes omitted."""
    all_labels = []
    all_conf = []
    for p in probs:
        if p.num_classes != num_classes:
            raise ValueError("probability maps disagree on class count")
        all_labels.append(p.argmax_labels().data.ravel())
        all_conf.append(p.confidences().ravel())
    labels = np.concatenate(all_labels)
    conf = np.concatenate(all_conf)
    out: dict[int, float] = {}
    for c in range(num_classes):
        t = compute_threshold(conf[labels == c], fraction)
        if t is not None:
            out[c] = t
    return out


def filter_pseudo_labels(probs: ProbMap, thresholds: dict[int, float]) -> LabelMap:
    """Argmax labels with low-confidence pixels replaced by IGNORE.

    A pixel survives when its confidence is >= the threshold for its argmax
    class; pixels of classes with no threshold entry are dropped entirely.
    """
    labels = probs.argmax_labels().data
    conf = probs.confidences()
    cut = np.full(probs.num_classes, np.inf, dtype=np.float32)
    has = np.zeros(probs.num_classes, dtype=bool)
    for c, t in thresholds.items():
        if not 0 <= c < probs.num_classes:
            raise ValueError(f"threshold for out-of-range class {c}")
        cut[c] = np.float32(t)
        has[c] = True
    keep = has[labels] & (conf >= cut[labels])
    out = np.where(keep, labels, np.uint8(IGNORE)).astype(np.uint8)
    return LabelMap(out, probs.num_classes)


def fuse(a: LabelMap, b: LabelMap) -> LabelMap:
    """Per-pixel intersection: keep a label only where both views agree on it."""
    if a.data.shape != b.data.shape:
        raise ValueError("fuse requires equal-shaped label maps")
    if a.num_classes != b.num_classes:
        raise ValueError("fuse requires equal class counts")
    agree = (a.data == b.data) & (a.data != IGNORE)
    out = np.where(agree, a.data, np.uint8(IGNORE)).astype(np.uint8)
    return LabelMap(out, a.num_classes)


def align_enhanced_labels(labels: LabelMap, factor: int) -> LabelMap:
    """Downscale a label map predicted at ``factor``-times resolution.

    Each output pixel looks at its factor x factor source block and keeps a
    label only when every non-IGNORE pixel in the block agrees and at least
    half the block is non-IGNORE; everything else becomes IGNORE.
    """
    if factor < 1:
        raise ValueError("factor must be >= 1")
    h, w = labels.data.shape
    if h % factor or w % factor:
        raise ValueError(f"label map {h}x{w} is not divisible by factor {factor}")
    if factor == 1:
        return LabelMap(labels.data.copy(), labels.num_classes)
    blocks = labels.data.reshape(h // factor, factor, w // factor, factor)
    blocks = blocks.transpose(0, 2, 1, 3).reshape(h // factor, w // factor, factor * factor)
    known = blocks != IGNORE
    support = known.sum(axis=2)
    first = np.where(known, blocks, 0).max(axis=2).astype(np.uint8)
    unanimous = np.where(known, blocks, first[..., None]) == first[..., None]
    ok = unanimous.all(axis=2) & (support * 2 >= factor * factor) & (support > 0)
    out = np.where(ok, first, np.uint8(IGNORE)).astype(np.uint8)
    return LabelMap(out, labels.num_classes)


def generate_seeds(
    infer_fn,
    images: list[ImageTensor],
    fraction: float,
    num_classes: int,
    enhancer: Enhancer | None = None,
) -> tuple[list[LabelMap], SeedStats]:
    """Full seed pass: predict both views, filter each at dataset-wide
    per-class percentiles, align the enhanced view, fuse by agreement.

    ``infer_fn`` maps a list of ImageTensor to a list of ProbMap.
    """
    if not images:
        raise ValueError("seed generation requires at least one image")
    if enhancer is None:
        enhancer = Enhancer()
    probs_a = infer_fn(images)
    enhanced = [enhancer(im) for im in images]
    probs_b = infer_fn(enhanced)
    th_a = class_thresholds(probs_a, fraction, num_classes)
    th_b = class_thresholds(probs_b, fraction, num_classes)
    seeds: list[LabelMap] = []
    kept_a = kept_b = kept_f = total = 0
    for pa, pb in zip(probs_a, probs_b):
        la = filter_pseudo_labels(pa, th_a)
        lb = align_enhanced_labels(filter_pseudo_labels(pb, th_b), enhancer.factor)
        fused = fuse(la, lb)
        seeds.append(fused)
        kept_a += int((la.data != IGNORE).sum())
        kept_b += int((lb.data != IGNORE).sum())
        kept_f += int((fused.data != IGNORE).sum())
        total += la.data.size
    stats = SeedStats(
        total_pixels=total,
        kept_view_a=kept_a,
        kept_view_b=kept_b,
        kept_fused=kept_f,
        thresholds_a=th_a,
        thresholds_b=th_b,
    )
    logger.info(
        "seeds: %.1f%% coverage (view A %.1f%%, view B %.1f%%)",
        100 * stats.coverage,
        100 * kept_a / max(total, 1),
        100 * kept_b / max(total, 1),
    )
    return seeds, stats
