"""Deterministic synthetic source/target domains with exact ground truth.

Each scene is a textured background with a few colored shapes; the label map
is painted together with the image, so ground truth is exact by construction.
A DomainShift perturbs pixel appearance only (colors, blur, noise, textures),
never the labels, which is what makes adaptation measurable: the same seed
renders identical label maps for the source and target variants of a scene.
"""

from __future__ import annotations

import colorsys
import os
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core import ImageTensor, LabelMap, read_image, read_labelmap, sha256_file, write_image, write_labelmap

_GOLDEN = 0.618033988749895


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 5
    image_size: int = 64
    shapes_min: int = 3
    shapes_max: int = 6
    rng_seed: int = 0

    def __post_init__(self):
        if self.image_size < 16:
            raise ValueError(f"image_size {self.image_size} too small to place shapes (min 16)")
        if not 2 <= self.num_classes <= 254:
            raise ValueError("need at least 2 classes (background + shapes)")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise ValueError("invalid shapes_per_image range")


@dataclass(frozen=True)
class DomainShift:
    """Pixel-space appearance shift; label maps are never touched."""

    class_color_shift: tuple[tuple[float, float, float], ...] = ()
    brightness: float = 0.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    texture_swap: tuple[bool, ...] = ()


def identity_shift() -> DomainShift:
    return DomainShift()


def source_shift() -> DomainShift:
    """Appearance of the source domain: clean, lightly noisy rendering."""
    return DomainShift(noise_sigma=0.02)


def target_shift() -> DomainShift:
    """Frozen target-domain appearance.

    Class colors drift toward their nearest confusable neighbor, the camera
    is blurrier and noisier, and one texture cue is swapped. Tuned once so a
    source-trained segmenter lands at a mid-range target mIoU: low enough to
    leave headroom, high enough that confident predictions are mostly right.
    """
    return DomainShift(
        class_color_shift=(
            (0.084, 0.056, 0.028),     # background: warmer
            (0.028, 0.196, -0.056),    # red shifts toward yellow
            (0.14, 0.028, -0.224),     # blue shifts toward purple
            (-0.196, -0.112, 0.084),   # yellow dims toward background green
            (0.168, 0.14, -0.084),     # purple shifts toward red
        ),
        brightness=-0.09,
        blur_sigma=1.0,
        noise_sigma=0.12,
        texture_swap=(False, False, True, False, True),
    )


def class_palette(num_classes: int) -> np.ndarray:
    """Well-separated base colors, stable for a given K."""
    base = np.array(
        [
            (0.25, 0.30, 0.25),
            (0.85, 0.30, 0.25),
            (0.25, 0.45, 0.85),
            (0.90, 0.80, 0.30),
            (0.55, 0.25, 0.70),
        ],
        dtype=np.float32,
    )
    if num_classes <= len(base):
        return base[:num_classes].copy()
    extra = []
    hue = 0.11
    for _ in range(num_classes - len(base)):
        hue = (hue + _GOLDEN) % 1.0
        extra.append(colorsys.hsv_to_rgb(hue, 0.65, 0.75))
    return np.concatenate([base, np.array(extra, dtype=np.float32)], axis=0)


def _striped(class_id: int) -> bool:
    return class_id > 0 and class_id % 2 == 0


def _shape_mask(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    margin = max(3, size // 8)
    cy = rng.integers(margin, size - margin)
    cx = rng.integers(margin, size - margin)
    extent = rng.integers(max(3, size // 10), max(4, size // 4))
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= extent**2
    if kind == "rect":
        h = extent
        w = rng.integers(max(3, size // 10), max(4, size // 4))
        return (np.abs(yy - cy) <= h) & (np.abs(xx - cx) <= w)
    # triangle: half-plane cut of a box, apex up
    h = extent
    w = max(3, int(extent * 1.2))
    inside = (yy >= cy - h) & (yy <= cy + h) & (np.abs(xx - cx) * h <= (yy - (cy - h)) * w / 2)
    return inside


def _render_labels(spec: SceneSpec, rng: np.random.Generator) -> LabelMap:
    size = spec.image_size
    kinds = ["circle", "rect", "tri"]
    for _ in range(100):
        label = np.zeros((size, size), dtype=np.uint8)
        n_shapes = int(rng.integers(spec.shapes_min, spec.shapes_max + 1))
        for _ in range(n_shapes):
            cid = int(rng.integers(1, spec.num_classes))
            mask = _shape_mask(kinds[(cid - 1) % 3], size, rng)
            label[mask] = cid
        if len(np.unique(label)) >= 2:
            return LabelMap(label, spec.num_classes)
    raise ValueError("could not render a scene with at least 2 classes; image_size too small?")


def _render_image(
    label: LabelMap, spec: SceneSpec, shift: DomainShift, rng: np.random.Generator
) -> ImageTensor:
    size = spec.image_size
    k = spec.num_classes
    palette = class_palette(k)

    color_shift = np.zeros((k, 3), dtype=np.float32)
    if shift.class_color_shift:
        given = np.asarray(shift.class_color_shift, dtype=np.float32)
        color_shift[: len(given)] = given[:k]
    swap = list(shift.texture_swap) + [False] * k

    # All texture randomness is drawn unconditionally so that the consumed
    # rng stream is identical for every shift applied to the same scene.
    grad_dir = rng.uniform(0, 2 * np.pi)
    grad_amp = rng.uniform(0.02, 0.05)
    jitter = rng.uniform(-0.03, 0.03, size=3).astype(np.float32)
    stripe_phase = rng.uniform(0, 2 * np.pi, size=k)
    noise = rng.standard_normal((size, size, 3)).astype(np.float32)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    img = np.zeros((size, size, 3), dtype=np.float32)
    for c in range(k):
        sel = label.data == c
        if not sel.any():
            continue
        img[sel] = palette[c] + color_shift[c]
        if _striped(c) != swap[c]:
            theta = 0.5 + 0.9 * c
            wave = np.sin(
                2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / 7.0 + stripe_phase[c]
            )
            img[sel] += (0.10 * np.sign(wave))[sel, None]

    grad = grad_amp * (
        (xx * np.cos(grad_dir) + yy * np.sin(grad_dir)) / size
    )
    img += grad[:, :, None] + jitter + shift.brightness
    if shift.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(shift.blur_sigma, shift.blur_sigma, 0))
    img += shift.noise_sigma * noise
    return ImageTensor(np.clip(img, 0.0, 1.0))


def generate_domain(
    spec: SceneSpec, shift: DomainShift, count: int
) -> list[tuple[ImageTensor, LabelMap]]:
    """Render `count` scenes; deterministic given spec.rng_seed.

    Image index i uses rng streams derived from (rng_seed, i), so subsets and
    parallel partitions of the index space reproduce the same scenes.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    out = []
    for i in range(count):
        rng_geom = np.random.default_rng([spec.rng_seed, i, 0])
        rng_tex = np.random.default_rng([spec.rng_seed, i, 1])
        label = _render_labels(spec, rng_geom)
        image = _render_image(label, spec, shift, rng_tex)
        out.append((image, label))
    return out


def write_domain(
    out_dir: str, pairs: list[tuple[ImageTensor, LabelMap]], with_labels: bool = True
) -> None:
    """Write images/, labels/ and a manifest of (stem, image sha256) records."""
    img_dir = os.path.join(out_dir, "images")
    lbl_dir = os.path.join(out_dir, "labels")
    os.makedirs(img_dir, exist_ok=True)
    if with_labels:
        os.makedirs(lbl_dir, exist_ok=True)
    records = []
    for i, (image, label) in enumerate(pairs):
        stem = f"{i:05d}"
        img_path = os.path.join(img_dir, stem + ".png")
        write_image(img_path, image)
        if with_labels:
            write_labelmap(os.path.join(lbl_dir, stem + ".png"), label)
        records.append(f"{stem},{sha256_file(img_path)}")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        f.write("\n".join(records) + "\n")


def folder_stems(root: str) -> list[str]:
    """Sorted image stems of a dataset directory (images/<stem>.png)."""
    img_dir = os.path.join(root, "images")
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"{root}: no images/ directory")
    return sorted(os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.endswith(".png"))


def load_folder_images(root: str) -> list[ImageTensor]:
    """Load images/ sorted by stem, ignoring any labels/ directory."""
    img_dir = os.path.join(root, "images")
    return [read_image(os.path.join(img_dir, s + ".png")) for s in folder_stems(root)]


def load_folder_dataset(
    root: str, num_classes: int | None = None
) -> list[tuple[ImageTensor, LabelMap | None]]:
    """Load images/ (+ optional labels/) sorted by stem; stems must match."""
    img_dir = os.path.join(root, "images")
    lbl_dir = os.path.join(root, "labels")
    if not os.path.isdir(img_dir):
        raise FileNotFoundError(f"{root}: no images/ directory")
    img_stems = sorted(os.path.splitext(f)[0] for f in os.listdir(img_dir) if f.endswith(".png"))
    has_labels = os.path.isdir(lbl_dir)
    if has_labels:
        lbl_stems = sorted(os.path.splitext(f)[0] for f in os.listdir(lbl_dir) if f.endswith(".png"))
        missing_lbl = sorted(set(img_stems) - set(lbl_stems))
        missing_img = sorted(set(lbl_stems) - set(img_stems))
        if missing_lbl or missing_img:
            raise ValueError(
                f"{root}: stem mismatch between images/ and labels/: "
                f"images without labels {missing_lbl}, labels without images {missing_img}"
            )
        if num_classes is None:
            raise ValueError("num_classes is required to load label maps")
    out: list[tuple[ImageTensor, LabelMap | None]] = []
    for stem in img_stems:
        image = read_image(os.path.join(img_dir, stem + ".png"))
        label = (
            read_labelmap(os.path.join(lbl_dir, stem + ".png"), num_classes)
            if has_labels
            else None
        )
        out.append((image, label))
    return out


@dataclass(frozen=True)
class BenchmarkSizes:
    source: int = 200
    target_train: int = 200
    target_eval: int = 100


def generate_benchmark(
    seed: int, sizes: BenchmarkSizes = BenchmarkSizes(), num_classes: int = 5, image_size: int = 64
) -> dict[str, list[tuple[ImageTensor, LabelMap]]]:
    """The frozen desk-scale benchmark: a source set and two target splits."""
    src_spec = SceneSpec(num_classes=num_classes, image_size=image_size, rng_seed=seed)
    tgt_train_spec = SceneSpec(num_classes=num_classes, image_size=image_size, rng_seed=seed + 1)
    tgt_eval_spec = SceneSpec(num_classes=num_classes, image_size=image_size, rng_seed=seed + 2)
    return {
        "source": generate_domain(src_spec, source_shift(), sizes.source),
        "target_train": generate_domain(tgt_train_spec, target_shift(), sizes.target_train),
        "target_eval": generate_domain(tgt_eval_spec, target_shift(), sizes.target_eval),
    }
