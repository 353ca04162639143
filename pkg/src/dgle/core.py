"""Shared domain types, the label/continuous codec, and on-disk formats.

Label maps use a reserved IGNORE sentinel (255) for pixels that carry no
supervision. Class ids therefore live in 0..253. The continuous encoding
used by the diffusion stage is a signed scaled one-hot: class c maps to
+scale at channel c and -scale elsewhere, IGNORE maps to the zero vector.
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np
from PIL import Image, PngImagePlugin

IGNORE = 255
MAX_CLASSES = 254

DGLP_MAGIC = b"DGLP"
DGLP_VERSION = 1


class FormatError(ValueError):
    """Raised when an on-disk file or an in-memory map violates its format."""


@dataclass
class ImageTensor:
    """H x W x C float image, values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise FormatError(f"image must be HxWxC, got shape {self.data.shape}")
        h, w, _ = self.data.shape
        if h < 8 or w < 8:
            raise FormatError(f"image must be at least 8x8, got {h}x{w}")
        if not np.isfinite(self.data).all():
            raise FormatError("image contains non-finite values")
        if self.data.min() < 0.0 or self.data.max() > 1.0:
            raise FormatError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelMap:
    """H x W integer class map; IGNORE marks unsupervised pixels."""

    data: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 2:
            raise FormatError(f"label map must be HxW, got shape {self.data.shape}")
        if not 1 <= self.num_classes <= MAX_CLASSES:
            raise FormatError(f"num_classes must be in 1..{MAX_CLASSES}")
        bad = (self.data >= self.num_classes) & (self.data != IGNORE)
        if bad.any():
            raise FormatError(
                f"label map contains ids >= {self.num_classes} "
                f"(e.g. {int(self.data[bad][0])}) that are not IGNORE"
            )

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def ignore_fraction(self) -> float:
        return float((self.data == IGNORE).mean())


@dataclass
class ProbMap:
    """H x W x K per-pixel class probabilities (softmax output)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise FormatError(f"prob map must be HxWxK, got shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise FormatError("prob map contains non-finite values")
        if self.data.min() < 0.0:
            raise FormatError("prob map contains negative probabilities")
        sums = self.data.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-5:
            raise FormatError("per-pixel probabilities must sum to 1 within 1e-5")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]

    def argmax_labels(self) -> LabelMap:
        # np.argmax picks the lowest index on ties, which is the convention
        # everywhere argmax appears in this package.
        return LabelMap(np.argmax(self.data, axis=2).astype(np.uint8), self.num_classes)

    def confidences(self) -> np.ndarray:
        """Per-pixel max probability (the confidence of the argmax class)."""
        return self.data.max(axis=2)


@dataclass(frozen=True, slots=True)
class ConfidenceRecord:
    """One predicted pixel: where it is, what class won, how confident."""

    image_index: int
    pixel_index: int
    class_id: int
    confidence: float


@dataclass
class DiffusionState:
    """Continuous K-channel encoding of a label map at noise level t."""

    z: np.ndarray
    t: float

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float32)
        if not np.isfinite(self.z).all():
            raise ValueError("diffusion state contains non-finite values")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"timestep must lie in [0, 1], got {self.t}")


def encode_labels(labels: LabelMap, scale: float = 1.0) -> np.ndarray:
    """Encode a label map as a signed scaled one-hot tensor (H, W, K).

    Class c becomes +scale at channel c and -scale elsewhere; IGNORE pixels
    become the all-zeros vector.
    """
    if scale <= 0:
        raise ValueError(f"scale must be > 0, got {scale}")
    k = labels.num_classes
    z = np.full((labels.height, labels.width, k), -scale, dtype=np.float32)
    known = labels.data != IGNORE
    z[known, labels.data[known].astype(np.intp)] = scale
    z[~known, :] = 0.0
    return z


def decode_labels(z: np.ndarray) -> LabelMap:
    """Per-pixel argmax over channels; ties go to the lowest class index."""
    z = np.asarray(z)
    if z.ndim != 3:
        raise ValueError(f"expected HxWxK tensor, got shape {z.shape}")
    if not np.isfinite(z).all():
        raise ValueError("cannot decode non-finite tensor")
    return LabelMap(np.argmax(z, axis=2).astype(np.uint8), z.shape[2])


def _atomic_write(path: str, payload: bytes) -> None:
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_probmap(path: str, p: ProbMap) -> None:
    """Write the DGLP binary format: magic, version, H, W, K, then float32 data."""
    header = DGLP_MAGIC + struct.pack(
        "<IIII", DGLP_VERSION, p.height, p.width, p.num_classes
    )
    data = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
    _atomic_write(path, header + data)


def read_probmap(path: str) -> ProbMap:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != DGLP_MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0: {raw[:4]!r}")
    if len(raw) < 20:
        raise FormatError(f"{path}: truncated header at offset {len(raw)} (need 20)")
    version, h, w, k = struct.unpack("<IIII", raw[4:20])
    if version != DGLP_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    expected = 20 + h * w * k * 4
    if len(raw) != expected:
        raise FormatError(
            f"{path}: data section ends at offset {len(raw)}, expected {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=20).reshape(h, w, k)
    return ProbMap(data.copy())


def write_labelmap(path: str, labels: LabelMap, meta: dict[str, str] | None = None) -> None:
    """Write an 8-bit single-channel PNG; IGNORE is stored as 255 verbatim."""
    img = Image.fromarray(labels.data, mode="L")
    info = PngImagePlugin.PngInfo()
    for key, value in (meta or {}).items():
        info.add_text(key, value)
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=info)
    _atomic_write(path, buf.getvalue())


def read_labelmap(path: str, num_classes: int) -> LabelMap:
    with Image.open(path) as img:
        if img.mode != "L":
            raise FormatError(f"{path}: expected 8-bit single-channel PNG, got mode {img.mode}")
        data = np.asarray(img, dtype=np.uint8)
    bad = (data >= num_classes) & (data != IGNORE)
    if bad.any():
        raise FormatError(
            f"{path}: pixel value {int(data[bad][0])} is outside 0..{num_classes - 1} "
            f"and is not the IGNORE sentinel 255"
        )
    return LabelMap(data, num_classes)


def write_image(path: str, image: ImageTensor) -> None:
    """Write an image as 8-bit RGB (or grayscale) PNG, rounding from [0, 1]."""
    arr = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    elif arr.shape[2] == 3:
        pil = Image.fromarray(arr, mode="RGB")
    else:
        raise FormatError(f"cannot write {arr.shape[2]}-channel image as PNG")
    buf = io.BytesIO()
    pil.save(buf, format="PNG")
    _atomic_write(path, buf.getvalue())


def read_image(path: str) -> ImageTensor:
    with Image.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.float32)[:, :, None]
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return ImageTensor(arr / 255.0)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
