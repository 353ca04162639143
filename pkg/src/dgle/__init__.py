"""Diffusion-guided label enrichment for source-free domain adaptation.

A source-trained segmenter is adapted to an unlabeled target domain in three
repeated moves: distill its confident predictions into sparse seed
pseudo-labels (per-class percentile filtering fused across two views), expand
the seeds to dense labels with an image-conditioned diffusion model, and
fine-tune the segmenter on the result.
"""

from .core import (
    IGNORE,
    MAX_CLASSES,
    ConfidenceRecord,
    DiffusionState,
    FormatError,
    ImageTensor,
    LabelMap,
    ProbMap,
    decode_labels,
    encode_labels,
    read_image,
    read_labelmap,
    read_probmap,
    write_image,
    write_labelmap,
    write_probmap,
)
from .diffprop import (
    DiffusionModel,
    DiffusionOptConfig,
    NoiseSchedule,
    SamplerConfig,
    add_noise,
    fresh_diffusion_model,
    propagate,
    sample,
    train_diffusion,
    warm_start_condition,
)
from .evalkit import ConfusionMatrix, accumulate, iou, miou, pixel_accuracy, seed_quality
from .pipeline import PipelineConfig, RunLedger, ablate, colorize, plot_ledger, run
from .seedgen import (
    Enhancer,
    SeedStats,
    class_thresholds,
    compute_threshold,
    filter_pseudo_labels,
    fuse,
    generate_seeds,
)
from .segmodel import OptimizerConfig, SegModel, finetune, fresh_model, infer, train_source
from .synthdata import (
    BenchmarkSizes,
    DomainShift,
    SceneSpec,
    generate_benchmark,
    generate_domain,
    load_folder_dataset,
    load_folder_images,
    source_shift,
    target_shift,
    write_domain,
)

__version__ = "0.1.0"

__all__ = [
    "IGNORE",
    "MAX_CLASSES",
    "ConfidenceRecord",
    "DiffusionState",
    "FormatError",
    "ImageTensor",
    "LabelMap",
    "ProbMap",
    "decode_labels",
    "encode_labels",
    "read_image",
    "read_labelmap",
    "read_probmap",
    "write_image",
    "write_labelmap",
    "write_probmap",
    "DiffusionModel",
    "DiffusionOptConfig",
    "NoiseSchedule",
    "SamplerConfig",
    "add_noise",
    "fresh_diffusion_model",
    "propagate",
    "sample",
    "train_diffusion",
    "warm_start_condition",
    "ConfusionMatrix",
    "accumulate",
    "iou",
    "miou",
    "pixel_accuracy",
    "seed_quality",
    "PipelineConfig",
    "RunLedger",
    "ablate",
    "colorize",
    "plot_ledger",
    "run",
    "Enhancer",
    "SeedStats",
    "class_thresholds",
    "compute_threshold",
    "filter_pseudo_labels",
    "fuse",
    "generate_seeds",
    "OptimizerConfig",
    "SegModel",
    "finetune",
    "fresh_model",
    "infer",
    "train_source",
    "BenchmarkSizes",
    "DomainShift",
    "SceneSpec",
    "generate_benchmark",
    "generate_domain",
    "load_folder_dataset",
    "load_folder_images",
    "source_shift",
    "target_shift",
    "write_domain",
    "__version__",
]
