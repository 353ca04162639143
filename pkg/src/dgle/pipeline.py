"""End-to-end orchestration of the label-enrichment loop.

Each outer iteration runs seed generation, diffusion training, propagation,
and segmenter fine-tuning, with the refined segmenter becoming the base model
of the next iteration. Stages communicate only through on-disk artifacts in
the package's file formats, every artifact embeds the config hash and
iteration index, and completed stages are recorded with marker files so an
interrupted run can resume without repeating work.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import yaml

from . import diffprop as dp
from . import evalkit as ek
from . import seedgen as sg
from . import segmodel as sm
from .core import IGNORE, ImageTensor, LabelMap, _atomic_write, read_labelmap, write_labelmap
from .synthdata import class_palette, folder_stems, load_folder_dataset

logger = logging.getLogger(__name__)

VARIANTS = ("single_view_orig", "single_view_aug", "fused_only", "full")


@dataclass
class SegOptBlock:
    """SGD hyperparameters for the segmenter (source training and refinement)."""

    lr: float = 2.5e-4
    momentum: float = 0.9
    poly_power: float = 0.9
    batch_size: int = 4
    source_epochs: int = 20
    finetune_epochs: int = 6


@dataclass
class DiffOptBlock:
    """AdamW hyperparameters for the diffusion denoiser."""

    lr: float = 6e-5
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 30


@dataclass
class PipelineConfig:
    """Everything one run needs; defaults are the published operating point."""

    target_train_dir: str = ""
    out_dir: str = ""
    source_dir: str | None = None
    source_checkpoint: str | None = None
    target_eval_dir: str | None = None
    num_classes: int = 5
    n: float = 0.6
    sampler_steps: int = 3
    outer_iterations: int = 4
    embed_scale: float = 1.0
    enhancer: str = "builtin"
    enhancer_factor: int = 2
    retrain_diffusion: bool = True
    condition_init: str = "fresh"
    seed: int = 0
    segmodel: SegOptBlock = field(default_factory=SegOptBlock)
    diffprop: DiffOptBlock = field(default_factory=DiffOptBlock)

    def __post_init__(self):
        if not 0.0 <= self.n <= 1.0:
            raise ValueError("n must lie in [0, 1]")
        if self.sampler_steps < 1:
            raise ValueError("sampler_steps must be >= 1")
        if self.outer_iterations < 0:
            raise ValueError("outer_iterations must be >= 0")
        if self.condition_init not in ("segmenter", "fresh"):
            raise ValueError("condition_init must be 'segmenter' or 'fresh'")

    @classmethod
    def from_yaml(cls, path: str, overrides: dict | None = None) -> "PipelineConfig":
        with open(path) as f:
            raw = yaml.safe_load(f) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a mapping")
        if overrides:
            raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        raw = dict(raw)
        seg = SegOptBlock(**raw.pop("segmodel", {}) or {})
        diff = DiffOptBlock(**raw.pop("diffprop", {}) or {})
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown}")
        return cls(segmodel=seg, diffprop=diff, **raw)

    def config_hash(self) -> str:
        """Hash of the canonical JSON form; identifies a run's settings.

        out_dir is excluded: artifacts are location-independent, so the same
        settings written to two different roots carry the same hash.
        """
        fields = asdict(self)
        fields.pop("out_dir")
        blob = json.dumps(fields, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


LEDGER_FIELDS = (
    "iteration",
    "stage",
    "seed_precision",
    "seed_coverage",
    "propagated_accuracy",
    "miou_refined",
    "miou_diffusion",
    "pixel_accuracy",
    "wall_seed",
    "wall_diffusion",
    "wall_propagate",
    "wall_finetune",
    "wall_eval",
    "artifact_dir",
    "config_hash",
)


@dataclass
class RunLedger:
    """Append-only per-iteration metric records, persisted as CSV."""

    records: list[dict] = field(default_factory=list)
    path: str | None = None

    def append(self, record: dict) -> None:
        unknown = set(record) - set(LEDGER_FIELDS)
        if unknown:
            raise ValueError(f"unknown ledger fields: {sorted(unknown)}")
        self.records.append({k: record.get(k) for k in LEDGER_FIELDS})
        if self.path:
            self.write_csv(self.path)

    def write_csv(self, path: str) -> None:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=LEDGER_FIELDS)
        writer.writeheader()
        for rec in self.records:
            writer.writerow({k: ("" if rec.get(k) is None else rec.get(k, "")) for k in LEDGER_FIELDS})
        _atomic_write(path, buf.getvalue().encode())

    @classmethod
    def read_csv(cls, path: str) -> "RunLedger":
        out = cls(path=path)
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                rec = {}
                for k in LEDGER_FIELDS:
                    v = row.get(k, "")
                    if v == "" or v is None:
                        rec[k] = None
                    elif k in ("iteration",):
                        rec[k] = int(v)
                    elif k in ("stage", "artifact_dir", "config_hash"):
                        rec[k] = v
                    else:
                        rec[k] = float(v)
                out.records.append(rec)
        return out

    def final_miou(self) -> float | None:
        for rec in reversed(self.records):
            if rec.get("miou_refined") is not None:
                return float(rec["miou_refined"])
        return None


def colorize(labels: LabelMap, palette: np.ndarray) -> ImageTensor:
    """Render a label map as RGB; IGNORE pixels are painted black."""
    palette = np.asarray(palette, dtype=np.float32)
    if palette.ndim != 2 or palette.shape[1] != 3:
        raise ValueError("palette must have shape (K, 3)")
    if palette.shape[0] < labels.num_classes:
        raise ValueError(
            f"palette has {palette.shape[0]} colors, label map needs {labels.num_classes}"
        )
    out = np.zeros((*labels.data.shape, 3), dtype=np.float32)
    known = labels.data != IGNORE
    out[known] = palette[labels.data[known].astype(np.intp)]
    return ImageTensor(out)


def plot_ledger(ledger: RunLedger, csv_path: str, image_path: str) -> None:
    """Persist the ledger as CSV plus a metric-vs-iteration plot."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ledger.write_csv(csv_path)
    rows = [r for r in ledger.records if r.get("miou_refined") is not None]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(
        [r["iteration"] for r in rows],
        [r["miou_refined"] for r in rows],
        marker="o",
        label="refined segmenter",
    )
    diff_rows = [r for r in rows if r.get("miou_diffusion") is not None]
    if diff_rows:
        ax.plot(
            [r["iteration"] for r in diff_rows],
            [r["miou_diffusion"] for r in diff_rows],
            marker="s",
            label="diffusion sampler",
        )
    ax.set_xlabel("iteration")
    ax.set_ylabel("target mIoU")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(image_path, dpi=120)
    plt.close(fig)


class _Run:
    """One pipeline execution over a fixed config."""

    def __init__(self, config: PipelineConfig, resume: bool, variant: str = "full"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        self.cfg = config
        self.resume = resume
        self.variant = variant
        self.hash = config.config_hash()
        self.out = config.out_dir
        if not self.out:
            raise ValueError("config.out_dir is required")
        os.makedirs(self.out, exist_ok=True)
        self.ledger = RunLedger(path=os.path.join(self.out, "ledger.csv"))
        self.stems = folder_stems(config.target_train_dir)
        pairs = load_folder_dataset(
            config.target_train_dir,
            config.num_classes if self._has_labels(config.target_train_dir) else None,
        )
        self.train_images = [im for im, _ in pairs]
        self.train_gt = [lab for _, lab in pairs]
        self.eval_pairs = None
        if config.target_eval_dir:
            self.eval_pairs = load_folder_dataset(config.target_eval_dir, config.num_classes)
            if any(lab is None for _, lab in self.eval_pairs):
                raise ValueError("target_eval_dir must include labels/")

    @staticmethod
    def _has_labels(root: str) -> bool:
        return os.path.isdir(os.path.join(root, "labels"))

    def _marker(self, name: str) -> str:
        return os.path.join(self.out, f".done-{name}")

    def _stage_done(self, name: str) -> bool:
        path = self._marker(name)
        if not (self.resume and os.path.exists(path)):
            return False
        with open(path) as f:
            return f.read().strip() == self.hash

    def _mark_stage(self, name: str) -> None:
        _atomic_write(self._marker(name), (self.hash + "\n").encode())

    def _iter_seed(self, iteration: int, stage: int) -> int:
        return self.cfg.seed * 10000 + iteration * 100 + stage

    def _source_model(self) -> tuple[sm.SegModel, float | None]:
        """Source-trained segmenter: load a checkpoint or train from source data."""
        ckpt = os.path.join(self.out, "source.pt")
        if self.cfg.source_checkpoint:
            model = sm.load_checkpoint(self.cfg.source_checkpoint)
            if model.num_classes != self.cfg.num_classes:
                raise ValueError("source checkpoint class count does not match config")
        elif self._stage_done("source"):
            model = sm.load_checkpoint(ckpt)
        else:
            if not self.cfg.source_dir:
                raise ValueError("config needs source_checkpoint or source_dir")
            data = load_folder_dataset(self.cfg.source_dir, self.cfg.num_classes)
            if any(lab is None for _, lab in data):
                raise ValueError("source data must include labels/")
            model = sm.fresh_model(self.cfg.num_classes, seed=self._iter_seed(0, 0))
            sm.train_source(
                model,
                data,
                sm.OptimizerConfig(
                    lr=self.cfg.segmodel.lr,
                    momentum=self.cfg.segmodel.momentum,
                    poly_power=self.cfg.segmodel.poly_power,
                    batch_size=self.cfg.segmodel.batch_size,
                    epochs=self.cfg.segmodel.source_epochs,
                    seed=self._iter_seed(0, 1),
                ),
                checkpoint_path=ckpt,
                meta={"config_hash": self.hash, "iteration": 0},
            )
            self._mark_stage("source")
        miou = None
        if self.eval_pairs:
            cm = sm.evaluate(model, self.eval_pairs)
            miou = ek.miou(cm)
        return model, miou

    def _finetune_opt(self, iteration: int) -> sm.OptimizerConfig:
        return sm.OptimizerConfig(
            lr=self.cfg.segmodel.lr,
            momentum=self.cfg.segmodel.momentum,
            poly_power=self.cfg.segmodel.poly_power,
            batch_size=self.cfg.segmodel.batch_size,
            epochs=self.cfg.segmodel.finetune_epochs,
            seed=self._iter_seed(iteration, 5),
        )

    def _seed_stage(self, model: sm.SegModel, iter_dir: str, iteration: int):
        seeds_dir = os.path.join(iter_dir, "seeds")
        stats_path = os.path.join(iter_dir, "seed_stats.json")
        name = f"iter{iteration:02d}-seeds"
        if self._stage_done(name):
            seeds = [
                read_labelmap(os.path.join(seeds_dir, s + ".png"), self.cfg.num_classes)
                for s in self.stems
            ]
            with open(stats_path) as f:
                stats = json.load(f)
            return seeds, stats, 0.0
        t0 = time.time()
        enhancer = sg.Enhancer(self.cfg.enhancer, factor=self.cfg.enhancer_factor)
        infer_fn = lambda ims: sm.infer_batch(model, ims)
        if self.variant == "full" or self.variant == "fused_only":
            seeds, st = sg.generate_seeds(
                infer_fn, self.train_images, self.cfg.n, self.cfg.num_classes, enhancer
            )
        elif self.variant == "single_view_orig":
            probs = infer_fn(self.train_images)
            th = sg.class_thresholds(probs, self.cfg.n, self.cfg.num_classes)
            seeds = [sg.filter_pseudo_labels(p, th) for p in probs]
            st = self._view_stats(seeds, th_a=th, th_b={})
        else:  # single_view_aug
            probs = infer_fn([enhancer(im) for im in self.train_images])
            th = sg.class_thresholds(probs, self.cfg.n, self.cfg.num_classes)
            seeds = [
                sg.align_enhanced_labels(sg.filter_pseudo_labels(p, th), enhancer.factor)
                for p in probs
            ]
            st = self._view_stats(seeds, th_a={}, th_b=th)
        os.makedirs(seeds_dir, exist_ok=True)
        meta = {"config_hash": self.hash, "iteration": str(iteration)}
        for stem, seed_map in zip(self.stems, seeds):
            write_labelmap(os.path.join(seeds_dir, stem + ".png"), seed_map, meta=meta)
        stats = {
            "config_hash": self.hash,
            "iteration": iteration,
            "variant": self.variant,
            "total_pixels": st.total_pixels,
            "kept_view_a": st.kept_view_a,
            "kept_view_b": st.kept_view_b,
            "kept_fused": st.kept_fused,
            "coverage": st.coverage,
            "thresholds_a": {str(k): v for k, v in st.thresholds_a.items()},
            "thresholds_b": {str(k): v for k, v in st.thresholds_b.items()},
        }
        _atomic_write(stats_path, json.dumps(stats, indent=2).encode())
        self._mark_stage(name)
        return seeds, stats, time.time() - t0

    def _view_stats(self, seeds, th_a, th_b) -> sg.SeedStats:
        kept = sum(int((s.data != IGNORE).sum()) for s in seeds)
        total = sum(s.data.size for s in seeds)
        return sg.SeedStats(
            total_pixels=total,
            kept_view_a=kept if th_a else 0,
            kept_view_b=kept if th_b else 0,
            kept_fused=kept,
            thresholds_a=th_a,
            thresholds_b=th_b,
        )

    def _diffusion_stage(self, seeds, segmenter, iter_dir: str, iteration: int):
        ckpt = os.path.join(iter_dir, "diffusion.pt")
        name = f"iter{iteration:02d}-diffusion"
        if self._stage_done(name):
            return dp.load_checkpoint(ckpt), 0.0
        t0 = time.time()
        # Diffusion init/opt/sampler streams are fixed per run, not per
        # iteration: successive retrains then differ only in their seed
        # labels, so iteration trends reflect label quality, not draw luck.
        if self.cfg.retrain_diffusion or iteration == 1:
            model = dp.fresh_diffusion_model(
                self.cfg.num_classes, seed=self._iter_seed(0, 6)
            )
            if self.cfg.condition_init == "segmenter":
                dp.warm_start_condition(model, segmenter)
        else:
            prev = os.path.join(self.out, f"iter{iteration - 1:02d}", "diffusion.pt")
            model = dp.load_checkpoint(prev)
        dp.train_diffusion(
            model,
            list(zip(self.train_images, seeds)),
            dp.DiffusionOptConfig(
                lr=self.cfg.diffprop.lr,
                weight_decay=self.cfg.diffprop.weight_decay,
                batch_size=self.cfg.diffprop.batch_size,
                epochs=self.cfg.diffprop.epochs,
                seed=self._iter_seed(0, 2),
            ),
            scale=self.cfg.embed_scale,
            checkpoint_path=ckpt,
            meta={"config_hash": self.hash, "iteration": iteration},
        )
        self._mark_stage(name)
        return model, time.time() - t0

    def _propagate_stage(self, dmodel, seeds, iter_dir: str, iteration: int):
        dense_dir = os.path.join(iter_dir, "propagated")
        name = f"iter{iteration:02d}-propagate"
        if self._stage_done(name):
            dense = [
                read_labelmap(os.path.join(dense_dir, s + ".png"), self.cfg.num_classes)
                for s in self.stems
            ]
            return dense, 0.0
        t0 = time.time()
        cfg = dp.SamplerConfig(steps=self.cfg.sampler_steps, scale=self.cfg.embed_scale)
        rng = np.random.default_rng([self.cfg.seed, 0, 3])
        dense = dp.propagate(dmodel, self.train_images, cfg, rng)
        # Enrichment keeps the seeds: at pixels the fused seeds already
        # label, those labels win; the sampler only fills the rest.
        for lab, seed in zip(dense, seeds):
            known = seed.data != IGNORE
            lab.data[known] = seed.data[known]
        os.makedirs(dense_dir, exist_ok=True)
        meta = {"config_hash": self.hash, "iteration": str(iteration)}
        for stem, lab in zip(self.stems, dense):
            write_labelmap(os.path.join(dense_dir, stem + ".png"), lab, meta=meta)
        self._mark_stage(name)
        return dense, time.time() - t0

    def _refine_stage(self, model, targets, iter_dir: str, iteration: int):
        ckpt = os.path.join(iter_dir, "refined.pt")
        name = f"iter{iteration:02d}-refine"
        if self._stage_done(name):
            return sm.load_checkpoint(ckpt), 0.0
        t0 = time.time()
        sm.finetune(
            model,
            list(zip(self.train_images, targets)),
            self._finetune_opt(iteration),
            checkpoint_path=ckpt,
            meta={"config_hash": self.hash, "iteration": iteration},
        )
        self._mark_stage(name)
        return model, time.time() - t0

    def _eval_stage(self, model, dmodel, iter_dir: str, iteration: int):
        t0 = time.time()
        miou_refined = miou_diff = acc = None
        if self.eval_pairs:
            cm = sm.evaluate(model, self.eval_pairs)
            miou_refined = ek.miou(cm)
            acc = ek.pixel_accuracy(cm)
            ek.write_report(os.path.join(iter_dir, "metrics.csv"), cm)
            if dmodel is not None:
                cfg = dp.SamplerConfig(steps=self.cfg.sampler_steps, scale=self.cfg.embed_scale)
                rng = np.random.default_rng([self.cfg.seed, 0, 4])
                dense_eval = dp.propagate(dmodel, [im for im, _ in self.eval_pairs], cfg, rng)
                cm_d = ek.ConfusionMatrix(self.cfg.num_classes)
                for (_, gt), pred in zip(self.eval_pairs, dense_eval):
                    cm_d = ek.accumulate(cm_d, gt, pred)
                miou_diff = ek.miou(cm_d)
        return miou_refined, miou_diff, acc, time.time() - t0

    def execute(self) -> RunLedger:
        if self.resume and os.path.exists(self.ledger.path):
            prev = RunLedger.read_csv(self.ledger.path)
            if all(r.get("config_hash") == self.hash for r in prev.records):
                self.ledger = prev
                self.ledger.path = os.path.join(self.out, "ledger.csv")
        done_iters = {r["iteration"] for r in self.ledger.records if r.get("stage") == "iteration"}

        model, source_miou = self._source_model()
        if not any(r.get("stage") == "source" for r in self.ledger.records):
            self.ledger.append(
                {
                    "iteration": 0,
                    "stage": "source",
                    "miou_refined": source_miou,
                    "artifact_dir": self.out,
                    "config_hash": self.hash,
                }
            )

        iterations = 1 if self.variant != "full" else self.cfg.outer_iterations
        for iteration in range(1, iterations + 1):
            iter_dir = os.path.join(self.out, f"iter{iteration:02d}")
            os.makedirs(iter_dir, exist_ok=True)
            if iteration in done_iters:
                model = sm.load_checkpoint(os.path.join(iter_dir, "refined.pt"))
                logger.info("iteration %d already complete; skipping", iteration)
                continue

            seeds, stats, t_seed = self._seed_stage(model, iter_dir, iteration)
            prec, cov = self._seed_quality(seeds)

            if self.variant == "full":
                dmodel, t_diff = self._diffusion_stage(seeds, model, iter_dir, iteration)
                dense, t_prop = self._propagate_stage(dmodel, seeds, iter_dir, iteration)
                targets = dense
                prop_acc = self._dense_accuracy(dense)
            else:
                dmodel, t_diff, t_prop, prop_acc = None, None, None, None
                targets = seeds

            model, t_ft = self._refine_stage(model, targets, iter_dir, iteration)
            miou_refined, miou_diff, acc, t_eval = self._eval_stage(
                model, dmodel, iter_dir, iteration
            )
            self.ledger.append(
                {
                    "iteration": iteration,
                    "stage": "iteration",
                    "seed_precision": prec,
                    "seed_coverage": cov,
                    "propagated_accuracy": prop_acc,
                    "miou_refined": miou_refined,
                    "miou_diffusion": miou_diff,
                    "pixel_accuracy": acc,
                    "wall_seed": round(t_seed, 3),
                    "wall_diffusion": None if t_diff is None else round(t_diff, 3),
                    "wall_propagate": None if t_prop is None else round(t_prop, 3),
                    "wall_finetune": round(t_ft, 3),
                    "wall_eval": round(t_eval, 3),
                    "artifact_dir": iter_dir,
                    "config_hash": self.hash,
                }
            )
            logger.info(
                "iteration %d: seed precision %s coverage %s, mIoU %s",
                iteration,
                prec,
                cov,
                miou_refined,
            )
        plot_ledger(
            self.ledger,
            os.path.join(self.out, "ledger.csv"),
            os.path.join(self.out, "ledger.png"),
        )
        return self.ledger

    def _seed_quality(self, seeds):
        if not any(g is not None for g in self.train_gt):
            return None, None
        ps, cs = [], []
        for gt, s in zip(self.train_gt, seeds):
            p, c = ek.seed_quality(gt, s)
            if p is not None:
                ps.append(p)
            cs.append(c)
        return (float(np.mean(ps)) if ps else None), float(np.mean(cs))

    def _dense_accuracy(self, dense):
        if not any(g is not None for g in self.train_gt):
            return None
        accs = [
            ek.seed_quality(gt, d)[0]
            for gt, d in zip(self.train_gt, dense)
            if gt is not None
        ]
        return float(np.mean([a for a in accs if a is not None]))


def run(config: PipelineConfig, resume: bool = False) -> RunLedger:
    """Execute the full configured pipeline; see the module docstring."""
    return _Run(config, resume).execute()


def ablate(config: PipelineConfig, variant: str, resume: bool = False) -> RunLedger:
    """One-iteration reduced pipeline for component comparisons.

    single_view_orig / single_view_aug skip fusion and propagation (the
    segmenter self-trains on that view's sparse seeds); fused_only keeps
    fusion but skips propagation; full is one iteration of the real pipeline.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    cfg = replace(config, outer_iterations=1)
    return _Run(cfg, resume, variant=variant).execute()


def default_palette(num_classes: int) -> np.ndarray:
    return class_palette(num_classes)
