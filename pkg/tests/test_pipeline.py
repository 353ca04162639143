"""End-to-end orchestration: config handling, ledger, artifacts, resume, CLI."""

import csv
import json
import os
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest
import torch
import yaml
from PIL import Image

from dgle.core import IGNORE, LabelMap, read_labelmap
from dgle.pipeline import (
    VARIANTS,
    DiffOptBlock,
    PipelineConfig,
    RunLedger,
    SegOptBlock,
    ablate,
    colorize,
    default_palette,
    plot_ledger,
    run,
)
from dgle.synthdata import SceneSpec, generate_domain, source_shift, target_shift, write_domain

K = 5


def _write_split(root, rng_seed, shift, count, with_labels=True):
    spec = SceneSpec(num_classes=K, image_size=32, rng_seed=rng_seed)
    write_domain(str(root), generate_domain(spec, shift, count), with_labels=with_labels)
    return str(root)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    """Tiny three-split benchmark shared by the orchestration tests."""
    root = tmp_path_factory.mktemp("bench")
    return {
        "source": _write_split(root / "source", 11, source_shift(), 12),
        "ttrain": _write_split(root / "ttrain", 12, target_shift(), 8),
        "teval": _write_split(root / "teval", 13, target_shift(), 4),
    }


def _tiny_config(bench, out_dir, **kw):
    base = dict(
        target_train_dir=bench["ttrain"],
        out_dir=str(out_dir),
        source_dir=bench["source"],
        target_eval_dir=bench["teval"],
        num_classes=K,
        outer_iterations=2,
        segmodel=SegOptBlock(source_epochs=2, finetune_epochs=1),
        diffprop=DiffOptBlock(epochs=2),
    )
    base.update(kw)
    return PipelineConfig(**base)


class TestConfig:
    def test_defaults_match_operating_point(self):
        cfg = PipelineConfig()
        assert cfg.n == 0.6
        assert cfg.sampler_steps == 3
        assert cfg.outer_iterations == 4
        assert cfg.segmodel.lr == 2.5e-4
        assert cfg.segmodel.momentum == 0.9
        assert cfg.segmodel.poly_power == 0.9
        assert cfg.segmodel.batch_size == 4
        assert cfg.diffprop.lr == 6e-5
        assert cfg.diffprop.weight_decay == 0.01
        assert cfg.diffprop.batch_size == 4

    def test_yaml_round_trip(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(
            yaml.safe_dump(
                {
                    "target_train_dir": "/data/t",
                    "out_dir": "/runs/x",
                    "n": 0.4,
                    "segmodel": {"finetune_epochs": 3},
                    "diffprop": {"epochs": 7},
                }
            )
        )
        cfg = PipelineConfig.from_yaml(str(path))
        assert cfg.target_train_dir == "/data/t"
        assert cfg.n == 0.4
        assert cfg.segmodel.finetune_epochs == 3
        assert cfg.segmodel.lr == 2.5e-4
        assert cfg.diffprop.epochs == 7

    def test_overrides_take_precedence(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"target_train_dir": "/data/t", "n": 0.4}))
        cfg = PipelineConfig.from_yaml(str(path), {"n": 0.7, "seed": 9, "sampler_steps": None})
        assert cfg.n == 0.7
        assert cfg.seed == 9
        assert cfg.sampler_steps == 3

    def test_unknown_keys_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text(yaml.safe_dump({"target_train_dir": "/t", "learning_rate": 1.0}))
        with pytest.raises(ValueError, match="unknown config keys"):
            PipelineConfig.from_yaml(str(path))

    def test_non_mapping_config_rejected(self, tmp_path):
        path = tmp_path / "cfg.yaml"
        path.write_text("- just\n- a list\n")
        with pytest.raises(ValueError, match="mapping"):
            PipelineConfig.from_yaml(str(path))

    def test_validation(self):
        with pytest.raises(ValueError):
            PipelineConfig(n=1.5)
        with pytest.raises(ValueError):
            PipelineConfig(sampler_steps=0)
        with pytest.raises(ValueError):
            PipelineConfig(outer_iterations=-1)

    def test_hash_stable_and_sensitive(self):
        a = PipelineConfig(target_train_dir="/t", out_dir="/runs/a")
        b = PipelineConfig(target_train_dir="/t", out_dir="/runs/b")
        c = PipelineConfig(target_train_dir="/t", out_dir="/runs/a", n=0.5)
        assert a.config_hash() == PipelineConfig(target_train_dir="/t", out_dir="/runs/a").config_hash()
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != c.config_hash()


class TestLedger:
    def _record(self, it):
        return {
            "iteration": it,
            "stage": "iteration",
            "seed_precision": 0.95,
            "seed_coverage": 0.3,
            "propagated_accuracy": None,
            "miou_refined": 0.5 + it / 10,
            "miou_diffusion": None,
            "pixel_accuracy": 0.9,
            "wall_seed": 1.5,
            "wall_diffusion": None,
            "wall_propagate": None,
            "wall_finetune": 2.0,
            "wall_eval": 0.2,
            "artifact_dir": f"/runs/x/iter{it:02d}",
            "config_hash": "abc123",
        }

    def test_csv_round_trip(self, tmp_path):
        path = str(tmp_path / "ledger.csv")
        ledger = RunLedger()
        ledger.append(self._record(1))
        ledger.append(self._record(2))
        ledger.write_csv(path)
        back = RunLedger.read_csv(path)
        assert back.records == ledger.records

    def test_append_persists_when_path_set(self, tmp_path):
        path = str(tmp_path / "ledger.csv")
        ledger = RunLedger(path=path)
        ledger.append(self._record(1))
        assert RunLedger.read_csv(path).records == ledger.records

    def test_unknown_fields_rejected(self):
        with pytest.raises(ValueError, match="unknown ledger fields"):
            RunLedger().append({"iteration": 1, "bogus": 2})

    def test_final_miou_skips_missing(self):
        ledger = RunLedger()
        ledger.append(self._record(1))
        rec = self._record(2)
        rec["miou_refined"] = None
        ledger.append(rec)
        assert ledger.final_miou() == pytest.approx(0.6)

    def test_final_miou_empty(self):
        assert RunLedger().final_miou() is None


class TestColorize:
    def test_known_and_ignore_pixels(self):
        data = np.zeros((8, 8), dtype=np.uint8)
        data[0, 1] = 1
        data[1, 0] = IGNORE
        data[1, 1] = 2
        labels = LabelMap(data, num_classes=3)
        palette = default_palette(3)
        img = colorize(labels, palette)
        assert img.data.shape == (8, 8, 3)
        assert np.allclose(img.data[0, 0], palette[0])
        assert np.allclose(img.data[0, 1], palette[1])
        assert np.allclose(img.data[1, 0], 0.0)
        assert np.allclose(img.data[1, 1], palette[2])

    def test_small_palette_rejected(self):
        labels = LabelMap(np.zeros((8, 8), dtype=np.uint8), num_classes=5)
        with pytest.raises(ValueError, match="palette"):
            colorize(labels, default_palette(3))


def test_plot_ledger_writes_csv_and_png(tmp_path):
    ledger = RunLedger()
    ledger.append(
        {"iteration": 0, "stage": "source", "miou_refined": 0.4, "config_hash": "x"}
    )
    ledger.append(
        {"iteration": 1, "stage": "iteration", "miou_refined": 0.6, "miou_diffusion": 0.55,
         "config_hash": "x"}
    )
    csv_path = str(tmp_path / "out.csv")
    png_path = str(tmp_path / "out.png")
    plot_ledger(ledger, csv_path, png_path)
    assert os.path.exists(csv_path)
    with Image.open(png_path) as im:
        assert im.size[0] > 0


def _rows_without_walls(ledger):
    drop = {"wall_seed", "wall_diffusion", "wall_propagate", "wall_finetune", "wall_eval"}
    return [{k: v for k, v in r.items() if k not in drop} for r in ledger.records]


class TestRunArtifacts:
    @pytest.fixture(scope="class")
    def done(self, bench, tmp_path_factory):
        out = tmp_path_factory.mktemp("run")
        cfg = _tiny_config(bench, out)
        ledger = run(cfg)
        return cfg, ledger

    def test_ledger_rows(self, done):
        cfg, ledger = done
        stages = [(r["iteration"], r["stage"]) for r in ledger.records]
        assert stages == [(0, "source"), (1, "iteration"), (2, "iteration")]
        for rec in ledger.records:
            assert rec["config_hash"] == cfg.config_hash()
            assert rec["miou_refined"] is not None
        for rec in ledger.records[1:]:
            assert 0.0 < rec["seed_coverage"] <= 1.0
            assert rec["propagated_accuracy"] is not None
            assert rec["miou_diffusion"] is not None

    def test_artifact_tree(self, done):
        cfg, _ = done
        out = cfg.out_dir
        for name in ("ledger.csv", "ledger.png", "source.pt"):
            assert os.path.exists(os.path.join(out, name))
        for it in (1, 2):
            iter_dir = os.path.join(out, f"iter{it:02d}")
            assert len(os.listdir(os.path.join(iter_dir, "seeds"))) == 8
            assert len(os.listdir(os.path.join(iter_dir, "propagated"))) == 8
            for name in ("diffusion.pt", "refined.pt", "seed_stats.json", "metrics.csv"):
                assert os.path.exists(os.path.join(iter_dir, name))

    def test_artifacts_embed_hash_and_iteration(self, done):
        cfg, _ = done
        h = cfg.config_hash()
        iter_dir = os.path.join(cfg.out_dir, "iter01")
        with Image.open(os.path.join(iter_dir, "seeds", "00000.png")) as im:
            assert im.text["config_hash"] == h
            assert im.text["iteration"] == "1"
        with Image.open(os.path.join(iter_dir, "propagated", "00000.png")) as im:
            assert im.text["config_hash"] == h
        with open(os.path.join(iter_dir, "seed_stats.json")) as f:
            stats = json.load(f)
        assert stats["config_hash"] == h
        assert stats["iteration"] == 1
        ckpt = torch.load(os.path.join(iter_dir, "refined.pt"), weights_only=False)
        assert ckpt["meta"] == {"config_hash": h, "iteration": 1}

    def test_markers_record_hash(self, done):
        cfg, _ = done
        marker = os.path.join(cfg.out_dir, ".done-iter01-propagate")
        with open(marker) as f:
            assert f.read().strip() == cfg.config_hash()

    def test_propagated_labels_are_dense(self, done):
        cfg, _ = done
        path = os.path.join(cfg.out_dir, "iter02", "propagated", "00003.png")
        labels = read_labelmap(path, K)
        assert not np.any(labels.data == IGNORE)

    def test_resume_noop_keeps_ledger(self, done):
        cfg, ledger = done
        again = run(cfg, resume=True)
        assert again.records == ledger.records

    def test_resume_rebuilds_missing_ledger(self, done):
        cfg, ledger = done
        os.remove(os.path.join(cfg.out_dir, "ledger.csv"))
        rebuilt = run(cfg, resume=True)
        assert _rows_without_walls(rebuilt) == _rows_without_walls(ledger)

    def test_changed_config_invalidates_markers(self, done, bench, tmp_path_factory):
        cfg, _ = done
        out = tmp_path_factory.mktemp("changed")
        for name in os.listdir(cfg.out_dir):
            src = os.path.join(cfg.out_dir, name)
            dst = os.path.join(out, name)
            if os.path.isdir(src):
                import shutil

                shutil.copytree(src, dst)
            else:
                import shutil

                shutil.copy(src, dst)
        changed = _tiny_config(bench, out, n=0.5, outer_iterations=1)
        ledger = run(changed, resume=True)
        assert all(r["config_hash"] == changed.config_hash() for r in ledger.records)
        with open(os.path.join(out, "iter01", "seed_stats.json")) as f:
            assert json.load(f)["config_hash"] == changed.config_hash()


class TestZeroIterations:
    def test_only_source_row(self, bench, tmp_path):
        cfg = _tiny_config(bench, tmp_path / "zero", outer_iterations=0)
        ledger = run(cfg)
        assert [(r["iteration"], r["stage"]) for r in ledger.records] == [(0, "source")]
        assert os.path.exists(os.path.join(cfg.out_dir, "ledger.png"))


class TestAblate:
    def test_invalid_variant_rejected(self, bench, tmp_path):
        cfg = _tiny_config(bench, tmp_path / "bad")
        with pytest.raises(ValueError, match="unknown variant"):
            ablate(cfg, "no_such_variant")

    @pytest.fixture(scope="class")
    def sparse_ledgers(self, bench, tmp_path_factory):
        out = {}
        for variant in ("single_view_orig", "single_view_aug", "fused_only"):
            cfg = _tiny_config(bench, tmp_path_factory.mktemp(variant))
            out[variant] = ablate(cfg, variant)
        return out

    def test_sparse_variants_skip_propagation(self, sparse_ledgers):
        for variant, ledger in sparse_ledgers.items():
            rows = [r for r in ledger.records if r["stage"] == "iteration"]
            assert len(rows) == 1, variant
            assert rows[0]["propagated_accuracy"] is None
            assert rows[0]["wall_diffusion"] is None
            assert rows[0]["miou_refined"] is not None

    def test_full_variant_matches_plain_run(self, bench, tmp_path_factory):
        """ablate(cfg, full) is the one-iteration pipeline, artifact for artifact."""
        out_a = tmp_path_factory.mktemp("run1")
        out_b = tmp_path_factory.mktemp("ablate1")
        cfg_run = _tiny_config(bench, out_a, outer_iterations=1)
        cfg_ablate = _tiny_config(bench, out_b)  # still 2; ablate forces 1
        ledger_run = run(cfg_run)
        ledger_ablate = ablate(cfg_ablate, "full")

        def strip(ledger):
            rows = _rows_without_walls(ledger)
            return [{k: v for k, v in r.items() if k != "artifact_dir"} for r in rows]

        assert strip(ledger_run) == strip(ledger_ablate)
        for rel in (
            os.path.join("iter01", "seeds", "00000.png"),
            os.path.join("iter01", "propagated", "00005.png"),
            os.path.join("iter01", "diffusion.pt"),
            os.path.join("iter01", "refined.pt"),
        ):
            with open(os.path.join(out_a, rel), "rb") as fa:
                a = fa.read()
            with open(os.path.join(out_b, rel), "rb") as fb:
                b = fb.read()
            assert a == b, rel


class TestCLIStages:
    """Each stage as a separate process, talking only through files."""

    @pytest.fixture(scope="class")
    def work(self, tmp_path_factory):
        root = tmp_path_factory.mktemp("cli")
        self._run(
            "synth", "--out", str(root / "source"), "--domain", "source",
            "--count", "10", "--seed", "21", "--image-size", "32",
        )
        self._run(
            "synth", "--out", str(root / "ttrain"), "--domain", "target",
            "--count", "6", "--seed", "22", "--image-size", "32",
        )
        return root

    @staticmethod
    def _run(*args, env_extra=None):
        env = dict(os.environ)
        if env_extra:
            env.update(env_extra)
        proc = subprocess.run(
            [sys.executable, "-m", "dgle.cli", *args],
            capture_output=True,
            text=True,
            env=env,
            timeout=600,
        )
        assert proc.returncode == 0, proc.stderr
        return proc.stdout

    def test_staged_flow(self, work):
        source, ttrain = str(work / "source"), str(work / "ttrain")
        ckpt = str(work / "source.pt")
        self._run(
            "train-source", "--data", source, "--out", ckpt,
            "--epochs", "2", "--seed", "3",
        )
        assert os.path.exists(ckpt)

        probdir = str(work / "probs")
        self._run("infer", "--model", ckpt, "--images", ttrain, "--out-probmaps", probdir)
        assert len([f for f in os.listdir(probdir) if f.endswith(".dglp")]) == 6

        seeds = str(work / "seeds")
        self._run("seed", "--model", ckpt, "--images", ttrain, "--n", "0.6", "--out", seeds)
        with open(os.path.join(seeds, "stats.json")) as f:
            stats = json.load(f)
        assert 0.0 < stats["coverage"] <= 1.0
        assert len([f for f in os.listdir(seeds) if f.endswith(".png")]) == 6

        dckpt = str(work / "diffusion.pt")
        self._run(
            "propagate-train", "--seeds", seeds, "--images", ttrain,
            "--out", dckpt, "--epochs", "2", "--seed", "4",
        )
        dense = str(work / "dense")
        self._run(
            "propagate-infer", "--ckpt", dckpt, "--images", ttrain,
            "--steps", "3", "--out", dense,
        )
        labels = read_labelmap(os.path.join(dense, "00000.png"), K)
        assert not np.any(labels.data == IGNORE)

        refined = str(work / "refined.pt")
        self._run(
            "refine", "--model", ckpt, "--images", ttrain, "--labels", dense,
            "--out", refined, "--epochs", "1",
        )
        report = str(work / "metrics.csv")
        self._run(
            "evaluate", "--gt", os.path.join(ttrain, "labels"),
            "--pred", dense, "--out", report,
        )
        with open(report) as f:
            rows = list(csv.DictReader(f))
        assert any(r["class"] == "mIoU" for r in rows)

    def test_out_falls_back_to_env(self, work):
        ckpt = str(work / "source.pt")
        envdir = str(work / "env_seeds")
        self._run(
            "seed", "--model", ckpt, "--images", str(work / "ttrain"),
            env_extra={"DGLE_OUT": envdir},
        )
        assert os.path.exists(os.path.join(envdir, "stats.json"))

    def test_pipeline_subcommand(self, work, bench):
        cfgpath = str(work / "cfg.yaml")
        out = str(work / "pipe")
        with open(cfgpath, "w") as f:
            yaml.safe_dump(
                {
                    "target_train_dir": bench["ttrain"],
                    "source_dir": bench["source"],
                    "target_eval_dir": bench["teval"],
                    "num_classes": K,
                    "outer_iterations": 2,
                    "segmodel": {"source_epochs": 2, "finetune_epochs": 1},
                    "diffprop": {"epochs": 2},
                },
                f,
            )
        stdout = self._run(
            "pipeline", "--config", cfgpath, "--out", out, "--outer-iterations", "1"
        )
        assert "final mIoU" in stdout
        ledger = RunLedger.read_csv(os.path.join(out, "ledger.csv"))
        assert [r["iteration"] for r in ledger.records] == [0, 1]
        stdout = self._run(
            "pipeline", "--config", cfgpath, "--out", out, "--outer-iterations", "1",
            "--resume",
        )
        assert "final mIoU" in stdout

    def test_ablate_subcommand(self, work, bench):
        cfgpath = str(work / "cfg_ablate.yaml")
        out = str(work / "ablate_cli")
        with open(cfgpath, "w") as f:
            yaml.safe_dump(
                {
                    "target_train_dir": bench["ttrain"],
                    "source_dir": bench["source"],
                    "target_eval_dir": bench["teval"],
                    "num_classes": K,
                    "segmodel": {"source_epochs": 2, "finetune_epochs": 1},
                    "diffprop": {"epochs": 2},
                },
                f,
            )
        stdout = self._run(
            "ablate", "--config", cfgpath, "--variant", "fused_only", "--out", out
        )
        assert "fused_only" in stdout
        ledger = RunLedger.read_csv(os.path.join(out, "ledger.csv"))
        rows = [r for r in ledger.records if r["stage"] == "iteration"]
        assert len(rows) == 1


def test_variant_tuple_is_stable():
    assert VARIANTS == ("single_view_orig", "single_view_aug", "fused_only", "full")
