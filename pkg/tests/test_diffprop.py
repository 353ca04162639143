"""Diffusion propagation tests: schedule, noising, masked loss, sampling."""

import math

import numpy as np
import pytest
import torch

from dgle.core import IGNORE, ImageTensor, LabelMap, encode_labels
from dgle.diffprop import (
    DiffusionOptConfig,
    NoiseSchedule,
    SamplerConfig,
    add_noise,
    diffusion_training_loss,
    encode_labels_torch,
    fresh_diffusion_model,
    load_checkpoint,
    propagate,
    sample,
    save_checkpoint,
    train_diffusion,
    warm_start_condition,
)
from dgle.segmodel import SegModel, fresh_model


def scalar_alpha_bar(t, offset=0.008, clip_eps=1e-5):
    """Independent scalar recomputation of the schedule."""
    num = math.cos((t + offset) / (1.0 + offset) * math.pi / 2.0) ** 2
    den = math.cos(offset / (1.0 + offset) * math.pi / 2.0) ** 2
    return min(max(num / den, clip_eps), 1.0 - clip_eps)


class TestSchedule:
    def test_matches_scalar_oracle(self):
        sched = NoiseSchedule()
        for t in [0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0]:
            assert sched.alpha_bar(t) == pytest.approx(scalar_alpha_bar(t), rel=1e-12)

    def test_clipped_endpoints(self):
        sched = NoiseSchedule()
        assert sched.alpha_bar(0.0) == 1.0 - 1e-5
        assert sched.alpha_bar(1.0) == 1e-5

    def test_monotone_decreasing(self):
        sched = NoiseSchedule()
        ts = np.linspace(0, 1, 101)
        vals = sched.alpha_bar(ts)
        assert np.all(np.diff(vals) <= 0)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            NoiseSchedule().alpha_bar(1.5)

    def test_vectorized_matches_scalar(self):
        sched = NoiseSchedule()
        ts = np.array([0.2, 0.4, 0.8])
        vec = sched.alpha_bar(ts)
        for t, v in zip(ts, vec):
            assert v == pytest.approx(sched.alpha_bar(float(t)), rel=0)


class TestAddNoise:
    def test_shape_dtype_time(self):
        rng = np.random.default_rng([51, 0])
        x0 = rng.standard_normal((8, 8, 3)).astype(np.float32)
        state = add_noise(x0, 0.3, np.random.default_rng(0))
        assert state.z.shape == x0.shape
        assert state.z.dtype == np.float32
        assert state.t == 0.3

    def test_statistics_within_three_sigma(self):
        sched = NoiseSchedule()
        x0 = np.array([[[1.0, -1.0, 0.5]]], dtype=np.float32)
        n = 10_000
        for t in (0.1, 0.5, 0.9):
            rng = np.random.default_rng([51, 1, int(t * 10)])
            draws = np.stack([add_noise(x0, t, rng, sched).z for _ in range(n)])
            ab = sched.alpha_bar(t)
            mean_se = math.sqrt((1 - ab) / n)
            var_se = (1 - ab) * math.sqrt(2 / (n - 1))
            np.testing.assert_allclose(
                draws.mean(axis=0), math.sqrt(ab) * x0, atol=3 * mean_se
            )
            np.testing.assert_allclose(
                draws.var(axis=0, ddof=1), (1 - ab) * np.ones_like(x0), atol=3 * var_se
            )

    def test_t_zero_nearly_clean(self):
        x0 = np.ones((4, 4, 2), dtype=np.float32)
        state = add_noise(x0, 0.0, np.random.default_rng(0))
        assert np.abs(state.z - x0).max() < 0.05


class TestMaskedDiffusionLoss:
    def _setup(self, seed=0):
        torch.manual_seed(seed)
        model = fresh_diffusion_model(3, seed=seed)
        rng = np.random.default_rng([51, 2, seed])
        labels_np = rng.integers(0, 3, size=(2, 8, 8)).astype(np.int64)
        labels_np[:, 4:, :] = IGNORE
        labels = torch.from_numpy(labels_np)
        images = torch.from_numpy(rng.random((2, 3, 8, 8)).astype(np.float32))
        x0 = encode_labels_torch(labels, 3, 1.0)
        t = torch.tensor([0.3, 0.7])
        eps = torch.from_numpy(rng.standard_normal(x0.shape).astype(np.float32))
        return model, x0, labels, t, eps, images

    def test_perturbing_ignore_positions_is_invariant(self):
        model, x0, labels, t, eps, images = self._setup()
        sched = NoiseSchedule()
        loss_a = diffusion_training_loss(
            model, x0, labels, t, eps, model.encode_condition(images), sched
        )
        grads_a = torch.autograd.grad(loss_a, list(model.parameters()))
        x0_pert = x0.clone()
        mask = (labels == IGNORE).unsqueeze(1).expand_as(x0_pert)
        x0_pert[mask] += 3.7
        loss_b = diffusion_training_loss(
            model, x0_pert, labels, t, eps, model.encode_condition(images), sched
        )
        grads_b = torch.autograd.grad(loss_b, list(model.parameters()))
        assert loss_a.item() == loss_b.item()
        for ga, gb in zip(grads_a, grads_b):
            assert torch.equal(ga, gb)

    def test_encode_matches_numpy_codec(self):
        rng = np.random.default_rng([51, 3])
        labels_np = rng.integers(0, 4, size=(6, 6)).astype(np.uint8)
        labels_np[0, :3] = IGNORE
        lm = LabelMap(labels_np, 4)
        z_np = encode_labels(lm, scale=2.0)
        z_t = encode_labels_torch(
            torch.from_numpy(labels_np.astype(np.int64))[None], 4, 2.0
        )[0].permute(1, 2, 0).numpy()
        np.testing.assert_array_equal(z_np, z_t)


class TestGradientCheck:
    def test_analytic_vs_central_differences(self):
        model = fresh_diffusion_model(3, seed=4).double()
        rng = np.random.default_rng([51, 4])
        z = torch.from_numpy(rng.standard_normal((1, 3, 4, 4)))
        t = torch.tensor([0.5], dtype=torch.float64)
        images = torch.from_numpy(rng.random((1, 3, 4, 4)))
        labels = torch.from_numpy(rng.integers(0, 3, size=(1, 4, 4)))

        def loss_fn():
            logits = model(z, t, images)
            return torch.nn.functional.cross_entropy(logits, labels)

        loss = loss_fn()
        params = list(model.parameters())
        grads = torch.autograd.grad(loss, params)
        flat = torch.cat([g.reshape(-1) for g in grads])
        sizes = [p.numel() for p in params]
        total = sum(sizes)
        picks = rng.choice(total, size=10, replace=False)
        h = 1e-6
        for flat_idx in picks:
            idx = int(flat_idx)
            p_i = 0
            while idx >= sizes[p_i]:
                idx -= sizes[p_i]
                p_i += 1
            p = params[p_i]
            orig = p.data.reshape(-1)[idx].item()
            with torch.no_grad():
                p.data.reshape(-1)[idx] = orig + h
                up = loss_fn().item()
                p.data.reshape(-1)[idx] = orig - h
                down = loss_fn().item()
                p.data.reshape(-1)[idx] = orig
            numeric = (up - down) / (2 * h)
            analytic = flat[int(flat_idx)].item()
            denom = max(abs(numeric), abs(analytic), 1e-8)
            assert abs(numeric - analytic) / denom <= 1e-3


class TestSampler:
    def test_full_coverage_and_determinism(self):
        rng = np.random.default_rng([51, 5])
        model = fresh_diffusion_model(3, seed=1)
        images = [ImageTensor(rng.random((8, 8, 3)).astype(np.float32)) for _ in range(2)]
        a = propagate(model, images, SamplerConfig(steps=3), np.random.default_rng(9))
        b = propagate(model, images, SamplerConfig(steps=3), np.random.default_rng(9))
        for la, lb in zip(a, b):
            assert not (la.data == IGNORE).any()
            np.testing.assert_array_equal(la.data, lb.data)

    def test_single_step_works(self):
        rng = np.random.default_rng([51, 6])
        model = fresh_diffusion_model(3, seed=1)
        img = ImageTensor(rng.random((8, 8, 3)).astype(np.float32))
        labels = sample(model, img, SamplerConfig(steps=1), np.random.default_rng(0))
        assert labels.data.shape == (8, 8)
        assert not (labels.data == IGNORE).any()

    def test_invalid_steps_rejected(self):
        with pytest.raises(ValueError):
            SamplerConfig(steps=0)

    def test_non_multiple_size(self):
        rng = np.random.default_rng([51, 7])
        model = fresh_diffusion_model(3, seed=1)
        img = ImageTensor(rng.random((10, 9, 3)).astype(np.float32))
        labels = sample(model, img, SamplerConfig(steps=2), np.random.default_rng(0))
        assert labels.data.shape == (10, 9)

    def test_fixed_logits_model_contracts_to_its_argmax(self):
        # Degenerate-model check: if the denoiser always emits the same
        # logits, the trajectory must land on their argmax for any step count.
        class FixedLogits(torch.nn.Module):
            num_classes = 4
            in_channels = 3
            downsample_factor = 1

            def __init__(self, logits):
                super().__init__()
                self.logits = logits

            def encode_condition(self, images):
                return images

            def denoise(self, z, t, cond):
                return self.logits.expand(z.shape[0], -1, -1, -1)

        rng = np.random.default_rng([51, 8])
        logits = torch.from_numpy(rng.standard_normal((1, 4, 8, 8)).astype(np.float32))
        model = FixedLogits(logits)
        want = np.argmax(logits[0].numpy(), axis=0).astype(np.uint8)
        img = ImageTensor(rng.random((8, 8, 3)).astype(np.float32))
        for steps in (1, 2, 3, 5):
            out = sample(model, img, SamplerConfig(steps=steps), np.random.default_rng(5))
            np.testing.assert_array_equal(out.data, want)


class TestTraining:
    def _data(self, rng, count=4):
        out = []
        for _ in range(count):
            img = ImageTensor(rng.random((8, 8, 3)).astype(np.float32))
            labels = rng.integers(0, 3, size=(8, 8)).astype(np.uint8)
            labels[rng.random((8, 8)) < 0.6] = IGNORE
            out.append((img, LabelMap(labels, 3)))
        return out

    def test_loss_decreases(self):
        rng = np.random.default_rng([51, 8])
        data = self._data(rng)
        model = fresh_diffusion_model(3, seed=2)
        report = train_diffusion(
            model, data, DiffusionOptConfig(epochs=12, seed=0, lr=3e-4)
        )
        assert np.mean(report.epoch_losses[-3:]) < np.mean(report.epoch_losses[:3])

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng([51, 9])
        data = self._data(rng)
        m1 = fresh_diffusion_model(3, seed=3)
        train_diffusion(m1, data, DiffusionOptConfig(epochs=2, seed=5))
        m2 = fresh_diffusion_model(3, seed=3)
        train_diffusion(m2, data, DiffusionOptConfig(epochs=2, seed=5))
        for a, b in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(a, b)

    def test_all_ignore_rejected(self):
        rng = np.random.default_rng([51, 10])
        data = self._data(rng)
        for _, lab in data:
            lab.data[:] = IGNORE
        with pytest.raises(ValueError):
            train_diffusion(fresh_diffusion_model(3, seed=0), data, DiffusionOptConfig())

    def test_checkpoint_round_trip(self, tmp_path):
        rng = np.random.default_rng([51, 11])
        model = fresh_diffusion_model(3, seed=6)
        path = str(tmp_path / "d.pt")
        save_checkpoint(model, path)
        loaded = load_checkpoint(path)
        img = ImageTensor(rng.random((8, 8, 3)).astype(np.float32))
        a = sample(model, img, SamplerConfig(steps=2), np.random.default_rng(1))
        b = sample(loaded, img, SamplerConfig(steps=2), np.random.default_rng(1))
        np.testing.assert_array_equal(a.data, b.data)


class TestWarmStartCondition:
    def test_copies_stem_and_down_filters(self):
        seg = fresh_model(4, seed=3)
        model = fresh_diffusion_model(4, seed=6)
        before_up = model.cond.up.weight.clone()
        copied = warm_start_condition(model, seg)
        assert sorted(copied) == sorted(
            f"cond.{m}.{p}"
            for m in ("c1", "n1", "c2", "n2", "down", "n3")
            for p in ("weight", "bias")
        )
        assert torch.equal(model.cond.c1.weight, seg.enc[0].c1.weight)
        assert torch.equal(model.cond.n2.bias, seg.enc[0].n2.bias)
        assert torch.equal(model.cond.down.weight, seg.enc[1].c1.weight)
        assert torch.equal(model.cond.up.weight, before_up)

    def test_shape_mismatch_rejected(self):
        seg = SegModel(4, channels=(8, 16, 32))
        model = fresh_diffusion_model(4, seed=6)
        with pytest.raises(ValueError, match="shape"):
            warm_start_condition(model, seg)

    def test_warm_started_model_still_trains(self):
        rng = np.random.default_rng([51, 12])
        seg = fresh_model(3, seed=3)
        model = fresh_diffusion_model(3, seed=6)
        warm_start_condition(model, seg)
        images = [ImageTensor(rng.random((8, 8, 3)).astype(np.float32)) for _ in range(4)]
        labels = [
            LabelMap(rng.integers(0, 3, size=(8, 8)).astype(np.uint8), 3) for _ in range(4)
        ]
        report = train_diffusion(model, list(zip(images, labels)), DiffusionOptConfig(epochs=2))
        assert report.steps == 2
        assert all(math.isfinite(l) for l in report.epoch_losses)
