"""Tests for the coordinate regressor, its loss, and the refine operation."""

import json

import numpy as np
import pytest
import torch

from tightbox.dataset import SampleConfig
from tightbox.errors import (
    DegenerateBoxError,
    ShapeMismatchError,
    UnsupportedBackboneError,
)
from tightbox.geometry import BBox, EdgeErrorModel, expand, make_patch_transform, to_patch_coords
from tightbox.model import (
    BACKBONES,
    CoordinateRegressor,
    LossConfig,
    build,
    coords_to_box,
    huber_loss,
    load_checkpoint,
    refine,
    save_checkpoint,
    sidecar_path,
)

from conftest import MEASURED_ERRORS


class FixedCoords:
    """Stand-in regressor returning one preset coordinate row per call."""

    def __init__(self, coords):
        self.coords = np.asarray(coords, dtype=np.float64)

    def predict_coords(self, patches):
        n = np.asarray(patches).shape[0] if np.asarray(patches).ndim == 4 else 1
        return np.tile(self.coords, (n, 1))


def oracle_for(true_box, rough_box, cfg):
    """Regressor that answers with the exact patch coordinates of true_box."""
    t = make_patch_transform(expand(rough_box, cfg.expand_ratio), cfg.patch_size)
    return FixedCoords(to_patch_coords(t, true_box))


def random_patch(rng, size=64):
    return rng.uniform(-1, 1, size=(size, size, 3)).astype(np.float32)


class TestBuild:
    def test_same_seed_same_parameters(self):
        a = build("tiny", 64, seed=7)
        b = build("tiny", 64, seed=7)
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys()
        for key in sa:
            assert torch.equal(sa[key], sb[key]), key

    def test_different_seed_differs(self):
        a = build("tiny", 64, seed=0)
        b = build("tiny", 64, seed=1)
        assert any(not torch.equal(pa, pb)
                   for pa, pb in zip(a.state_dict().values(), b.state_dict().values()))

    def test_batch_output_shape_and_finite(self, rng):
        model = build("tiny", 64, seed=0)
        out = model.predict_coords(np.stack([random_patch(rng) for _ in range(5)]))
        assert out.shape == (5, 4)
        assert np.isfinite(out).all()

    def test_alternate_input_size(self, rng):
        model = build("tiny", 128, seed=0)
        out = model.predict_coords(random_patch(rng, 128))
        assert out.shape == (1, 4)

    def test_unsupported_backbone(self):
        with pytest.raises(UnsupportedBackboneError):
            build("transformer", 64, seed=0)

    @pytest.mark.parametrize("kind", BACKBONES)
    def test_every_backbone_emits_four(self, kind, rng):
        model = build(kind, 64, seed=0)
        out = model.predict_coords(random_patch(rng))
        assert out.shape == (1, 4)
        assert np.isfinite(out).all()

    def test_head_widths(self):
        tiny = build("tiny", 64, seed=0)
        big = build("mobilenet", 64, seed=0)
        def linear_widths(model):
            return [m.out_features for m in model.head if isinstance(m, torch.nn.Linear)]
        assert linear_widths(tiny) == [256, 64, 4]
        assert linear_widths(big) == [512, 128, 4]


class TestForward:
    def test_identical_rows_for_identical_patches(self, rng):
        model = build("tiny", 64, seed=3)
        patch = random_patch(rng)
        out = model.predict_coords(np.stack([patch, patch]))
        assert np.array_equal(out[0], out[1])

    def test_wrong_spatial_size_rejected(self, rng):
        model = build("tiny", 64, seed=0)
        with pytest.raises(ShapeMismatchError):
            model.predict_coords(random_patch(rng, 32))

    def test_wrong_channel_count_rejected(self):
        model = build("tiny", 64, seed=0)
        with pytest.raises(ShapeMismatchError):
            model.predict_coords(np.zeros((1, 64, 64, 4), dtype=np.float32))

    def test_local_smoothness(self, rng):
        model = build("tiny", 64, seed=0)
        patch = random_patch(rng)
        before = model.predict_coords(patch)
        nudged = patch.copy()
        nudged[10, 20, 1] += 1e-7
        after = model.predict_coords(nudged)
        assert np.abs(after - before).max() < 1e-3

    def test_predict_restores_training_mode(self, rng):
        model = build("tiny", 64, seed=0)
        model.train()
        model.predict_coords(random_patch(rng))
        assert model.training


class TestHuberLoss:
    def test_zero_at_target(self):
        x = np.array([[0.1, 0.2, 0.3, 0.4]])
        assert huber_loss(x, x) == 0.0

    def test_quadratic_branch(self):
        assert huber_loss(np.array([0.5]), np.array([0.0])) == pytest.approx(0.125)

    def test_linear_branch(self):
        assert huber_loss(np.array([2.0]), np.array([0.0])) == pytest.approx(1.5)

    def test_delta_two(self):
        cfg = LossConfig(huber_delta=2.0)
        assert huber_loss(np.array([1.0]), np.array([0.0]), cfg) == pytest.approx(0.5)
        assert huber_loss(np.array([3.0]), np.array([0.0]), cfg) == pytest.approx(4.0)

    def test_mean_over_all_coordinates(self):
        pred = np.array([[0.5, 0.0], [2.0, 0.0]])
        target = np.zeros((2, 2))
        assert huber_loss(pred, target) == pytest.approx((0.125 + 1.5) / 4.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            huber_loss(np.zeros((2, 4)), np.zeros((3, 4)))

    def test_invalid_delta(self):
        with pytest.raises(ValueError):
            LossConfig(huber_delta=0.0)

    def test_tensor_input_keeps_gradient(self):
        pred = torch.tensor([0.7], requires_grad=True)
        loss = huber_loss(pred, torch.tensor([0.0]))
        assert isinstance(loss, torch.Tensor)
        loss.backward()
        assert pred.grad is not None

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(12)
        delta = 1.0
        # random residuals plus points just either side of the kink
        points = np.concatenate([
            rng.uniform(-3, 3, size=92),
            [1.01, 0.99, -1.01, -0.99, 1.0 + 0.01, -(1.0 + 0.01), 0.99, -0.99],
        ])
        cfg = LossConfig(huber_delta=delta)
        eps = 1e-4
        for r in points:
            pred = torch.tensor([float(r)], dtype=torch.float64, requires_grad=True)
            loss = huber_loss(pred, torch.zeros(1, dtype=torch.float64), cfg)
            loss.backward()
            grad = float(pred.grad[0])
            plus = huber_loss(np.array([r + eps]), np.zeros(1), cfg)
            minus = huber_loss(np.array([r - eps]), np.zeros(1), cfg)
            fd = (plus - minus) / (2 * eps)
            assert grad == pytest.approx(fd, rel=1e-4, abs=1e-10)

    def test_pointwise_bounds(self):
        grid = np.linspace(-4, 4, 161)
        for r in grid:
            h = huber_loss(np.array([r]), np.zeros(1))
            assert h <= 0.5 * r * r + 1e-12
            assert h <= abs(r) + 1e-12


class TestRefine:
    CFG = SampleConfig(expand_ratio=0.15, error_model=MEASURED_ERRORS, patch_size=64)

    def _image(self):
        return np.full((160, 200, 3), 40, dtype=np.uint8)

    def test_oracle_model_recovers_true_box(self):
        true = BBox(50, 40, 110, 130)
        rough = BBox(46, 44, 105, 128)
        model = oracle_for(true, rough, self.CFG)
        out = refine(model, self._image(), rough, self.CFG)
        assert out.as_tuple() == pytest.approx(true.as_tuple(), abs=1e-6)

    def test_deterministic(self):
        rough = BBox(30, 30, 90, 120)
        model = FixedCoords((0.2, 0.1, 0.8, 0.9))
        a = refine(model, self._image(), rough, self.CFG)
        b = refine(model, self._image(), rough, self.CFG)
        assert a == b

    def test_inverted_coordinates_swapped(self):
        rough = BBox(30, 30, 90, 120)
        img = self._image()
        inverted = refine(FixedCoords((0.8, 0.9, 0.2, 0.1)), img, rough, self.CFG)
        ordered = refine(FixedCoords((0.2, 0.1, 0.8, 0.9)), img, rough, self.CFG)
        assert inverted == ordered

    def test_output_clipped_to_image(self):
        rough = BBox(5, 5, 195, 155)
        out = refine(FixedCoords((-0.4, -0.3, 1.6, 1.5)), self._image(), rough, self.CFG)
        assert out.x_min >= 0 and out.y_min >= 0
        assert out.x_max <= 200 and out.y_max <= 160

    def test_explicit_image_dims_override(self):
        rough = BBox(5, 5, 100, 100)
        out = refine(FixedCoords((-0.4, -0.3, 1.6, 1.5)), self._image(), rough,
                     self.CFG, image_w=120, image_h=110)
        assert out.x_max <= 120 and out.y_max <= 110

    def test_collapsed_prediction_raises(self):
        rough = BBox(30, 30, 130, 120)
        with pytest.raises(DegenerateBoxError):
            refine(FixedCoords((0.5, 0.2, 0.5001, 0.9)), self._image(), rough, self.CFG)

    def test_random_oracle_boxes_stay_valid(self, rng):
        img = self._image()
        for _ in range(30):
            x, y = rng.uniform(10, 80, size=2)
            true = BBox(x, y, x + rng.uniform(20, 60), y + rng.uniform(20, 60))
            rough = BBox(true.x_min - 3, true.y_min + 2, true.x_max + 4, true.y_max - 2)
            out = refine(oracle_for(true, rough, self.CFG), img, rough, self.CFG)
            assert 0 <= out.x_min < out.x_max <= 200
            assert 0 <= out.y_min < out.y_max <= 160

    def test_coords_to_box_swap(self):
        t = make_patch_transform(BBox(0, 0, 100, 100), 64)
        a = coords_to_box(t, (0.8, 0.1, 0.2, 0.9))
        b = coords_to_box(t, (0.2, 0.1, 0.8, 0.9))
        assert a == b


class TestTrainingStep:
    def test_one_step_descends(self, rng):
        model = build("tiny", 64, seed=5)
        model.train()
        patches = torch.from_numpy(
            np.stack([random_patch(rng) for _ in range(4)])).permute(0, 3, 1, 2)
        targets = torch.from_numpy(rng.uniform(0, 1, size=(4, 4)).astype(np.float32))
        opt = torch.optim.SGD(model.parameters(), lr=1e-3)
        loss0 = huber_loss(model(patches), targets)
        opt.zero_grad()
        loss0.backward()
        opt.step()
        with torch.no_grad():
            loss1 = huber_loss(model(patches), targets)
        assert float(loss1) < float(loss0.detach())


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = build("tiny", 64, seed=9)
        cfg = SampleConfig(expand_ratio=0.12,
                           error_model=EdgeErrorModel(0.01, 0.05, -0.02, 0.1),
                           patch_size=64)
        path = tmp_path / "model.pt"
        save_checkpoint(model, cfg, path)
        loaded, loaded_cfg, meta = load_checkpoint(path)
        assert loaded_cfg == cfg
        assert meta["format_version"] == 1
        patch = random_patch(rng)
        assert np.array_equal(model.predict_coords(patch), loaded.predict_coords(patch))

    def test_sidecar_contents(self, tmp_path):
        model = build("tiny", 64, seed=0)
        path = tmp_path / "model.pt"
        save_checkpoint(model, SampleConfig(patch_size=64), path, init="random")
        with open(sidecar_path(path)) as fh:
            meta = json.load(fh)
        assert meta["backbone"] == "tiny"
        assert meta["input_size"] == 64
        assert meta["head"] == [256, 64, 4]
        assert meta["expand_ratio"] == 0.15
        assert meta["format_version"] == 1
        assert meta["init"] == "random"
        assert set(meta["error_model"]) >= {
            "mean_vertical", "sigma_vertical", "mean_horizontal", "sigma_horizontal"}

    def test_missing_sidecar_fails(self, tmp_path):
        model = build("tiny", 64, seed=0)
        path = tmp_path / "model.pt"
        save_checkpoint(model, SampleConfig(patch_size=64), path)
        import os
        os.remove(sidecar_path(path))
        with pytest.raises(FileNotFoundError):
            load_checkpoint(path)

    def test_direct_construction_rejects_unknown_kind(self):
        with pytest.raises(UnsupportedBackboneError):
            CoordinateRegressor("unknown", 64)
