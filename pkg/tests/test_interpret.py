"""Tests for Grad-CAM, guided backpropagation and variant panels."""

import numpy as np
import pytest
import torch
from torch import nn

from srprune.errors import ArgumentError
from srprune.interpret import (
    VARIANTS,
    CamMap,
    cam_from_tensors,
    cam_iou,
    compare_variants,
    export_map_csv,
    grad_cam,
    guided_backprop,
    render_panel,
)
from srprune.netcore import build_model
from srprune.srinit import drop_profile


def cam(values):
    """CamMap around a plain array."""
    values = np.asarray(values, dtype=np.float64)
    return CamMap(values=values, target_layer=1, target_class=0)


class TestCamFromTensors:
    """The weighting and normalization step."""

    def test_hand_computed(self):
        """Unit weight on one channel reproduces that channel, min-max scaled."""
        activations = torch.zeros(2, 2, 2)
        activations[0] = torch.tensor([[0.0, 1.0], [2.0, 3.0]])
        activations[1] = torch.tensor([[5.0, 5.0], [5.0, 5.0]])
        gradients = torch.zeros(2, 2, 2)
        gradients[0] = 1.0
        expected = np.array([[0.0, 1 / 3], [2 / 3, 1.0]])
        result = cam_from_tensors(activations, gradients)
        np.testing.assert_allclose(result, expected, rtol=1e-6)

    def test_negative_evidence_gives_zeros(self):
        """A map that is rectified away is all zeros, not NaN."""
        activations = torch.rand(3, 4, 4, generator=torch.Generator().manual_seed(0))
        result = cam_from_tensors(activations, -torch.ones(3, 4, 4))
        assert np.array_equal(result, np.zeros((4, 4)))

    def test_shape_mismatch(self):
        """Activations and gradients must agree."""
        with pytest.raises(ArgumentError):
            cam_from_tensors(torch.zeros(2, 2, 2), torch.zeros(2, 2))


class TestGradCam:
    """Grad-CAM on a composed model."""

    def test_map_properties(self, tiny_model, tiny_dataset):
        """The map is image-sized, in [0, 1] and leaves parameters alone."""
        before = {k: v.clone() for k, v in tiny_model.state_dict().items()}
        result = grad_cam(tiny_model, tiny_dataset.x[0], target_class=1)
        assert result.values.shape == (8, 8)
        assert result.values.min() >= 0.0
        assert result.values.max() <= 1.0
        assert result.target_layer == 4
        for key, value in tiny_model.state_dict().items():
            assert torch.equal(value, before[key]), key
        assert all(p.grad is None for p in tiny_model.parameters())

    def test_without_upsampling(self, tiny_model, tiny_dataset):
        """The raw map has the unit's spatial size."""
        image = tiny_dataset.x[0]
        result = grad_cam(tiny_model, image, 0, target_unit=2, upsample=False)
        assert result.values.shape == (8, 8)
        result = grad_cam(tiny_model, image, 0, target_unit=4, upsample=False)
        assert result.values.shape == (4, 4)

    def test_bad_class(self, tiny_model, tiny_dataset):
        """Classes outside the logits are rejected."""
        with pytest.raises(ArgumentError, match="target_class"):
            grad_cam(tiny_model, tiny_dataset.x[0], target_class=3)

    def test_non_spatial_unit(self, mlp_spec, point_dataset):
        """Units of a residual MLP have no spatial output."""
        model = build_model(mlp_spec, seed=0).double()
        with pytest.raises(ArgumentError, match="not spatial"):
            grad_cam(model, point_dataset.x[0], target_class=0)

    def test_wrong_image_shape(self, tiny_model):
        """Images must match the model's input shape."""
        with pytest.raises(ArgumentError, match="shape"):
            grad_cam(tiny_model, torch.zeros(3, 4, 4), target_class=0)


class TestGuidedBackprop:
    """Guided ReLU gradients."""

    def test_linear_model_gives_weights(self):
        """Without ReLUs the saliency is the plain input gradient."""
        model = nn.Sequential(nn.Flatten(), nn.Linear(4, 2))
        saliency = guided_backprop(model, torch.randn(1, 2, 2), target_class=1)
        expected = model[1].weight[1].detach().numpy().reshape(1, 2, 2)
        np.testing.assert_allclose(saliency.values, expected, rtol=1e-6)

    def test_negative_gradients_are_gated(self):
        """Both the forward mask and negative backward signals are zeroed."""
        first = nn.Linear(4, 3, bias=False)
        second = nn.Linear(3, 1, bias=False)
        with torch.no_grad():
            first.weight.copy_(torch.eye(4)[:3])
            second.weight.copy_(torch.tensor([[1.0, -1.0, 2.0]]))
        model = nn.Sequential(nn.Flatten(), first, nn.ReLU(), second)
        image = torch.tensor([[[1.0, 1.0], [-1.0, 5.0]]])
        saliency = guided_backprop(model, image, target_class=0)
        np.testing.assert_array_equal(saliency.values, [[[1.0, 0.0], [0.0, 0.0]]])
        assert saliency.magnitude().shape == (2, 2)

    def test_matches_finite_differences(self):
        """Without ReLUs the saliency agrees with central differences."""
        torch.manual_seed(0)
        model = nn.Sequential(
            nn.Conv2d(2, 3, 3, padding=1),
            nn.Tanh(),
            nn.Flatten(),
            nn.Linear(3 * 4 * 4, 2),
        ).double()
        image = torch.randn(2, 4, 4, dtype=torch.float64)
        saliency = guided_backprop(model, image, target_class=1)
        eps = 1e-6
        numeric = torch.zeros_like(image)
        with torch.no_grad():
            for index in np.ndindex(*image.shape):
                step = torch.zeros_like(image)
                step[index] = eps
                upper = model((image + step).unsqueeze(0))[0, 1]
                lower = model((image - step).unsqueeze(0))[0, 1]
                numeric[index] = (upper - lower) / (2 * eps)
        np.testing.assert_allclose(
            saliency.values,
            numeric.numpy(),
            rtol=1e-3,
            atol=1e-8,
        )

    def test_shape_follows_image(self, tiny_model, tiny_dataset):
        """The saliency map has the image's shape."""
        saliency = guided_backprop(tiny_model, tiny_dataset.x[3], target_class=2)
        assert saliency.values.shape == (3, 8, 8)
        assert all(p.grad is None for p in tiny_model.parameters())


class TestCamIou:
    """Agreement of the strongest pixels."""

    def test_identical_maps(self):
        """A map agrees with itself."""
        values = np.arange(100, dtype=np.float64).reshape(10, 10)
        assert cam_iou(cam(values), cam(values)) == 1.0

    def test_disjoint_maps(self):
        """Opposite maps share no top pixel."""
        values = np.arange(100, dtype=np.float64).reshape(10, 10)
        assert cam_iou(cam(values), cam(-values)) == 0.0

    def test_partial_overlap(self):
        """Top-2 sets {0, 1} and {1, 2} overlap in one of three pixels."""
        a = cam([[9.0, 8.0, 0.0, 0.0]])
        b = cam([[0.0, 8.0, 9.0, 0.0]])
        assert cam_iou(a, b, top_fraction=0.5) == pytest.approx(1 / 3)

    def test_constant_maps(self):
        """Ties resolve by pixel order, so flat maps agree."""
        assert cam_iou(cam(np.zeros((4, 4))), cam(np.zeros((4, 4)))) == 1.0

    def test_invalid_arguments(self):
        """Shapes must match and the fraction lie in (0, 1]."""
        with pytest.raises(ArgumentError):
            cam_iou(cam(np.zeros((2, 2))), cam(np.zeros((3, 3))))
        with pytest.raises(ArgumentError):
            cam_iou(cam(np.zeros((2, 2))), cam(np.zeros((2, 2))), top_fraction=0.0)


def test_compare_variants(tiny_model, tiny_dataset):
    """Variants are the original model and the drop extremes of the profile."""
    profile = drop_profile(tiny_model, tiny_dataset, [0])
    comparison = compare_variants(tiny_model, profile, tiny_dataset.x[0], 0, seed=0)
    low = min(profile.drops, key=lambda d: (d.drop, d.unit_id))
    high = min(profile.drops, key=lambda d: (-d.drop, d.unit_id))
    assert comparison.unit_ids == {
        "original": None,
        "low_drop": low.unit_id,
        "high_drop": high.unit_id,
    }
    assert comparison.accuracies["original"] == profile.base_accuracy
    assert set(comparison.cams) == set(VARIANTS)
    original = grad_cam(tiny_model, tiny_dataset.x[0], 0)
    np.testing.assert_array_equal(comparison.cams["original"].values, original.values)
    assert comparison.iou("original") == 1.0
    assert 0.0 <= comparison.iou("high_drop", top_fraction=0.25) <= 1.0
    captions = comparison.captions()
    assert len(captions) == 3
    assert captions[0].startswith("original:")


def test_export_map_csv(tmp_path):
    """Maps round-trip through CSV at full precision; only 2-D maps export."""
    values = np.array([[0.0, 1 / 3], [2 / 3, 1.0]])
    path = tmp_path / "maps" / "cam.csv"
    export_map_csv(values, path)
    np.testing.assert_array_equal(np.loadtxt(path, delimiter=","), values)
    with pytest.raises(ArgumentError):
        export_map_csv(np.zeros((1, 2, 2)), tmp_path / "bad.csv")


class TestRenderPanel:
    """Figure output."""

    def test_writes_png(self, tiny_model, tiny_dataset, tmp_path):
        """A two-row panel is saved."""
        image = tiny_dataset.x[0]
        result = grad_cam(tiny_model, image, 0)
        saliency = guided_backprop(tiny_model, image, 0)
        out = render_panel(
            [image, image],
            [result, result],
            [saliency, None],
            ["a", "b"],
            tmp_path / "panel.png",
        )
        assert out.exists()
        assert out.stat().st_size > 0

    def test_cam_only(self, tmp_path):
        """Without saliencies a single row is drawn."""
        out = render_panel(
            [np.zeros((4, 4))],
            [cam(np.eye(4))],
            [None],
            ["only"],
            tmp_path / "single.png",
        )
        assert out.exists()

    def test_length_mismatch(self, tmp_path):
        """Lists of different lengths are rejected."""
        with pytest.raises(ArgumentError, match="equal lengths"):
            render_panel([np.zeros((4, 4))], [], [None], ["x"], tmp_path / "p.png")
