"""Tests for synthetic scene generation and degradation."""

import numpy as np
import pytest

from src.renderer import RenderSource, render_view
from src.scene import ViewRole, ViewSet
from src.synthetic import (
    DegradationMode,
    SynthError,
    SynthSpec,
    degrade,
    error_ground_truth,
    generate,
    ring_cameras,
    sample_scene,
    split_roles,
)
from tests.conftest import front_camera, make_scene, tiny_spec


class TestSpec:

    @pytest.mark.parametrize("kwargs", [
        {"n_gaussians": 0},
        {"ring_heights": ()},
        {"ring_radius": 0.5},
        {"fov_degrees": 180.0},
        {"amount": 1.0},
        {"degradation": DegradationMode.JITTER, "amount": -0.1},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(SynthError):
            SynthSpec(**kwargs)

    def test_focal_from_fov(self):
        assert SynthSpec(width=100, fov_degrees=90.0).focal == pytest.approx(50.0)


class TestSampling:

    def test_same_seed_same_scene(self):
        a = sample_scene(tiny_spec(seed=3))
        b = sample_scene(tiny_spec(seed=3))
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.sh_coeffs, b.sh_coeffs)

    def test_seeds_differ(self):
        assert not np.array_equal(sample_scene(tiny_spec(seed=1)).means, sample_scene(tiny_spec(seed=2)).means)

    def test_inside_world_ball(self):
        scene = sample_scene(tiny_spec(n_gaussians=200, world_radius=0.8, ring_radius=2.0))
        assert np.all(np.linalg.norm(scene.means, axis=1) <= 0.8 + 1e-12)
        assert scene.sh_degree == 1


class TestCameras:

    def test_ring_layout(self):
        spec = tiny_spec(cameras_per_ring=6, ring_heights=(0.0, 1.0))
        cams = ring_cameras(spec)
        assert [c.camera_id for c in cams[:2]] == ["cam000", "cam001"]
        assert len(cams) == 12
        for cam in cams:
            assert np.linalg.norm(cam.center[:2]) == pytest.approx(spec.ring_radius)
            toward_origin = -cam.center / np.linalg.norm(cam.center)
            assert np.dot(cam.view_direction, toward_origin) == pytest.approx(1.0)

    def test_split_roles(self):
        roles = split_roles(12)
        assert roles[3] == ViewRole.HOLDOUT_TRAIN_REG.value
        assert roles[7] == roles[11] == ViewRole.HOLDOUT_EVAL.value
        assert roles.count(ViewRole.TRAIN.value) == 9


class TestDegrade:

    def test_drop_count(self):
        scene = sample_scene(tiny_spec(n_gaussians=40))
        assert len(degrade(scene, DegradationMode.DROP, 0.3)) == 28

    def test_drop_is_nested_in_amount(self):
        scene = sample_scene(tiny_spec(n_gaussians=40))
        light = {tuple(m) for m in degrade(scene, DegradationMode.DROP, 0.2, seed=5).means}
        heavy = {tuple(m) for m in degrade(scene, DegradationMode.DROP, 0.6, seed=5).means}
        assert heavy <= light

    def test_jitter_scales_with_amount(self):
        scene = sample_scene(tiny_spec())
        small = degrade(scene, DegradationMode.JITTER, 0.01).means - scene.means
        large = degrade(scene, DegradationMode.JITTER, 0.02).means - scene.means
        assert np.allclose(large, 2 * small)

    def test_opacity_noise_stays_in_range(self):
        scene = sample_scene(tiny_spec())
        noisy = degrade(scene, DegradationMode.OPACITY_NOISE, 2.0)
        assert np.all((noisy.opacities >= 0) & (noisy.opacities <= 1))

    def test_zero_amount_is_identity(self):
        scene = sample_scene(tiny_spec())
        assert degrade(scene, DegradationMode.JITTER, 0.0) is scene


class TestGenerate:

    def test_views_and_masks(self):
        result = generate(tiny_spec())
        assert len(result.views) == 8
        assert result.views.roles[3] == ViewRole.HOLDOUT_TRAIN_REG.value
        assert all(m.dtype == bool and m.shape == (24, 24) for m in result.views.object_masks)
        assert any(m.any() for m in result.views.object_masks)
        assert len(result.degraded) < len(result.truth)

    def test_no_degradation_means_no_error(self):
        result = generate(tiny_spec(amount=0.0))
        errors = error_ground_truth(result.views, result.degraded)
        assert all(np.all(e.error.data == 0) for e in errors["render"])
        assert all(np.all(e.error.data == 0) for e in errors["depth"])

    def test_degradation_shows_up_as_error(self):
        result = generate(tiny_spec(amount=0.5))
        errors = error_ground_truth(result.views, result.degraded)
        assert sum(float(e.error.data.sum()) for e in errors["render"]) > 0

    def test_jitter_error_grows_with_sigma(self):
        totals = []
        for sigma in (0.0, 1e-3, 1e-2):
            spec = tiny_spec(seed=3, width=48, height=48, degradation=DegradationMode.JITTER, amount=sigma)
            result = generate(spec)
            errors = error_ground_truth(result.views, result.degraded)
            totals.append(sum(float(e.error.data.sum()) for e in errors["render"]))
        assert totals[0] == 0.0
        assert totals[0] < totals[1] < totals[2]

    def test_dropped_gaussian_leaves_background(self):
        truth = make_scene([[-0.6, 0.0, 0.0], [0.6, 0.0, 0.0]], scales=0.1, opacities=0.9,
                           colors=[[0.8, 0.3, 0.1], [0.2, 0.6, 0.9]])
        camera = front_camera(32, 32)
        gt = render_view(truth, camera, RenderSource.COLOR).image
        views = ViewSet(cameras=[camera], gt_color=[gt])
        errors = error_ground_truth(views, truth.subset([1]))
        err = errors["render"][0].error.plane(0)
        covered = gt.data[:, :16].mean(axis=2)
        assert covered.max() > 0
        assert np.allclose(err[:, :16], covered)
        assert np.all(err[:, 16:] == 0)
        assert errors["depth"] == [None]
