"""Tests for the CPU rasterizer.

Tests cover:
    - EWA projection of single Gaussians
    - Per-pixel compositing and its thresholds
    - Tiled rendering against the brute-force reference renderer
    - Contribution logs (thresholds, ordering, reconstruction of the image)
    - Determinism across thread counts and primitive orderings
"""

import numpy as np
import pytest

from src.renderer import (
    ALPHA_CLAMP,
    DILATION,
    MIN_ALPHA,
    MIN_TRANSMITTANCE,
    RenderError,
    RenderSource,
    composite_pixel,
    project_gaussian,
    project_gaussians,
    reference_render,
    render_logs,
    render_view,
)
from src.scene import GaussianScene
from tests.conftest import front_camera, make_scene, random_scene


def centered_camera(size=33):
    """Odd-sized camera so the principal point sits on a pixel center."""
    return front_camera(size, size)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

class TestProjection:

    def test_on_axis_gaussian(self):
        cam = centered_camera()
        splat = project_gaussian(make_scene([[0, 0, 0]], scales=0.1).primitive(0), cam)
        assert splat is not None
        assert np.allclose(splat.mean2d, [16.0, 16.0])
        expected = (40.0 * 0.1 / 3.0) ** 2 + DILATION
        assert splat.cov2d[0, 0] == pytest.approx(expected)
        assert splat.cov2d[1, 1] == pytest.approx(expected)
        assert splat.cov2d[0, 1] == pytest.approx(0.0, abs=1e-12)
        assert splat.depth == pytest.approx(3.0)

    def test_bbox_is_three_sigma(self):
        cam = centered_camera()
        splat = project_gaussian(make_scene([[0, 0, 0]], scales=0.1).primitive(0), cam)
        radius = 3.0 * np.sqrt((40.0 * 0.1 / 3.0) ** 2 + DILATION)
        assert splat.bbox == (int(np.ceil(16 - radius)), int(np.ceil(16 - radius)),
                              int(np.floor(16 + radius)), int(np.floor(16 + radius)))

    def test_behind_near_plane_is_culled(self):
        cam = centered_camera()
        assert project_gaussian(make_scene([[0, 0, -3.0]]).primitive(0), cam) is None
        assert project_gaussian(make_scene([[0, 0, -2.995]]).primitive(0), cam) is None

    def test_off_image_is_culled(self):
        cam = centered_camera()
        assert project_gaussian(make_scene([[50.0, 0, 0]], scales=0.01).primitive(0), cam) is None

    def test_sorted_by_depth_then_index(self):
        scene = make_scene([[0, 0, 1.0], [0, 0, -1.0], [0.1, 0, -1.0]])
        splats = project_gaussians(scene, centered_camera())
        assert splats.index.tolist() == [1, 2, 0]


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------

class TestCompositePixel:

    def _splats(self, scene, cam):
        projected = project_gaussians(scene, cam)
        return [projected.splat(i) for i in range(len(projected))]

    def test_single_opaque_splat_is_clamped(self):
        cam = centered_camera()
        splats = self._splats(make_scene([[0, 0, 0]], opacities=1.0), cam)
        value, contributions = composite_pixel(splats, (16, 16), [1.0])
        assert value == pytest.approx(ALPHA_CLAMP)
        assert contributions == [(0, pytest.approx(ALPHA_CLAMP), 1.0)]

    def test_two_splats_front_to_back(self):
        cam = centered_camera()
        scene = make_scene([[0, 0, -1.0], [0, 0, 1.0]], opacities=0.5, scales=0.3)
        splats = self._splats(scene, cam)
        value, contributions = composite_pixel(splats, (16, 16), [2.0, 4.0])
        a0, a1 = contributions[0][1], contributions[1][1]
        assert contributions[1][2] == pytest.approx(1.0 - a0)
        assert value == pytest.approx(2.0 * a0 + 4.0 * a1 * (1.0 - a0))

    def test_weight_conservation_untruncated(self, rng):
        scene = random_scene(rng, n=30)
        cam = centered_camera(24)
        splats = self._splats(scene, cam)
        for x, y in [(5, 5), (12, 12), (20, 3)]:
            _, contributions = composite_pixel(splats, (x, y), np.ones(len(splats)),
                                               min_transmittance=0.0, stop_transmittance=0.0)
            total = sum(a * t for _, a, t in contributions)
            survive = np.prod([1.0 - a for _, a, _ in contributions])
            assert total == pytest.approx(1.0 - survive, abs=1e-9)

    def test_thresholds_hold_for_every_entry(self, rng):
        scene = random_scene(rng, n=60, radius=0.2)
        cam = centered_camera(24)
        splats = self._splats(scene, cam)
        for x in range(0, 24, 3):
            _, contributions = composite_pixel(splats, (x, 12), np.ones(len(splats)))
            for _, alpha, t in contributions:
                assert alpha >= MIN_ALPHA
                assert t >= MIN_TRANSMITTANCE

    def test_empty_pixel(self):
        value, contributions = composite_pixel([], (0, 0), np.zeros((0, 3)))
        assert np.allclose(value, 0.0)
        assert contributions == []


# ---------------------------------------------------------------------------
# render_view
# ---------------------------------------------------------------------------

class TestRenderView:

    def test_single_opaque_gaussian_image(self):
        cam = centered_camera()
        scene = make_scene([[0, 0, 0]], opacities=1.0)
        image = render_view(scene, cam, RenderSource.VALUES, np.ones(1)).image
        assert image.data[16, 16, 0] == pytest.approx(0.99)
        for y, x in [(0, 0), (0, 32), (32, 0), (32, 32)]:
            assert image.data[y, x, 0] == pytest.approx(0.0, abs=1e-12)

    def test_color_source(self):
        cam = centered_camera()
        scene = make_scene([[0, 0, 0]], opacities=1.0, colors=[0.8, 0.2, 0.0])
        image = render_view(scene, cam, RenderSource.COLOR).image
        assert np.allclose(image.data[16, 16], [0.99 * 0.8, 0.99 * 0.2, 0.0])

    def test_color_is_clamped_at_zero(self):
        cam = centered_camera()
        scene = make_scene([[0, 0, 0]], opacities=1.0, colors=[-0.5, 0.5, 0.5])
        image = render_view(scene, cam, RenderSource.COLOR).image
        assert image.data[16, 16, 0] == 0.0

    def test_normalized_depth(self):
        cam = centered_camera()
        scene = make_scene([[0, 0, 0]], opacities=0.6)
        raw = render_view(scene, cam, RenderSource.DEPTH).image
        normalized = render_view(scene, cam, RenderSource.DEPTH, normalized_depth=True).image
        assert raw.data[16, 16, 0] == pytest.approx(0.6 * 3.0)
        assert normalized.data[16, 16, 0] == pytest.approx(3.0)

    def test_matches_reference_render(self, rng):
        cam = centered_camera(24)
        for _ in range(3):
            scene = random_scene(rng, n=25)
            fast = render_view(scene, cam, RenderSource.COLOR, tile_size=8).image.data
            slow = reference_render(scene, cam, RenderSource.COLOR).data
            assert np.max(np.abs(fast - slow)) <= 1e-4

    def test_single_gaussian_matches_reference_exactly(self):
        cam = centered_camera(21)
        scene = make_scene([[0.05, -0.02, 0.1]], opacities=0.8, scales=0.15)
        fast = render_view(scene, cam, RenderSource.DEPTH).image.data
        slow = reference_render(scene, cam, RenderSource.DEPTH).data
        assert np.max(np.abs(fast - slow)) <= 1e-6

    def test_thread_count_does_not_change_output(self, rng):
        scene = random_scene(rng, n=40)
        cam = centered_camera(40)
        one = render_view(scene, cam, with_log=True, threads=1, tile_size=8)
        many = render_view(scene, cam, with_log=True, threads=4, tile_size=8)
        assert np.array_equal(one.image.data, many.image.data)
        assert np.array_equal(one.log.gaussian_index, many.log.gaussian_index)
        assert np.array_equal(one.log.pixel, many.log.pixel)
        assert np.array_equal(one.log.alpha, many.log.alpha)

    def test_tile_size_does_not_change_output(self, rng):
        scene = random_scene(rng, n=30)
        cam = centered_camera(30)
        a = render_view(scene, cam, tile_size=4).image.data
        b = render_view(scene, cam, tile_size=64).image.data
        assert np.allclose(a, b, atol=1e-12)

    def test_primitive_order_does_not_matter(self, rng):
        scene = random_scene(rng, n=30)
        perm = rng.permutation(30)
        cam = centered_camera(24)
        a = render_view(scene, cam).image.data
        b = render_view(scene.subset(perm), cam).image.data
        assert np.allclose(a, b, atol=1e-6)

    def test_linear_in_values(self, rng):
        scene = random_scene(rng, n=30)
        cam = centered_camera(24)
        u, w = rng.uniform(size=30), rng.uniform(size=30)
        combined = render_view(scene, cam, RenderSource.VALUES, 2.0 * u - 3.0 * w).image.data
        separate = (2.0 * render_view(scene, cam, RenderSource.VALUES, u).image.data
                    - 3.0 * render_view(scene, cam, RenderSource.VALUES, w).image.data)
        assert np.allclose(combined, separate, atol=1e-9)

    def test_multi_channel_values(self, rng):
        scene = random_scene(rng, n=10)
        cam = centered_camera(16)
        vals = rng.uniform(size=(10, 4))
        image = render_view(scene, cam, RenderSource.VALUES, vals).image
        assert image.channels == 4
        single = render_view(scene, cam, RenderSource.VALUES, vals[:, 2]).image
        assert np.allclose(image.data[:, :, 2], single.data[:, :, 0])

    def test_window_leaves_outside_zero(self, rng):
        scene = random_scene(rng, n=30)
        cam = centered_camera(24)
        full = render_view(scene, cam).image.data
        part = render_view(scene, cam, window=(4, 6, 15, 17)).image.data
        assert np.allclose(part[6:18, 4:16], full[6:18, 4:16])
        assert np.all(part[:6] == 0) and np.all(part[:, 16:] == 0)

    def test_empty_scene(self):
        cam = centered_camera(8)
        result = render_view(GaussianScene.empty(), cam, RenderSource.DEPTH, with_log=True)
        assert np.all(result.image.data == 0)
        assert len(result.log) == 0

    def test_everything_behind_camera(self):
        cam = centered_camera(8)
        result = render_view(make_scene([[0, 0, -5.0]]), cam, with_log=True)
        assert np.all(result.image.data == 0)
        assert len(result.log) == 0

    def test_values_without_array_raises(self, camera):
        with pytest.raises(RenderError):
            render_view(make_scene([[0, 0, 0]]), camera, RenderSource.VALUES)

    def test_values_wrong_length_raises(self, camera):
        with pytest.raises(RenderError):
            render_view(make_scene([[0, 0, 0]]), camera, RenderSource.VALUES, np.ones(3))

    def test_non_finite_values_raise(self, camera):
        with pytest.raises(RenderError):
            render_view(make_scene([[0, 0, 0]]), camera, RenderSource.VALUES, np.array([np.nan]))

    def test_bad_tile_size_raises(self, camera):
        with pytest.raises(RenderError):
            render_view(make_scene([[0, 0, 0]]), camera, tile_size=0)


# ---------------------------------------------------------------------------
# Contribution logs
# ---------------------------------------------------------------------------

class TestContributionLog:

    def test_entries_respect_thresholds(self, rng):
        scene = random_scene(rng, n=40, radius=0.3)
        cam = centered_camera(24)
        log = render_view(scene, cam, with_log=True).log
        assert len(log) > 0
        assert np.all(log.alpha >= MIN_ALPHA)
        assert np.all(log.alpha <= ALPHA_CLAMP)
        assert np.all(log.transmittance >= MIN_TRANSMITTANCE)
        assert np.all((log.pixel >= 0) & (log.pixel < 24 * 24))

    def test_sorted_by_gaussian_then_pixel(self, rng):
        log = render_view(random_scene(rng, n=40), centered_camera(24), with_log=True).log
        key = log.gaussian_index * (24 * 24) + log.pixel
        assert np.all(np.diff(key) > 0)

    def test_log_reconstructs_image(self, rng):
        scene = random_scene(rng, n=40)
        cam = centered_camera(24)
        vals = rng.uniform(size=40)
        result = render_view(scene, cam, RenderSource.VALUES, vals, with_log=True)
        rebuilt = np.bincount(result.log.pixel, weights=vals[result.log.gaussian_index] * result.log.weights(),
                              minlength=24 * 24).reshape(24, 24)
        assert np.allclose(rebuilt, result.image.data[:, :, 0], atol=1e-12)
        assert np.allclose(result.accumulated.reshape(-1),
                           np.bincount(result.log.pixel, weights=result.log.weights(), minlength=24 * 24))

    def test_weights_without_alpha(self, rng):
        log = render_view(random_scene(rng, n=10), centered_camera(16), with_log=True).log
        assert np.array_equal(log.weights(include_alpha=False), log.transmittance)

    def test_entries_for_and_counts(self, rng):
        log = render_view(random_scene(rng, n=10), centered_camera(16), with_log=True).log
        counts = log.counts()
        assert counts.sum() == len(log)
        for g in range(10):
            sl = log.entries_for(g)
            assert sl.stop - sl.start == counts[g]
            assert np.all(log.gaussian_index[sl] == g)

    def test_render_logs_per_camera(self, rng):
        scene = random_scene(rng, n=10)
        cams = [front_camera(16, 16, camera_id="a"), front_camera(16, 16, distance=4.0, camera_id="b")]
        logs = render_logs(scene, cams)
        assert [log.camera_id for log in logs] == ["a", "b"]
        assert all(log.n_gaussians == 10 for log in logs)


@pytest.mark.slow
class TestReferenceOracle:

    def test_twenty_random_scenes(self):
        rng = np.random.default_rng(7)
        cam = front_camera(64, 64, focal=70.0)
        for _ in range(20):
            scene = random_scene(rng, n=int(rng.integers(20, 200)), sh_degree=int(rng.integers(0, 4)))
            for source in (RenderSource.COLOR, RenderSource.DEPTH):
                fast = render_view(scene, cam, source).image.data
                slow = reference_render(scene, cam, source).data
                assert np.max(np.abs(fast - slow)) <= 1e-4
