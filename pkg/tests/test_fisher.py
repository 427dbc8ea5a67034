"""Tests for the diagonal Fisher information and grouped uncertainties."""

import numpy as np
import pytest

from src.fisher import (
    FisherDiagonal,
    FisherError,
    color_param_gradient,
    fisher_diagonal,
    geometric_gradient_fd,
    grouped_uncertainty,
    opacity_gradient,
    opacity_gradients,
    view_fisher,
)
from src.renderer import MIN_ALPHA, RenderSource, project_gaussian, render_view
from src.representations import FISHER_CHANNELS, FISHERRF_CHANNEL
from src.sh import SH_C0
from tests.conftest import front_camera, make_scene

CENTER = 16
SIZE = 33


@pytest.fixture
def stack():
    """Three Gaussians on the optical axis, none at the alpha clamp."""
    return make_scene([[0, 0, -0.5], [0, 0, 0.0], [0, 0, 0.5]], scales=0.2, opacities=[0.4, 0.5, 0.6])


@pytest.fixture
def cam():
    return front_camera(SIZE, SIZE)


def pixel_value(scene, camera, values, x, y):
    return render_view(scene, camera, RenderSource.VALUES, values).image.data[y, x, 0]


def scene_on_alpha_cutoff(camera, column, opacity=0.2):
    """One Gaussian whose footprint falls below MIN_ALPHA 1e-7 px before
    reaching pixel (column, CENTER)."""
    px_per_unit = camera.fx / 3.0

    def alpha_at(x):
        splat = project_gaussian(make_scene([[x, 0, 0]], opacities=opacity).primitive(0), camera)
        return splat.alpha_at(column, CENTER)

    lo = (column + 2.5 - camera.cx) / px_per_unit
    hi = (column + 6.0 - camera.cx) / px_per_unit
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if alpha_at(mid) >= MIN_ALPHA:
            lo = mid
        else:
            hi = mid
    x = hi + 1e-7 / px_per_unit
    assert alpha_at(x) < MIN_ALPHA <= alpha_at(x - 1e-3 / px_per_unit)
    return make_scene([[x, 0, 0]], opacities=opacity, colors=[0.9, 0.4, 0.2])


# ---------------------------------------------------------------------------
# Analytic gradients
# ---------------------------------------------------------------------------

class TestOpacityGradient:

    def test_single_pixel_closed_form(self):
        contributions = [(0.4, 1.0), (0.5, 0.6), (0.6, 0.3)]
        grad = opacity_gradient(contributions, [1.0, 2.0, 3.0], 0, phi=1.0)
        assert grad == pytest.approx(-0.9)

    def test_last_splat_has_no_later_term(self):
        contributions = [(0.4, 1.0), (0.5, 0.6)]
        assert opacity_gradient(contributions, [1.0, 2.0], 1, phi=1.0) == pytest.approx(0.6 * 2.0)

    def test_clamped_is_zero(self):
        assert opacity_gradient([(0.99, 1.0)], [1.0], 0, phi=1.0, clamped=True) == 0.0

    def test_matches_finite_differences(self, stack, cam):
        values = np.array([1.0, 2.0, 3.0])
        log = render_view(stack, cam, RenderSource.VALUES, values, with_log=True).log
        grads = opacity_gradients(log, values[:, None], stack.opacities)
        h = 1e-6
        checked = 0
        for y in range(CENTER - 2, CENTER + 3):
            for x in range(CENTER - 2, CENTER + 3):
                pixel = y * SIZE + x
                for k in range(3):
                    entry = np.flatnonzero((log.pixel == pixel) & (log.gaussian_index == k))
                    assert entry.size == 1
                    up = stack.opacities.copy()
                    down = stack.opacities.copy()
                    up[k] += h
                    down[k] -= h
                    fd = (pixel_value(stack.replace(opacities=up), cam, values, x, y)
                          - pixel_value(stack.replace(opacities=down), cam, values, x, y)) / (2 * h)
                    analytic = grads[entry[0], 0]
                    if abs(analytic) > 1e-8:
                        assert analytic == pytest.approx(fd, rel=1e-4)
                        checked += 1
        assert checked > 0

    def test_entries_past_transmittance_cutoff_left_out(self, cam):
        scene = make_scene([[0, 0, -0.5], [0, 0, 0.0], [0, 0, 0.5]], scales=0.2, opacities=[0.97, 0.97, 0.6])
        values = np.array([1.0, 2.0, 3.0])
        log = render_view(scene, cam, RenderSource.VALUES, values, with_log=True).log
        at_pixel = log.pixel == CENTER * SIZE + CENTER
        assert sorted(log.gaussian_index[at_pixel].tolist()) == [0, 1]

        grads = opacity_gradients(log, values[:, None], scene.opacities)
        entry = np.flatnonzero(at_pixel & (log.gaussian_index == 0))[0]
        h = 1e-6
        up = scene.opacities.copy()
        down = scene.opacities.copy()
        up[0] += h
        down[0] -= h
        fd = (pixel_value(scene.replace(opacities=up), cam, values, CENTER, CENTER)
              - pixel_value(scene.replace(opacities=down), cam, values, CENTER, CENTER)) / (2 * h)
        assert grads[entry, 0] == pytest.approx(-0.94, rel=1e-9)
        assert grads[entry, 0] == pytest.approx(fd, rel=1e-4)

    def test_empty_log(self, cam):
        scene = make_scene([[0, 0, -5.0]])
        log = render_view(scene, cam, with_log=True).log
        assert opacity_gradients(log, np.ones((1, 3)), scene.opacities).shape == (0, 3)


class TestColorGradient:

    def test_closed_form(self):
        assert np.allclose(color_param_gradient(0.5, 0.8, [1.0, 2.0]), [0.4, 0.8])

    def test_matches_finite_differences(self, stack, cam):
        log = render_view(stack, cam, RenderSource.COLOR, with_log=True).log
        pixel = CENTER * SIZE + CENTER
        h = 1e-4
        for k in range(3):
            entry = np.flatnonzero((log.pixel == pixel) & (log.gaussian_index == k))[0]
            analytic = color_param_gradient(log.alpha[entry], log.transmittance[entry], [SH_C0])[0]
            sh = np.array(stack.sh_coeffs)
            up, down = sh.copy(), sh.copy()
            up[k, 0, 0] += h
            down[k, 0, 0] -= h
            hi = render_view(stack.replace(sh_coeffs=up), cam).image.data[CENTER, CENTER, 0]
            lo = render_view(stack.replace(sh_coeffs=down), cam).image.data[CENTER, CENTER, 0]
            assert analytic == pytest.approx((hi - lo) / (2 * h), rel=1e-4)


# ---------------------------------------------------------------------------
# Finite-difference geometric gradients
# ---------------------------------------------------------------------------

class TestGeometricGradient:

    def test_richardson_convergence(self, cam):
        scene = make_scene([[0.05, -0.03, 0.0]], scales=[0.15, 0.1, 0.12], opacities=0.7, colors=[0.9, 0.4, 0.2])
        for group, component in (("mean", 0), ("scale", 1), ("rotation", 3)):
            coarse = geometric_gradient_fd(scene, cam, 0, group, component, step=2e-5, floor=2e-6).data
            fine = geometric_gradient_fd(scene, cam, 0, group, component, step=1e-5, floor=1e-6).data
            mask = np.abs(fine) > 1e-6
            assert mask.any()
            assert np.linalg.norm(coarse[mask] - fine[mask]) < 0.05 * np.linalg.norm(fine[mask])

    def test_pixel_on_alpha_cutoff_is_left_out(self, cam):
        scene = scene_on_alpha_cutoff(cam, column=10)
        grad = geometric_gradient_fd(scene, cam, 0, "mean", 0, step=0.0, floor=1e-4).data
        assert np.all(grad[CENTER, 10] == 0)
        assert np.any(grad[CENTER, 11] != 0)

    def test_richardson_convergence_near_alpha_cutoff(self, cam):
        scene = scene_on_alpha_cutoff(cam, column=10)
        coarse = geometric_gradient_fd(scene, cam, 0, "mean", 0, step=0.0, floor=2e-4).data
        fine = geometric_gradient_fd(scene, cam, 0, "mean", 0, step=0.0, floor=1e-4).data
        mask = np.abs(fine) > 1e-6
        assert mask.any()
        assert np.abs(coarse).max() < 10.0
        assert np.linalg.norm(coarse[mask] - fine[mask]) < 0.05 * np.linalg.norm(fine[mask])

    def test_invisible_gaussian_gives_zero_image(self, cam):
        scene = make_scene([[0, 0, -5.0]])
        grad = geometric_gradient_fd(scene, cam, 0, "mean", 0)
        assert grad.channels == 3
        assert np.all(grad.data == 0)

    def test_unknown_group_raises(self, cam):
        with pytest.raises(FisherError):
            geometric_gradient_fd(make_scene([[0, 0, 0]]), cam, 0, "opacity", 0)


# ---------------------------------------------------------------------------
# Fisher accumulation
# ---------------------------------------------------------------------------

class TestFisherDiagonal:

    def test_sh_dc_entries_from_log(self, stack, cam):
        fisher = view_fisher(stack, cam, geometric=False)
        log = render_view(stack, cam, with_log=True).log
        w = log.weights()
        expected = np.bincount(log.gaussian_index, weights=w * w, minlength=3) * SH_C0 ** 2
        for c in range(3):
            assert np.allclose(fisher.sh_dc[:, c], expected)
        assert fisher.sh_rest.shape == (3, 0)

    def test_additive_over_views(self, stack):
        cams = [front_camera(SIZE, SIZE, camera_id="a"), front_camera(SIZE, SIZE, distance=4.0, camera_id="b")]
        total = fisher_diagonal(stack, cams, geometric=False)
        parts = view_fisher(stack, cams[0], geometric=False) + view_fisher(stack, cams[1], geometric=False)
        for group in ("opacity", "sh_dc", "sh_rest"):
            assert np.allclose(total.group(group), parts.group(group))

    def test_geometric_groups_filled_for_visible(self, cam):
        scene = make_scene([[0, 0, 0], [0, 0, -5.0]], scales=0.15, opacities=0.6, colors=[0.8, 0.3, 0.1])
        fisher = view_fisher(scene, cam, geometric=True, threads=2)
        assert np.all(fisher.mean[0] >= 0) and fisher.mean[0].sum() > 0
        assert np.all(fisher.mean[1] == 0)
        assert np.all(fisher.scale[1] == 0)

    def test_threads_do_not_change_result(self, cam):
        scene = make_scene([[0, 0, 0], [0.1, 0, 0.2]], scales=0.15, opacities=0.6, colors=[0.8, 0.3, 0.1])
        one = view_fisher(scene, cam, geometric=True, threads=1)
        two = view_fisher(scene, cam, geometric=True, threads=2)
        assert np.array_equal(one.rotation, two.rotation)

    def test_log_count_mismatch_raises(self, stack, cam):
        with pytest.raises(FisherError):
            fisher_diagonal(stack, [cam], logs=[])

    def test_negative_entries_rejected(self):
        with pytest.raises(FisherError):
            FisherDiagonal(-np.ones((1, 3)), np.zeros((1, 3)), np.zeros((1, 4)), np.zeros((1, 1)),
                           np.zeros((1, 3)), np.zeros((1, 0)))

    def test_add_shape_mismatch_raises(self):
        with pytest.raises(FisherError):
            FisherDiagonal.zeros(2, 0) + FisherDiagonal.zeros(2, 1)


class TestGroupedUncertainty:

    def test_zero_fisher_floor(self):
        result = grouped_uncertainty(FisherDiagonal.zeros(2, 1), eps=1e-6)
        sizes = {"fisher-mean": 3, "fisher-scale": 3, "fisher-rotation": 4, "fisher-opacity": 1,
                 "fisher-sh-dc": 3, "fisher-sh-rest": 9}
        assert tuple(r.name for r in result.groups) == FISHER_CHANNELS
        for rep in result.groups:
            assert np.allclose(rep.values, sizes[rep.name] * 1e6)
        assert result.plain.name == FISHERRF_CHANNEL
        assert np.allclose(result.plain.values, 12 * 1e6)

    def test_observed_gaussian_less_uncertain(self, cam):
        scene = make_scene([[0, 0, 0], [0, 0, -5.0]], opacities=0.6)
        result = grouped_uncertainty(view_fisher(scene, cam, geometric=False))
        assert result.plain.values[0] < result.plain.values[1]

    def test_zero_eps_with_zero_entry_raises(self):
        with pytest.raises(FisherError):
            grouped_uncertainty(FisherDiagonal.zeros(1, 0), eps=0.0)

    def test_negative_eps_raises(self):
        with pytest.raises(FisherError):
            grouped_uncertainty(FisherDiagonal.zeros(1, 0), eps=-1.0)
