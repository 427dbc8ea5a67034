"""Tests for Pearson correlation, sparsification curves and metric reports.

Tests cover:
    - Pearson sign, affine invariance, masking and the undefined case
    - Sparsification against a brute-force reference
    - Index-order tie breaking for constant uncertainty
    - Per-scene / per-dataset aggregation and exclusion counting
    - CSV write/read
"""

import numpy as np
import pytest

from src.metrics import (
    CSV_HEADER,
    MetricsError,
    UndefinedCorrelationError,
    ViewMetrics,
    evaluate_view,
    pearson,
    read_metrics_csv,
    removal_counts,
    report,
    sparsification,
    write_metrics_csv,
)
from src.scene import ImageBuffer


def brute_force_curves(err, unc, steps):
    """Remove pixels one sort at a time, no vectorization."""
    err = np.asarray(err, dtype=np.float64)
    err = err / err.sum()
    n = err.size
    by_unc = sorted(range(n), key=lambda i: (-unc[i], i))
    by_err = sorted(range(n), key=lambda i: (-err[i], i))
    oracle, uncertainty = [], []
    for i in range(steps):
        k = -(-i * n // steps)
        oracle.append(np.mean([err[j] for j in by_err[k:]]))
        uncertainty.append(np.mean([err[j] for j in by_unc[k:]]))
    return np.array(oracle), np.array(uncertainty)


# ---------------------------------------------------------------------------
# Pearson
# ---------------------------------------------------------------------------

class TestPearson:

    def test_three_points(self):
        assert pearson([1.0, 2.0, 3.0], [1.0, 2.0, 4.0]) == pytest.approx(0.98198, abs=1e-5)

    def test_perfect_correlation(self, rng):
        x = rng.uniform(size=50)
        assert pearson(x, 2 * x + 1) == pytest.approx(1.0)
        assert pearson(x, -x) == pytest.approx(-1.0)

    def test_positive_affine_invariance(self, rng):
        x = rng.uniform(size=200)
        y = x + rng.normal(scale=0.3, size=200)
        assert abs(pearson(x, y) - pearson(3.5 * x + 2.0, y)) < 1e-12

    def test_accepts_image_buffers_and_mask(self, rng):
        a = rng.uniform(size=(6, 6))
        b = rng.uniform(size=(6, 6))
        mask = np.zeros((6, 6), dtype=bool)
        mask[:3] = True
        assert pearson(ImageBuffer(a), ImageBuffer(b), mask) == pytest.approx(pearson(a[:3], b[:3]))

    def test_constant_input_is_undefined(self):
        with pytest.raises(UndefinedCorrelationError):
            pearson(np.ones(10), np.arange(10.0))

    def test_undefined_is_a_metrics_error(self):
        assert issubclass(UndefinedCorrelationError, MetricsError)

    def test_shape_mismatch_raises(self):
        with pytest.raises(MetricsError):
            pearson(np.ones(4), np.ones(5))

    def test_single_pixel_raises(self):
        with pytest.raises(MetricsError):
            pearson(np.ones(1), np.ones(1))


# ---------------------------------------------------------------------------
# Sparsification
# ---------------------------------------------------------------------------

class TestRemovalCounts:

    def test_ceiling(self):
        counts = removal_counts(250, 100)
        assert counts[0] == 0
        assert counts[1] == 3
        assert counts[2] == 5
        assert counts[-1] == 248

    def test_exact_division(self):
        assert removal_counts(100, 4).tolist() == [0, 25, 50, 75]


class TestSparsification:

    def test_perfect_uncertainty_has_zero_ause(self, rng):
        err = rng.uniform(size=(20, 20))
        result = sparsification(err, err)
        assert abs(result.ause) <= 1e-12
        assert np.array_equal(result.oracle_curve, result.uncertainty_curve)

    def test_matches_brute_force(self, rng):
        err = rng.uniform(size=(30, 30))
        unc = err + rng.normal(scale=0.2, size=(30, 30))
        steps = 20
        result = sparsification(err, unc, steps=steps)
        oracle, uncertainty = brute_force_curves(err.reshape(-1), unc.reshape(-1), steps)
        assert np.allclose(result.oracle_curve, oracle, atol=1e-12)
        assert np.allclose(result.uncertainty_curve, uncertainty, atol=1e-12)
        fractions = np.arange(steps) / steps
        expected = sum((uncertainty[i] - oracle[i] + uncertainty[i + 1] - oracle[i + 1]) / 2
                       * (fractions[i + 1] - fractions[i]) for i in range(steps - 1))
        assert result.ause == pytest.approx(expected, abs=1e-12)

    def test_constant_uncertainty_removes_in_index_order(self, rng):
        err = rng.uniform(size=200)
        result = sparsification(err, np.zeros(200), steps=10)
        e = err / err.sum()
        for i, k in enumerate(removal_counts(200, 10)):
            assert result.uncertainty_curve[i] == pytest.approx(e[k:].mean(), abs=1e-12)

    def test_oracle_is_a_lower_bound(self, rng):
        err = rng.uniform(size=(16, 16))
        result = sparsification(err, rng.uniform(size=(16, 16)))
        assert np.all(result.uncertainty_curve >= result.oracle_curve - 1e-12)
        assert result.ause >= 0

    def test_first_point_is_full_mean(self, rng):
        err = rng.uniform(size=(12, 12))
        result = sparsification(err, rng.uniform(size=(12, 12)))
        assert result.fractions[0] == 0.0
        assert result.oracle_curve[0] == pytest.approx(1.0 / 144)
        assert len(result.fractions) == 100

    def test_mask_restricts_pixels(self, rng):
        err = rng.uniform(size=(20, 20))
        unc = rng.uniform(size=(20, 20))
        mask = np.zeros((20, 20), dtype=bool)
        mask[:10] = True
        masked = sparsification(err, unc, mask, steps=50)
        cropped = sparsification(err[:10], unc[:10], steps=50)
        assert masked.ause == pytest.approx(cropped.ause, abs=1e-12)

    def test_monotone_transform_of_uncertainty_keeps_ause(self, rng):
        err = rng.uniform(size=(16, 16))
        unc = rng.uniform(size=(16, 16))
        base = sparsification(err, unc)
        for transformed in (np.exp(3.0 * unc) + 2.0, unc ** 3, 10.0 * unc - 4.0):
            other = sparsification(err, transformed)
            assert np.array_equal(other.uncertainty_curve, base.uncertainty_curve)
            assert other.ause == base.ause

    def test_error_rescaling_keeps_ause(self, rng):
        err = rng.uniform(size=(16, 16))
        unc = err + rng.normal(scale=0.3, size=(16, 16))
        base = sparsification(err, unc)
        for factor in (0.01, 7.5, 1e4):
            assert sparsification(factor * err, unc).ause == pytest.approx(base.ause, rel=1e-9, abs=1e-15)

    def test_reversed_uncertainty_gives_largest_area(self, rng):
        err = rng.uniform(size=(20, 20))
        steps = 25
        worst = sparsification(err, -err, steps=steps)
        oracle, uncertainty = brute_force_curves(err.reshape(-1), -err.reshape(-1), steps)
        assert np.allclose(worst.oracle_curve, oracle, atol=1e-12)
        assert np.allclose(worst.uncertainty_curve, uncertainty, atol=1e-12)
        for _ in range(5):
            assert worst.ause >= sparsification(err, rng.uniform(size=(20, 20)), steps=steps).ause - 1e-12

    def test_zero_error_is_flat(self):
        result = sparsification(np.zeros(150), np.arange(150.0))
        assert np.all(result.oracle_curve == 0)
        assert result.ause == 0.0

    def test_too_few_pixels_raises(self):
        with pytest.raises(MetricsError):
            sparsification(np.ones(50), np.ones(50))

    def test_negative_error_raises(self):
        err = np.ones(200)
        err[3] = -1
        with pytest.raises(MetricsError):
            sparsification(err, np.ones(200))

    def test_fully_masked_raises(self):
        with pytest.raises(MetricsError):
            sparsification(np.ones((12, 12)), np.ones((12, 12)), np.zeros((12, 12), dtype=bool))


# ---------------------------------------------------------------------------
# Per-view evaluation and reports
# ---------------------------------------------------------------------------

class TestEvaluateView:

    def test_scores(self, rng):
        err = ImageBuffer(rng.uniform(size=(12, 12)))
        metrics = evaluate_view("v0", "s", "rgb", "gbdt", err, err)
        assert metrics.pearson == pytest.approx(1.0)
        assert abs(metrics.ause) <= 1e-12
        assert not metrics.excluded

    def test_missing_ground_truth_excluded(self, rng):
        metrics = evaluate_view("v0", "s", "depth", "gbdt", ImageBuffer(rng.uniform(size=(12, 12))), None)
        assert metrics.excluded
        assert metrics.pearson is None

    def test_constant_prediction_scores_zero(self, rng):
        metrics = evaluate_view("v0", "s", "rgb", "gbdt", ImageBuffer(np.ones((12, 12))),
                                ImageBuffer(rng.uniform(size=(12, 12))))
        assert metrics.pearson == 0.0


def sample_views():
    return [
        ViewMetrics("a0", "alpha", "rgb", "gbdt", 0.8, 0.02),
        ViewMetrics("a1", "alpha", "rgb", "gbdt", 0.6, 0.04),
        ViewMetrics("b0", "beta", "rgb", "gbdt", 0.4, 0.06),
        ViewMetrics("b1", "beta", "depth", "gbdt"),
    ]


class TestReport:

    def test_per_scene_means(self):
        result = report(sample_views())
        alpha = next(r for r in result.per_scene if r.scene == "alpha")
        assert alpha.views == 2
        assert alpha.pearson == pytest.approx(0.7)
        assert alpha.ause == pytest.approx(0.03)

    def test_dataset_mean_over_views(self):
        result = report(sample_views())
        assert len(result.per_dataset) == 1
        row = result.per_dataset[0]
        assert (row.target, row.method, row.views) == ("rgb", "gbdt", 3)
        assert row.pearson == pytest.approx(0.6)

    def test_excluded_counted(self):
        result = report(sample_views())
        assert result.excluded == {("depth", "gbdt"): 1}
        assert "1 view(s) excluded from depth/gbdt" in result.footnote

    def test_no_footnote_without_exclusions(self):
        assert report(sample_views()[:3]).footnote == ""


class TestCsv:

    def test_write_and_read(self, tmp_path):
        path = str(tmp_path / "metrics.csv")
        write_metrics_csv(report(sample_views()), path)
        with open(path) as f:
            assert f.readline().strip() == ",".join(CSV_HEADER)
        rows = read_metrics_csv(path)
        assert [r.view_id for r in rows] == ["a0", "a1", "b0", "b1"]
        assert rows[0].pearson == 0.8
        assert rows[3].excluded
        assert not (tmp_path / "metrics.csv.tmp").exists()

    def test_bad_header_raises(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("view,score\n")
        with pytest.raises(MetricsError):
            read_metrics_csv(str(path))
