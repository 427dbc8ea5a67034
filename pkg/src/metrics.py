"""Evaluation metrics: Pearson correlation and sparsification / AUSE.

Sparsification, per view:
    1. Rescale the error so it sums to 1 over the included pixels.
    2. For f = i / steps, i = 0 .. steps-1, remove ceil(f N) pixels in
       descending order of uncertainty (uncertainty curve) or of error
       (oracle curve); ties go to the lower row-major pixel index.
    3. Record the MAE of the remaining pixels.
    AUSE is the trapezoidal integral of (uncertainty - oracle) over f.

Per-view metrics are aggregated per scene and over the whole dataset.
Views lacking the needed ground truth are excluded from the means and
counted separately.
"""

import csv
import logging
import os
from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from src.scene import ImageBuffer

logger = logging.getLogger(__name__)

DEFAULT_STEPS = 100
CSV_HEADER = ("view_id", "scene", "target", "method", "pearson", "ause")


class MetricsError(Exception):
    """Raised on invalid metric inputs."""


class UndefinedCorrelationError(MetricsError):
    """Raised when Pearson correlation is undefined (constant input)."""


def _flatten(values, mask=None) -> np.ndarray:
    arr = values.data[:, :, 0] if isinstance(values, ImageBuffer) else np.asarray(values, dtype=np.float64)
    arr = np.asarray(arr, dtype=np.float64)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != arr.shape:
            raise MetricsError(f"Mask shape {m.shape} does not match values {arr.shape}")
        return arr[m]
    return arr.reshape(-1)


def pearson(pred, truth, mask=None) -> float:
    """Sample Pearson correlation over included pixels.

    Args:
        pred: Predicted values (ImageBuffer or array).
        truth: True values, same shape.
        mask: Optional boolean inclusion mask.

    Raises:
        MetricsError: On shape mismatch or fewer than 2 pixels.
        UndefinedCorrelationError: If either side is constant.
    """
    p = _flatten(pred, mask)
    t = _flatten(truth, mask)
    if p.shape != t.shape:
        raise MetricsError(f"Prediction has {p.size} values, truth {t.size}")
    if p.size < 2:
        raise MetricsError("Pearson needs at least 2 pixels")
    dp = p - p.mean()
    dt = t - t.mean()
    sp = float(np.sqrt(np.dot(dp, dp)))
    st = float(np.sqrt(np.dot(dt, dt)))
    if sp == 0.0 or st == 0.0:
        raise UndefinedCorrelationError("Pearson correlation is undefined for constant input")
    r = float(np.dot(dp / sp, dt / st))
    return max(-1.0, min(1.0, r))


class SparsificationResult(NamedTuple):
    fractions: np.ndarray
    oracle_curve: np.ndarray
    uncertainty_curve: np.ndarray
    ause: float


def removal_counts(n: int, steps: int) -> np.ndarray:
    """ceil(i * n / steps) for i = 0 .. steps-1, in exact integer arithmetic."""
    i = np.arange(steps, dtype=np.int64)
    return (i * n + steps - 1) // steps


def _curve(err: np.ndarray, order_by: np.ndarray, counts: np.ndarray) -> np.ndarray:
    n = err.size
    order = np.lexsort((np.arange(n), -order_by))
    tail = np.cumsum(err[order][::-1])[::-1]
    remaining = n - counts
    return tail[counts] / remaining


def sparsification(err, unc, mask=None, steps: int = DEFAULT_STEPS) -> SparsificationResult:
    """Sparsification curves of one view and the area between them.

    Raises:
        MetricsError: On negative errors, mismatched inputs or fewer than
            steps included pixels.
    """
    e = _flatten(err, mask)
    u = _flatten(unc, mask)
    if e.shape != u.shape:
        raise MetricsError(f"Error has {e.size} values, uncertainty {u.size}")
    if e.size == 0:
        raise MetricsError("All pixels are masked")
    if steps < 1 or e.size < steps:
        raise MetricsError(f"Need at least {steps} included pixels, got {e.size}")
    if np.any(e < 0) or not (np.all(np.isfinite(e)) and np.all(np.isfinite(u))):
        raise MetricsError("Errors must be finite and non-negative, uncertainties finite")

    total = e.sum()
    if total > 0:
        e = e / total
    else:
        logger.debug("Error map sums to zero; curves are flat")
    counts = removal_counts(e.size, steps)
    fractions = np.arange(steps) / steps
    oracle = _curve(e, e, counts)
    uncertainty = _curve(e, u, counts)
    ause = float(np.trapezoid(uncertainty - oracle, fractions)) if steps > 1 else 0.0
    return SparsificationResult(fractions, oracle, uncertainty, ause)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class ViewMetrics:
    view_id: str
    scene: str
    target: str
    method: str
    pearson: Optional[float] = None
    ause: Optional[float] = None

    @property
    def excluded(self) -> bool:
        return self.pearson is None or self.ause is None


def evaluate_view(
    view_id: str,
    scene: str,
    target: str,
    method: str,
    prediction: ImageBuffer,
    error: Optional[ImageBuffer],
    mask: Optional[np.ndarray] = None,
    steps: int = DEFAULT_STEPS,
) -> ViewMetrics:
    """Pearson and AUSE of one predicted uncertainty map.

    A missing error map (no ground truth for this target) yields an
    excluded record. An undefined Pearson scores 0.
    """
    if error is None:
        return ViewMetrics(view_id, scene, target, method)
    try:
        r = pearson(prediction, error, mask)
    except UndefinedCorrelationError:
        logger.warning("View %s (%s, %s): constant map, Pearson set to 0", view_id, target, method)
        r = 0.0
    result = sparsification(error, prediction, mask, steps)
    return ViewMetrics(view_id, scene, target, method, r, result.ause)


class AggregateRow(NamedTuple):
    scene: str        # "" for the dataset-wide mean
    target: str
    method: str
    views: int
    pearson: float
    ause: float


@dataclass
class MetricsReport:
    views: list
    per_scene: list
    per_dataset: list
    excluded: dict     # (target, method) -> number of excluded views

    @property
    def footnote(self) -> str:
        if not self.excluded:
            return ""
        parts = [f"{count} view(s) excluded from {target}/{method} (missing ground truth)"
                 for (target, method), count in sorted(self.excluded.items())]
        return "; ".join(parts)


def report(metrics: Sequence[ViewMetrics]) -> MetricsReport:
    """Per-scene and per-dataset means of Pearson and AUSE."""
    by_scene = defaultdict(list)
    by_dataset = defaultdict(list)
    excluded = defaultdict(int)
    for m in metrics:
        if m.excluded:
            excluded[(m.target, m.method)] += 1
            continue
        by_scene[(m.scene, m.target, m.method)].append(m)
        by_dataset[(m.target, m.method)].append(m)

    per_scene = [AggregateRow(scene, target, method, len(rows),
                              float(np.mean([r.pearson for r in rows])), float(np.mean([r.ause for r in rows])))
                 for (scene, target, method), rows in sorted(by_scene.items())]
    per_dataset = [AggregateRow("", target, method, len(rows),
                                float(np.mean([r.pearson for r in rows])), float(np.mean([r.ause for r in rows])))
                   for (target, method), rows in sorted(by_dataset.items())]
    out = MetricsReport(list(metrics), per_scene, per_dataset, dict(excluded))
    if out.excluded:
        logger.warning("Report: %s", out.footnote)
    return out


def write_metrics_csv(metrics_report: MetricsReport, path: str) -> str:
    """Write per-view rows with the fixed header; excluded views have empty scores."""
    tmp_path = path + ".tmp"
    with open(tmp_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for m in metrics_report.views:
            writer.writerow([
                m.view_id, m.scene, m.target, m.method,
                "" if m.pearson is None else repr(m.pearson),
                "" if m.ause is None else repr(m.ause),
            ])
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)
    logger.info("Metrics written to %s (%d views)", path, len(metrics_report.views))
    return path


def read_metrics_csv(path: str) -> list[ViewMetrics]:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader, ()))
        if header != CSV_HEADER:
            raise MetricsError(f"{path}: unexpected header {header}")
        rows = []
        for view_id, scene, target, method, r, a in reader:
            rows.append(ViewMetrics(view_id, scene, target, method,
                                    float(r) if r else None, float(a) if a else None))
    return rows
