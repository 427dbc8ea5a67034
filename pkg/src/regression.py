"""Pixel-wise regression from uncertainty feature maps to error targets.

A PixelDataset holds one row per included pixel of one or more views
(possibly from several scenes). Two regressors map rows to a predicted
error: ordinary least squares and gradient-boosted trees. The backward
selection study repeatedly refits boosting models without each remaining
feature and drops the one whose removal costs the least Pearson
correlation on held-out views.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from src.gbdt import GBDTError, GBDTModel, GBDTParams, fit_gbdt_arrays
from src.metrics import UndefinedCorrelationError, pearson
from src.representations import FeatureMapSet
from src.scene import ImageBuffer

logger = logging.getLogger(__name__)

LINEAR_RIDGE = 1e-8
CONDITION_WARNING = 1e12
SCORE_TIE_TOLERANCE = 1e-12


class RegressionError(Exception):
    """Raised on invalid regression inputs."""


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PixelDataset:
    """Flattened (features, target) rows.

    provenance holds (view position, row-major pixel index) per row; the
    view position indexes view_ids.
    """

    features: np.ndarray
    targets: np.ndarray
    provenance: np.ndarray
    feature_names: tuple
    view_ids: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        prov = np.asarray(self.provenance, dtype=np.int64).reshape(-1, 2)
        if x.ndim != 2 or x.shape[0] == 0:
            raise RegressionError(f"Dataset needs a non-empty (N, F) feature matrix, got {x.shape}")
        if y.shape != (x.shape[0],) or prov.shape[0] != x.shape[0]:
            raise RegressionError("Features, targets and provenance disagree on the row count")
        if x.shape[1] != len(self.feature_names):
            raise RegressionError(f"{x.shape[1]} feature columns for {len(self.feature_names)} names")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise RegressionError("Dataset contains non-finite values")
        if np.any(y < 0):
            raise RegressionError(f"Error targets must be non-negative, got minimum {y.min()}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "provenance", prov)
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        object.__setattr__(self, "view_ids", tuple(self.view_ids))

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def select(self, names: Sequence[str]) -> "PixelDataset":
        """Dataset with only the named feature columns, in the given order."""
        missing = [n for n in names if n not in self.feature_names]
        if missing:
            raise RegressionError(f"Dataset lacks features {missing}")
        idx = [self.feature_names.index(n) for n in names]
        return PixelDataset(self.features[:, idx], self.targets, self.provenance, tuple(names), self.view_ids)

    @classmethod
    def concatenate(cls, datasets: Sequence["PixelDataset"]) -> "PixelDataset":
        """Stack datasets (e.g. views from several scenes) row-wise."""
        if not datasets:
            raise RegressionError("Nothing to concatenate")
        names = datasets[0].feature_names
        if any(ds.feature_names != names for ds in datasets):
            raise RegressionError("Datasets have different feature manifests")
        provenance, view_ids = [], []
        for ds in datasets:
            prov = ds.provenance.copy()
            prov[:, 0] += len(view_ids)
            provenance.append(prov)
            view_ids.extend(ds.view_ids)
        return cls(
            np.concatenate([ds.features for ds in datasets]),
            np.concatenate([ds.targets for ds in datasets]),
            np.concatenate(provenance),
            names,
            tuple(view_ids),
        )


def assemble_dataset(
    maps: Sequence[FeatureMapSet],
    targets: Sequence[ImageBuffer],
    masks: Optional[Sequence[Optional[np.ndarray]]] = None,
    stride: int = 1,
) -> PixelDataset:
    """One row per included pixel of every view.

    Args:
        maps: Feature maps per view, all with the same channel manifest.
        targets: 1-channel error map per view.
        masks: Optional boolean (height, width) inclusion mask per view.
        stride: Keep every stride-th included pixel of each view.

    Raises:
        RegressionError: On mismatched inputs or when no pixel remains.
    """
    if not maps or len(maps) != len(targets):
        raise RegressionError(f"{len(maps)} feature maps for {len(targets)} targets")
    if masks is not None and len(masks) != len(maps):
        raise RegressionError(f"{len(masks)} masks for {len(maps)} views")
    if stride < 1:
        raise RegressionError(f"stride must be at least 1, got {stride}")
    names = maps[0].channel_names
    rows_x, rows_y, prov = [], [], []
    for v, (fm, target) in enumerate(zip(maps, targets)):
        if fm.channel_names != names:
            raise RegressionError(f"View {fm.camera_id!r} has a different channel manifest")
        if target.channels != 1 or (target.width, target.height) != (fm.width, fm.height):
            raise RegressionError(f"Target for view {fm.camera_id!r} does not match its feature maps")
        include = np.ones((fm.height, fm.width), dtype=bool)
        if masks is not None and masks[v] is not None:
            mask = np.asarray(masks[v], dtype=bool)
            if mask.shape != include.shape:
                raise RegressionError(f"Mask for view {fm.camera_id!r} has shape {mask.shape}")
            include &= mask
        pixels = np.flatnonzero(include.reshape(-1))[::stride]
        rows_x.append(fm.image.data.reshape(-1, len(names))[pixels])
        rows_y.append(target.plane(0).reshape(-1)[pixels])
        prov.append(np.stack([np.full(pixels.size, v), pixels], axis=1))
    x = np.concatenate(rows_x)
    if x.shape[0] == 0:
        raise RegressionError("No pixels left after masking")
    return PixelDataset(x, np.concatenate(rows_y), np.concatenate(prov), names,
                        tuple(fm.camera_id for fm in maps))


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LinearModel:
    weights: np.ndarray
    intercept: float
    feature_names: tuple

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.feature_names = tuple(self.feature_names)
        if self.weights.shape[0] != len(self.feature_names) or not np.all(np.isfinite(self.weights)):
            raise RegressionError("Linear model weights must be finite, one per feature")
        if not np.isfinite(self.intercept):
            raise RegressionError("Linear model intercept must be finite")

    def predict_rows(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights + self.intercept


RegressorModel = Union[LinearModel, GBDTModel]


def fit_linear(ds: PixelDataset, ridge: float = LINEAR_RIDGE) -> LinearModel:
    """Least squares with intercept via centered, ridge-stabilized normal equations.

    Raises:
        RegressionError: If there are fewer than F + 1 rows.
    """
    n, f = ds.features.shape
    if n < f + 1:
        raise RegressionError(f"Linear fit needs at least {f + 1} rows, got {n}")
    x_mean = ds.features.mean(axis=0)
    y_mean = float(ds.targets.mean())
    xc = ds.features - x_mean
    yc = ds.targets - y_mean
    gram = xc.T @ xc
    cond = np.linalg.cond(gram) if f else 1.0
    if not np.isfinite(cond) or cond > CONDITION_WARNING:
        logger.warning("Linear design is ill-conditioned (cond %.3g); relying on ridge %.1e", cond, ridge)
    weights = np.linalg.solve(gram + ridge * np.eye(f), xc.T @ yc)
    intercept = y_mean - float(x_mean @ weights)
    logger.info("Fitted linear model on %d rows x %d features", n, f)
    return LinearModel(weights, intercept, ds.feature_names)


def fit_gbdt(ds: PixelDataset, params: GBDTParams = GBDTParams()) -> GBDTModel:
    """Boosted trees on a dataset; see src.gbdt for the algorithm."""
    try:
        return fit_gbdt_arrays(ds.features, ds.targets, ds.feature_names, params)
    except GBDTError as e:
        raise RegressionError(str(e)) from e


def fit_model(ds: PixelDataset, kind: str = "gbdt", params: GBDTParams = GBDTParams()) -> RegressorModel:
    if kind == "gbdt":
        return fit_gbdt(ds, params)
    if kind == "linear":
        return fit_linear(ds)
    raise RegressionError(f"Unknown model kind {kind!r}")


def predict(model: RegressorModel, maps: FeatureMapSet) -> ImageBuffer:
    """Per-pixel predicted error for one view.

    Channels are picked from the maps by the model's feature names, so the
    maps may carry extra channels in any order.
    """
    missing = [n for n in model.feature_names if n not in maps.channel_names]
    if missing:
        raise RegressionError(f"Feature maps of {maps.camera_id!r} lack model features {missing}")
    idx = [maps.channel_names.index(n) for n in model.feature_names]
    x = maps.image.data.reshape(-1, maps.image.channels)[:, idx]
    return ImageBuffer(model.predict_rows(x).reshape(maps.height, maps.width))


# ---------------------------------------------------------------------------
# Backward selection
# ---------------------------------------------------------------------------

class SelectionStep(NamedTuple):
    dropped: str
    surviving: tuple
    score: float


@dataclass
class SelectionTrace:
    """Result of one backward-selection run.

    survival counts, per feature, the evaluation rounds it took part in:
    a feature dropped at step i (1-based) has i, the survivor has F.
    """

    feature_names: tuple
    initial_score: float
    steps: list = field(default_factory=list)

    @property
    def survivor(self) -> str:
        if not self.steps:
            return self.feature_names[0]
        return self.steps[-1].surviving[0]

    @property
    def survival(self) -> dict:
        counts = {name: len(self.feature_names) for name in self.feature_names}
        for i, step in enumerate(self.steps, start=1):
            counts[step.dropped] = i
        return counts

    @property
    def trajectory(self) -> list:
        """Score with all features, then after each elimination."""
        return [self.initial_score] + [s.score for s in self.steps]


def _view_score(pred: np.ndarray, truth: np.ndarray) -> float:
    try:
        return pearson(pred, truth)
    except UndefinedCorrelationError:
        logger.debug("Constant prediction on an evaluation view; scoring it 0")
        return 0.0


def evaluation_score(model: RegressorModel, eval_sets: Sequence[PixelDataset], mode: str = "per_view") -> float:
    """Pearson of predictions on held-out rows: mean over views, or pooled."""
    if mode == "per_view":
        scores = [_view_score(model.predict_rows(ds.select(model.feature_names).features), ds.targets)
                  for ds in eval_sets]
        return float(np.mean(scores))
    if mode == "pooled":
        pooled = PixelDataset.concatenate([ds.select(model.feature_names) for ds in eval_sets])
        return _view_score(model.predict_rows(pooled.features), pooled.targets)
    raise RegressionError(f"Unknown selection mode {mode!r}")


def backward_selection(
    train: PixelDataset,
    eval_sets: Sequence[PixelDataset],
    start_set: Optional[Sequence[str]] = None,
    params: GBDTParams = GBDTParams(),
    *,
    mode: str = "per_view",
    threads: int = 1,
) -> SelectionTrace:
    """Step-wise backward elimination of feature maps.

    At every step each remaining feature is removed in turn, a boosting
    model is refit from scratch on the rest and scored on the evaluation
    views. The feature whose removal leaves the highest score is dropped;
    near-equal scores go to the earliest feature in the manifest.

    Args:
        train: Training rows (all candidate features present).
        eval_sets: One dataset per evaluation view.
        start_set: Feature names to start from; defaults to all of train's.
        params: Boosting hyperparameters.
        mode: "per_view" averages per-view Pearson, "pooled" pools pixels.
        threads: Parallel candidate refits.
    """
    if not eval_sets:
        raise RegressionError("Backward selection needs at least one evaluation view")
    current = list(start_set if start_set is not None else train.feature_names)
    if len(current) < 1:
        raise RegressionError("Backward selection needs at least one feature")
    train_ids = set(train.view_ids)
    for ds in eval_sets:
        if train_ids & set(ds.view_ids):
            raise RegressionError(f"Evaluation views overlap the training views: {sorted(train_ids & set(ds.view_ids))}")

    def score(names):
        model = fit_gbdt(train.select(names), params)
        return evaluation_score(model, eval_sets, mode)

    trace = SelectionTrace(tuple(current), score(current))
    logger.info("Backward selection from %d features, initial score %.4f", len(current), trace.initial_score)
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        while len(current) > 1:
            candidates = [[n for n in current if n != drop] for drop in current]
            if pool is not None:
                scores = list(pool.map(score, candidates))
            else:
                scores = [score(c) for c in candidates]
            best = max(scores)
            pick = next(i for i, s in enumerate(scores) if s >= best - SCORE_TIE_TOLERANCE)
            dropped = current[pick]
            current = candidates[pick]
            trace.steps.append(SelectionStep(dropped, tuple(current), scores[pick]))
            logger.info("Dropped %s (score %.4f, %d left)", dropped, scores[pick], len(current))
    finally:
        if pool is not None:
            pool.shutdown()
    return trace


# ---------------------------------------------------------------------------
# Selection summaries
# ---------------------------------------------------------------------------

class SelectionSummary(NamedTuple):
    feature_names: tuple
    mean_trajectory: np.ndarray   # score per step index, step 0 = all features
    mean_survival: dict           # feature -> mean number of rounds used


def summarize_traces(traces: Sequence[SelectionTrace]) -> SelectionSummary:
    """Average several traces that started from the same feature set."""
    if not traces:
        raise RegressionError("No selection traces to summarize")
    names = traces[0].feature_names
    if any(set(t.feature_names) != set(names) for t in traces):
        raise RegressionError("Selection traces started from different feature sets")
    trajectory = np.mean([t.trajectory for t in traces], axis=0)
    survival = {n: float(np.mean([t.survival[n] for t in traces])) for n in names}
    return SelectionSummary(names, trajectory, survival)


def select_subset(traces: Sequence[SelectionTrace], size: int, strategy: str = "frequency") -> tuple:
    """Pick a feature subset of the given size from selection traces.

    "best" returns the surviving set of that size with the highest score in
    any trace; "frequency" returns the features with the highest mean
    survival, manifest order breaking ties.
    """
    summary = summarize_traces(traces)
    n = len(summary.feature_names)
    if not 1 <= size <= n:
        raise RegressionError(f"Subset size must be in 1..{n}, got {size}")
    if strategy == "frequency":
        ranked = sorted(range(n), key=lambda i: (-summary.mean_survival[summary.feature_names[i]], i))
        chosen = set(ranked[:size])
        return tuple(name for i, name in enumerate(summary.feature_names) if i in chosen)
    if strategy == "best":
        best_score, best_set = -np.inf, None
        for trace in traces:
            if size == n and trace.initial_score > best_score:
                best_score, best_set = trace.initial_score, trace.feature_names
            for step in trace.steps:
                if len(step.surviving) == size and step.score > best_score:
                    best_score, best_set = step.score, step.surviving
        return tuple(best_set)
    raise RegressionError(f"Unknown subset strategy {strategy!r}")
