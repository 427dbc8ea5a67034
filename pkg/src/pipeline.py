"""Pipeline stages shared by the command line and the end-to-end checks.

Stages, per scene bundle:
    training logs      contribution logs of the train views
    error maps         |ground truth - render| per view (color or depth)
    representations    per-Gaussian uncertainty values from logs and errors
    feature maps       representations rendered into held-out views
    fit / predict      pixel regressor from feature maps to error maps
    evaluate           Pearson and AUSE per holdout-eval view

Holdout-train-reg views fit the regressor; holdout-eval views score it.
"""

import logging
from typing import NamedTuple, Optional, Sequence

import numpy as np
from tqdm import tqdm

from src.bundle import BundleError, SceneBundle
from src.config import Config
from src.fisher import GroupedUncertainty, fisher_diagonal, grouped_uncertainty
from src.gbdt import GBDTParams
from src.metrics import MetricsReport, ViewMetrics, evaluate_view, report
from src.regression import (
    PixelDataset,
    RegressionError,
    RegressorModel,
    assemble_dataset,
    fit_model,
    predict,
)
from src.renderer import ContributionLog, RenderSource, render_view
from src.representations import (
    FEATURE_CHANNELS,
    FISHER_CHANNELS,
    FISHERRF_CHANNEL,
    DirectionMode,
    FeatureMapSet,
    PixelError,
    PrimitiveRepresentation,
    RepresentationError,
    build_representations,
    pixel_error_map,
    render_feature_maps,
)
from src.scene import ImageBuffer, ViewRole, ViewSet

logger = logging.getLogger(__name__)

FEATURE_SETS = {
    "all13": FEATURE_CHANNELS,
    "fisher6": FISHER_CHANNELS,
    "fisherrf": (FISHERRF_CHANNEL,),
}
SUBSET_PREFIX = "subset:"
TARGETS = ("depth", "render")
BASELINE_METHOD = "fisherrf"


def resolve_feature_set(spec: str) -> tuple:
    """Channel names for all13, fisher6, fisherrf or subset:<name>,<name>,...

    Raises:
        RepresentationError: On an unknown set or unknown subset names.
    """
    if spec in FEATURE_SETS:
        return FEATURE_SETS[spec]
    if spec.startswith(SUBSET_PREFIX):
        names = tuple(n.strip() for n in spec[len(SUBSET_PREFIX):].split(",") if n.strip())
        unknown = [n for n in names if n not in FEATURE_CHANNELS]
        if not names or unknown:
            raise RepresentationError(f"Feature subset {spec!r} has unknown or no channels {unknown}")
        if len(set(names)) != len(names):
            raise RepresentationError(f"Feature subset {spec!r} repeats a channel")
        return tuple(n for n in FEATURE_CHANNELS if n in names)
    raise RepresentationError(f"Unknown feature set {spec!r}; use all13, fisher6, fisherrf or subset:<names>")


def filter_channels(names: Sequence[str], agg: Optional[str] = None, alpha: Optional[bool] = None) -> tuple:
    """Keep visibility / error channels matching an aggregation and alpha mode.

    The FoV counter and Fisher channels always pass.
    """
    kept = []
    for name in names:
        parts = name.split("-")
        if parts[0] in ("vis", "err") and len(parts) == 3:
            if agg is not None and parts[1] != agg:
                continue
            if alpha is not None and (parts[2] == "alpha") != alpha:
                continue
        kept.append(name)
    if not kept:
        raise RepresentationError(f"No channels left after filtering by agg={agg} alpha={alpha}")
    return tuple(kept)


def _progress(items, desc: str):
    return tqdm(items, desc=desc, unit="view", leave=False, disable=len(items) < 2)


# ---------------------------------------------------------------------------
# Renders, logs and errors
# ---------------------------------------------------------------------------

def render_views(scene, views: ViewSet, config: Config) -> list[tuple]:
    """(color, depth) ImageBuffers per view."""
    out = []
    for cam in _progress(views.cameras, "render"):
        color = render_view(scene, cam, RenderSource.COLOR, threads=config.threads, tile_size=config.tile_size)
        depth = render_view(scene, cam, RenderSource.DEPTH, normalized_depth=config.normalized_depth,
                            threads=config.threads, tile_size=config.tile_size)
        out.append((color.image, depth.image))
    return out


def training_logs(bundle: SceneBundle, config: Config) -> list[ContributionLog]:
    """Contribution logs of the bundle's train views, in view order."""
    train = bundle.views.by_role(ViewRole.TRAIN)
    if len(train) == 0:
        raise BundleError(f"Scene {bundle.name!r} has no train views")
    logs = []
    for cam in _progress(train.cameras, "logs"):
        result = render_view(bundle.scene, cam, RenderSource.DEPTH, with_log=True,
                             threads=config.threads, tile_size=config.tile_size)
        logs.append(result.log)
    logger.info("Logged %d train views of %s (%d entries)", len(logs), bundle.name, sum(len(l) for l in logs))
    return logs


def view_errors(scene, views: ViewSet, target: str, config: Config) -> list[Optional[PixelError]]:
    """Per-view error of the scene's render against ground truth.

    target "render" compares color, "depth" compares depth; views without
    ground-truth depth get None for the depth target.
    """
    if target not in TARGETS:
        raise RepresentationError(f"Unknown target {target!r}; use one of {TARGETS}")
    errors = []
    for i, cam in enumerate(views.cameras):
        if target == "render":
            rendered = render_view(scene, cam, RenderSource.COLOR, threads=config.threads,
                                   tile_size=config.tile_size).image
            errors.append(pixel_error_map(views.gt_color[i], rendered))
        elif views.gt_depth[i] is None:
            logger.debug("Camera %s has no depth ground truth", cam.camera_id)
            errors.append(None)
        else:
            rendered = render_view(scene, cam, RenderSource.DEPTH, normalized_depth=config.normalized_depth,
                                   threads=config.threads, tile_size=config.tile_size).image
            errors.append(pixel_error_map(views.gt_depth[i], rendered))
    return errors


def training_error_maps(bundle: SceneBundle, config: Config) -> list[ImageBuffer]:
    """Error maps of the train views from the configured error source."""
    train = bundle.views.by_role(ViewRole.TRAIN)
    source = config.error_source
    errors = view_errors(bundle.scene, train, "render" if source == "render" else "depth", config)
    missing = [cam.camera_id for cam, e in zip(train.cameras, errors) if e is None]
    if missing:
        raise BundleError(f"Train views {missing} lack depth images for error_source 'depth'")
    return [e.error for e in errors]


# ---------------------------------------------------------------------------
# Representations and feature maps
# ---------------------------------------------------------------------------

def compute_representations(
    bundle: SceneBundle,
    config: Config,
    *,
    directional: bool = False,
    names: Sequence[str] = FEATURE_CHANNELS,
    logs: Optional[Sequence[ContributionLog]] = None,
) -> list[PrimitiveRepresentation]:
    """Representations of the bundle's scene from its train views."""
    train = bundle.views.by_role(ViewRole.TRAIN)
    if logs is None:
        logs = training_logs(bundle, config)
    errors = training_error_maps(bundle, config)
    return build_representations(
        bundle.scene, train.cameras, logs, errors,
        margin=config.margin,
        directional=directional,
        kappa=config.kappa,
        sh_degree=config.sh_degree,
        n_directions=config.n_directions,
        direction_mode=DirectionMode(config.direction_mode),
        error_mean=config.error_mean,
        names=names,
    )


def compute_fisher(
    bundle: SceneBundle,
    config: Config,
    *,
    geometric: Optional[bool] = None,
) -> GroupedUncertainty:
    """Fisher group uncertainties and the plain FisherRF value from train views."""
    train = bundle.views.by_role(ViewRole.TRAIN)
    if len(train) == 0:
        raise BundleError(f"Scene {bundle.name!r} has no train views")
    fisher = fisher_diagonal(
        bundle.scene, train.cameras,
        geometric=config.fisher_geometric if geometric is None else geometric,
        step=config.fd_step,
        floor=config.fd_floor,
        threads=config.threads,
    )
    return grouped_uncertainty(fisher, config.fisher_eps)


def fisher_representations(uncertainty: GroupedUncertainty) -> list[PrimitiveRepresentation]:
    """Six group representations followed by the plain FisherRF one."""
    return list(uncertainty.groups) + [uncertainty.plain]


def pick_representations(reps: Sequence[PrimitiveRepresentation], names: Sequence[str]) -> list:
    by_name = {rep.name: rep for rep in reps}
    missing = [n for n in names if n not in by_name]
    if missing:
        raise RepresentationError(f"Representation set lacks channels {missing}")
    return [by_name[n] for n in names]


def feature_maps(
    scene,
    reps: Sequence[PrimitiveRepresentation],
    views: ViewSet,
    names: Sequence[str],
    config: Config,
) -> list[FeatureMapSet]:
    chosen = pick_representations(reps, names)
    return [render_feature_maps(scene, chosen, cam, channel_names=names, threads=config.threads)
            for cam in _progress(views.cameras, "features")]


# ---------------------------------------------------------------------------
# Regression
# ---------------------------------------------------------------------------

def inclusion_masks(views: ViewSet, errors: Sequence[Optional[PixelError]], mask_role: str) -> list:
    """Valid-error pixels intersected with the view mask under the mask role."""
    masks = []
    for i, error in enumerate(errors):
        if error is None:
            masks.append(None)
            continue
        mask = error.valid.copy()
        role_mask = views.pixel_mask(i, mask_role)
        if role_mask is not None:
            mask &= role_mask
        masks.append(mask)
    return masks


def view_datasets(
    maps: Sequence[FeatureMapSet],
    errors: Sequence[Optional[PixelError]],
    masks: Sequence[Optional[np.ndarray]],
    stride: int = 1,
) -> list[PixelDataset]:
    """One dataset per view that has ground truth."""
    return [assemble_dataset([fm], [e.error], [m], stride)
            for fm, e, m in zip(maps, errors, masks) if e is not None]


def fit_regressor(
    maps: Sequence[FeatureMapSet],
    errors: Sequence[Optional[PixelError]],
    masks: Sequence[Optional[np.ndarray]],
    kind: str,
    config: Config,
) -> RegressorModel:
    """Fit a regressor on the given views (possibly from several scenes)."""
    datasets = view_datasets(maps, errors, masks, config.stride)
    if not datasets:
        raise RegressionError("No holdout-train-reg view with ground truth to fit on")
    train = PixelDataset.concatenate(datasets)
    return fit_model(train, kind, GBDTParams(**config.gbdt_params))


def score_views(
    scene_name: str,
    views: ViewSet,
    predictions: Sequence[ImageBuffer],
    errors: Sequence[Optional[PixelError]],
    masks: Sequence[Optional[np.ndarray]],
    target: str,
    method: str,
    config: Config,
) -> list[ViewMetrics]:
    return [
        evaluate_view(cam.camera_id, scene_name, target, method, pred,
                      None if err is None else err.error, mask, config.sparsification_steps)
        for cam, pred, err, mask in zip(views.cameras, predictions, errors, masks)
    ]


class ExperimentResult(NamedTuple):
    model: RegressorModel
    metrics: list
    report: MetricsReport


def run_experiment(
    bundle: SceneBundle,
    config: Config,
    *,
    features: str = "all13",
    model_kind: str = "gbdt",
    target: str = "depth",
    mask_role: str = "full",
    directional: bool = False,
    baseline: bool = True,
) -> ExperimentResult:
    """Full single-scene run: representations, fit on the regression view,
    score on the evaluation views, optionally with the FisherRF baseline.

    Raises:
        RegressionError: If the bundle has no holdout-train-reg view.
    """
    views = bundle.views
    reg = views.by_role(ViewRole.HOLDOUT_TRAIN_REG)
    evals = views.by_role(ViewRole.HOLDOUT_EVAL)
    if len(reg) == 0:
        raise RegressionError(f"Scene {bundle.name!r} has no holdout-train-reg view")

    names = resolve_feature_set(features)
    if names == FEATURE_SETS["fisher6"] or names == FEATURE_SETS["fisherrf"]:
        reps = fisher_representations(compute_fisher(bundle, config))
    else:
        reps = compute_representations(bundle, config, directional=directional, names=names)

    reg_errors = view_errors(bundle.scene, reg, target, config)
    reg_maps = feature_maps(bundle.scene, reps, reg, names, config)
    model = fit_regressor(reg_maps, reg_errors, inclusion_masks(reg, reg_errors, mask_role), model_kind, config)

    eval_errors = view_errors(bundle.scene, evals, target, config)
    eval_masks = inclusion_masks(evals, eval_errors, mask_role)
    eval_maps = feature_maps(bundle.scene, reps, evals, names, config)
    predictions = [predict(model, fm) for fm in eval_maps]
    metrics = score_views(bundle.name, evals, predictions, eval_errors, eval_masks, target, model_kind, config)

    if baseline:
        plain = compute_fisher(bundle, config, geometric=False).plain
        plain_maps = [render_feature_maps(bundle.scene, [plain], cam, channel_names=(FISHERRF_CHANNEL,),
                                          threads=config.threads) for cam in evals.cameras]
        metrics += score_views(bundle.name, evals, [fm.image for fm in plain_maps],
                               eval_errors, eval_masks, target, BASELINE_METHOD, config)

    logger.info("Experiment on %s: %d evaluation views, target %s", bundle.name, len(evals), target)
    return ExperimentResult(model, metrics, report(metrics))
