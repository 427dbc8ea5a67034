"""Command-line surface of the toolkit.

Each subcommand reads the artifacts of the previous stage from disk and
writes its own, with a run manifest beside every output:

    synth      synthetic bundle (scene.ply, cameras.json, images/)
    render     color PNG and depth PFM per camera
    logs       contribution log (.npz) per train view
    represent  per-Gaussian representations (.npz)
    fisher     Fisher group and FisherRF representations (.npz)
    features   feature tensors (.uefm) per held-out view
    fit        regressor (.json) on holdout-train-reg views
    predict    predicted error map (.pfm) per feature tensor
    evaluate   metrics CSV and workbook on holdout-eval views
    select     backward feature selection traces (.json)

Exit codes: 0 on success, 2 on invalid input (one line
"<ErrorClass>: <detail>" on stderr), 1 on unexpected failures.
"""

import argparse
import glob
import json
import logging
import os
import sys
from typing import Optional, Sequence

from src.bundle import BundleError, SceneBundle, load_scene_bundle, write_scene_bundle
from src.config import Config, ConfigError
from src.fisher import FisherError, fisher_diagonal, grouped_uncertainty
from src.formats import (
    FormatError,
    atomic_write_bytes,
    load_log,
    load_model,
    load_representations,
    read_feature_tensor,
    read_pfm,
    save_fisher,
    save_log,
    save_model,
    save_representations,
    write_feature_tensor,
    write_pfm,
    write_png,
)
from src.gbdt import GBDTError, GBDTParams
from src.manifest import write_run_manifest
from src.metrics import MetricsError, report, sparsification, write_metrics_csv
from src.pipeline import (
    BASELINE_METHOD,
    FEATURE_SETS,
    compute_representations,
    feature_maps,
    filter_channels,
    fisher_representations,
    inclusion_masks,
    render_views,
    resolve_feature_set,
    score_views,
    training_logs,
    view_datasets,
    view_errors,
)
from src.plots import plot_selection, plot_sparsification
from src.ply import write_ply
from src.regression import (
    PixelDataset,
    RegressionError,
    backward_selection,
    fit_model,
    predict,
    select_subset,
    summarize_traces,
)
from src.renderer import RenderError
from src.report import write_report_workbook
from src.representations import FISHERRF_CHANNEL, RepresentationError
from src.scene import ImageBuffer, SceneError, ViewRole
from src.synthetic import DegradationMode, SynthError, SynthSpec, generate

logger = logging.getLogger(__name__)

KNOWN_ERRORS = (
    SceneError,
    RenderError,
    RepresentationError,
    FisherError,
    RegressionError,
    GBDTError,
    MetricsError,
    SynthError,
    FormatError,
    BundleError,
    ConfigError,
)
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INVALID_INPUT = 2
HOLDOUT_ROLES = (ViewRole.HOLDOUT_TRAIN_REG, ViewRole.HOLDOUT_EVAL)


# ---------------------------------------------------------------------------
# Setup
# ---------------------------------------------------------------------------

def setup_logging(config: Config, level: Optional[str] = None) -> None:
    """Console logging plus an optional log file from [app] log_file."""
    log_level = getattr(logging, (level or config.log_level).upper(), logging.INFO)
    handlers = [logging.StreamHandler()]
    file_error = None
    if config.log_file:
        try:
            handlers.append(logging.FileHandler(config.log_file))
        except OSError as e:
            file_error = e
    logging.basicConfig(
        level=log_level,
        format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
        handlers=handlers,
        force=True,
    )
    if file_error is not None:
        logger.warning("Cannot open log file %s, logging to console only: %s", config.log_file, file_error)


def load_config(args: argparse.Namespace) -> Config:
    config = Config(args.config)
    config.load()
    if args.threads is not None:
        config.threads = args.threads
    if getattr(args, "kappa", None) is not None:
        config.kappa = args.kappa
    if getattr(args, "sh_degree", None) is not None:
        config.sh_degree = args.sh_degree
    return config


def _flags(args: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "handler"}


def _bundles(args: argparse.Namespace) -> list[SceneBundle]:
    scenes = args.scene or []
    cameras = args.cameras or []
    if not scenes or len(scenes) != len(cameras):
        raise BundleError(f"Give one --cameras per --scene (got {len(scenes)} scenes, {len(cameras)} camera files)")
    return [load_scene_bundle(s, c) for s, c in zip(scenes, cameras)]


def _single_bundle(args: argparse.Namespace) -> SceneBundle:
    if len(args.scene) > 1:
        raise BundleError(f"{args.command} takes one --scene, got {len(args.scene)}")
    return _bundles(args)[0]


def _paired(values: Optional[Sequence[str]], count: int, flag: str) -> list[str]:
    values = values or []
    if len(values) != count:
        raise BundleError(f"Give one {flag} per --scene ({count} scenes, {len(values)} {flag})")
    return list(values)


def _alpha(args: argparse.Namespace) -> Optional[bool]:
    return None if args.alpha is None else args.alpha == "on"


def _read_maps(directory: str, cameras) -> list:
    return [read_feature_tensor(os.path.join(directory, f"{cam.camera_id}.uefm"), cam.camera_id)
            for cam in cameras]


def _read_prediction(directory: str, camera) -> ImageBuffer:
    data = read_pfm(os.path.join(directory, f"{camera.camera_id}.pfm"))
    if data.shape[:2] != (camera.height, camera.width) or data.shape[2] != 1:
        raise FormatError(f"Prediction for {camera.camera_id!r} has shape {data.shape}")
    return ImageBuffer(data)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args, config: Config) -> tuple:
    spec = SynthSpec(
        seed=args.seed,
        n_gaussians=args.n_gaussians,
        cameras_per_ring=args.cameras_per_ring,
        ring_heights=tuple(args.heights),
        width=args.size,
        height=args.size,
        degradation=DegradationMode(args.degradation),
        amount=args.amount,
    )
    result = generate(spec, threads=config.threads)
    scene_path, cameras_path = write_scene_bundle(args.out, result.degraded, result.views)
    truth_path = write_ply(result.truth, os.path.join(args.out, "truth.ply"))
    return [], [scene_path, cameras_path, truth_path]


def cmd_render(args, config: Config) -> tuple:
    bundle = _single_bundle(args)
    outputs = []
    for cam, (color, depth) in zip(bundle.views.cameras, render_views(bundle.scene, bundle.views, config)):
        outputs.append(write_png(color, os.path.join(args.out, f"{cam.camera_id}.png")))
        outputs.append(write_pfm(depth, os.path.join(args.out, f"{cam.camera_id}_depth.pfm")))
    return [args.scene[0], args.cameras[0]], outputs


def cmd_logs(args, config: Config) -> tuple:
    bundle = _single_bundle(args)
    train = bundle.views.by_role(ViewRole.TRAIN)
    outputs = [save_log(log, os.path.join(args.out, f"{cam.camera_id}.npz"))
               for cam, log in zip(train.cameras, training_logs(bundle, config))]
    return [args.scene[0], args.cameras[0]], outputs


def cmd_represent(args, config: Config) -> tuple:
    bundle = _single_bundle(args)
    names = filter_channels(resolve_feature_set(args.features), args.agg, _alpha(args))
    if set(names) & set(FEATURE_SETS["fisher6"] + FEATURE_SETS["fisherrf"]):
        raise RepresentationError("Use the fisher command for Fisher representations")
    inputs = [args.scene[0], args.cameras[0]]
    logs = None
    if args.logs:
        train = bundle.views.by_role(ViewRole.TRAIN)
        logs = [load_log(os.path.join(args.logs, f"{cam.camera_id}.npz")) for cam in train.cameras]
        inputs.append(args.logs)
    reps = compute_representations(bundle, config, directional=args.directional, names=names, logs=logs)
    return inputs, [save_representations(reps, args.out)]


def cmd_fisher(args, config: Config) -> tuple:
    bundle = _single_bundle(args)
    train = bundle.views.by_role(ViewRole.TRAIN)
    if len(train) == 0:
        raise BundleError(f"Scene {bundle.name!r} has no train views")
    geometric = config.fisher_geometric and not args.color_only
    fisher = fisher_diagonal(bundle.scene, train.cameras, geometric=geometric, step=config.fd_step,
                             floor=config.fd_floor, threads=config.threads)
    reps = fisher_representations(grouped_uncertainty(fisher, config.fisher_eps))
    diagonal_path = os.path.splitext(args.out)[0] + "_diagonal.npz"
    return [args.scene[0], args.cameras[0]], [save_representations(reps, args.out), save_fisher(fisher, diagonal_path)]


def cmd_features(args, config: Config) -> tuple:
    bundle = _single_bundle(args)
    names = filter_channels(resolve_feature_set(args.features), args.agg, _alpha(args))
    inputs = [args.scene[0], args.cameras[0]]
    if args.representations:
        reps = load_representations(args.representations)
        inputs.append(args.representations)
    elif set(names) & set(FEATURE_SETS["fisher6"] + FEATURE_SETS["fisherrf"]):
        raise RepresentationError("Fisher feature sets need --representations from the fisher command")
    else:
        reps = compute_representations(bundle, config, directional=args.directional, names=names)
    views = bundle.views if args.all_views else bundle.views.by_role(*HOLDOUT_ROLES)
    maps = feature_maps(bundle.scene, reps, views, names, config)
    outputs = [write_feature_tensor(fm, os.path.join(args.out, f"{fm.camera_id}.uefm")) for fm in maps]
    return inputs, outputs


def _regression_views(bundles, maps_dirs, role, args, config):
    """(maps, errors, masks) over the views of a role in every bundle."""
    names = resolve_feature_set(args.features)
    all_maps, all_errors, all_masks = [], [], []
    for bundle, maps_dir in zip(bundles, maps_dirs):
        views = bundle.views.by_role(role)
        errors = view_errors(bundle.scene, views, args.target, config)
        all_maps += [fm.select(names) for fm in _read_maps(maps_dir, views.cameras)]
        all_errors += errors
        all_masks += inclusion_masks(views, errors, args.mask_role)
    return all_maps, all_errors, all_masks


def cmd_fit(args, config: Config) -> tuple:
    bundles = _bundles(args)
    maps_dirs = _paired(args.maps, len(bundles), "--maps")
    maps, errors, masks = _regression_views(bundles, maps_dirs, ViewRole.HOLDOUT_TRAIN_REG, args, config)
    if not maps:
        raise RegressionError("No holdout-train-reg views to fit on")
    datasets = view_datasets(maps, errors, masks, config.stride)
    if not datasets:
        raise RegressionError("No holdout-train-reg view has ground truth for the target")
    model = fit_model(PixelDataset.concatenate(datasets), args.model, GBDTParams(**config.gbdt_params))
    return list(args.scene) + list(args.cameras) + maps_dirs, [save_model(model, args.out)]


def cmd_predict(args, config: Config) -> tuple:
    model = load_model(args.model_file)
    paths = sorted(glob.glob(os.path.join(args.maps[0], "*.uefm")))
    if not paths:
        raise FormatError(f"No .uefm files in {args.maps[0]}")
    outputs = []
    for path in paths:
        fm = read_feature_tensor(path)
        outputs.append(write_pfm(predict(model, fm), os.path.join(args.out, f"{fm.camera_id}.pfm")))
    return [args.model_file, args.maps[0]], outputs


def cmd_evaluate(args, config: Config) -> tuple:
    bundles = _bundles(args)
    predictions = _paired(args.predictions, len(bundles), "--predictions")
    baselines = _paired(args.baseline, len(bundles), "--baseline") if args.baseline else [None] * len(bundles)
    metrics = []
    outputs = []
    for bundle, pred_dir, base_dir in zip(bundles, predictions, baselines):
        evals = bundle.views.by_role(ViewRole.HOLDOUT_EVAL)
        errors = view_errors(bundle.scene, evals, args.target, config)
        masks = inclusion_masks(evals, errors, args.mask_role)
        preds = [_read_prediction(pred_dir, cam) for cam in evals.cameras]
        metrics += score_views(bundle.name, evals, preds, errors, masks, args.target, args.method, config)
        if base_dir:
            plain = [fm.select([FISHERRF_CHANNEL]).image for fm in _read_maps(base_dir, evals.cameras)]
            metrics += score_views(bundle.name, evals, plain, errors, masks, args.target, BASELINE_METHOD, config)
        if args.plots:
            for cam, pred, err, mask in zip(evals.cameras, preds, errors, masks):
                if err is None:
                    continue
                try:
                    curve = sparsification(err.error, pred, mask, config.sparsification_steps)
                except MetricsError as e:
                    logger.warning("No sparsification plot for %s: %s", cam.camera_id, e)
                    continue
                outputs.append(plot_sparsification(
                    curve, os.path.join(args.plots, f"{bundle.name}_{cam.camera_id}_sparsification.png"),
                    f"{bundle.name} {cam.camera_id}"))

    summary = report(metrics)
    outputs.insert(0, write_metrics_csv(summary, args.out))
    outputs.insert(1, write_report_workbook(summary, os.path.splitext(args.out)[0] + ".xlsx"))
    inputs = list(args.scene) + list(args.cameras) + predictions + [b for b in baselines if b]
    return inputs, outputs


def cmd_select(args, config: Config) -> tuple:
    bundles = _bundles(args)
    maps_dirs = _paired(args.maps, len(bundles), "--maps")
    params = GBDTParams(**config.gbdt_params)
    traces = []
    for bundle, maps_dir in zip(bundles, maps_dirs):
        reg_maps, reg_errors, reg_masks = _regression_views([bundle], [maps_dir], ViewRole.HOLDOUT_TRAIN_REG,
                                                            args, config)
        eval_maps, eval_errors, eval_masks = _regression_views([bundle], [maps_dir], ViewRole.HOLDOUT_EVAL,
                                                               args, config)
        train_sets = view_datasets(reg_maps, reg_errors, reg_masks, config.stride)
        if not train_sets:
            raise RegressionError(f"Scene {bundle.name!r} has no holdout-train-reg view with ground truth")
        trace = backward_selection(PixelDataset.concatenate(train_sets),
                                   view_datasets(eval_maps, eval_errors, eval_masks, config.stride),
                                   params=params, mode=config.selection_mode, threads=config.threads)
        traces.append((bundle.name, trace))

    summary = summarize_traces([t for _, t in traces])
    doc = {
        "traces": [
            {
                "scene": name,
                "feature_names": list(t.feature_names),
                "initial_score": t.initial_score,
                "steps": [{"dropped": s.dropped, "surviving": list(s.surviving), "score": s.score} for s in t.steps],
                "survival": t.survival,
            }
            for name, t in traces
        ],
        "mean_trajectory": summary.mean_trajectory.tolist(),
        "mean_survival": summary.mean_survival,
    }
    if args.subset_size:
        doc["subsets"] = {strategy: list(select_subset([t for _, t in traces], args.subset_size, strategy))
                          for strategy in ("best", "frequency")}
    atomic_write_bytes(args.out, (json.dumps(doc, indent=2) + "\n").encode("utf-8"))
    figure = plot_selection(summary, os.path.splitext(args.out)[0] + ".png")
    return list(args.scene) + list(args.cameras) + maps_dirs, [args.out, figure]


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_scene_flags(p: argparse.ArgumentParser, multi: bool = False) -> None:
    repeat = " (repeatable, paired in order)" if multi else ""
    p.add_argument("--scene", action="append", required=True, help="Gaussian PLY file" + repeat)
    p.add_argument("--cameras", action="append", required=True, help="cameras.json of the scene" + repeat)


def _add_feature_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", default="all13", help="all13, fisher6, fisherrf or subset:<name>,<name>,...")
    p.add_argument("--agg", choices=("max", "sum", "mean"), help="keep only this aggregation")
    p.add_argument("--alpha", choices=("on", "off"), help="keep only channels with (on) or without (off) alpha")
    p.add_argument("--directional", action="store_true", help="SH-encoded direction-dependent representations")
    p.add_argument("--kappa", type=float, help="vMF concentration")
    p.add_argument("--sh-degree", type=int, dest="sh_degree", help="SH degree of directional encodings")


def _add_target_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--target", choices=("depth", "render"), default="depth")
    p.add_argument("--mask-role", choices=("full", "object", "background"), default="full", dest="mask_role")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splat-uncertainty", description="Gaussian splatting uncertainty toolkit")
    parser.add_argument("--config", default="config.ini", help="config file (default: config.ini)")
    parser.add_argument("--log-level", dest="log_level", help="override [app] log_level")
    parser.add_argument("--threads", type=int, help="worker threads (outputs do not depend on it)")
    parser.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic scene bundle")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--n-gaussians", type=int, default=500, dest="n_gaussians")
    p.add_argument("--cameras-per-ring", type=int, default=12, dest="cameras_per_ring")
    p.add_argument("--heights", type=float, nargs="+", default=[0.0, 1.0])
    p.add_argument("--size", type=int, default=128, help="image width and height")
    p.add_argument("--degradation", choices=[m.value for m in DegradationMode], default="drop")
    p.add_argument("--amount", type=float, default=0.3, help="drop fraction or noise sigma")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("render", help="render color and depth for every camera")
    _add_scene_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser("logs", help="contribution logs of the train views")
    _add_scene_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_logs)

    p = sub.add_parser("represent", help="per-Gaussian representations")
    _add_scene_flags(p)
    _add_feature_flags(p)
    p.add_argument("--logs", help="directory of contribution logs (computed when omitted)")
    p.add_argument("--out", required=True, help="representation archive (.npz)")
    p.set_defaults(handler=cmd_represent)

    p = sub.add_parser("fisher", help="Fisher group and FisherRF representations")
    _add_scene_flags(p)
    p.add_argument("--color-only", action="store_true", dest="color_only", help="skip finite-difference groups")
    p.add_argument("--out", required=True, help="representation archive (.npz)")
    p.set_defaults(handler=cmd_fisher)

    p = sub.add_parser("features", help="render feature tensors for held-out views")
    _add_scene_flags(p)
    _add_feature_flags(p)
    p.add_argument("--representations", help="representation archive (computed when omitted)")
    p.add_argument("--all-views", action="store_true", dest="all_views", help="include train views")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_features)

    p = sub.add_parser("fit", help="fit a regressor on holdout-train-reg views")
    _add_scene_flags(p, multi=True)
    _add_target_flags(p)
    p.add_argument("--maps", action="append", required=True, help="feature tensor directory per scene")
    p.add_argument("--features", default="all13")
    p.add_argument("--model", choices=("gbdt", "linear"), default="gbdt")
    p.add_argument("--out", required=True, help="model document (.json)")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("predict", help="predict error maps from feature tensors")
    p.add_argument("--model", required=True, dest="model_file", help="model document")
    p.add_argument("--maps", action="append", required=True, help="feature tensor directory")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", help="Pearson and AUSE on holdout-eval views")
    _add_scene_flags(p, multi=True)
    _add_target_flags(p)
    p.add_argument("--predictions", action="append", required=True, help="prediction directory per scene")
    p.add_argument("--baseline", action="append", help="FisherRF feature tensor directory per scene")
    p.add_argument("--method", default="gbdt", help="method label for the prediction rows")
    p.add_argument("--plots", help="directory for sparsification plots")
    p.add_argument("--out", required=True, help="metrics CSV")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("select", help="backward feature selection")
    _add_scene_flags(p, multi=True)
    _add_target_flags(p)
    p.add_argument("--maps", action="append", required=True, help="feature tensor directory per scene")
    p.add_argument("--features", default="all13")
    p.add_argument("--subset-size", type=int, dest="subset_size", help="also report subsets of this size")
    p.add_argument("--out", required=True, help="selection report (.json)")
    p.set_defaults(handler=cmd_select)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args)
    except ConfigError as e:
        print(f"ConfigError: {e}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    setup_logging(config, args.log_level)
    logger.info("splat-uncertainty %s starting, version %s", args.command, config.version)

    try:
        for warning in config.validate():
            logger.warning("Config: %s", warning)
        inputs, outputs = args.handler(args, config)
        write_run_manifest(args.out, args.command, _flags(args), inputs, outputs, config.version)
    except KNOWN_ERRORS as e:
        logger.error("%s failed: %s", args.command, e)
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except Exception as e:
        logger.exception("%s failed unexpectedly", args.command)
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    logger.info("%s finished: %d outputs", args.command, len(outputs))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
