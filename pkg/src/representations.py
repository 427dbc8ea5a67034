"""Per-Gaussian uncertainty representations and their feature maps.

A representation assigns each Gaussian either a scalar or an SH
expansion (direction-dependent). Rendering it in place of color yields an
uncertainty feature map. The canonical feature set has 13 channels:

    fov                       training cameras whose widened frustum holds the mean
    vis-{max,sum,mean}-alpha  max over views of the per-view aggregate of alpha*T
    vis-{max,sum,mean}-noalpha  same with T alone
    err-{max,sum,mean}-alpha  mean over views of the aggregate of e*alpha*T
    err-{max,sum,mean}-noalpha  same with e*T

Direction-dependent variants weight each view by the rescaled von
Mises-Fisher kernel exp(kappa * nu.d - kappa), are sampled on a Fibonacci
sphere and stored as least-squares SH fits.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from src.renderer import NEAR_PLANE, ContributionLog, RenderSource, render_view
from src.scene import Camera, GaussianScene, ImageBuffer, sh_coefficient_count
from src.sh import fibonacci_sphere, sh_eval_many, sh_fit

logger = logging.getLogger(__name__)

DEFAULT_MARGIN = 0.1
DEFAULT_KAPPA = 8.0
DEFAULT_SH_DEGREE = 4
DEFAULT_DIRECTIONS = 256
GAUSSIAN_CHUNK = 2048

FEATURE_CHANNELS = (
    "fov",
    "vis-max-alpha",
    "vis-sum-alpha",
    "vis-mean-alpha",
    "vis-max-noalpha",
    "vis-sum-noalpha",
    "vis-mean-noalpha",
    "err-max-alpha",
    "err-sum-alpha",
    "err-mean-alpha",
    "err-max-noalpha",
    "err-sum-noalpha",
    "err-mean-noalpha",
)
FISHER_CHANNELS = (
    "fisher-mean",
    "fisher-scale",
    "fisher-rotation",
    "fisher-opacity",
    "fisher-sh-dc",
    "fisher-sh-rest",
)
FISHERRF_CHANNEL = "fisherrf"


class RepresentationError(Exception):
    """Raised on inconsistent inputs to representation building or rendering."""


class RepresentationKind(Enum):
    FOV_COUNTER = "fov_counter"
    VISIBILITY = "visibility"
    ERROR = "error"
    FISHER = "fisher"


class Aggregation(Enum):
    MAX = "max"
    SUM = "sum"
    MEAN = "mean"


class DirectionMode(Enum):
    """Which direction stands for a view when weighting by the vMF kernel."""

    GAUSSIAN = "gaussian"  # camera center to Gaussian mean
    FORWARD = "forward"    # camera forward axis


@dataclass(frozen=True, eq=False)
class PrimitiveRepresentation:
    """One uncertainty channel expressed per Gaussian.

    values is (N,) for scalar representations or (N, K) SH coefficients
    when directional.
    """

    name: str
    kind: RepresentationKind
    values: np.ndarray
    agg: Optional[Aggregation] = None
    include_alpha: bool = True
    directional: bool = False
    kappa: Optional[float] = None
    direction_mode: DirectionMode = DirectionMode.GAUSSIAN

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if self.directional:
            if values.ndim != 2 or sh_coefficient_count(int(round(np.sqrt(values.shape[1]))) - 1) != values.shape[1]:
                raise RepresentationError(f"{self.name}: directional values must be (N, (L+1)^2), got {values.shape}")
        elif values.ndim != 1:
            raise RepresentationError(f"{self.name}: scalar values must be (N,), got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise RepresentationError(f"{self.name}: non-finite values")
        if self.kind is RepresentationKind.FOV_COUNTER and np.any(values != np.round(values)):
            raise RepresentationError("FoV counter values must be integers")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def sh_degree(self) -> Optional[int]:
        if not self.directional:
            return None
        return int(round(np.sqrt(self.values.shape[1]))) - 1

    def evaluate(self, camera: Camera, means: np.ndarray) -> np.ndarray:
        """Per-Gaussian scalar seen from a camera; SH reconstructions clamped at 0."""
        if not self.directional:
            return self.values
        if self.direction_mode is DirectionMode.FORWARD:
            dirs = np.broadcast_to(camera.view_direction, (len(self), 3))
        else:
            dirs = camera.directions_to(means)
        return np.maximum(sh_eval_many(self.values, dirs), 0.0)


@dataclass(frozen=True, eq=False)
class FeatureMapSet:
    """Rendered feature maps of one camera with their channel manifest."""

    camera_id: str
    image: ImageBuffer
    channel_names: tuple

    def __post_init__(self):
        names = tuple(self.channel_names)
        object.__setattr__(self, "channel_names", names)
        if self.image.channels != len(names):
            raise RepresentationError(
                f"Feature map {self.camera_id!r} has {self.image.channels} channels for {len(names)} names")
        if len(set(names)) != len(names):
            raise RepresentationError("Feature channel names must be unique")
        if np.any(self.image.data < 0):
            raise RepresentationError(f"Feature map {self.camera_id!r} has negative values")

    @property
    def width(self) -> int:
        return self.image.width

    @property
    def height(self) -> int:
        return self.image.height

    def select(self, names: Sequence[str]) -> "FeatureMapSet":
        """Feature maps restricted to (and reordered as) the given channels."""
        missing = [n for n in names if n not in self.channel_names]
        if missing:
            raise RepresentationError(f"Feature map {self.camera_id!r} lacks channels {missing}")
        idx = [self.channel_names.index(n) for n in names]
        return FeatureMapSet(self.camera_id, ImageBuffer(self.image.data[:, :, idx]), tuple(names))


class PixelError(NamedTuple):
    error: ImageBuffer   # 1 channel, 0 where invalid
    valid: np.ndarray    # (height, width) bool


def channel_name(kind: RepresentationKind, agg: Aggregation, include_alpha: bool) -> str:
    prefix = {RepresentationKind.VISIBILITY: "vis", RepresentationKind.ERROR: "err"}[kind]
    return f"{prefix}-{agg.value}-{'alpha' if include_alpha else 'noalpha'}"


# ---------------------------------------------------------------------------
# Direction-independent representations
# ---------------------------------------------------------------------------

def fov_counter(scene: GaussianScene, cameras: Sequence[Camera], margin: float = DEFAULT_MARGIN) -> PrimitiveRepresentation:
    """Count the cameras whose widened frustum contains each Gaussian mean.

    A mean counts for a camera when it lies in front of the near plane and
    projects into [-margin W, (1+margin) W] x [-margin H, (1+margin) H].
    """
    if margin < 0:
        raise RepresentationError(f"Frustum margin must be non-negative, got {margin}")
    counts = np.zeros(len(scene))
    for cam in cameras:
        t = cam.to_camera(scene.means)
        in_front = t[:, 2] > NEAR_PLANE
        z = np.where(in_front, t[:, 2], 1.0)
        u = cam.fx * t[:, 0] / z + cam.cx
        v = cam.fy * t[:, 1] / z + cam.cy
        inside = (in_front
                  & (u >= -margin * cam.width) & (u <= (1 + margin) * cam.width)
                  & (v >= -margin * cam.height) & (v <= (1 + margin) * cam.height))
        counts += inside
    return PrimitiveRepresentation("fov", RepresentationKind.FOV_COUNTER, counts)


def _aggregate(gaussians: np.ndarray, weights: np.ndarray, n: int, agg: Aggregation) -> np.ndarray:
    """Per-Gaussian aggregate of non-negative entry weights; 0 where absent."""
    if agg is Aggregation.MAX:
        out = np.zeros(n)
        np.maximum.at(out, gaussians, weights)
        return out
    total = np.bincount(gaussians, weights=weights, minlength=n)
    if agg is Aggregation.SUM:
        return total
    count = np.bincount(gaussians, minlength=n)
    return np.divide(total, count, out=np.zeros(n), where=count > 0)


def _check_logs(logs: Sequence[ContributionLog]) -> int:
    if not logs:
        raise RepresentationError("Representations need at least one training view")
    n = logs[0].n_gaussians
    if any(log.n_gaussians != n for log in logs):
        raise RepresentationError("Contribution logs disagree on the Gaussian count")
    return n


def _error_values(log: ContributionLog, error_map: ImageBuffer) -> np.ndarray:
    if error_map.channels != 1 or (error_map.width, error_map.height) != (log.width, log.height):
        raise RepresentationError(
            f"Error map {error_map.width}x{error_map.height}x{error_map.channels} does not match "
            f"log {log.width}x{log.height} of camera {log.camera_id!r}")
    e = error_map.plane(0).reshape(-1)
    if np.any(e < 0):
        raise RepresentationError("Error maps must be non-negative")
    return e[log.pixel]


def per_view_aggregates(logs: Sequence[ContributionLog], agg: Aggregation, include_alpha: bool,
                        error_maps: Optional[Sequence[ImageBuffer]] = None) -> np.ndarray:
    """(views, N) per-view aggregates of w (or e*w when error maps are given)."""
    n = _check_logs(logs)
    if error_maps is not None and len(error_maps) != len(logs):
        raise RepresentationError(f"{len(error_maps)} error maps for {len(logs)} views")
    out = np.zeros((len(logs), n))
    for v, log in enumerate(logs):
        w = log.weights(include_alpha)
        if error_maps is not None:
            w = _error_values(log, error_maps[v]) * w
        out[v] = _aggregate(log.gaussian_index, w, n, agg)
    return out


def _visible_view_count(logs: Sequence[ContributionLog]) -> np.ndarray:
    return np.sum([log.counts() > 0 for log in logs], axis=0)


def visibility_representation(logs: Sequence[ContributionLog], agg: Aggregation,
                              include_alpha: bool = True) -> PrimitiveRepresentation:
    """Maximum over training views of the per-view aggregated contribution."""
    per_view = per_view_aggregates(logs, agg, include_alpha)
    values = per_view.max(axis=0)
    return PrimitiveRepresentation(channel_name(RepresentationKind.VISIBILITY, agg, include_alpha),
                                   RepresentationKind.VISIBILITY, values, agg, include_alpha)


def error_representation(logs: Sequence[ContributionLog], error_maps: Sequence[ImageBuffer], agg: Aggregation,
                         include_alpha: bool = True, error_mean: str = "all") -> PrimitiveRepresentation:
    """Mean over training views of the aggregated error-weighted contribution.

    Args:
        logs: Training-view contribution logs.
        error_maps: One non-negative 1-channel error map per log.
        agg: Per-view pixel aggregation.
        include_alpha: Weight by alpha*T (True) or T alone.
        error_mean: "all" divides by the number of training views, "visible"
            by the number of views in which the Gaussian was logged.
    """
    per_view = per_view_aggregates(logs, agg, include_alpha, error_maps)
    if error_mean == "all":
        values = per_view.mean(axis=0)
    elif error_mean == "visible":
        seen = _visible_view_count(logs)
        values = np.divide(per_view.sum(axis=0), seen, out=np.zeros(per_view.shape[1]), where=seen > 0)
    else:
        raise RepresentationError(f"Unknown error_mean {error_mean!r}")
    return PrimitiveRepresentation(channel_name(RepresentationKind.ERROR, agg, include_alpha),
                                   RepresentationKind.ERROR, values, agg, include_alpha)


# ---------------------------------------------------------------------------
# Direction-dependent representations
# ---------------------------------------------------------------------------

def vmf_weight(nu, d, kappa: float):
    """Rescaled von Mises-Fisher kernel exp(kappa nu.d - kappa), peak 1 at d = nu.

    Works on single vectors or broadcastable (..., 3) arrays.
    """
    if kappa < 0:
        raise RepresentationError(f"kappa must be non-negative, got {kappa}")
    cos = np.minimum(np.sum(np.asarray(nu, dtype=np.float64) * np.asarray(d, dtype=np.float64), axis=-1), 1.0)
    return np.exp(kappa * cos - kappa)


def view_directions(cameras: Sequence[Camera], means: np.ndarray,
                    mode: DirectionMode = DirectionMode.GAUSSIAN) -> np.ndarray:
    """(views, N, 3) unit directions standing for each view at each Gaussian."""
    if mode is DirectionMode.FORWARD:
        return np.stack([np.broadcast_to(cam.view_direction, (means.shape[0], 3)) for cam in cameras])
    return np.stack([cam.directions_to(means) for cam in cameras])


def directional_representation(
    logs: Sequence[ContributionLog],
    cameras: Sequence[Camera],
    means: np.ndarray,
    agg: Aggregation,
    include_alpha: bool = True,
    kappa: float = DEFAULT_KAPPA,
    sample_dirs: Optional[np.ndarray] = None,
    error_maps: Optional[Sequence[ImageBuffer]] = None,
    direction_mode: DirectionMode = DirectionMode.GAUSSIAN,
    error_mean: str = "all",
) -> np.ndarray:
    """Sample the direction-dependent visibility or error function.

    Without error maps this is the max over views of agg(w) * vmf(nu_v, d);
    with error maps it is the mean over views of agg(e w) * vmf(nu_v, d).

    Returns:
        (N, M) samples for the M sample directions.
    """
    if kappa <= 0:
        raise RepresentationError(f"kappa must be positive, got {kappa}")
    if len(cameras) != len(logs):
        raise RepresentationError(f"{len(cameras)} cameras for {len(logs)} logs")
    if sample_dirs is None:
        sample_dirs = fibonacci_sphere(DEFAULT_DIRECTIONS)
    per_view = per_view_aggregates(logs, agg, include_alpha, error_maps)
    n = per_view.shape[1]
    nus = view_directions(cameras, np.asarray(means, dtype=np.float64).reshape(n, 3), direction_mode)
    if error_maps is not None and error_mean == "visible":
        seen = _visible_view_count(logs)
        divisor = np.where(seen > 0, seen, 1).astype(np.float64)
    else:
        divisor = np.full(n, float(len(logs)))

    out = np.zeros((n, sample_dirs.shape[0]))
    for lo in range(0, n, GAUSSIAN_CHUNK):
        hi = min(n, lo + GAUSSIAN_CHUNK)
        acc = np.zeros((hi - lo, sample_dirs.shape[0]))
        for v in range(len(logs)):
            cos = np.minimum(nus[v, lo:hi] @ sample_dirs.T, 1.0)
            weighted = per_view[v, lo:hi, None] * np.exp(kappa * cos - kappa)
            if error_maps is None:
                np.maximum(acc, weighted, out=acc)
            else:
                acc += weighted
        if error_maps is not None:
            acc /= divisor[lo:hi, None]
        out[lo:hi] = acc
    return out


def encode_directional(
    logs: Sequence[ContributionLog],
    cameras: Sequence[Camera],
    means: np.ndarray,
    agg: Aggregation,
    include_alpha: bool = True,
    kappa: float = DEFAULT_KAPPA,
    sh_degree: int = DEFAULT_SH_DEGREE,
    n_directions: int = DEFAULT_DIRECTIONS,
    error_maps: Optional[Sequence[ImageBuffer]] = None,
    direction_mode: DirectionMode = DirectionMode.GAUSSIAN,
    error_mean: str = "all",
) -> PrimitiveRepresentation:
    """Directional representation sampled on a Fibonacci sphere and fitted with SH."""
    dirs = fibonacci_sphere(n_directions)
    samples = directional_representation(logs, cameras, means, agg, include_alpha, kappa, dirs,
                                         error_maps, direction_mode, error_mean)
    coeffs = sh_fit(samples, dirs, sh_degree) if samples.shape[0] else np.zeros((0, sh_coefficient_count(sh_degree)))
    kind = RepresentationKind.ERROR if error_maps is not None else RepresentationKind.VISIBILITY
    return PrimitiveRepresentation(channel_name(kind, agg, include_alpha), kind, coeffs, agg, include_alpha,
                                   directional=True, kappa=kappa, direction_mode=direction_mode)


def build_representations(
    scene: GaussianScene,
    cameras: Sequence[Camera],
    logs: Sequence[ContributionLog],
    error_maps: Sequence[ImageBuffer],
    *,
    margin: float = DEFAULT_MARGIN,
    directional: bool = False,
    kappa: float = DEFAULT_KAPPA,
    sh_degree: int = DEFAULT_SH_DEGREE,
    n_directions: int = DEFAULT_DIRECTIONS,
    direction_mode: DirectionMode = DirectionMode.GAUSSIAN,
    error_mean: str = "all",
    names: Sequence[str] = FEATURE_CHANNELS,
) -> list[PrimitiveRepresentation]:
    """Build representations in manifest order from training-view logs.

    The FoV counter is always direction-independent.
    """
    if len(logs) != len(cameras) or len(error_maps) != len(cameras):
        raise RepresentationError(
            f"{len(cameras)} cameras, {len(logs)} logs and {len(error_maps)} error maps must agree")
    unknown = [n for n in names if n not in FEATURE_CHANNELS]
    if unknown:
        raise RepresentationError(f"Unknown representation channels {unknown}")

    reps = []
    for name in names:
        if name == "fov":
            reps.append(fov_counter(scene, cameras, margin))
            continue
        prefix, agg_name, alpha_flag = name.split("-")
        agg = Aggregation(agg_name)
        include_alpha = alpha_flag == "alpha"
        maps = error_maps if prefix == "err" else None
        if directional:
            reps.append(encode_directional(logs, cameras, scene.means, agg, include_alpha, kappa, sh_degree,
                                           n_directions, maps, direction_mode, error_mean))
        elif maps is None:
            reps.append(visibility_representation(logs, agg, include_alpha))
        else:
            reps.append(error_representation(logs, maps, agg, include_alpha, error_mean))
        logger.debug("Built representation %s", name)
    logger.info("Built %d representations for %d Gaussians over %d views%s",
                len(reps), len(scene), len(cameras), " (directional)" if directional else "")
    return reps


# ---------------------------------------------------------------------------
# Feature maps and targets
# ---------------------------------------------------------------------------

def render_feature_maps(
    scene: GaussianScene,
    representations: Sequence[PrimitiveRepresentation],
    camera: Camera,
    *,
    channel_names: Sequence[str] = FEATURE_CHANNELS,
    threads: int = 1,
) -> FeatureMapSet:
    """Render representations in place of color into one multi-channel image.

    Raises:
        RepresentationError: If the representation count does not match the
            channel manifest or a representation has the wrong length.
    """
    if len(representations) != len(channel_names):
        raise RepresentationError(
            f"Expected {len(channel_names)} representations for the channel manifest, got {len(representations)}")
    n = len(scene)
    columns = []
    for rep in representations:
        if len(rep) != n:
            raise RepresentationError(f"Representation {rep.name!r} has {len(rep)} values for {n} Gaussians")
        columns.append(rep.evaluate(camera, scene.means))
    values = np.stack(columns, axis=1) if columns else np.zeros((n, 0))
    result = render_view(scene, camera, RenderSource.VALUES, values, threads=threads)
    data = np.maximum(result.image.data, 0.0)
    return FeatureMapSet(camera.camera_id, ImageBuffer(data), tuple(channel_names))


def pixel_error_map(gt: ImageBuffer, rendered: ImageBuffer) -> PixelError:
    """L1 error per pixel: channel mean for color, absolute difference for depth.

    For 1-channel (depth) inputs, pixels whose ground truth is not positive
    are invalid and get error 0.
    """
    if (gt.width, gt.height, gt.channels) != (rendered.width, rendered.height, rendered.channels):
        raise RepresentationError(
            f"Ground truth {gt.width}x{gt.height}x{gt.channels} does not match "
            f"render {rendered.width}x{rendered.height}x{rendered.channels}")
    if gt.channels not in (1, 3):
        raise RepresentationError(f"Error maps need 1 or 3 channels, got {gt.channels}")
    diff = np.abs(gt.data - rendered.data).mean(axis=2)
    if gt.channels == 1:
        valid = gt.plane(0) > 0
        diff = np.where(valid, diff, 0.0)
    else:
        valid = np.ones(diff.shape, dtype=bool)
    return PixelError(ImageBuffer(diff), valid)
