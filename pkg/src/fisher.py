"""Diagonal Fisher information of the rendering map (FisherRF baseline).

For every Gaussian parameter theta the diagonal entry is

    F(theta) = sum over views, pixels and color channels of (dC/dtheta)^2

Color (SH) and opacity derivatives are analytic; mean, scale and rotation
derivatives come from central finite differences of the rasterizer.
Per-Gaussian uncertainties are sums of reciprocal regularized entries,
either over the color coefficients (plain FisherRF) or over each of six
parameter groups.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from src.renderer import (
    ALPHA_CLAMP,
    COLOR_OFFSET,
    ContributionLog,
    RenderSource,
    project_gaussian,
    render_view,
)
from src.representations import (
    FISHER_CHANNELS,
    FISHERRF_CHANNEL,
    PrimitiveRepresentation,
    RepresentationKind,
)
from src.scene import Camera, GaussianScene, ImageBuffer, sh_coefficient_count
from src.sh import sh_basis

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-6
DEFAULT_FD_STEP = 1e-4
DEFAULT_FD_FLOOR = 1e-6

GROUPS = ("mean", "scale", "rotation", "opacity", "sh_dc", "sh_rest")
GEOMETRIC_GROUPS = {"mean": "means", "scale": "scales", "rotation": "rotations"}


class FisherError(Exception):
    """Raised on invalid Fisher inputs."""


@dataclass(frozen=True, eq=False)
class FisherDiagonal:
    """Per-Gaussian, per-parameter Fisher accumulators.

    sh_rest is laid out channel-major: 3 blocks of K-1 coefficients.
    """

    mean: np.ndarray       # (N, 3)
    scale: np.ndarray      # (N, 3)
    rotation: np.ndarray   # (N, 4)
    opacity: np.ndarray    # (N, 1)
    sh_dc: np.ndarray      # (N, 3)
    sh_rest: np.ndarray    # (N, 3 * (K - 1))

    def __post_init__(self):
        n = np.shape(self.mean)[0]
        widths = {"mean": 3, "scale": 3, "rotation": 4, "opacity": 1, "sh_dc": 3}
        for name in GROUPS:
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] != n:
                raise FisherError(f"Fisher group {name} has shape {arr.shape}, expected ({n}, ...)")
            if name in widths and arr.shape[1] != widths[name]:
                raise FisherError(f"Fisher group {name} needs {widths[name]} columns, got {arr.shape[1]}")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise FisherError(f"Fisher group {name} has negative or non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.sh_rest.shape[1] % 3:
            raise FisherError("sh_rest width must be a multiple of 3")

    @classmethod
    def zeros(cls, n_gaussians: int, sh_degree: int) -> "FisherDiagonal":
        rest = 3 * (sh_coefficient_count(sh_degree) - 1)
        return cls(np.zeros((n_gaussians, 3)), np.zeros((n_gaussians, 3)), np.zeros((n_gaussians, 4)),
                   np.zeros((n_gaussians, 1)), np.zeros((n_gaussians, 3)), np.zeros((n_gaussians, rest)))

    def __add__(self, other: "FisherDiagonal") -> "FisherDiagonal":
        if not isinstance(other, FisherDiagonal):
            return NotImplemented
        if self.sh_rest.shape != other.sh_rest.shape:
            raise FisherError("Cannot add Fisher diagonals of different shapes")
        return FisherDiagonal(*(getattr(self, g) + getattr(other, g) for g in GROUPS))

    @property
    def n_gaussians(self) -> int:
        return self.mean.shape[0]

    def group(self, name: str) -> np.ndarray:
        if name not in GROUPS:
            raise FisherError(f"Unknown Fisher group {name!r}")
        return getattr(self, name)


class GroupedUncertainty(NamedTuple):
    groups: list        # six PrimitiveRepresentation, FISHER_CHANNELS order
    plain: PrimitiveRepresentation


# ---------------------------------------------------------------------------
# Analytic gradients
# ---------------------------------------------------------------------------

def color_param_gradient(alpha: float, transmittance: float, basis) -> np.ndarray:
    """dC/dc_lm = alpha * T * Y_lm(dir) for one logged contribution."""
    return alpha * transmittance * np.asarray(basis, dtype=np.float64)


def opacity_gradient(contributions: Sequence, values, k: int, phi: float, clamped: bool = False):
    """dC/dg_k at one pixel.

    Args:
        contributions: (alpha, T) pairs of every splat blended at the pixel,
            in compositing order. Pass the full sequence; entries left out
            drop out of the later-splat sum.
        values: Per-entry channel value, scalar or vector, aligned with
            contributions.
        k: Position of the target splat in contributions.
        phi: Gaussian falloff of the target splat at the pixel, so that
            alpha_k = g_k * phi.
        clamped: True when alpha_k sits at the clamp, making the derivative 0.

    Returns:
        phi * (T_k v_k - sum_{j>k} v_j alpha_j T_j / (1 - alpha_k)).
    """
    vals = np.asarray(values, dtype=np.float64)
    if clamped:
        return np.zeros(vals.shape[1:]) if vals.ndim > 1 else 0.0
    alpha_k, t_k = contributions[k]
    later = np.zeros(vals.shape[1:])
    for j in range(k + 1, len(contributions)):
        alpha_j, t_j = contributions[j]
        later = later + vals[j] * alpha_j * t_j
    grad = phi * (t_k * vals[k] - later / (1.0 - alpha_k))
    return float(grad) if vals.ndim == 1 else grad


def opacity_gradients(log: ContributionLog, gaussian_values: np.ndarray, opacities: np.ndarray) -> np.ndarray:
    """Analytic dC/dg for every log entry.

    The later-splat sum runs over the logged entries of each pixel only.
    Splats past the transmittance cutoff are not logged and not blended
    either, so this is the derivative of the image the renderer produces.

    Args:
        log: Contribution log of one view.
        gaussian_values: (N, C) blended values per Gaussian.
        opacities: (N,) Gaussian opacities.

    Returns:
        (E, C) gradients aligned with the log entries.
    """
    vals = np.asarray(gaussian_values, dtype=np.float64)
    n_entries = len(log)
    out = np.zeros((n_entries, vals.shape[1]))
    if n_entries == 0:
        return out

    idx = np.lexsort((log.order, log.pixel))
    g = log.gaussian_index[idx]
    a = log.alpha[idx]
    t = log.transmittance[idx]
    p = log.pixel[idx]
    v = vals[g]
    contrib = (a * t)[:, None] * v

    starts = np.flatnonzero(np.r_[True, p[1:] != p[:-1]])
    group_id = np.cumsum(np.r_[True, p[1:] != p[:-1]]) - 1
    running = np.cumsum(contrib, axis=0)
    before_group = running[starts] - contrib[starts]
    inclusive = running - before_group[group_id]
    totals = np.add.reduceat(contrib, starts, axis=0)
    later = totals[group_id] - inclusive

    phi = a / opacities[g]
    grad = phi[:, None] * (t[:, None] * v - later / (1.0 - a)[:, None])
    grad[a >= ALPHA_CLAMP] = 0.0
    out[idx] = grad
    return out


# ---------------------------------------------------------------------------
# Finite-difference geometric gradients
# ---------------------------------------------------------------------------

def _perturbed(scene: GaussianScene, index: int, group: str, component: int, delta: float) -> GaussianScene:
    attr = GEOMETRIC_GROUPS[group]
    arr = np.array(getattr(scene, attr))
    arr[index, component] += delta
    if group == "rotation":
        arr[index] /= np.linalg.norm(arr[index])
    return scene.replace(**{attr: arr})


def _compositing_rows(log: ContributionLog) -> np.ndarray:
    """(pixel, gaussian, position within the pixel) per log entry."""
    if len(log) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    idx = np.lexsort((log.order, log.pixel))
    p = log.pixel[idx]
    new_pixel = np.r_[True, p[1:] != p[:-1]]
    starts = np.flatnonzero(new_pixel)
    rank = np.arange(p.size) - starts[np.cumsum(new_pixel) - 1]
    return np.stack([p, log.gaussian_index[idx], rank], axis=1)


def _unstable_pixels(a: ContributionLog, b: ContributionLog) -> np.ndarray:
    """Pixels whose blended splats or their order differ between two logs."""
    rows = np.concatenate([_compositing_rows(a), _compositing_rows(b)])
    if rows.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    unique, counts = np.unique(rows, axis=0, return_counts=True)
    return np.unique(unique[counts == 1, 0])


def _union_box(boxes):
    boxes = [b for b in boxes if b is not None]
    if not boxes:
        return None
    return (min(b[0] for b in boxes), min(b[1] for b in boxes),
            max(b[2] for b in boxes), max(b[3] for b in boxes))


def geometric_gradient_fd(
    scene: GaussianScene,
    camera: Camera,
    index: int,
    group: str,
    component: int,
    step: float = DEFAULT_FD_STEP,
    floor: float = DEFAULT_FD_FLOOR,
    *,
    source: RenderSource = RenderSource.COLOR,
) -> ImageBuffer:
    """Central finite difference of a render with respect to one parameter.

    Args:
        scene: Scene to differentiate.
        camera: View to render.
        index: Gaussian index.
        group: "mean", "scale" or "rotation".
        component: Component within the group.
        step: Relative step; the absolute step is max(step * |theta|, floor).
        floor: Smallest absolute step.
        source: Render source to differentiate.

    Returns:
        Full-size gradient image, zero where the Gaussian has no influence
        and where the two perturbed renders blend a different set or order
        of splats (a pixel crossing the alpha or transmittance cutoff).
    """
    if group not in GEOMETRIC_GROUPS:
        raise FisherError(f"Finite differences cover {tuple(GEOMETRIC_GROUPS)}, not {group!r}")
    theta = float(getattr(scene, GEOMETRIC_GROUPS[group])[index, component])
    h = max(step * abs(theta), floor)
    plus = _perturbed(scene, index, group, component, h)
    minus = _perturbed(scene, index, group, component, -h)

    boxes = []
    for s in (scene, plus, minus):
        splat = project_gaussian(s.primitive(index), camera, index)
        boxes.append(None if splat is None else splat.bbox)
    window = _union_box(boxes)
    channels = 3 if source is RenderSource.COLOR else 1
    if window is None:
        return ImageBuffer.zeros(camera.width, camera.height, channels)

    hi = render_view(plus, camera, source, with_log=True, window=window)
    lo = render_view(minus, camera, source, with_log=True, window=window)
    grad = (hi.image.data - lo.image.data) / (2.0 * h)
    rows, cols = np.divmod(_unstable_pixels(hi.log, lo.log), camera.width)
    grad[rows, cols] = 0.0
    return ImageBuffer(grad)


# ---------------------------------------------------------------------------
# Fisher accumulation
# ---------------------------------------------------------------------------

def view_fisher(
    scene: GaussianScene,
    camera: Camera,
    log: Optional[ContributionLog] = None,
    *,
    geometric: bool = True,
    step: float = DEFAULT_FD_STEP,
    floor: float = DEFAULT_FD_FLOOR,
    threads: int = 1,
) -> FisherDiagonal:
    """Fisher diagonal contributed by a single view."""
    n = len(scene)
    if log is None:
        log = render_view(scene, camera, RenderSource.COLOR, with_log=True, threads=threads).log
    if log.n_gaussians != n:
        raise FisherError(f"Log covers {log.n_gaussians} Gaussians, scene has {n}")
    fisher = FisherDiagonal.zeros(n, scene.sh_degree)
    if n == 0 or len(log) == 0:
        return fisher

    dirs = camera.directions_to(scene.means)
    basis = sh_basis(dirs, scene.sh_degree)
    raw = np.einsum("nck,nk->nc", scene.sh_coeffs, basis) + COLOR_OFFSET
    unclamped = raw > 0
    colors = np.maximum(raw, 0.0)

    w = log.alpha * log.transmittance
    weight_sq = np.bincount(log.gaussian_index, weights=w * w, minlength=n)
    sh_sq = weight_sq[:, None, None] * (basis * basis)[:, None, :] * unclamped[:, :, None]

    grads = opacity_gradients(log, colors, scene.opacities)
    opacity = np.bincount(log.gaussian_index, weights=np.sum(grads * grads, axis=1), minlength=n)

    mean = np.zeros((n, 3))
    scale = np.zeros((n, 3))
    rotation = np.zeros((n, 4))
    if geometric:
        visible = np.flatnonzero(log.counts() > 0)

        def work(k):
            rows = []
            for group, width in (("mean", 3), ("scale", 3), ("rotation", 4)):
                row = np.zeros(width)
                for c in range(width):
                    grad = geometric_gradient_fd(scene, camera, int(k), group, c, step, floor).data
                    row[c] = np.sum(grad * grad)
                rows.append(row)
            return rows

        if threads > 1 and visible.size > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(work, visible))
        else:
            results = [work(k) for k in visible]
        for k, (m, s, r) in zip(visible, results):
            mean[k], scale[k], rotation[k] = m, s, r

    return FisherDiagonal(
        mean=mean,
        scale=scale,
        rotation=rotation,
        opacity=opacity[:, None],
        sh_dc=sh_sq[:, :, 0],
        sh_rest=sh_sq[:, :, 1:].reshape(n, -1),
    )


def fisher_diagonal(
    scene: GaussianScene,
    cameras: Sequence[Camera],
    logs: Optional[Sequence[ContributionLog]] = None,
    *,
    geometric: bool = True,
    step: float = DEFAULT_FD_STEP,
    floor: float = DEFAULT_FD_FLOOR,
    threads: int = 1,
) -> FisherDiagonal:
    """Fisher diagonal accumulated over training views, in view order."""
    if logs is not None and len(logs) != len(cameras):
        raise FisherError(f"{len(logs)} logs for {len(cameras)} cameras")
    total = FisherDiagonal.zeros(len(scene), scene.sh_degree)
    for i, camera in enumerate(cameras):
        log = None if logs is None else logs[i]
        total = total + view_fisher(scene, camera, log, geometric=geometric, step=step, floor=floor,
                                    threads=threads)
        logger.debug("Fisher accumulated for camera %s", camera.camera_id)
    logger.info("Fisher diagonal over %d views (geometric=%s)", len(cameras), geometric)
    return total


def grouped_uncertainty(fisher: FisherDiagonal, eps: float = DEFAULT_EPS) -> GroupedUncertainty:
    """Per-Gaussian uncertainties as sums of 1 / (F + eps).

    Returns six group representations plus the plain FisherRF value, which
    sums over the sh_dc and sh_rest groups.

    Raises:
        FisherError: If eps is negative, or zero while some entry is zero.
    """
    if eps < 0:
        raise FisherError(f"eps must be non-negative, got {eps}")
    sums = {}
    for name in GROUPS:
        entries = fisher.group(name) + eps
        if np.any(entries == 0):
            raise FisherError(f"Zero Fisher entry in group {name} with eps=0")
        sums[name] = np.sum(1.0 / entries, axis=1)
    groups = [PrimitiveRepresentation(channel, RepresentationKind.FISHER, sums[name])
              for name, channel in zip(GROUPS, FISHER_CHANNELS)]
    plain = PrimitiveRepresentation(FISHERRF_CHANNEL, RepresentationKind.FISHER, sums["sh_dc"] + sums["sh_rest"])
    return GroupedUncertainty(groups, plain)
