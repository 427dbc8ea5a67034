"""CPU rasterizer for Gaussian scenes.

Projection (EWA splatting):
    t = R mu + trans (camera space); culled when t_z <= NEAR_PLANE.
    mean2d = (fx t_x / t_z + cx, fy t_y / t_z + cy)
    cov2d = J W Sigma W^T J^T + DILATION * I
    The footprint is the 3-sigma box around mean2d, clamped to the image.

Compositing, per pixel, front to back over depth-sorted splats:
    alpha_k = min(ALPHA_CLAMP, g_k exp(-0.5 d^T cov2d^-1 d))
    T_k = prod_{j<k} (1 - alpha_j)
    value = sum_k v_k alpha_k T_k
    Splats with alpha < MIN_ALPHA are skipped and do not attenuate T.
    An entry contributes (and is logged) iff T_k >= MIN_TRANSMITTANCE.

Splats are sorted once per view by (depth, gaussian index). Images are
rendered in square tiles that may run on a thread pool; per-tile logs are
merged into a single log sorted by (gaussian index, pixel).
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Optional, Sequence

import numpy as np

from src.scene import Camera, GaussianPrimitive, GaussianScene, ImageBuffer, covariances_3d
from src.sh import sh_eval, sh_eval_many

logger = logging.getLogger(__name__)

NEAR_PLANE = 0.01
DILATION = 0.3
ALPHA_CLAMP = 0.99
MIN_ALPHA = 1.0 / 255.0
MIN_TRANSMITTANCE = 1e-3
ORACLE_STOP_TRANSMITTANCE = 1e-12
SIGMA_EXTENT = 3.0
TILE_SIZE = 16
COLOR_OFFSET = 0.5


class RenderError(Exception):
    """Raised when a render request is invalid."""


class RenderSource(Enum):
    """What gets blended per Gaussian."""

    COLOR = "color"      # SH color at the camera-to-mean direction, +0.5, clamped at 0
    VALUES = "values"    # caller-supplied per-Gaussian values, (N,) or (N, C)
    DEPTH = "depth"      # camera-space z


@dataclass(frozen=True, eq=False)
class Splat2D:
    """A projected Gaussian footprint.

    bbox is (x_min, y_min, x_max, y_max), inclusive pixel bounds.
    conic is the upper triangle (a, b, c) of the inverse 2D covariance.
    """

    gaussian_index: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    bbox: tuple
    opacity: float
    conic: tuple

    def contains(self, x: int, y: int) -> bool:
        x_min, y_min, x_max, y_max = self.bbox
        return x_min <= x <= x_max and y_min <= y <= y_max

    def alpha_at(self, x: float, y: float) -> float:
        """Clamped opacity of this splat at pixel center (x, y)."""
        dx = x - float(self.mean2d[0])
        dy = y - float(self.mean2d[1])
        a, b, c = self.conic
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        return min(ALPHA_CLAMP, self.opacity * math.exp(power))


@dataclass(frozen=True, eq=False)
class ProjectedSplats:
    """All visible splats of one view, sorted by (depth, gaussian index)."""

    index: np.ndarray      # (M,) gaussian indices
    mean2d: np.ndarray     # (M, 2)
    cov2d: np.ndarray      # (M, 2, 2)
    conic: np.ndarray      # (M, 3)
    depth: np.ndarray      # (M,)
    opacity: np.ndarray    # (M,)
    bbox: np.ndarray       # (M, 4) int

    def __len__(self) -> int:
        return self.index.shape[0]

    def splat(self, position: int) -> Splat2D:
        return Splat2D(
            gaussian_index=int(self.index[position]),
            mean2d=self.mean2d[position],
            cov2d=self.cov2d[position],
            depth=float(self.depth[position]),
            bbox=tuple(int(v) for v in self.bbox[position]),
            opacity=float(self.opacity[position]),
            conic=tuple(float(v) for v in self.conic[position]),
        )


@dataclass(frozen=True, eq=False)
class ContributionLog:
    """Every (gaussian, pixel, alpha, transmittance) entry that passed the
    compositing thresholds in one view.

    Entries are sorted by gaussian index, then by row-major pixel index.
    order holds the splat's position in the view's depth sort, so entries
    of one pixel can be put back into compositing order.
    """

    gaussian_index: np.ndarray
    pixel: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    order: np.ndarray
    n_gaussians: int
    width: int
    height: int
    camera_id: str = ""

    def __post_init__(self):
        n = self.gaussian_index.shape[0]
        for name in ("pixel", "alpha", "transmittance", "order"):
            if getattr(self, name).shape != (n,):
                raise RenderError(f"ContributionLog.{name} has shape {getattr(self, name).shape}, expected ({n},)")
        if n:
            if self.gaussian_index.min() < 0 or self.gaussian_index.max() >= self.n_gaussians:
                raise RenderError("ContributionLog gaussian index out of range")
            if self.pixel.min() < 0 or self.pixel.max() >= self.width * self.height:
                raise RenderError("ContributionLog pixel out of image bounds")
            if np.any(self.alpha <= 0) or np.any(self.alpha > 1) or np.any(self.transmittance <= 0):
                raise RenderError("ContributionLog alpha/transmittance out of range")

    def __len__(self) -> int:
        return self.gaussian_index.shape[0]

    @classmethod
    def empty(cls, n_gaussians: int, width: int, height: int, camera_id: str = "") -> "ContributionLog":
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return cls(zi, zi.copy(), z, z.copy(), zi.copy(), n_gaussians, width, height, camera_id)

    def weights(self, include_alpha: bool = True) -> np.ndarray:
        """alpha*T per entry, or T alone when alpha is dropped."""
        if include_alpha:
            return self.alpha * self.transmittance
        return self.transmittance.copy()

    def entries_for(self, gaussian: int) -> slice:
        """Slice of the entries belonging to one gaussian."""
        lo = int(np.searchsorted(self.gaussian_index, gaussian, side="left"))
        hi = int(np.searchsorted(self.gaussian_index, gaussian, side="right"))
        return slice(lo, hi)

    def counts(self) -> np.ndarray:
        """Number of logged pixels per gaussian."""
        return np.bincount(self.gaussian_index, minlength=self.n_gaussians)


class RenderResult(NamedTuple):
    image: ImageBuffer
    log: Optional[ContributionLog]
    accumulated: np.ndarray  # (height, width) sum of alpha*T


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

def _project_arrays(means: np.ndarray, covs: np.ndarray, camera: Camera,
                    near: float = NEAR_PLANE, dilation: float = DILATION):
    """Vectorized EWA projection. Returns a visibility mask plus per-Gaussian
    mean2d, cov2d, conic, depth and bbox (meaningful where visible)."""
    t = camera.to_camera(means)
    tz = t[:, 2]
    visible = tz > near
    tz_safe = np.where(visible, tz, 1.0)
    inv_z = 1.0 / tz_safe

    mean2d = np.stack([camera.fx * t[:, 0] * inv_z + camera.cx,
                       camera.fy * t[:, 1] * inv_z + camera.cy], axis=1)

    n = means.shape[0]
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = camera.fx * inv_z
    jac[:, 0, 2] = -camera.fx * t[:, 0] * inv_z * inv_z
    jac[:, 1, 1] = camera.fy * inv_z
    jac[:, 1, 2] = -camera.fy * t[:, 1] * inv_z * inv_z

    cov_cam = np.einsum("ij,njk,lk->nil", camera.rotation, covs, camera.rotation)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    finite = np.isfinite(det) & np.all(np.isfinite(mean2d), axis=1)
    visible &= finite & (det > 0)
    det_safe = np.where(visible, det, 1.0)
    conic = np.stack([c / det_safe, -b / det_safe, a / det_safe], axis=1)

    ext_x = SIGMA_EXTENT * np.sqrt(np.where(visible, a, 0.0))
    ext_y = SIGMA_EXTENT * np.sqrt(np.where(visible, c, 0.0))
    w_max, h_max = camera.width - 1, camera.height - 1
    mx = np.where(visible, mean2d[:, 0], 0.0)
    my = np.where(visible, mean2d[:, 1], 0.0)
    x_min = np.clip(np.ceil(mx - ext_x), 0, w_max + 1)
    x_max = np.clip(np.floor(mx + ext_x), -1, w_max)
    y_min = np.clip(np.ceil(my - ext_y), 0, h_max + 1)
    y_max = np.clip(np.floor(my + ext_y), -1, h_max)
    bbox = np.stack([x_min, y_min, x_max, y_max], axis=1).astype(np.int64)
    visible &= (bbox[:, 0] <= bbox[:, 2]) & (bbox[:, 1] <= bbox[:, 3])
    return visible, mean2d, cov2d, conic, tz, bbox


def project_gaussian(primitive: GaussianPrimitive, camera: Camera, index: int = 0) -> Optional[Splat2D]:
    """Project one Gaussian; None when culled (behind the near plane or off-image)."""
    covs = primitive.covariance()[None]
    visible, mean2d, cov2d, conic, depth, bbox = _project_arrays(
        np.asarray(primitive.mean, dtype=np.float64)[None], covs, camera)
    if not visible[0]:
        return None
    return Splat2D(
        gaussian_index=index,
        mean2d=mean2d[0],
        cov2d=cov2d[0],
        depth=float(depth[0]),
        bbox=tuple(int(v) for v in bbox[0]),
        opacity=float(primitive.opacity),
        conic=tuple(float(v) for v in conic[0]),
    )


def project_gaussians(scene: GaussianScene, camera: Camera) -> ProjectedSplats:
    """Project a whole scene and sort the surviving splats by (depth, index)."""
    if len(scene) == 0:
        return ProjectedSplats(np.zeros(0, dtype=np.int64), np.zeros((0, 2)), np.zeros((0, 2, 2)),
                               np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 4), dtype=np.int64))
    visible, mean2d, cov2d, conic, depth, bbox = _project_arrays(scene.means, scene.covariances(), camera)
    idx = np.nonzero(visible)[0]
    order = idx[np.lexsort((idx, depth[idx]))]
    return ProjectedSplats(
        index=order,
        mean2d=mean2d[order],
        cov2d=cov2d[order],
        conic=conic[order],
        depth=depth[order],
        opacity=scene.opacities[order],
        bbox=bbox[order],
    )


# ---------------------------------------------------------------------------
# Compositing
# ---------------------------------------------------------------------------

def composite_pixel(
    splats: Sequence[Splat2D],
    pixel,
    channel_values,
    *,
    min_alpha: float = MIN_ALPHA,
    min_transmittance: float = MIN_TRANSMITTANCE,
    stop_transmittance: Optional[float] = None,
):
    """Blend depth-sorted splats at one pixel.

    Args:
        splats: Splats sorted ascending by depth.
        pixel: (x, y) pixel center.
        channel_values: One scalar or vector per splat, aligned with splats.
        min_alpha: Splats below this opacity are skipped.
        min_transmittance: Entries with T below this neither contribute nor log.
        stop_transmittance: Traversal ends once T drops below this; defaults
            to min_transmittance.

    Returns:
        (value, contributions) where contributions is a list of
        (gaussian_index, alpha, T) tuples in compositing order.
    """
    stop = min_transmittance if stop_transmittance is None else stop_transmittance
    values = np.asarray(channel_values, dtype=np.float64)
    x, y = pixel
    transmittance = 1.0
    contributions = []
    positions = []
    for position, splat in enumerate(splats):
        if transmittance < stop:
            break
        if not splat.contains(x, y):
            continue
        alpha = splat.alpha_at(x, y)
        if alpha < min_alpha:
            continue
        if transmittance >= min_transmittance:
            contributions.append((splat.gaussian_index, alpha, transmittance))
            positions.append(position)
        transmittance *= 1.0 - alpha

    if not positions:
        value = np.zeros(values.shape[1:]) if values.ndim > 1 else 0.0
        return value, contributions
    w = np.array([alpha * t for _, alpha, t in contributions])
    value = w @ values[positions]
    if values.ndim == 1:
        value = float(value)
    return value, contributions


def gaussian_channel_values(scene: GaussianScene, camera: Camera, source: RenderSource,
                            values: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-Gaussian (N, C) values blended for a source."""
    n = len(scene)
    if source is RenderSource.COLOR:
        dirs = camera.directions_to(scene.means)
        return np.maximum(sh_eval_many(scene.sh_coeffs, dirs) + COLOR_OFFSET, 0.0)
    if source is RenderSource.DEPTH:
        return camera.to_camera(scene.means)[:, 2:3]
    if source is RenderSource.VALUES:
        if values is None:
            raise RenderError("RenderSource.VALUES needs per-Gaussian values")
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        if vals.ndim != 2 or vals.shape[0] != n:
            raise RenderError(f"Expected ({n},) or ({n}, C) values, got {np.shape(values)}")
        if not np.all(np.isfinite(vals)):
            raise RenderError("Per-Gaussian values must be finite")
        return vals
    raise RenderError(f"Unknown render source {source!r}")


def _render_tile(splats: ProjectedSplats, vals: np.ndarray, rect, width: int,
                 min_alpha: float, min_transmittance: float, with_log: bool):
    x0, y0, x1, y1 = rect
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    px = np.tile(xs, ys.size).astype(np.float64)
    py = np.repeat(ys, xs.size).astype(np.float64)

    bb = splats.bbox
    hit = np.nonzero((bb[:, 0] <= x1) & (bb[:, 2] >= x0) & (bb[:, 1] <= y1) & (bb[:, 3] >= y0))[0]
    n_px = px.size
    if hit.size == 0:
        return np.zeros((n_px, vals.shape[1])), np.zeros(n_px), None

    b = bb[hit]
    inside = ((px[None, :] >= b[:, 0:1]) & (px[None, :] <= b[:, 2:3])
              & (py[None, :] >= b[:, 1:2]) & (py[None, :] <= b[:, 3:4]))
    dx = px[None, :] - splats.mean2d[hit, 0:1]
    dy = py[None, :] - splats.mean2d[hit, 1:2]
    con = splats.conic[hit]
    power = -0.5 * (con[:, 0:1] * dx * dx + con[:, 2:3] * dy * dy) - con[:, 1:2] * dx * dy
    alpha = np.minimum(ALPHA_CLAMP, splats.opacity[hit, None] * np.exp(power))
    alpha = np.where(inside & (alpha >= min_alpha), alpha, 0.0)

    trans = np.ones_like(alpha)
    if alpha.shape[0] > 1:
        trans[1:] = np.cumprod(1.0 - alpha[:-1], axis=0)
    contributes = (alpha > 0) & (trans >= min_transmittance)
    weight = np.where(contributes, alpha * trans, 0.0)

    image = weight.T @ vals[splats.index[hit]]
    accumulated = weight.sum(axis=0)

    entries = None
    if with_log:
        k, p = np.nonzero(contributes)
        pixel = py[p].astype(np.int64) * width + px[p].astype(np.int64)
        entries = (splats.index[hit[k]], pixel, alpha[k, p], trans[k, p], hit[k].astype(np.int64))
    return image, accumulated, entries


def _tiles(window, tile_size: int):
    x0, y0, x1, y1 = window
    for ty in range(y0, y1 + 1, tile_size):
        for tx in range(x0, x1 + 1, tile_size):
            yield tx, ty, min(tx + tile_size - 1, x1), min(ty + tile_size - 1, y1)


def render_view(
    scene: GaussianScene,
    camera: Camera,
    source: RenderSource = RenderSource.COLOR,
    values: Optional[np.ndarray] = None,
    *,
    with_log: bool = False,
    normalized_depth: bool = False,
    threads: int = 1,
    tile_size: int = TILE_SIZE,
    window: Optional[tuple] = None,
    min_alpha: float = MIN_ALPHA,
    min_transmittance: float = MIN_TRANSMITTANCE,
) -> RenderResult:
    """Render one view of a scene.

    Args:
        scene: Scene to render.
        camera: Target camera.
        source: What to blend per Gaussian.
        values: Per-Gaussian values for RenderSource.VALUES.
        with_log: Also return the contribution log.
        normalized_depth: For DEPTH, divide by the accumulated weight.
        threads: Worker threads for tiles. Output does not depend on it.
        tile_size: Tile edge length in pixels.
        window: Optional inclusive (x_min, y_min, x_max, y_max) pixel
            rectangle; pixels outside it are left at zero.

    Returns:
        RenderResult with a (height, width, C) image.
    """
    if tile_size < 1 or threads < 1:
        raise RenderError("tile_size and threads must be at least 1")
    vals = gaussian_channel_values(scene, camera, source, values)
    channels = vals.shape[1]
    width, height = camera.width, camera.height
    image = np.zeros((height, width, channels))
    accumulated = np.zeros((height, width))

    if window is None:
        window = (0, 0, width - 1, height - 1)
    window = (max(0, int(window[0])), max(0, int(window[1])),
              min(width - 1, int(window[2])), min(height - 1, int(window[3])))

    splats = project_gaussians(scene, camera)
    if len(splats) == 0 or window[0] > window[2] or window[1] > window[3]:
        log = ContributionLog.empty(len(scene), width, height, camera.camera_id) if with_log else None
        return RenderResult(ImageBuffer(image), log, accumulated)

    rects = list(_tiles(window, tile_size))

    def work(rect):
        return _render_tile(splats, vals, rect, width, min_alpha, min_transmittance, with_log)

    if threads > 1 and len(rects) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, rects))
    else:
        results = [work(rect) for rect in rects]

    pieces = []
    for (x0, y0, x1, y1), (tile_image, tile_acc, entries) in zip(rects, results):
        h, w = y1 - y0 + 1, x1 - x0 + 1
        image[y0:y1 + 1, x0:x1 + 1] = tile_image.reshape(h, w, channels)
        accumulated[y0:y1 + 1, x0:x1 + 1] = tile_acc.reshape(h, w)
        if entries is not None:
            pieces.append(entries)

    if source is RenderSource.DEPTH and normalized_depth:
        covered = accumulated > 0
        image[covered] /= accumulated[covered][:, None]

    log = None
    if with_log:
        log = _merge_entries(pieces, len(scene), width, height, camera.camera_id)
        logger.debug("Camera %s: %d log entries", camera.camera_id, len(log))
    return RenderResult(ImageBuffer(image), log, accumulated)


def _merge_entries(pieces, n_gaussians: int, width: int, height: int, camera_id: str) -> ContributionLog:
    if not pieces:
        return ContributionLog.empty(n_gaussians, width, height, camera_id)
    g, p, a, t, o = (np.concatenate(parts) for parts in zip(*pieces))
    order = np.lexsort((p, g))
    return ContributionLog(
        gaussian_index=g[order].astype(np.int64),
        pixel=p[order].astype(np.int64),
        alpha=a[order],
        transmittance=t[order],
        order=o[order],
        n_gaussians=n_gaussians,
        width=width,
        height=height,
        camera_id=camera_id,
    )


def render_logs(scene: GaussianScene, cameras: Sequence[Camera], threads: int = 1) -> list[ContributionLog]:
    """Contribution logs for several views (depth source, log only)."""
    logs = []
    for camera in cameras:
        result = render_view(scene, camera, RenderSource.DEPTH, with_log=True, threads=threads)
        logs.append(result.log)
    return logs


# ---------------------------------------------------------------------------
# Brute-force oracle
# ---------------------------------------------------------------------------

def reference_render(
    scene: GaussianScene,
    camera: Camera,
    source: RenderSource = RenderSource.COLOR,
    values: Optional[np.ndarray] = None,
    *,
    normalized_depth: bool = False,
) -> ImageBuffer:
    """Slow per-pixel renderer used as a test oracle.

    Projects each Gaussian on its own, sorts the full splat list and
    composites every pixel independently. Traversal only stops once T
    falls below ORACLE_STOP_TRANSMITTANCE.
    """
    n = len(scene)
    if source is RenderSource.COLOR:
        per_gaussian = []
        for i in range(n):
            prim = scene.primitive(i)
            direction = camera.directions_to(prim.mean[None])[0]
            color = [sh_eval(prim.sh_color[ch], direction, scene.sh_degree) + COLOR_OFFSET for ch in range(3)]
            per_gaussian.append([max(v, 0.0) for v in color])
        vals = np.array(per_gaussian).reshape(n, 3)
    else:
        vals = gaussian_channel_values(scene, camera, source, values)

    splats = []
    for i in range(n):
        splat = project_gaussian(scene.primitive(i), camera, index=i)
        if splat is not None:
            splats.append(splat)
    splats.sort(key=lambda s: (s.depth, s.gaussian_index))
    sorted_vals = vals[[s.gaussian_index for s in splats]] if splats else np.zeros((0, vals.shape[1]))

    image = np.zeros((camera.height, camera.width, vals.shape[1]))
    for y in range(camera.height):
        for x in range(camera.width):
            value, contributions = composite_pixel(
                splats, (x, y), sorted_vals, stop_transmittance=ORACLE_STOP_TRANSMITTANCE)
            if normalized_depth and source is RenderSource.DEPTH and contributions:
                value = value / sum(a * t for _, a, t in contributions)
            image[y, x] = value
    return ImageBuffer(image)
