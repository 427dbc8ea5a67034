"""Domain types for Gaussian scenes, cameras, images and view sets.

Conventions:
    Quaternions are (w, x, y, z).
    Scales are physical standard deviations (world units), opacities in [0, 1].
    SH color is stored per Gaussian as (3, K) with K = (L+1)^2, band order
    dc first, then ascending l with m from -l..l.
    Cameras follow the OpenCV convention: x right, y down, z forward.
    Pixel centers sit at integer coordinates (column, row).
    Images are (height, width, channels) float arrays.

All types are read-only after construction.
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAX_SH_DEGREE = 4
QUATERNION_TOLERANCE = 1e-6
ROTATION_TOLERANCE = 1e-6


class SceneError(Exception):
    """Raised when scene, camera or image data is invalid."""


class ViewRole(str, Enum):
    """Role of a camera in the train / regression / evaluation split."""

    TRAIN = "train"
    HOLDOUT_TRAIN_REG = "holdout-train-reg"
    HOLDOUT_EVAL = "holdout-eval"


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def sh_coefficient_count(degree: int) -> int:
    """Number of SH coefficients per channel for a given degree."""
    return (degree + 1) ** 2


def sh_degree_for_count(count: int) -> int:
    """Inverse of sh_coefficient_count.

    Raises:
        SceneError: If count is not a perfect square up to degree 4.
    """
    for degree in range(MAX_SH_DEGREE + 1):
        if sh_coefficient_count(degree) == count:
            return degree
    raise SceneError(f"{count} SH coefficients per channel does not match any degree 0..{MAX_SH_DEGREE}")


# ---------------------------------------------------------------------------
# Rotations and covariance
# ---------------------------------------------------------------------------

def quaternion_to_rotations(quaternions: np.ndarray) -> np.ndarray:
    """Convert (N, 4) wxyz quaternions to (N, 3, 3) rotation matrices.

    Quaternions are normalized first, so callers may pass perturbed values.
    """
    q = np.asarray(quaternions, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rot = np.empty(q.shape[:-1] + (3, 3))
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def quaternion_to_rotation(quaternion) -> np.ndarray:
    """Rotation matrix of a single wxyz quaternion."""
    return quaternion_to_rotations(np.asarray(quaternion, dtype=np.float64)[None])[0]


def quaternion_multiply(q1, q2) -> np.ndarray:
    """Hamilton product q1 * q2 of wxyz quaternions."""
    w1, x1, y1, z1 = np.asarray(q1, dtype=np.float64)
    w2, x2, y2, z2 = np.asarray(q2, dtype=np.float64)
    return np.array([
        w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
        w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
        w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
        w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
    ])


def covariances_3d(scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Batched R diag(s^2) R^T for (N, 3) scales and (N, 4) quaternions."""
    rot = quaternion_to_rotations(rotations)
    m = rot * np.asarray(scales, dtype=np.float64)[:, None, :]
    cov = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


def covariance_3d(scale, rotation) -> np.ndarray:
    """World-space covariance of one Gaussian.

    Args:
        scale: Three positive standard deviations.
        rotation: Unit quaternion (w, x, y, z).

    Returns:
        Symmetric 3x3 matrix R diag(scale^2) R^T.

    Raises:
        SceneError: On non-finite input, non-positive scale or a zero quaternion.
    """
    s = np.asarray(scale, dtype=np.float64)
    q = np.asarray(rotation, dtype=np.float64)
    if s.shape != (3,) or q.shape != (4,):
        raise SceneError(f"Expected scale (3,) and rotation (4,), got {s.shape} and {q.shape}")
    if not (np.all(np.isfinite(s)) and np.all(np.isfinite(q))):
        raise SceneError("Non-finite scale or rotation")
    if np.any(s <= 0):
        raise SceneError(f"Scale must be positive, got {s.tolist()}")
    if np.linalg.norm(q) == 0:
        raise SceneError("Zero quaternion")
    return covariances_3d(s[None], q[None])[0]


# ---------------------------------------------------------------------------
# Gaussians
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GaussianPrimitive:
    """A single Gaussian primitive with physical (activated) parameters."""

    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    sh_color: np.ndarray

    @property
    def sh_degree(self) -> int:
        return sh_degree_for_count(self.sh_color.shape[-1])

    def covariance(self) -> np.ndarray:
        return covariance_3d(self.scale, self.rotation)


class GaussianScene:
    """Ordered collection of Gaussian primitives stored as parallel arrays.

    Args:
        means: (N, 3) world positions.
        scales: (N, 3) positive standard deviations.
        rotations: (N, 4) unit quaternions (w, x, y, z).
        opacities: (N,) values in [0, 1].
        sh_coeffs: (N, 3, K) color SH coefficients, K = (L+1)^2.

    Raises:
        SceneError: If any invariant is violated.
    """

    def __init__(self, means, scales, rotations, opacities, sh_coeffs):
        means = np.array(means, dtype=np.float64).reshape(-1, 3)
        n = means.shape[0]
        scales = np.array(scales, dtype=np.float64).reshape(n, 3)
        rotations = np.array(rotations, dtype=np.float64).reshape(n, 4)
        opacities = np.array(opacities, dtype=np.float64).reshape(n)
        sh_coeffs = np.array(sh_coeffs, dtype=np.float64)
        if sh_coeffs.ndim != 3 or sh_coeffs.shape[:2] != (n, 3):
            raise SceneError(f"sh_coeffs must be (N, 3, K) with N={n}, got {sh_coeffs.shape}")

        for name, arr in (("means", means), ("scales", scales), ("rotations", rotations),
                          ("opacities", opacities), ("sh_coeffs", sh_coeffs)):
            if not np.all(np.isfinite(arr)):
                raise SceneError(f"Non-finite values in {name}")
        if np.any(scales <= 0):
            raise SceneError("Scale components must be strictly positive")
        if np.any((opacities < 0) | (opacities > 1)):
            raise SceneError("Opacities must lie in [0, 1]")
        norms = np.linalg.norm(rotations, axis=1)
        bad = np.abs(norms - 1.0) > QUATERNION_TOLERANCE
        if np.any(bad):
            raise SceneError(f"Quaternion {int(np.argmax(bad))} is not normalized (norm {norms[bad][0]:.8f})")

        self._sh_degree = sh_degree_for_count(sh_coeffs.shape[2])
        self.means = _frozen(means)
        self.scales = _frozen(scales)
        self.rotations = _frozen(rotations)
        self.opacities = _frozen(opacities)
        self.sh_coeffs = _frozen(sh_coeffs)

    def __len__(self) -> int:
        return self.means.shape[0]

    def __repr__(self) -> str:
        return f"GaussianScene({len(self)} gaussians, sh_degree={self.sh_degree})"

    @property
    def sh_degree(self) -> int:
        return self._sh_degree

    @classmethod
    def empty(cls, sh_degree: int = 0) -> "GaussianScene":
        k = sh_coefficient_count(sh_degree)
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3, k)))

    @classmethod
    def from_primitives(cls, primitives: Sequence[GaussianPrimitive], sh_degree: int = 0) -> "GaussianScene":
        """Build a scene from individual primitives (all of one SH degree)."""
        if not primitives:
            return cls.empty(sh_degree)
        return cls(
            np.stack([p.mean for p in primitives]),
            np.stack([p.scale for p in primitives]),
            np.stack([p.rotation for p in primitives]),
            np.array([p.opacity for p in primitives]),
            np.stack([np.asarray(p.sh_color, dtype=np.float64).reshape(3, -1) for p in primitives]),
        )

    def primitive(self, index: int) -> GaussianPrimitive:
        return GaussianPrimitive(
            mean=self.means[index],
            scale=self.scales[index],
            rotation=self.rotations[index],
            opacity=float(self.opacities[index]),
            sh_color=self.sh_coeffs[index],
        )

    def covariances(self) -> np.ndarray:
        return covariances_3d(self.scales, self.rotations)

    def subset(self, indices: Iterable[int]) -> "GaussianScene":
        """Scene restricted to the given primitive indices, in that order."""
        idx = np.asarray(list(indices), dtype=np.int64)
        return GaussianScene(self.means[idx], self.scales[idx], self.rotations[idx],
                             self.opacities[idx], self.sh_coeffs[idx])

    def replace(self, **arrays) -> "GaussianScene":
        """Copy of the scene with some parameter arrays swapped out."""
        params = {
            "means": self.means,
            "scales": self.scales,
            "rotations": self.rotations,
            "opacities": self.opacities,
            "sh_coeffs": self.sh_coeffs,
        }
        unknown = set(arrays) - set(params)
        if unknown:
            raise SceneError(f"Unknown scene arrays: {sorted(unknown)}")
        params.update(arrays)
        return GaussianScene(**params)


# ---------------------------------------------------------------------------
# Cameras and images
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with a world-to-camera pose.

    A world point p maps to camera space as rotation @ p + translation.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    camera_id: str = ""

    def __post_init__(self):
        rot = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise SceneError(f"Camera {self.camera_id!r}: focal lengths must be positive")
        if int(self.width) < 1 or int(self.height) < 1:
            raise SceneError(f"Camera {self.camera_id!r}: image size must be at least 1x1")
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise SceneError(f"Camera {self.camera_id!r}: non-finite pose")
        if np.max(np.abs(rot @ rot.T - np.eye(3))) > ROTATION_TOLERANCE:
            raise SceneError(f"Camera {self.camera_id!r}: rotation is not orthonormal")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "rotation", _frozen(rot))
        object.__setattr__(self, "translation", _frozen(trans))

    @classmethod
    def look_at(
        cls,
        eye,
        target,
        up=(0.0, 0.0, 1.0),
        *,
        fx: float,
        fy: Optional[float] = None,
        width: int,
        height: int,
        cx: Optional[float] = None,
        cy: Optional[float] = None,
        camera_id: str = "",
    ) -> "Camera":
        """Camera at eye looking at target, with image-up roughly along up."""
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise SceneError("look_at: up vector is parallel to the viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        return cls(
            fx=fx,
            fy=fx if fy is None else fy,
            cx=(width - 1) / 2.0 if cx is None else cx,
            cy=(height - 1) / 2.0 if cy is None else cy,
            width=width,
            height=height,
            rotation=rot,
            translation=-rot @ eye,
            camera_id=camera_id,
        )

    @property
    def view_direction(self) -> np.ndarray:
        """Camera forward axis in world coordinates."""
        return self.rotation[2].copy()

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform (N, 3) world points into camera space."""
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def directions_to(self, points: np.ndarray) -> np.ndarray:
        """Unit directions from the camera center to each of (N, 3) points."""
        d = np.asarray(points, dtype=np.float64) - self.center
        norm = np.linalg.norm(d, axis=-1, keepdims=True)
        return d / np.where(norm > 0, norm, 1.0)


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """Row-major (height, width, channels) image of finite float values."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise SceneError(f"ImageBuffer needs 2 or 3 dimensions, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise SceneError("ImageBuffer contains non-finite values")
        object.__setattr__(self, "data", _frozen(arr))

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1) -> "ImageBuffer":
        return cls(np.zeros((height, width, channels)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def plane(self, channel: int = 0) -> np.ndarray:
        """One channel as a (height, width) array."""
        return self.data[:, :, channel]

    def matches(self, camera: Camera) -> bool:
        return self.width == camera.width and self.height == camera.height


@dataclass(frozen=True, eq=False)
class ViewSet:
    """Cameras with ground-truth images, roles and optional masks.

    Masks are boolean (height, width) arrays where True means included.
    object_masks separate object pixels (True) from background.
    """

    cameras: tuple
    gt_color: tuple
    roles: tuple = ()
    gt_depth: tuple = ()
    masks: tuple = ()
    object_masks: tuple = ()
    _by_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        n = len(self.cameras)
        object.__setattr__(self, "cameras", tuple(self.cameras))
        object.__setattr__(self, "gt_color", tuple(self.gt_color))
        roles = tuple(ViewRole(r).value for r in self.roles) if self.roles else (ViewRole.TRAIN.value,) * n
        object.__setattr__(self, "roles", roles)
        for name in ("gt_depth", "masks", "object_masks"):
            values = tuple(getattr(self, name)) or (None,) * n
            object.__setattr__(self, name, values)

        for name in ("gt_color", "roles", "gt_depth", "masks", "object_masks"):
            if len(getattr(self, name)) != n:
                raise SceneError(f"ViewSet.{name} has {len(getattr(self, name))} entries for {n} cameras")

        for cam, color, depth in zip(self.cameras, self.gt_color, self.gt_depth):
            if color is not None and (not color.matches(cam) or color.channels != 3):
                raise SceneError(f"Color image for camera {cam.camera_id!r} does not match its size")
            if depth is not None and (not depth.matches(cam) or depth.channels != 1):
                raise SceneError(f"Depth image for camera {cam.camera_id!r} does not match its size")
        for name in ("masks", "object_masks"):
            for cam, mask in zip(self.cameras, getattr(self, name)):
                if mask is not None and np.shape(mask) != (cam.height, cam.width):
                    raise SceneError(f"{name} entry for camera {cam.camera_id!r} does not match its size")

        ids = [cam.camera_id for cam in self.cameras]
        if len(set(ids)) != len(ids):
            raise SceneError("Camera ids in a ViewSet must be unique")
        object.__setattr__(self, "_by_id", {cid: i for i, cid in enumerate(ids)})

    def __len__(self) -> int:
        return len(self.cameras)

    def index_of(self, camera_id: str) -> int:
        try:
            return self._by_id[camera_id]
        except KeyError:
            raise SceneError(f"Unknown camera id {camera_id!r}") from None

    def subset(self, indices: Iterable[int]) -> "ViewSet":
        idx = list(indices)
        return ViewSet(
            cameras=[self.cameras[i] for i in idx],
            gt_color=[self.gt_color[i] for i in idx],
            roles=[self.roles[i] for i in idx],
            gt_depth=[self.gt_depth[i] for i in idx],
            masks=[self.masks[i] for i in idx],
            object_masks=[self.object_masks[i] for i in idx],
        )

    def by_role(self, *roles) -> "ViewSet":
        """Views whose role is one of the given roles, in original order."""
        wanted = {ViewRole(r).value for r in roles}
        return self.subset(i for i, r in enumerate(self.roles) if r in wanted)

    def pixel_mask(self, index: int, mask_role: str = "full") -> Optional[np.ndarray]:
        """Boolean inclusion mask for a view under a mask role.

        Args:
            index: View index.
            mask_role: "full" uses the view mask only; "object" and
                "background" intersect it with the object mask or its
                complement.

        Returns:
            (height, width) bool array, or None when every pixel is included.

        Raises:
            SceneError: If an object/background role is requested for a view
                without an object mask.
        """
        base = self.masks[index]
        if mask_role == "full":
            return None if base is None else np.asarray(base, dtype=bool)
        if mask_role not in ("object", "background"):
            raise SceneError(f"Unknown mask role {mask_role!r}")
        obj = self.object_masks[index]
        if obj is None:
            raise SceneError(f"Camera {self.cameras[index].camera_id!r} has no object mask for role {mask_role!r}")
        selected = np.asarray(obj, dtype=bool)
        if mask_role == "background":
            selected = ~selected
        if base is not None:
            selected = selected & np.asarray(base, dtype=bool)
        return selected
