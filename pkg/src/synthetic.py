"""Deterministic synthetic scenes with controlled reconstruction error.

A truth scene is sampled from a seeded generator and photographed by
rings of inward-facing cameras. A degraded copy of the scene plays the
part of an imperfect reconstruction; its renders differ from the truth
renders exactly where the degradation bites.

Camera split: camera i is held out when i % 4 == 3. The first held-out
camera fits the regressor (holdout-train-reg), the rest evaluate it
(holdout-eval); everything else is a training view.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple

import numpy as np

from src.renderer import RenderSource, render_view
from src.representations import pixel_error_map
from src.scene import Camera, GaussianScene, ViewRole, ViewSet
from src.sh import SH_C0

logger = logging.getLogger(__name__)

HOLDOUT_PERIOD = 4
OBJECT_ALPHA = 0.5


class SynthError(Exception):
    """Raised on an invalid synthetic scene specification."""


class DegradationMode(Enum):
    DROP = "drop"                    # remove a fraction of primitives
    JITTER = "jitter"                # shift means by sigma * fixed normal draw
    OPACITY_NOISE = "opacity-noise"  # perturb opacities by sigma * fixed normal draw


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_gaussians: int = 500
    world_radius: float = 1.0
    cameras_per_ring: int = 12
    ring_radius: float = 3.0
    ring_heights: tuple = (0.0, 1.0)
    width: int = 128
    height: int = 128
    fov_degrees: float = 50.0
    degradation: DegradationMode = DegradationMode.DROP
    amount: float = 0.3
    scale_range: tuple = (0.03, 0.12)
    opacity_range: tuple = (0.5, 1.0)

    def __post_init__(self):
        if self.n_gaussians < 1 or self.cameras_per_ring < 1 or self.width < 1 or self.height < 1:
            raise SynthError("Gaussian, camera and pixel counts must be at least 1")
        if not 1 <= len(self.ring_heights) <= 3:
            raise SynthError(f"Use 1 to 3 camera rings, got {len(self.ring_heights)}")
        if self.world_radius <= 0 or self.ring_radius <= self.world_radius:
            raise SynthError("Cameras must sit outside the scene ball")
        if not 0 < self.fov_degrees < 180:
            raise SynthError(f"Field of view {self.fov_degrees} is out of range")
        if self.degradation is DegradationMode.DROP:
            if not 0 <= self.amount < 1:
                raise SynthError(f"Drop fraction must be in [0, 1), got {self.amount}")
        elif self.amount < 0:
            raise SynthError(f"Noise sigma must be non-negative, got {self.amount}")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(math.radians(self.fov_degrees) / 2)


class SynthResult(NamedTuple):
    truth: GaussianScene
    degraded: GaussianScene
    views: ViewSet


def sample_scene(spec: SynthSpec) -> GaussianScene:
    """Truth scene: means in a ball, log-uniform scales, random rotations,
    opacities and degree-1 colors."""
    rng = np.random.default_rng(spec.seed)
    n = spec.n_gaussians
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = spec.world_radius * rng.uniform(size=n) ** (1.0 / 3.0)
    means = direction * radius[:, None]

    lo, hi = spec.scale_range
    scales = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n, 3))) * spec.world_radius
    rotations = rng.normal(size=(n, 4))
    rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
    opacities = rng.uniform(*spec.opacity_range, size=n)

    rgb = rng.uniform(0.1, 0.9, size=(n, 3))
    sh = np.zeros((n, 3, 4))
    sh[:, :, 0] = (rgb - 0.5) / SH_C0
    sh[:, :, 1:] = rng.normal(scale=0.1, size=(n, 3, 3))
    return GaussianScene(means, scales, rotations, opacities, sh)


def ring_cameras(spec: SynthSpec) -> list[Camera]:
    """Inward-facing cameras on rings around the z axis, looking at the origin."""
    cameras = []
    for ring, height in enumerate(spec.ring_heights):
        offset = math.pi * ring / spec.cameras_per_ring
        for j in range(spec.cameras_per_ring):
            theta = 2 * math.pi * j / spec.cameras_per_ring + offset
            eye = (spec.ring_radius * math.cos(theta), spec.ring_radius * math.sin(theta), height)
            cameras.append(Camera.look_at(eye, (0.0, 0.0, 0.0), fx=spec.focal, width=spec.width,
                                          height=spec.height, camera_id=f"cam{len(cameras):03d}"))
    return cameras


def split_roles(n_cameras: int) -> list[str]:
    """Role per camera: every fourth camera held out, the first of those for regression."""
    roles = []
    first_holdout = True
    for i in range(n_cameras):
        if i % HOLDOUT_PERIOD == HOLDOUT_PERIOD - 1:
            roles.append(ViewRole.HOLDOUT_TRAIN_REG.value if first_holdout else ViewRole.HOLDOUT_EVAL.value)
            first_holdout = False
        else:
            roles.append(ViewRole.TRAIN.value)
    return roles


def degrade(scene: GaussianScene, mode: DegradationMode, amount: float, seed: int = 0) -> GaussianScene:
    """Imperfect copy of a scene.

    The random draw depends only on the seed and the scene size, so for a
    fixed seed the degradation grows monotonically with amount.
    """
    if amount == 0:
        return scene
    rng = np.random.default_rng([seed, 1])
    n = len(scene)
    if mode is DegradationMode.DROP:
        keep = math.ceil((1.0 - amount) * n - 1e-9)
        kept = np.sort(rng.permutation(n)[:keep])
        return scene.subset(kept)
    if mode is DegradationMode.JITTER:
        return scene.replace(means=scene.means + amount * rng.normal(size=(n, 3)))
    if mode is DegradationMode.OPACITY_NOISE:
        return scene.replace(opacities=np.clip(scene.opacities + amount * rng.normal(size=n), 0.0, 1.0))
    raise SynthError(f"Unknown degradation {mode!r}")


def generate(spec: SynthSpec, threads: int = 1) -> SynthResult:
    """Truth scene, degraded scene and a role-split view set rendered from the truth."""
    truth = sample_scene(spec)
    degraded = degrade(truth, spec.degradation, spec.amount, spec.seed)
    cameras = ring_cameras(spec)
    colors, depths, object_masks = [], [], []
    for cam in cameras:
        color = render_view(truth, cam, RenderSource.COLOR, threads=threads)
        depth = render_view(truth, cam, RenderSource.DEPTH, threads=threads)
        colors.append(color.image)
        depths.append(depth.image)
        object_masks.append(color.accumulated >= OBJECT_ALPHA)
    views = ViewSet(cameras=cameras, gt_color=colors, roles=split_roles(len(cameras)),
                    gt_depth=depths, object_masks=object_masks)
    logger.info("Synthetic scene seed=%d: %d -> %d Gaussians, %d cameras (%s %.3g)",
                spec.seed, len(truth), len(degraded), len(cameras), spec.degradation.value, spec.amount)
    return SynthResult(truth, degraded, views)


def error_ground_truth(views: ViewSet, degraded: GaussianScene, threads: int = 1) -> dict:
    """Render the degraded scene into every camera and compare with the truth images.

    Returns:
        {"render": [PixelError per view], "depth": [PixelError or None per view]}
    """
    out = {"render": [], "depth": []}
    for cam, gt_color, gt_depth in zip(views.cameras, views.gt_color, views.gt_depth):
        color = render_view(degraded, cam, RenderSource.COLOR, threads=threads).image
        out["render"].append(pixel_error_map(gt_color, color))
        if gt_depth is None:
            out["depth"].append(None)
        else:
            depth = render_view(degraded, cam, RenderSource.DEPTH, threads=threads).image
            out["depth"].append(pixel_error_map(gt_depth, depth))
    return out
