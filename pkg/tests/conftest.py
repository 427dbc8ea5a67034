"""Shared builders for small scenes and cameras."""

import numpy as np
import pytest

from src.scene import Camera, GaussianScene
from src.sh import SH_C0
from src.synthetic import SynthSpec

IDENTITY_QUAT = (1.0, 0.0, 0.0, 0.0)


def make_scene(means, scales=0.1, opacities=0.9, colors=None, rotations=None, sh_degree=0):
    """Scene of isotropic (or given) Gaussians with flat colors.

    colors are the rendered RGB values; they are stored as dc coefficients.
    """
    means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
    n = means.shape[0]
    scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 3)).copy()
    opacities = np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,)).copy()
    rotations = np.tile(IDENTITY_QUAT, (n, 1)) if rotations is None else np.asarray(rotations, dtype=np.float64)
    colors = np.full((n, 3), 0.5) if colors is None else np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
    sh = np.zeros((n, 3, (sh_degree + 1) ** 2))
    sh[:, :, 0] = (colors - 0.5) / SH_C0
    return GaussianScene(means, scales, rotations, opacities, sh)


def front_camera(width=32, height=32, focal=40.0, distance=3.0, camera_id="front"):
    """Camera on the -z axis looking at the origin along +z."""
    return Camera(
        fx=focal,
        fy=focal,
        cx=(width - 1) / 2.0,
        cy=(height - 1) / 2.0,
        width=width,
        height=height,
        rotation=np.eye(3),
        translation=[0.0, 0.0, distance],
        camera_id=camera_id,
    )


def random_scene(rng, n=20, sh_degree=1, radius=0.6):
    means = rng.uniform(-radius, radius, size=(n, 3))
    scales = rng.uniform(0.04, 0.15, size=(n, 3))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacities = rng.uniform(0.3, 0.95, size=n)
    sh = rng.normal(0.0, 0.3, size=(n, 3, (sh_degree + 1) ** 2))
    return GaussianScene(means, scales, quats, opacities, sh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def camera():
    return front_camera()


def tiny_spec(**overrides):
    """Synthetic scene small enough to render every view in a test."""
    settings = dict(seed=0, n_gaussians=40, cameras_per_ring=8, ring_heights=(0.0,), width=24, height=24)
    settings.update(overrides)
    return SynthSpec(**settings)
