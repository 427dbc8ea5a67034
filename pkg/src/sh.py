"""Real spherical harmonics up to degree 4.

Basis functions use the sign convention of the reference Gaussian
splatting rasterizer so that color coefficients from existing scenes
evaluate bit-compatibly. Coefficients are ordered dc first, then
ascending l with m from -l..l. Directions must be unit vectors.
"""

import logging

import numpy as np

from src.scene import MAX_SH_DEGREE, SceneError, sh_coefficient_count

logger = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)
SH_C4 = (
    2.5033429417967046,
    -1.7701307697799304,
    0.9461746957575601,
    -0.6690465435572892,
    0.10578554691520431,
    -0.6690465435572892,
    0.47308734787878004,
    -1.7701307697799304,
    0.6258357354491761,
)

DEFAULT_RIDGE = 1e-8
DEFAULT_SAMPLE_COUNT = 256


def sh_basis(directions: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate every basis function at each direction.

    Args:
        directions: (..., 3) unit vectors.
        degree: Maximum band L (0..4).

    Returns:
        (..., (L+1)^2) basis values.
    """
    if not 0 <= degree <= MAX_SH_DEGREE:
        raise SceneError(f"SH degree {degree} outside 0..{MAX_SH_DEGREE}")
    d = np.asarray(directions, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + (sh_coefficient_count(degree),))
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    if degree >= 4:
        out[..., 16] = SH_C4[0] * xy * (xx - yy)
        out[..., 17] = SH_C4[1] * yz * (3.0 * xx - yy)
        out[..., 18] = SH_C4[2] * xy * (7.0 * zz - 1.0)
        out[..., 19] = SH_C4[3] * yz * (7.0 * zz - 3.0)
        out[..., 20] = SH_C4[4] * (zz * (35.0 * zz - 30.0) + 3.0)
        out[..., 21] = SH_C4[5] * xz * (7.0 * zz - 3.0)
        out[..., 22] = SH_C4[6] * (xx - yy) * (7.0 * zz - 1.0)
        out[..., 23] = SH_C4[7] * xz * (xx - 3.0 * yy)
        out[..., 24] = SH_C4[8] * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy))
    return out


def sh_eval(coeffs, direction, degree: int) -> float:
    """Evaluate one SH expansion at one direction.

    Raises:
        SceneError: If the coefficient count does not match the degree.
    """
    c = np.asarray(coeffs, dtype=np.float64).reshape(-1)
    if c.shape[0] != sh_coefficient_count(degree):
        raise SceneError(f"Expected {sh_coefficient_count(degree)} coefficients for degree {degree}, got {c.shape[0]}")
    return float(sh_basis(np.asarray(direction, dtype=np.float64), degree) @ c)


def sh_eval_many(coeffs: np.ndarray, directions: np.ndarray) -> np.ndarray:
    """Evaluate per-item expansions at per-item directions.

    Args:
        coeffs: (N, ..., K) coefficients; the degree is inferred from K.
        directions: (N, 3) unit vectors, one per item.

    Returns:
        (N, ...) values.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    degree = int(round(np.sqrt(c.shape[-1]))) - 1
    if sh_coefficient_count(degree) != c.shape[-1]:
        raise SceneError(f"{c.shape[-1]} is not a valid SH coefficient count")
    basis = sh_basis(directions, degree)
    basis = basis.reshape((basis.shape[0],) + (1,) * (c.ndim - 2) + (basis.shape[1],))
    return np.sum(c * basis, axis=-1)


def fibonacci_sphere(n: int = DEFAULT_SAMPLE_COUNT) -> np.ndarray:
    """Deterministic, nearly uniform (n, 3) unit directions."""
    if n < 1:
        raise SceneError("Need at least one sphere sample")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sh_fit(samples, directions, degree: int = MAX_SH_DEGREE, ridge: float = DEFAULT_RIDGE) -> np.ndarray:
    """Least-squares SH fit of sampled sphere functions.

    Solves (B^T B + ridge I) c = B^T s for every row of samples at once.

    Args:
        samples: (M,) values, or (G, M) for G independent functions.
        directions: (M, 3) unit sample directions.
        degree: Maximum band to fit.
        ridge: Diagonal regularizer on the normal equations.

    Returns:
        (K,) or (G, K) coefficients.

    Raises:
        SceneError: If there are too few samples or the directions are
            degenerate for this degree.
    """
    s = np.asarray(samples, dtype=np.float64)
    dirs = np.asarray(directions, dtype=np.float64)
    k = sh_coefficient_count(degree)
    if dirs.ndim != 2 or dirs.shape[1] != 3:
        raise SceneError(f"directions must be (M, 3), got {dirs.shape}")
    if s.shape[-1] != dirs.shape[0]:
        raise SceneError(f"{s.shape[-1]} samples for {dirs.shape[0]} directions")
    if dirs.shape[0] < k:
        raise SceneError(f"Need at least {k} samples for degree {degree}, got {dirs.shape[0]}")

    basis = sh_basis(dirs, degree)
    if np.linalg.matrix_rank(basis) < k:
        raise SceneError(f"Sample directions are degenerate for SH degree {degree}")
    gram = basis.T @ basis + ridge * np.eye(k)
    rhs = s @ basis
    return np.linalg.solve(gram, rhs.T).T
