"""Gaussian scenes stored as 3DGS-style PLY files.

Vertex element properties (float32):
    x, y, z             mean
    nx, ny, nz          normals (ignored on load, written as 0)
    f_dc_0..2           SH dc coefficient per color channel
    f_rest_0..R-1       remaining SH coefficients, channel-major:
                        R = 3 * ((L+1)^2 - 1) for SH degree L
    opacity             logit of the opacity
    scale_0..2          log of the standard deviations
    rot_0..3            quaternion (w, x, y, z), normalized on load

Any other property is rejected. Parse errors name the offending field
and the byte offset of its header line (or of the data row).
"""

import io
import logging
import re
from typing import NamedTuple

import numpy as np
from plyfile import PlyData, PlyElement, PlyParseError

from src.formats import FormatError, atomic_write_bytes
from src.scene import GaussianScene, SceneError, sh_coefficient_count, sh_degree_for_count

logger = logging.getLogger(__name__)

VERTEX_ELEMENT = "vertex"
REQUIRED_PROPERTIES = (
    ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity"]
    + [f"scale_{i}" for i in range(3)]
    + [f"rot_{i}" for i in range(4)]
)
OPTIONAL_PROPERTIES = ("nx", "ny", "nz")
F_REST = re.compile(r"^f_rest_(\d+)$")
TYPE_SIZES = {
    "char": 1, "int8": 1, "uchar": 1, "uint8": 1,
    "short": 2, "int16": 2, "ushort": 2, "uint16": 2,
    "int": 4, "int32": 4, "uint": 4, "uint32": 4,
    "float": 4, "float32": 4, "double": 8, "float64": 8,
}
LOGIT_CLAMP = 1e-7


class HeaderLine(NamedTuple):
    offset: int
    text: str


class PlyHeader(NamedTuple):
    lines: list           # HeaderLine per header line
    length: int           # bytes up to and including end_header
    properties: dict      # vertex property name -> byte offset of its line
    element_offset: int   # byte offset of the "element vertex" line
    row_size: int         # bytes per vertex row (binary formats)


def scan_header(path: str) -> PlyHeader:
    """Read the ASCII header and record byte offsets of its lines.

    Raises:
        FormatError: On a missing magic, missing end_header or a malformed
            element or property line.
    """
    try:
        with open(path, "rb") as f:
            raw = f.read(1 << 20)
    except OSError as e:
        raise FormatError(f"{path}: cannot read file ({e.strerror})") from e
    if not raw.startswith(b"ply"):
        raise FormatError(f"{path}: field 'magic' at byte 0 is {raw[:3]!r}, expected b'ply'")

    lines, offset = [], 0
    while True:
        end = raw.find(b"\n", offset)
        if end < 0:
            raise FormatError(f"{path}: field 'end_header' missing (header scanned to byte {offset})")
        text = raw[offset:end].decode("ascii", errors="replace").strip()
        lines.append(HeaderLine(offset, text))
        offset = end + 1
        if text == "end_header":
            break

    properties, element_offset, row_size = {}, -1, 0
    current = None
    for line in lines:
        parts = line.text.split()
        if not parts:
            continue
        if parts[0] == "element":
            if len(parts) != 3:
                raise FormatError(f"{path}: field 'element' at byte {line.offset} is malformed: {line.text!r}")
            current = parts[1]
            if current == VERTEX_ELEMENT:
                element_offset = line.offset
        elif parts[0] == "property" and current == VERTEX_ELEMENT:
            if len(parts) != 3 or parts[1] == "list":
                raise FormatError(f"{path}: field 'property' at byte {line.offset} is not a scalar: {line.text!r}")
            if parts[1] not in TYPE_SIZES:
                raise FormatError(f"{path}: field {parts[2]!r} at byte {line.offset} has unknown type {parts[1]!r}")
            properties[parts[2]] = line.offset
            row_size += TYPE_SIZES[parts[1]]
    if element_offset < 0:
        raise FormatError(f"{path}: field 'element vertex' missing from header (ends at byte {offset})")
    return PlyHeader(lines, offset, properties, element_offset, row_size)


def check_properties(header: PlyHeader, path: str = "<ply>") -> int:
    """Validate the vertex properties and return the SH degree they imply."""
    rest = {}
    for name, offset in header.properties.items():
        match = F_REST.match(name)
        if match:
            rest[int(match.group(1))] = offset
        elif name not in REQUIRED_PROPERTIES and name not in OPTIONAL_PROPERTIES:
            raise FormatError(f"{path}: unknown property {name!r} at byte {offset}")
    for name in REQUIRED_PROPERTIES:
        if name not in header.properties:
            raise FormatError(f"{path}: missing property {name!r} (element vertex at byte {header.element_offset})")

    if sorted(rest) != list(range(len(rest))):
        gap = next(i for i in range(len(rest) + 1) if i not in rest)
        raise FormatError(f"{path}: property 'f_rest_{gap}' missing (element vertex at byte {header.element_offset})")
    if len(rest) % 3:
        raise FormatError(
            f"{path}: f_rest count {len(rest)} at byte {header.element_offset} is not a multiple of 3")
    try:
        return sh_degree_for_count(len(rest) // 3 + 1)
    except SceneError as e:
        raise FormatError(f"{path}: f_rest count {len(rest)} at byte {header.element_offset}: {e}") from e


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p: np.ndarray) -> np.ndarray:
    p = np.clip(p, LOGIT_CLAMP, 1.0 - LOGIT_CLAMP)
    return np.log(p) - np.log1p(-p)


def load_ply(path: str) -> GaussianScene:
    """Load a Gaussian scene, applying the sigmoid / exp activations.

    Raises:
        FormatError: On header problems, unknown or missing properties,
            element count mismatches, non-finite values or zero quaternions.
    """
    header = scan_header(path)
    degree = check_properties(header, path)
    try:
        ply = PlyData.read(path)
    except PlyParseError as e:
        row = getattr(e, "row", None)
        if row is not None and header.row_size:
            where = f"row {row}, byte {header.length + row * header.row_size}"
        else:
            where = f"byte {header.length}"
        prop = getattr(e, "prop", None)
        field = getattr(prop, "name", None) or "data"
        raise FormatError(f"{path}: field {field!r} at {where}: {e}") from e

    vertex = ply[VERTEX_ELEMENT]
    n = vertex.count

    def column(name):
        values = np.asarray(vertex[name], dtype=np.float64)
        if not np.all(np.isfinite(values)):
            row = int(np.flatnonzero(~np.isfinite(values))[0])
            raise FormatError(f"{path}: property {name!r} has a non-finite value in row {row} "
                              f"(byte {header.length + row * header.row_size})")
        return values

    means = np.stack([column(a) for a in ("x", "y", "z")], axis=1)
    opacities = sigmoid(column("opacity"))
    scales = np.exp(np.stack([column(f"scale_{i}") for i in range(3)], axis=1))
    quats = np.stack([column(f"rot_{i}") for i in range(4)], axis=1)
    norms = np.linalg.norm(quats, axis=1)
    if np.any(norms == 0):
        row = int(np.flatnonzero(norms == 0)[0])
        raise FormatError(f"{path}: property 'rot_0' at row {row} is a zero quaternion "
                          f"(byte {header.length + row * header.row_size})")
    rotations = quats / norms[:, None]

    k = sh_coefficient_count(degree)
    sh = np.zeros((n, 3, k))
    sh[:, :, 0] = np.stack([column(f"f_dc_{c}") for c in range(3)], axis=1)
    if k > 1:
        rest = np.stack([column(f"f_rest_{i}") for i in range(3 * (k - 1))], axis=1)
        sh[:, :, 1:] = rest.reshape(n, 3, k - 1)

    try:
        scene = GaussianScene(means, scales, rotations, opacities, sh)
    except SceneError as e:
        raise FormatError(f"{path}: {e}") from e
    logger.info("Loaded %s: %d Gaussians, SH degree %d", path, n, degree)
    return scene


def write_ply(scene: GaussianScene, path: str) -> str:
    """Write a scene as binary little-endian PLY with inverse activations."""
    n = len(scene)
    k = sh_coefficient_count(scene.sh_degree)
    names = (["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
             + [f"f_rest_{i}" for i in range(3 * (k - 1))]
             + ["opacity"] + [f"scale_{i}" for i in range(3)] + [f"rot_{i}" for i in range(4)])
    attributes = np.concatenate([
        scene.means,
        np.zeros((n, 3)),
        scene.sh_coeffs[:, :, 0],
        scene.sh_coeffs[:, :, 1:].reshape(n, -1),
        logit(scene.opacities)[:, None],
        np.log(scene.scales),
        scene.rotations,
    ], axis=1)
    elements = np.empty(n, dtype=[(name, "<f4") for name in names])
    for i, name in enumerate(names):
        elements[name] = attributes[:, i]

    buffer = io.BytesIO()
    PlyData([PlyElement.describe(elements, VERTEX_ELEMENT)], byte_order="<").write(buffer)
    atomic_write_bytes(path, buffer.getvalue())
    logger.info("Wrote %s: %d Gaussians", path, n)
    return path
