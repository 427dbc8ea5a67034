"""On-disk formats for pipeline artifacts.

Feature tensor (.uefm), all integers little-endian:
    magic      4 bytes  b"UEFM"
    version    u32      FORMAT_VERSION
    width      u32
    height     u32
    channels   u32
    names      channels x (u32 byte length, UTF-8 bytes)
    data       width*height*channels float32, row-major, channel-interleaved

PFM (depth, predictions): "Pf" (1 channel) or "PF" (3 channels), then
"width height", then the scale whose sign gives the byte order (negative
= little-endian). Rows are stored bottom to top.

PNG: 8-bit or 16-bit color and masks through imageio; masks include the
pixels whose value is nonzero.

Model documents are versioned JSON. Logs, representation sets and Fisher
diagonals are .npz archives with fixed entry timestamps so identical
inputs give identical bytes.
"""

import io
import json
import logging
import os
import struct
import zipfile
from typing import Optional, Sequence

import imageio.v3 as iio
import numpy as np

from src.fisher import GROUPS, FisherDiagonal
from src.gbdt import GBDTModel, RegressionTree
from src.regression import LinearModel
from src.renderer import ContributionLog
from src.representations import (
    Aggregation,
    DirectionMode,
    FeatureMapSet,
    PrimitiveRepresentation,
    RepresentationKind,
)
from src.scene import ImageBuffer

logger = logging.getLogger(__name__)

UEFM_MAGIC = b"UEFM"
FORMAT_VERSION = 1
UEFM_HEADER = struct.Struct("<4sIIII")
NAME_LENGTH = struct.Struct("<I")

MODEL_FORMAT = "uncertainty-regressor"
MODEL_VERSION = 1

ZIP_TIMESTAMP = (1980, 1, 1, 0, 0, 0)


class FormatError(Exception):
    """Raised when a file cannot be parsed; messages name the field and byte offset."""


def atomic_write_bytes(path: str, payload: bytes) -> str:
    """Write bytes to path via a temporary file and rename."""
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    tmp_path = path + ".tmp"
    with open(tmp_path, "wb") as f:
        f.write(payload)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp_path, path)
    return path


def _read_bytes(path: str) -> bytes:
    try:
        with open(path, "rb") as f:
            return f.read()
    except OSError as e:
        raise FormatError(f"{path}: cannot read file ({e.strerror})") from e


# ---------------------------------------------------------------------------
# UEFM feature tensors
# ---------------------------------------------------------------------------

def encode_feature_tensor(maps: FeatureMapSet) -> bytes:
    data = maps.image.data
    height, width, channels = data.shape
    out = io.BytesIO()
    out.write(UEFM_HEADER.pack(UEFM_MAGIC, FORMAT_VERSION, width, height, channels))
    for name in maps.channel_names:
        raw = name.encode("utf-8")
        out.write(NAME_LENGTH.pack(len(raw)))
        out.write(raw)
    out.write(np.ascontiguousarray(data, dtype="<f4").tobytes())
    return out.getvalue()


def decode_feature_tensor(payload: bytes, camera_id: str = "", source: str = "<bytes>") -> FeatureMapSet:
    """Parse a feature tensor.

    Raises:
        FormatError: On a bad magic, unsupported version, truncated name
            table or a data section of the wrong size.
    """
    if len(payload) < UEFM_HEADER.size:
        raise FormatError(f"{source}: header truncated at byte {len(payload)} (needs {UEFM_HEADER.size})")
    magic, version, width, height, channels = UEFM_HEADER.unpack_from(payload, 0)
    if magic != UEFM_MAGIC:
        raise FormatError(f"{source}: field 'magic' at byte 0 is {magic!r}, expected {UEFM_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{source}: field 'version' at byte 4 is {version}, expected {FORMAT_VERSION}")
    if width < 1 or height < 1:
        raise FormatError(f"{source}: field 'width'/'height' at byte 8 is {width}x{height}")

    offset = UEFM_HEADER.size
    names = []
    for c in range(channels):
        if offset + NAME_LENGTH.size > len(payload):
            raise FormatError(f"{source}: field 'name[{c}].length' at byte {offset} is truncated")
        (length,) = NAME_LENGTH.unpack_from(payload, offset)
        offset += NAME_LENGTH.size
        if offset + length > len(payload):
            raise FormatError(f"{source}: field 'name[{c}]' at byte {offset} runs past the end of file")
        try:
            names.append(payload[offset:offset + length].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise FormatError(f"{source}: field 'name[{c}]' at byte {offset} is not UTF-8") from e
        offset += length

    expected = width * height * channels * 4
    if len(payload) - offset != expected:
        raise FormatError(
            f"{source}: field 'data' at byte {offset} has {len(payload) - offset} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype="<f4", count=width * height * channels, offset=offset)
    image = data.astype(np.float64).reshape(height, width, channels)
    return FeatureMapSet(camera_id, ImageBuffer(image), tuple(names))


def write_feature_tensor(maps: FeatureMapSet, path: str) -> str:
    atomic_write_bytes(path, encode_feature_tensor(maps))
    logger.debug("Feature tensor %s: %dx%dx%d", path, maps.width, maps.height, len(maps.channel_names))
    return path


def read_feature_tensor(path: str, camera_id: Optional[str] = None) -> FeatureMapSet:
    """Read a .uefm file; the camera id defaults to the file stem."""
    if camera_id is None:
        camera_id = os.path.splitext(os.path.basename(path))[0]
    return decode_feature_tensor(_read_bytes(path), camera_id, path)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def write_pfm(image: ImageBuffer, path: str) -> str:
    """Write a 1- or 3-channel image as little-endian PFM."""
    if image.channels not in (1, 3):
        raise FormatError(f"{path}: PFM holds 1 or 3 channels, got {image.channels}")
    kind = b"Pf" if image.channels == 1 else b"PF"
    header = kind + b"\n" + f"{image.width} {image.height}\n".encode("ascii") + b"-1.0\n"
    rows = np.ascontiguousarray(image.data[::-1], dtype="<f4")
    return atomic_write_bytes(path, header + rows.tobytes())


def read_pfm(path: str) -> np.ndarray:
    """Read a PFM file into a (height, width, channels) float64 array.

    Values are returned as stored; non-finite entries are left for the
    caller to handle.
    """
    payload = _read_bytes(path)
    offset = 0
    fields = []
    for name in ("kind", "size", "scale"):
        end = payload.find(b"\n", offset)
        if end < 0:
            raise FormatError(f"{path}: field '{name}' at byte {offset} is not terminated")
        fields.append((payload[offset:end].decode("ascii", errors="replace").strip(), offset))
        offset = end + 1

    (kind, _), (size, size_at), (scale, scale_at) = fields
    if kind not in ("Pf", "PF"):
        raise FormatError(f"{path}: field 'kind' at byte 0 is {kind!r}, expected 'Pf' or 'PF'")
    channels = 1 if kind == "Pf" else 3
    try:
        width, height = (int(v) for v in size.split())
    except ValueError as e:
        raise FormatError(f"{path}: field 'size' at byte {size_at} is {size!r}") from e
    try:
        scale_value = float(scale)
    except ValueError as e:
        raise FormatError(f"{path}: field 'scale' at byte {scale_at} is {scale!r}") from e
    if scale_value == 0 or width < 1 or height < 1:
        raise FormatError(f"{path}: field 'scale'/'size' at byte {size_at} describes no image")

    dtype = "<f4" if scale_value < 0 else ">f4"
    count = width * height * channels
    if len(payload) - offset != count * 4:
        raise FormatError(
            f"{path}: field 'data' at byte {offset} has {len(payload) - offset} bytes, expected {count * 4}")
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).astype(np.float64)
    return data.reshape(height, width, channels)[::-1].copy()


# ---------------------------------------------------------------------------
# PNG
# ---------------------------------------------------------------------------

def read_png(path: str) -> np.ndarray:
    """Read an 8- or 16-bit PNG into a (height, width, channels) array in [0, 1]."""
    try:
        raw = iio.imread(path)
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: cannot decode PNG ({e})") from e
    if raw.dtype == np.uint8:
        data = raw.astype(np.float64) / 255.0
    elif raw.dtype == np.uint16:
        data = raw.astype(np.float64) / 65535.0
    else:
        raise FormatError(f"{path}: field 'bit depth' at byte 24 gives unsupported sample type {raw.dtype}")
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def read_color_png(path: str) -> ImageBuffer:
    """RGB image; gray is replicated and an alpha channel is dropped."""
    data = read_png(path)
    if data.shape[2] in (1, 2):
        data = np.repeat(data[:, :, :1], 3, axis=2)
    return ImageBuffer(data[:, :, :3])


def read_mask_png(path: str) -> np.ndarray:
    """(height, width) bool mask, True where the first channel is nonzero."""
    return read_png(path)[:, :, 0] > 0


def write_png(image: ImageBuffer, path: str) -> str:
    """Write values in [0, 1] as an 8-bit PNG (values outside are clipped)."""
    data = np.clip(image.data, 0.0, 1.0)
    pixels = np.round(data * 255.0).astype(np.uint8)
    if pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    buffer = iio.imwrite("<bytes>", pixels, extension=".png")
    return atomic_write_bytes(path, buffer)


def write_mask_png(mask: np.ndarray, path: str) -> str:
    pixels = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    return atomic_write_bytes(path, iio.imwrite("<bytes>", pixels, extension=".png"))


# ---------------------------------------------------------------------------
# Model documents
# ---------------------------------------------------------------------------

def model_to_dict(model) -> dict:
    if isinstance(model, GBDTModel):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "gbdt",
            "feature_names": list(model.feature_names),
            "base_score": float(model.base_score),
            "learning_rate": float(model.learning_rate),
            "max_depth": int(model.max_depth),
            "min_leaf": int(model.min_leaf),
            "train_mse": [float(v) for v in model.train_mse],
            "trees": [
                {
                    "feature": tree.feature.tolist(),
                    "threshold": tree.threshold.tolist(),
                    "left": tree.left.tolist(),
                    "right": tree.right.tolist(),
                    "value": tree.value.tolist(),
                }
                for tree in model.trees
            ],
        }
    if isinstance(model, LinearModel):
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "kind": "linear",
            "feature_names": list(model.feature_names),
            "weights": model.weights.tolist(),
            "intercept": float(model.intercept),
        }
    raise FormatError(f"Cannot serialize model of type {type(model).__name__}")


def model_from_dict(doc: dict, source: str = "<model>"):
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"{source}: field 'format' is {doc.get('format')!r}, expected {MODEL_FORMAT!r}")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"{source}: field 'version' is {doc.get('version')!r}, expected {MODEL_VERSION}")
    kind = doc.get("kind")
    try:
        names = tuple(doc["feature_names"])
        if kind == "linear":
            return LinearModel(np.array(doc["weights"], dtype=np.float64), float(doc["intercept"]), names)
        if kind == "gbdt":
            trees = [
                RegressionTree(
                    feature=np.array(t["feature"], dtype=np.int64),
                    threshold=np.array(t["threshold"], dtype=np.float64),
                    left=np.array(t["left"], dtype=np.int64),
                    right=np.array(t["right"], dtype=np.int64),
                    value=np.array(t["value"], dtype=np.float64),
                )
                for t in doc["trees"]
            ]
            return GBDTModel(float(doc["base_score"]), trees, float(doc["learning_rate"]), int(doc["max_depth"]),
                             int(doc["min_leaf"]), names, [float(v) for v in doc.get("train_mse", [])])
    except KeyError as e:
        raise FormatError(f"{source}: missing field {e.args[0]!r}") from e
    raise FormatError(f"{source}: field 'kind' is {kind!r}, expected 'gbdt' or 'linear'")


def save_model(model, path: str) -> str:
    text = json.dumps(model_to_dict(model), indent=1, sort_keys=True)
    atomic_write_bytes(path, (text + "\n").encode("utf-8"))
    logger.info("Model saved: %s", path)
    return path


def load_model(path: str):
    try:
        doc = json.loads(_read_bytes(path).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: not a JSON model document ({e})") from e
    return model_from_dict(doc, path)


# ---------------------------------------------------------------------------
# npz archives
# ---------------------------------------------------------------------------

def _save_npz(path: str, arrays: dict) -> str:
    buffer = io.BytesIO()
    with zipfile.ZipFile(buffer, "w", compression=zipfile.ZIP_STORED) as zf:
        for key in sorted(arrays):
            entry = io.BytesIO()
            np.lib.format.write_array(entry, np.asanyarray(arrays[key]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(key + ".npy", date_time=ZIP_TIMESTAMP), entry.getvalue())
    return atomic_write_bytes(path, buffer.getvalue())


def _load_npz(path: str, required: Sequence[str]) -> dict:
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise FormatError(f"{path}: cannot read archive ({e})") from e
    missing = [key for key in required if key not in arrays]
    if missing:
        raise FormatError(f"{path}: missing entries {missing}")
    return arrays


def _meta(doc) -> np.ndarray:
    return np.array(json.dumps(doc, sort_keys=True))


def _unmeta(arr: np.ndarray) -> dict:
    return json.loads(str(arr))


def save_log(log: ContributionLog, path: str) -> str:
    return _save_npz(path, {
        "gaussian_index": log.gaussian_index,
        "pixel": log.pixel,
        "alpha": log.alpha,
        "transmittance": log.transmittance,
        "order": log.order,
        "meta": _meta({"n_gaussians": log.n_gaussians, "width": log.width, "height": log.height,
                       "camera_id": log.camera_id}),
    })


def load_log(path: str) -> ContributionLog:
    arrays = _load_npz(path, ("gaussian_index", "pixel", "alpha", "transmittance", "order", "meta"))
    meta = _unmeta(arrays["meta"])
    return ContributionLog(
        gaussian_index=arrays["gaussian_index"].astype(np.int64),
        pixel=arrays["pixel"].astype(np.int64),
        alpha=arrays["alpha"].astype(np.float64),
        transmittance=arrays["transmittance"].astype(np.float64),
        order=arrays["order"].astype(np.int64),
        n_gaussians=int(meta["n_gaussians"]),
        width=int(meta["width"]),
        height=int(meta["height"]),
        camera_id=meta.get("camera_id", ""),
    )


def save_representations(representations: Sequence[PrimitiveRepresentation], path: str) -> str:
    """Store representations in manifest order."""
    arrays, records = {}, []
    for i, rep in enumerate(representations):
        arrays[f"values_{i:03d}"] = rep.values
        records.append({
            "name": rep.name,
            "kind": rep.kind.value,
            "agg": None if rep.agg is None else rep.agg.value,
            "include_alpha": rep.include_alpha,
            "directional": rep.directional,
            "kappa": rep.kappa,
            "direction_mode": rep.direction_mode.value,
        })
    arrays["meta"] = _meta({"version": FORMAT_VERSION, "representations": records})
    _save_npz(path, arrays)
    logger.info("Saved %d representations to %s", len(records), path)
    return path


def load_representations(path: str) -> list[PrimitiveRepresentation]:
    arrays = _load_npz(path, ("meta",))
    meta = _unmeta(arrays["meta"])
    if meta.get("version") != FORMAT_VERSION:
        raise FormatError(f"{path}: field 'version' is {meta.get('version')!r}, expected {FORMAT_VERSION}")
    reps = []
    for i, record in enumerate(meta["representations"]):
        key = f"values_{i:03d}"
        if key not in arrays:
            raise FormatError(f"{path}: missing entry {key!r} for representation {record['name']!r}")
        reps.append(PrimitiveRepresentation(
            name=record["name"],
            kind=RepresentationKind(record["kind"]),
            values=arrays[key],
            agg=None if record["agg"] is None else Aggregation(record["agg"]),
            include_alpha=bool(record["include_alpha"]),
            directional=bool(record["directional"]),
            kappa=record["kappa"],
            direction_mode=DirectionMode(record["direction_mode"]),
        ))
    return reps


def save_fisher(fisher: FisherDiagonal, path: str) -> str:
    return _save_npz(path, {name: fisher.group(name) for name in GROUPS})


def load_fisher(path: str) -> FisherDiagonal:
    arrays = _load_npz(path, GROUPS)
    return FisherDiagonal(*(arrays[name] for name in GROUPS))
