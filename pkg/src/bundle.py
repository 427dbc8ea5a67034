"""Scene bundles: a Gaussian PLY plus a cameras document with its images.

cameras.json:
    {
      "version": 1,
      "cameras": [
        {"id": "cam000", "fx": ..., "fy": ..., "cx": ..., "cy": ...,
         "width": 128, "height": 128,
         "rotation": [9 floats, row-major world-to-camera],
         "translation": [3 floats],
         "role": "train" | "holdout-train-reg" | "holdout-eval",
         "color": "images/cam000.png",
         "depth": "images/cam000.pfm",          (optional)
         "mask": "images/cam000_mask.png",      (optional)
         "object_mask": "images/cam000_object.png"}   (optional)
      ]
    }

Image paths are relative to the directory holding cameras.json. Every
camera needs a color image; depth and masks are optional. Non-finite
depth samples are treated as missing (0).
"""

import json
import logging
import os
from typing import NamedTuple, Optional

import numpy as np

from src.formats import (
    FormatError,
    atomic_write_bytes,
    read_color_png,
    read_mask_png,
    read_pfm,
    write_mask_png,
    write_pfm,
    write_png,
)
from src.ply import load_ply, write_ply
from src.scene import Camera, GaussianScene, ImageBuffer, SceneError, ViewRole, ViewSet

logger = logging.getLogger(__name__)

CAMERAS_VERSION = 1
SCENE_FILE = "scene.ply"
CAMERAS_FILE = "cameras.json"
IMAGE_DIR = "images"
CAMERA_FIELDS = ("id", "fx", "fy", "cx", "cy", "width", "height", "rotation", "translation", "role", "color")


class BundleError(Exception):
    """Raised when a scene bundle is incomplete or inconsistent."""


class SceneBundle(NamedTuple):
    name: str
    scene: GaussianScene
    views: ViewSet


def bundle_paths(directory: str) -> tuple:
    """(scene path, cameras path) of a bundle written by write_scene_bundle."""
    return os.path.join(directory, SCENE_FILE), os.path.join(directory, CAMERAS_FILE)


def _camera_from_record(record: dict, index: int, source: str) -> Camera:
    missing = [f for f in CAMERA_FIELDS if f not in record]
    if missing:
        raise BundleError(f"{source}: camera {index} lacks fields {missing}")
    try:
        return Camera(
            fx=float(record["fx"]),
            fy=float(record["fy"]),
            cx=float(record["cx"]),
            cy=float(record["cy"]),
            width=int(record["width"]),
            height=int(record["height"]),
            rotation=np.array(record["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(record["translation"], dtype=np.float64).reshape(3),
            camera_id=str(record["id"]),
        )
    except (TypeError, ValueError, SceneError) as e:
        raise BundleError(f"{source}: camera {index} ({record.get('id')!r}) is invalid: {e}") from e


def _resolve(base: str, relative: str, camera_id: str, kind: str) -> str:
    path = os.path.join(base, relative)
    if not os.path.isfile(path):
        raise BundleError(f"Camera {camera_id!r}: {kind} image {path} does not exist")
    return path


def load_cameras(cameras_path: str) -> tuple:
    """Parse a cameras document into (records, cameras)."""
    try:
        with open(cameras_path, encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise BundleError(f"{cameras_path}: cannot read ({e.strerror})") from e
    except json.JSONDecodeError as e:
        raise FormatError(f"{cameras_path}: field 'cameras' at byte {e.pos}: {e.msg}") from e
    if doc.get("version") != CAMERAS_VERSION:
        raise BundleError(f"{cameras_path}: unsupported version {doc.get('version')!r}")
    records = doc.get("cameras")
    if not isinstance(records, list) or not records:
        raise BundleError(f"{cameras_path}: no cameras listed")
    cameras = [_camera_from_record(r, i, cameras_path) for i, r in enumerate(records)]
    return records, cameras


def _load_depth(path: str, camera: Camera) -> ImageBuffer:
    data = read_pfm(path)
    if data.shape[2] != 1:
        raise BundleError(f"Camera {camera.camera_id!r}: depth {path} has {data.shape[2]} channels")
    bad = ~np.isfinite(data)
    if np.any(bad):
        logger.warning("Camera %s: %d non-finite depth samples treated as missing", camera.camera_id, int(bad.sum()))
        data = np.where(bad, 0.0, data)
    return ImageBuffer(data)


def load_scene_bundle(scene_path: str, cameras_path: str, name: Optional[str] = None) -> SceneBundle:
    """Load a scene and its views.

    Args:
        scene_path: Gaussian PLY file.
        cameras_path: cameras.json document.
        name: Scene name for reports; defaults to the bundle directory name.

    Raises:
        FormatError: On unparseable files.
        BundleError: On missing images or inconsistent camera records.
    """
    scene = load_ply(scene_path)
    records, cameras = load_cameras(cameras_path)
    base = os.path.dirname(os.path.abspath(cameras_path))
    colors, depths, masks, objects, roles = [], [], [], [], []
    for record, cam in zip(records, cameras):
        try:
            roles.append(ViewRole(record["role"]).value)
        except ValueError:
            raise BundleError(f"Camera {cam.camera_id!r}: unknown role {record['role']!r}") from None
        color = read_color_png(_resolve(base, record["color"], cam.camera_id, "color"))
        if not color.matches(cam):
            raise BundleError(f"Camera {cam.camera_id!r}: color image is {color.width}x{color.height}, "
                              f"camera is {cam.width}x{cam.height}")
        colors.append(color)
        depths.append(_load_depth(_resolve(base, record["depth"], cam.camera_id, "depth"), cam)
                      if record.get("depth") else None)
        masks.append(read_mask_png(_resolve(base, record["mask"], cam.camera_id, "mask"))
                     if record.get("mask") else None)
        objects.append(read_mask_png(_resolve(base, record["object_mask"], cam.camera_id, "object mask"))
                       if record.get("object_mask") else None)

    try:
        views = ViewSet(cameras=cameras, gt_color=colors, roles=roles, gt_depth=depths,
                        masks=masks, object_masks=objects)
    except SceneError as e:
        raise BundleError(f"{cameras_path}: {e}") from e
    if name is None:
        name = os.path.basename(base) or "scene"
    logger.info("Bundle %s: %d Gaussians, %d views (%d train, %d holdout)", name, len(scene), len(views),
                roles.count(ViewRole.TRAIN.value), len(roles) - roles.count(ViewRole.TRAIN.value))
    return SceneBundle(name, scene, views)


def camera_record(camera: Camera, role: str) -> dict:
    return {
        "id": camera.camera_id,
        "fx": camera.fx,
        "fy": camera.fy,
        "cx": camera.cx,
        "cy": camera.cy,
        "width": camera.width,
        "height": camera.height,
        "rotation": camera.rotation.reshape(-1).tolist(),
        "translation": camera.translation.tolist(),
        "role": role,
    }


def write_scene_bundle(directory: str, scene: GaussianScene, views: ViewSet) -> tuple:
    """Write scene.ply, cameras.json and images/ into a directory.

    Returns:
        (scene path, cameras path)
    """
    scene_path, cameras_path = bundle_paths(directory)
    os.makedirs(os.path.join(directory, IMAGE_DIR), exist_ok=True)
    write_ply(scene, scene_path)
    records = []
    for i, cam in enumerate(views.cameras):
        record = camera_record(cam, views.roles[i])
        stem = os.path.join(IMAGE_DIR, cam.camera_id)
        record["color"] = stem + ".png"
        write_png(views.gt_color[i], os.path.join(directory, record["color"]))
        if views.gt_depth[i] is not None:
            record["depth"] = stem + ".pfm"
            write_pfm(views.gt_depth[i], os.path.join(directory, record["depth"]))
        if views.masks[i] is not None:
            record["mask"] = stem + "_mask.png"
            write_mask_png(views.masks[i], os.path.join(directory, record["mask"]))
        if views.object_masks[i] is not None:
            record["object_mask"] = stem + "_object.png"
            write_mask_png(views.object_masks[i], os.path.join(directory, record["object_mask"]))
        records.append(record)
    text = json.dumps({"version": CAMERAS_VERSION, "cameras": records}, indent=2)
    atomic_write_bytes(cameras_path, (text + "\n").encode("utf-8"))
    logger.info("Bundle written to %s (%d views)", directory, len(records))
    return scene_path, cameras_path
