"""Run manifests written beside every command output.

Manifest JSON:
    command       CLI subcommand
    flags         every parsed flag value
    inputs        [{"path", "sha256"}] for each input file (directories
                  are expanded to their files in sorted order)
    outputs       paths produced by the run
    config_hash   sha256 of the canonical JSON of command, flags and inputs
    versions      tool and library versions
    created_at    UTC timestamp

The config hash changes whenever a flag value or an input file's content
changes; created_at and versions are not part of it.
"""

import hashlib
import json
import logging
import os
from datetime import datetime, timezone
from importlib import metadata
from typing import Iterable, Optional, Sequence

from src.formats import atomic_write_bytes

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_SUFFIX = ".manifest.json"
DIRECTORY_MANIFEST = "run_manifest.json"
TRACKED_PACKAGES = ("numpy", "plyfile", "imageio", "matplotlib", "openpyxl", "tqdm")
CHUNK_SIZE = 1 << 20


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(CHUNK_SIZE), b""):
            digest.update(chunk)
    return digest.hexdigest()


def expand_inputs(paths: Iterable[str]) -> list[str]:
    """Files named by the given paths, directories walked in sorted order."""
    files = []
    for path in paths:
        if os.path.isdir(path):
            for root, dirs, names in os.walk(path):
                dirs.sort()
                for name in sorted(names):
                    if not name.endswith(MANIFEST_SUFFIX) and name != DIRECTORY_MANIFEST:
                        files.append(os.path.join(root, name))
        elif os.path.isfile(path):
            files.append(path)
    return files


def config_hash(command: str, flags: dict, inputs: Sequence[dict]) -> str:
    canonical = json.dumps({"command": command, "flags": flags, "inputs": list(inputs)},
                           sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def package_versions(tool_version: str) -> dict:
    versions = {"tool": tool_version}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


def manifest_path_for(output: str) -> str:
    """Where the manifest for an output file or directory goes."""
    if os.path.isdir(output):
        return os.path.join(output, DIRECTORY_MANIFEST)
    return output + MANIFEST_SUFFIX


def build_manifest(
    command: str,
    flags: dict,
    inputs: Iterable[str],
    outputs: Sequence[str] = (),
    tool_version: str = "",
) -> dict:
    records = [{"path": path, "sha256": file_sha256(path)} for path in expand_inputs(inputs)]
    return {
        "version": MANIFEST_VERSION,
        "command": command,
        "flags": flags,
        "inputs": records,
        "outputs": list(outputs),
        "config_hash": config_hash(command, flags, records),
        "versions": package_versions(tool_version),
        "created_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }


def write_run_manifest(
    output: str,
    command: str,
    flags: dict,
    inputs: Iterable[str],
    outputs: Optional[Sequence[str]] = None,
    tool_version: str = "",
) -> str:
    """Write the manifest for one command run next to its output.

    Returns:
        Path to the manifest file.
    """
    manifest = build_manifest(command, flags, inputs, outputs if outputs is not None else [output], tool_version)
    path = manifest_path_for(output)
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n").encode("utf-8"))
    logger.info("Run manifest %s (config %s)", path, manifest["config_hash"][:12])
    return path
