"""Named-array archives with an embedded JSON manifest.

All on-disk containers (model assets, pose libraries, checkpoints) share this
layout: an uncompressed ``.npz`` file whose ``__manifest__`` entry is a JSON
string listing the format tag plus each array's dtype and shape.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MANIFEST_KEY = "__manifest__"


class ArchiveError(ValueError):
    """Raised when an archive is malformed. ``field`` names the offending entry."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def save_archive(
    path: str | Path,
    arrays: Mapping[str, np.ndarray],
    fmt: str,
    extra: Mapping[str, Any] | None = None,
) -> Path:
    path = Path(path)
    arrays = {k: np.asarray(v) for k, v in arrays.items()}
    manifest = {
        "format": fmt,
        "arrays": {k: {"dtype": str(v.dtype), "shape": list(v.shape)} for k, v in arrays.items()},
    }
    if extra:
        manifest["meta"] = dict(extra)
    payload = dict(arrays)
    payload[MANIFEST_KEY] = np.array(json.dumps(manifest, sort_keys=True))
    path.parent.mkdir(parents=True, exist_ok=True)
    # np.savez appends .npz to bare names; write through a handle to keep the exact path.
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_archive(path: str | Path, fmt: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Load an archive and check its format tag and declared shapes.

    Returns the arrays and the manifest ``meta`` dictionary.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with np.load(path, allow_pickle=False) as data:
        if MANIFEST_KEY not in data.files:
            raise ArchiveError(f"{path}: missing manifest", field=MANIFEST_KEY)
        manifest = json.loads(str(data[MANIFEST_KEY]))
        arrays = {k: data[k] for k in data.files if k != MANIFEST_KEY}
    if manifest.get("format") != fmt:
        raise ArchiveError(f"{path}: format {manifest.get('format')!r}, expected {fmt!r}", field="format")
    for name, info in manifest.get("arrays", {}).items():
        if name not in arrays:
            raise ArchiveError(f"{path}: manifest lists {name!r} but the array is missing", field=name)
        if list(arrays[name].shape) != info["shape"]:
            raise ArchiveError(f"{path}: {name} has shape {arrays[name].shape}, manifest says {info['shape']}",
                               field=name)
    return arrays, manifest.get("meta", {})
