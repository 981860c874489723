"""Checkpoint serialization.

A checkpoint is a JSON manifest (config dict, parameter names, shapes,
dtype, byte offsets) next to a raw little-endian float binary blob.
Round-trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

MANIFEST_SUFFIX = ".json"
BLOB_SUFFIX = ".bin"


def save_arrays(path: str | Path, config: dict, arrays: Dict[str, np.ndarray]) -> None:
    """Write `path.json` + `path.bin`. Arrays are stored in name order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype not in (np.float32, np.float64):
            raise ValueError(f"array '{name}' must be float32/float64, got {arr.dtype}")
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    manifest = {"config": config, "arrays": entries, "total_bytes": offset}
    with open(path.with_suffix(MANIFEST_SUFFIX), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
    with open(path.with_suffix(BLOB_SUFFIX), "wb") as f:
        f.write(b"".join(blobs))


def load_arrays(path: str | Path) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    with open(path.with_suffix(MANIFEST_SUFFIX)) as f:
        manifest = json.load(f)
    raw = Path(path.with_suffix(BLOB_SUFFIX)).read_bytes()
    if len(raw) != manifest["total_bytes"]:
        raise ValueError(
            f"blob size mismatch: manifest says {manifest['total_bytes']}, "
            f"file has {len(raw)}"
        )
    arrays: Dict[str, np.ndarray] = {}
    for e in manifest["arrays"]:
        dt = np.dtype(e["dtype"]).newbyteorder("<")
        arr = np.frombuffer(
            raw, dtype=dt, count=int(np.prod(e["shape"], dtype=np.int64)),
            offset=e["offset"],
        ).reshape(e["shape"])
        arrays[e["name"]] = arr.astype(np.dtype(e["dtype"]), copy=True)
    return manifest["config"], arrays
