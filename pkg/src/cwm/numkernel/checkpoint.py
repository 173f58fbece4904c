"""The ``cwm-ckpt-1`` on-disk checkpoint format.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
The binary file is every tensor, in manifest order, as little-endian float32
in row-major layout.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = "cwm-ckpt-1"


def config_hash(config: dict) -> str:
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path / "weights.bin", "wb") as fh:
        for name, arr in tensors.items():
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "nbytes": len(buf)})
            fh.write(buf)
            offset += len(buf)
    manifest = {
        "format": FORMAT_VERSION,
        "config": config,
        "config_hash": config_hash(config),
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_file}")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("format") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {manifest.get('format')!r}")
    raw = (path / "weights.bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(e["shape"])
        tensors[e["name"]] = arr
    return tensors, manifest
