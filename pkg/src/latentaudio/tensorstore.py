"""Named-tensor container used for checkpoints, latents and embedding files.

File layout (version 1, all integers little-endian):

    bytes 0..7    magic  b"LATC0001"
    bytes 8..15   uint64 header length H
    bytes 16..16+H UTF-8 JSON header
    payload       raw tensor bytes, row-major float32, little-endian

JSON header::

    {
      "version": 1,
      "manifest": { ... caller-supplied JSON (config, metadata) ... },
      "tensors": {
        "<name>": {"shape": [d0, d1, ...], "dtype": "float32",
                   "offset": <bytes from payload start>, "nbytes": <int>}
      }
    }

Offsets are relative to the first payload byte (16 + H). Only float32 is
stored; callers convert on the way in/out. The format is append-only
stable: readers must ignore unknown header keys.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"LATC0001"
VERSION = 1


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], manifest: dict | None = None) -> None:
    """Write named float32 tensors plus a JSON manifest to ``path``."""
    entries = {}
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.isfinite(a).all():
            raise DataError(f"tensor {name!r} contains non-finite values")
        raw = a.tobytes()
        entries[name] = {
            "shape": list(a.shape),
            "dtype": "float32",
            "offset": offset,
            "nbytes": len(raw),
        }
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps(
        {"version": VERSION, "manifest": manifest or {}, "tensors": entries},
        ensure_ascii=False,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in blobs:
            f.write(raw)


def load_tensors(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a container; returns (tensors, manifest)."""
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise DataError(f"{path}: not a tensor container (bad magic)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DataError(f"{path}: malformed header: {e}") from e
    if header.get("version") != VERSION:
        raise DataError(f"{path}: unsupported container version {header.get('version')!r}")
    payload = data[16 + hlen :]
    tensors = {}
    for name, ent in header.get("tensors", {}).items():
        off, nbytes = ent["offset"], ent["nbytes"]
        if off + nbytes > len(payload):
            raise DataError(f"{path}: tensor {name!r} extends past end of file")
        flat = np.frombuffer(payload[off : off + nbytes], dtype="<f4")
        tensors[name] = flat.reshape(ent["shape"]).copy()
    return tensors, header.get("manifest", {})


def save_state_dict(path: str | Path, state: dict, manifest: dict | None = None) -> None:
    """Persist a torch ``state_dict`` (tensors converted to float32 numpy)."""
    tensors = {k: v.detach().cpu().numpy() for k, v in state.items()}
    save_tensors(path, tensors, manifest)


def load_state_dict(path: str | Path):
    """Load a container back into a dict of torch tensors plus manifest."""
    import torch

    tensors, manifest = load_tensors(path)
    return {k: torch.from_numpy(v) for k, v in tensors.items()}, manifest


def state_hash(state: dict) -> str:
    """SHA-256 over name-sorted tensor bytes; detects any weight change."""
    h = hashlib.sha256()
    for name in sorted(state):
        v = state[name]
        arr = v.detach().cpu().numpy() if hasattr(v, "detach") else np.asarray(v)
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(arr, dtype=np.float32).tobytes())
    return h.hexdigest()
