"""Container file for named float64 arrays.

Layout::

    b"TMPCKPT1"                      magic
    <Q                               manifest length in bytes
    manifest                         UTF-8 JSON: {"entries": [...], "meta": {...}}
    payload                          raw little-endian float64, C order

Each manifest entry is ``{"name", "shape", "offset", "nbytes"}`` with the
offset counted from the start of the payload. ``meta`` carries anything
JSON-serialisable (hyperparameters, optimizer step, RNG state).
"""
import json
import logging
import os
import struct
from pathlib import Path
from typing import Any, Mapping, Optional, Union

import numpy as np

_log = logging.getLogger(__name__)

MAGIC = b"TMPCKPT1"
_DTYPE = np.dtype("<f8")


def save_checkpoint(
    path: Union[str, Path],
    tensors: Mapping[str, Any],
    meta: Optional[dict] = None,
) -> Path:
    """Write ``tensors`` and ``meta`` to ``path``; replaces any existing file."""
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, value in tensors.items():
        data = np.ascontiguousarray(np.asarray(value, dtype=np.float64)).astype(_DTYPE, copy=False)
        raw = data.tobytes(order="C")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)

    manifest = json.dumps({"entries": entries, "meta": meta or {}}).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)
    os.replace(tmp, path)
    _log.debug("Wrote checkpoint %s (%d entries, %d payload bytes)", path, len(entries), offset)
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple[dict[str, np.ndarray], dict]:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Returns:
        ``(tensors, meta)`` with tensors in manifest order.

    Raises:
        FileNotFoundError: ``path`` does not exist.
        ValueError:        Not a checkpoint, or a truncated one.
    """
    blob = Path(path).read_bytes()
    header = len(MAGIC) + 8
    if len(blob) < header or blob[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    (manifest_len,) = struct.unpack("<Q", blob[len(MAGIC):header])
    try:
        manifest = json.loads(blob[header:header + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path} has a corrupt manifest") from exc

    payload = memoryview(blob)[header + manifest_len:]
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["entries"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ValueError(f"{path} is truncated at entry {entry['name']!r}")
        values = np.frombuffer(payload[start:start + nbytes], dtype=_DTYPE)
        tensors[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
    return tensors, manifest.get("meta", {})
