"""Self-contained binary checkpoint container.

Layout: 8-byte magic, u32 format version, u64 header length, UTF-8 JSON
header, then one framed blob per array in header-index order. Each blob is
framed as u32 ndim followed by u64 dims, then raw little-endian values. The
header carries dtype, shape, and a sha256 digest per array, so a load either
reproduces the saved bytes exactly or fails loudly; there is no tolerant path.

Writes go to a temp file in the target directory and are renamed into place,
so a crash never leaves a half-written checkpoint under the final name.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"MOCLIPCK"
FORMAT_VERSION = 1

_DTYPES = {"float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    """Unreadable, truncated, or corrupted checkpoint file."""


def _canonical(arr: np.ndarray) -> tuple[np.ndarray, str]:
    kind = np.asarray(arr).dtype.kind
    if kind == "f":
        name = "float64"
    elif kind in ("i", "u", "b"):
        name = "int64"
    else:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    # np.ascontiguousarray would widen 0-d arrays to shape (1,)
    return np.asarray(arr, dtype=_DTYPES[name], order="C"), name


def save_checkpoint(path: str | Path, header: dict,
                    arrays: dict[str, np.ndarray]) -> None:
    """Serialize header metadata plus named arrays, atomically."""
    path = Path(path)
    index = []
    blobs = []
    for name in arrays:
        data, dtype_name = _canonical(arrays[name])
        raw = data.tobytes()
        index.append({
            "name": name,
            "dtype": dtype_name,
            "shape": list(data.shape),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        frame = struct.pack("<I", data.ndim)
        frame += struct.pack(f"<{data.ndim}Q", *data.shape) if data.ndim else b""
        blobs.append(frame + raw)

    full_header = dict(header)
    full_header["arrays"] = index
    header_bytes = json.dumps(full_header, sort_keys=True).encode()

    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", FORMAT_VERSION))
            fh.write(struct.pack("<Q", len(header_bytes)))
            fh.write(header_bytes)
            for blob in blobs:
                fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint, verifying structure and every array digest."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint file does not exist: {path}")
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC), "magic") != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} unsupported, "
                f"expected {FORMAT_VERSION}"
            )
        (header_len,) = struct.unpack("<Q", _read_exact(fh, 8, "header length"))
        try:
            header = json.loads(_read_exact(fh, header_len, "header"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc

        arrays: dict[str, np.ndarray] = {}
        for entry in header.get("arrays", []):
            name = entry["name"]
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, f"{name} ndim"))
            dims = struct.unpack(f"<{ndim}Q", _read_exact(fh, 8 * ndim, f"{name} dims")) \
                if ndim else ()
            if list(dims) != list(entry["shape"]):
                raise CheckpointError(
                    f"array {name!r}: framed shape {list(dims)} != "
                    f"header shape {entry['shape']}"
                )
            dtype = _DTYPES.get(entry["dtype"])
            if dtype is None:
                raise CheckpointError(f"array {name!r}: unknown dtype {entry['dtype']!r}")
            count = int(np.prod(dims, dtype=np.int64)) if dims else 1
            raw = _read_exact(fh, count * 8, f"{name} data")
            digest = hashlib.sha256(raw).hexdigest()
            if digest != entry["sha256"]:
                raise CheckpointError(
                    f"array {name!r} failed integrity check "
                    f"(stored {entry['sha256'][:12]}, got {digest[:12]})"
                )
            arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("checkpoint has trailing bytes past the last array")
    return header, arrays
