"""Versioned binary container shared by corpus, checkpoint and index files.

Layout::

    magic (5 ASCII bytes) | header length (u64 little endian) | header JSON | array blobs

The JSON header carries free-form metadata plus a table of arrays
(name, dtype, shape, offset, nbytes). Offsets are relative to the end of the
header. Keys are sorted so identical content gives identical bytes.
"""

from __future__ import annotations

import json
import struct
import subprocess
from pathlib import Path

import numpy as np

from .errors import FormatError

CORPUS_MAGIC = b"SBRC1"
MODEL_MAGIC = b"SBRM1"
INDEX_MAGIC = b"SBRI1"


def build_id() -> str:
    """Package version plus the git revision when run from a checkout."""
    from . import __version__

    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"dndrec-{__version__}" + (f"+g{rev}" if rev else "")


def write_container(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    table = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "arrays": table}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def read_container(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {blob[:5]!r}")
    try:
        (hlen,) = struct.unpack("<Q", blob[5:13])
        header = json.loads(blob[13:13 + hlen])
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    base = 13 + hlen
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = blob[start:start + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise FormatError(f"{path}: truncated array {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(
            entry["shape"]).copy()
    return header["meta"], arrays
