"""Flat binary container: a JSON header followed by a float64 payload.

Layout::

    uint64 (little-endian)  header length in bytes
    header                  UTF-8 JSON object
    payload                 little-endian float64 values

The header carries an ``entries`` list of ``{"name", "shape", "offset"}``
records, where ``offset`` counts bytes from the start of the payload.
Extra top-level header keys are preserved for callers.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import ParseError

_LEN = struct.Struct("<Q")
_DTYPE = np.dtype("<f8")


def write_container(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        a = np.asarray(arr, dtype=_DTYPE)
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes(order="C"))
        offset += a.nbytes
    header = dict(meta or {})
    header["entries"] = entries
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return ``(arrays, header)``; arrays keep the file's entry order."""
    raw = Path(path).read_bytes()
    if len(raw) < _LEN.size:
        raise ParseError(f"{path}: truncated container header")
    (n,) = _LEN.unpack_from(raw, 0)
    start = _LEN.size + n
    if start > len(raw):
        raise ParseError(f"{path}: header length {n} exceeds file size")
    try:
        header = json.loads(raw[_LEN.size:start].decode("utf-8"))
        entries = header["entries"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{path}: bad container header ({exc})") from None
    payload = memoryview(raw)[start:]
    arrays = {}
    for e in entries:
        shape = tuple(int(s) for s in e["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        off = int(e["offset"])
        if off < 0 or off + count * _DTYPE.itemsize > len(payload):
            raise ParseError(f"{path}: entry {e['name']!r} runs past end of payload")
        arrays[e["name"]] = np.frombuffer(payload, dtype=_DTYPE, count=count, offset=off).reshape(shape).astype(np.float64)
    return arrays, header
