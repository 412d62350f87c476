"""Binary container for named float32 arrays plus a JSON metadata block.

Layout::

    b"SGADCKPT" | u16 version | u32 header length | header (UTF-8 JSON) | payload

All integers are little-endian.  The header maps every array name to its
shape and byte offset into the payload; the payload holds the arrays as
little-endian float32 in header order.  Keys are serialised sorted so equal
inputs give equal bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from typing import Any, Mapping

import numpy as np

MAGIC = b"SGADCKPT"
VERSION = 1
_PREFIX = struct.Struct("<8sHI")
_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    """Base class for container problems."""


class FormatError(CheckpointError):
    """Not a container, or a malformed header."""


class VersionError(CheckpointError):
    """Container written by an unsupported format version."""


class TruncatedError(CheckpointError):
    """The file ends before the payload the header promises."""


def dumps(arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> bytes:
    entries = {}
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.require(arrays[name], _DTYPE, "C")
        entries[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"arrays": entries, "meta": dict(meta or {})}, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes, source: str = "<bytes>") -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < _PREFIX.size:
        if not MAGIC.startswith(blob[:8]):
            raise FormatError(f"{source}: not a checkpoint (bad magic)")
        raise TruncatedError(f"{source}: file ends inside the fixed header ({len(blob)} bytes)")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (magic {magic!r}, expected {MAGIC!r})")
    if version != VERSION:
        raise VersionError(f"{source}: format version {version}, this build reads version {VERSION}")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise TruncatedError(f"{source}: header claims {hlen} bytes, only {len(blob) - _PREFIX.size} present")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
        entries = header["arrays"]
        meta = header.get("meta", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{source}: unreadable header ({exc})") from exc
    payload = memoryview(blob)[start:]
    arrays = {}
    for name, entry in entries.items():
        try:
            shape = tuple(int(d) for d in entry["shape"])
            offset = int(entry["offset"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{source}: bad header entry for {name!r}") from exc
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * _DTYPE.itemsize
        if offset < 0 or end > len(payload):
            raise TruncatedError(f"{source}: array {name!r} needs bytes {offset}..{end}, "
                                 f"payload has {len(payload)}")
        arrays[name] = np.frombuffer(payload[offset:end], dtype=_DTYPE).reshape(shape).astype(np.float32)
    return arrays, meta


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray],
         meta: Mapping[str, Any] | None = None) -> None:
    """Write atomically: a crash never leaves a half-written file at ``path``."""
    blob = dumps(arrays, meta)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    return loads(blob, str(path))
