"""On-disk formats.

TensorFile (``.bin``)::

    magic   4s   b"ISON"
    version u16
    dtype   u8   1 = f32, 2 = f64
    pad     u8
    rank    u64
    dims    rank * u64
    payload row-major, little-endian
    crc32   u32  over everything above

Bundle (normalizers, linear layers): a JSON manifest followed by TensorFile
blobs, each listed in the manifest with offset, length and sha256, and a
trailing CRC32 over the whole file::

    magic "ISNB" | version u16 | manifest_len u64 | manifest | blobs | crc32 u32

All integers are little-endian. Writers go through :func:`atomic_write`.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .errors import ChecksumFailure, FormatError, ParseError, VersionMismatch

TENSOR_MAGIC = b"ISON"
BUNDLE_MAGIC = b"ISNB"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sHBxQ")
_BUNDLE_HEADER = struct.Struct("<4sHQ")
_CRC = struct.Struct("<I")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path, data: bytes) -> None:
    """Write via a temp file in the same directory and rename into place."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


# -- tensors -----------------------------------------------------------------


def encode_tensor(array, dtype: str | None = None) -> bytes:
    a = np.asarray(array)
    if dtype is not None:
        a = a.astype(dtype)
    elif a.dtype not in _DTYPE_CODES:
        a = a.astype(np.float64)
    code = _DTYPE_CODES[a.dtype]
    header = _HEADER.pack(TENSOR_MAGIC, FORMAT_VERSION, code, a.ndim)
    dims = struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = np.ascontiguousarray(a, dtype=_DTYPES[code]).tobytes()
    body = header + dims + payload
    return body + _CRC.pack(zlib.crc32(body))


def decode_tensor(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size + _CRC.size:
        raise ChecksumFailure("tensor file is truncated")
    magic, version, code, rank = _HEADER.unpack_from(data, 0)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"tensor format version {version}, expected {FORMAT_VERSION}")
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dims_end = _HEADER.size + 8 * rank
    if len(data) < dims_end + _CRC.size:
        raise ChecksumFailure("tensor file is truncated")
    dims = struct.unpack_from(f"<{rank}Q", data, _HEADER.size)
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) != dims_end + nbytes + _CRC.size:
        raise ChecksumFailure(
            f"declared payload of {nbytes} bytes does not match file length {len(data)}"
        )
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[: len(data) - _CRC.size]) != crc:
        raise ChecksumFailure("tensor CRC32 mismatch")
    arr = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=dims_end)
    return arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, array, dtype: str | None = None) -> str:
    """Write a TensorFile atomically; returns its sha256."""
    data = encode_tensor(array, dtype)
    atomic_write(path, data)
    return sha256(data)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


# -- bundles -----------------------------------------------------------------


def encode_bundle(manifest: dict, tensors: dict[str, np.ndarray]) -> bytes:
    blobs = []
    entries = []
    offset = 0
    for name, arr in tensors.items():
        blob = encode_tensor(arr)
        entries.append({
            "name": name,
            "offset": offset,
            "length": len(blob),
            "sha256": sha256(blob),
            "shape": list(np.shape(arr)),
        })
        blobs.append(blob)
        offset += len(blob)
    doc = dict(manifest)
    doc["format_version"] = FORMAT_VERSION
    doc["tensors"] = entries
    text = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    body = _BUNDLE_HEADER.pack(BUNDLE_MAGIC, FORMAT_VERSION, len(text)) + text + b"".join(blobs)
    return body + _CRC.pack(zlib.crc32(body))


def decode_bundle(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _BUNDLE_HEADER.size + _CRC.size:
        raise ChecksumFailure("bundle is truncated")
    magic, version, mlen = _BUNDLE_HEADER.unpack_from(data, 0)
    if magic != BUNDLE_MAGIC:
        raise FormatError(f"bad bundle magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"bundle format version {version}, expected {FORMAT_VERSION}")
    (crc,) = _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(data[: len(data) - _CRC.size]) != crc:
        raise ChecksumFailure("bundle CRC32 mismatch (truncated or corrupted)")
    start = _BUNDLE_HEADER.size
    try:
        manifest = json.loads(data[start:start + mlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable bundle manifest: {exc}") from exc
    payload = start + mlen
    tensors = {}
    for entry in manifest.get("tensors", []):
        lo = payload + entry["offset"]
        blob = data[lo:lo + entry["length"]]
        if sha256(blob) != entry["sha256"]:
            raise ChecksumFailure(f"digest mismatch for tensor {entry['name']!r}")
        tensors[entry["name"]] = decode_tensor(blob)
    return manifest, tensors


# -- manifests with sidecar files --------------------------------------------


def write_manifest(path, manifest: dict, tensors: dict[str, np.ndarray]) -> dict:
    """Write ``tensors`` as sidecar TensorFiles next to a JSON manifest.

    Sidecars are named ``<stem>.<name>.bin`` and referenced by relative path
    and sha256 digest.
    """
    path = Path(path)
    refs = {}
    for name, arr in tensors.items():
        side = path.with_name(f"{path.stem}.{name}.bin")
        refs[name] = {"path": side.name, "sha256": write_tensor(side, arr)}
    doc = dict(manifest)
    doc["format_version"] = FORMAT_VERSION
    doc["tensors"] = refs
    atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode())
    return doc


def read_manifest(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: manifest version {doc.get('format_version')}")
    tensors = {}
    for name, ref in doc.get("tensors", {}).items():
        data = (path.parent / ref["path"]).read_bytes()
        if sha256(data) != ref["sha256"]:
            raise ChecksumFailure(f"{path}: digest mismatch for {ref['path']}")
        tensors[name] = decode_tensor(data)
    return doc, tensors


# -- CSV ---------------------------------------------------------------------


def csv_import(path, has_header: bool = False) -> np.ndarray:
    """Read a rectangular numeric CSV into an N x C float64 matrix."""
    rows = []
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if has_header and lineno == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"expected {width} columns, found {len(row)}", lineno)
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                bad = next(c for c in row if not _is_float(c))
                raise ParseError(f"non-numeric cell {bad!r}", lineno) from None
    if not rows:
        raise ParseError("no data rows", 0)
    return np.array(rows, dtype=np.float64)


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def csv_export(path, array, header: list[str] | None = None) -> None:
    a = np.asarray(array, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    lines = []
    if header:
        lines.append(",".join(header))
    lines.extend(",".join(repr(float(v)) for v in row) for row in a)
    atomic_write(path, ("\n".join(lines) + "\n").encode())
