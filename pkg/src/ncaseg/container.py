"""NCAT binary tensor container.

Two layouts share the 5-byte ``NCAT`` + version prefix:

* single tensor:  magic ``NCAT`` | version u8=1 | dtype u8=1 (f32) | rank u8 |
  rank x u32 little-endian extents | raw little-endian f32 payload
* sectioned file: magic ``NCAT`` | version u8=1 | repeated sections until EOF,
  each ``name_len u16 | name utf-8 | dtype u8=1 | rank u8 | extents | payload``

Readers reject unknown magic/version/dtype, truncated payloads, trailing
bytes, and non-finite values. All writes are deterministic byte-for-byte.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"NCAT"
VERSION = 1
DTYPE_F32 = 1

__all__ = ["ContainerError", "write_tensor", "read_tensor", "write_sections", "read_sections"]


class ContainerError(ValueError):
    """Malformed or unsupported NCAT data."""


def _encode_array(arr: np.ndarray) -> bytes:
    if arr.dtype != np.float32:
        raise ContainerError(f"only float32 tensors are serializable, got {arr.dtype}")
    if arr.ndim < 1 or arr.ndim > 255:
        raise ContainerError(f"unsupported rank {arr.ndim}")
    if any(e <= 0 or e > 0xFFFFFFFF for e in arr.shape):
        raise ContainerError(f"extents must be positive u32, got {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContainerError("refusing to serialize non-finite values")
    header = struct.pack("<BB", DTYPE_F32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _decode_array(buf: bytes, offset: int, what: str) -> tuple[np.ndarray, int]:
    if offset + 2 > len(buf):
        raise ContainerError(f"truncated header in {what}")
    dtype_code, rank = struct.unpack_from("<BB", buf, offset)
    offset += 2
    if dtype_code != DTYPE_F32:
        raise ContainerError(f"unknown dtype code {dtype_code} in {what}")
    if rank < 1:
        raise ContainerError(f"invalid rank {rank} in {what}")
    if offset + 4 * rank > len(buf):
        raise ContainerError(f"truncated extents in {what}")
    shape = struct.unpack_from(f"<{rank}I", buf, offset)
    offset += 4 * rank
    if any(e == 0 for e in shape):
        raise ContainerError(f"zero extent in {what}")
    count = 1
    for e in shape:
        count *= e
    nbytes = 4 * count
    if offset + nbytes > len(buf):
        raise ContainerError(f"truncated payload in {what}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(shape)
    arr = arr.astype(np.float32, copy=True)
    if not np.isfinite(arr).all():
        raise ContainerError(f"non-finite values in {what}")
    return arr, offset + nbytes


def _check_prefix(buf: bytes, path: str) -> int:
    if len(buf) < 5:
        raise ContainerError(f"{path}: too short to be an NCAT file")
    if buf[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {buf[:4]!r}")
    if buf[4] != VERSION:
        raise ContainerError(f"{path}: unknown format version {buf[4]}")
    return 5


def write_tensor(path, arr: np.ndarray) -> None:
    """Write a single float32 tensor to ``path``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<B", VERSION) + _encode_array(arr))


def read_tensor(path) -> np.ndarray:
    """Read a single-tensor NCAT file."""
    with open(path, "rb") as fh:
        buf = fh.read()
    offset = _check_prefix(buf, str(path))
    arr, offset = _decode_array(buf, offset, str(path))
    if offset != len(buf):
        raise ContainerError(f"{path}: {len(buf) - offset} trailing bytes")
    return arr


def write_sections(path, sections: dict[str, np.ndarray]) -> None:
    """Write named tensors to a sectioned NCAT file, preserving dict order."""
    if not sections:
        raise ContainerError("sectioned file needs at least one section")
    parts = [MAGIC + struct.pack("<B", VERSION)]
    for name, arr in sections.items():
        encoded_name = name.encode("utf-8")
        if not 0 < len(encoded_name) <= 0xFFFF:
            raise ContainerError(f"bad section name {name!r}")
        parts.append(struct.pack("<H", len(encoded_name)) + encoded_name)
        parts.append(_encode_array(arr))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_sections(path) -> dict[str, np.ndarray]:
    """Read a sectioned NCAT file into an ordered name -> tensor dict."""
    with open(path, "rb") as fh:
        buf = fh.read()
    offset = _check_prefix(buf, str(path))
    sections: dict[str, np.ndarray] = {}
    while offset < len(buf):
        if offset + 2 > len(buf):
            raise ContainerError(f"{path}: truncated section header")
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if name_len == 0 or offset + name_len > len(buf):
            raise ContainerError(f"{path}: truncated section name")
        try:
            name = buf[offset : offset + name_len].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"{path}: undecodable section name") from exc
        offset += name_len
        if name in sections:
            raise ContainerError(f"{path}: duplicate section {name!r}")
        sections[name], offset = _decode_array(buf, offset, f"{path}:{name}")
    if not sections:
        raise ContainerError(f"{path}: no sections")
    return sections
