"""Binary tensor container used for checkpoints and score dumps.

Layout (all integers little-endian): magic "SFFC", u32 version, u32 tensor
count; then per tensor: u16 name length, UTF-8 name, u8 dtype code
(0 = float32, 1 = float64), u8 rank, u32 dims, raw little-endian payload.
Writing the same mapping twice produces identical bytes, which is what makes
save -> load -> save round trips byte-stable.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SFFC"
VERSION = 1

_DTYPE_TO_CODE = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class ContainerError(ValueError):
    """Corrupt header, version mismatch or truncated payload."""


def write_tensors(path: str, tensors: dict[str, np.ndarray], version: int = VERSION):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", version, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype not in _DTYPE_TO_CODE:
                raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_TO_CODE[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_tensors(path: str, expect_version: int = VERSION) -> dict[str, np.ndarray]:
    """Read back a container, preserving tensor order."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < 12:
        raise ContainerError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != expect_version:
        raise ContainerError(f"{path}: container version {version}, expected {expect_version}")
    out: dict[str, np.ndarray] = {}
    offset = 12
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            code, rank = struct.unpack_from("<BB", blob, offset)
            offset += 2
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
        except struct.error as exc:
            raise ContainerError(f"{path}: corrupt tensor header") from exc
        if code not in _CODE_TO_DTYPE:
            raise ContainerError(f"{path}: unknown dtype code {code}")
        dtype = _CODE_TO_DTYPE[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = blob[offset : offset + nbytes]
        if len(payload) != nbytes:
            raise ContainerError(f"{path}: truncated payload for tensor {name!r}")
        offset += nbytes
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return out
