"""METN raw tensor container.

Layout: magic ``b"METN"``, version byte ``1``, u32 LE rank, ``rank`` u32 LE
dims, then the float32 LE payload in C order.  Checkpoints concatenate
several such records, each preceded by a u32 LE name length and the UTF-8
name.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"METN"
VERSION = 1


class TensorFormatError(ValueError):
    pass


def encode_tensor(arr) -> bytes:
    arr = np.asarray(arr, dtype="<f4", order="C")
    header = MAGIC + bytes([VERSION]) + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns it and the end offset."""
    if buf[offset:offset + 4] != MAGIC:
        raise TensorFormatError("bad magic, expected METN")
    version = buf[offset + 4]
    if version != VERSION:
        raise TensorFormatError(f"unsupported METN version {version}")
    pos = offset + 5
    (rank,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(dims, dtype=np.int64))
    end = pos + 4 * count
    if end > len(buf):
        raise TensorFormatError("truncated METN payload")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
    return arr.astype(np.float32), end


def save_tensor(path, arr) -> None:
    Path(path).write_bytes(encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    arr, end = decode_tensor(buf)
    if end != len(buf):
        raise TensorFormatError("trailing bytes after METN tensor")
    return arr


def save_named(path, tensors: dict) -> None:
    chunks = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw + encode_tensor(arr))
    Path(path).write_bytes(b"".join(chunks))


def load_named(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    out = {}
    pos = 0
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        out[name], pos = decode_tensor(buf, pos)
    return out


def save_npz(path, **arrays) -> None:
    """``np.savez_compressed`` without the wall-clock entry timestamps, so
    identical arrays always give identical bytes."""
    import io
    import zipfile

    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asanyarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())
