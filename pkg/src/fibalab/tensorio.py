"""FBTN single-tensor binary format.

Layout: b"FBTN", u8 version, u8 rank, rank x u32 dims (little-endian), then
float32 little-endian payload in row-major order.
"""

import io
import struct

import numpy as np

from .errors import FormatError
from .tensor import Tensor

MAGIC = b"FBTN"
VERSION = 1


def snap_f32(arr):
    """Round to the nearest float32 value, kept as float64."""
    return np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64)


def tensor_to_bytes(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim > 255:
        raise FormatError("rank too large for FBTN")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_tensor(stream):
    """Read one FBTN blob from a binary stream; returns a float64 array."""
    head = stream.read(6)
    if len(head) < 6 or head[:4] != MAGIC:
        raise FormatError("bad FBTN magic")
    version, rank = struct.unpack("<BB", head[4:])
    if version != VERSION:
        raise FormatError(f"unsupported FBTN version {version}")
    raw_dims = stream.read(4 * rank)
    if len(raw_dims) != 4 * rank:
        raise FormatError("truncated FBTN header")
    dims = struct.unpack(f"<{rank}I", raw_dims)
    count = int(np.prod(dims)) if rank else 1
    payload = stream.read(4 * count)
    if len(payload) != 4 * count:
        raise FormatError("truncated FBTN payload")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(dims)


def tensor_from_bytes(blob):
    stream = io.BytesIO(blob)
    arr = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after FBTN payload")
    return arr


def save_tensor(x, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(x))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
