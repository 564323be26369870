"""Named-tensor checkpoint files.

Layout (all integers little-endian):
    magic   4 bytes  b"SRTC"
    version u32
    count   u32
    then per tensor:
        name_len u32, name (UTF-8),
        rank u32, dims (rank x u64),
        payload (prod(dims) x f64, little-endian, row-major)
"""

import struct

import numpy as np

MAGIC = b"SRTC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_tensors(path, tensors):
    """Write a {name: array-like} mapping. Iteration order is sorted by
    name so identical contents produce identical bytes."""
    names = sorted(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(names)))
        for name in names:
            arr = tensors[name]
            arr = np.asarray(getattr(arr, "data", arr), dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
            fh.write(arr.astype("<f8").tobytes(order="C"))


def load_tensors(path):
    """Read a checkpoint back into {name: float64 ndarray}."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank)) if rank else ()
            n = 1
            for d in dims:
                n *= d
            payload = fh.read(8 * n)
            if len(payload) != 8 * n:
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
        return out
