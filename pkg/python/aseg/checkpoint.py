"""
Weight checkpoints in the ASEG binary format.

Layout (little-endian):
    magic "ASEG" | version u32 | count u32
    per entry: name length u16 | UTF-8 name | dtype u8 (0=f32, 1=f64)
               | rank u8 | dims u32 × rank | raw values

Entries are the graph's parameters followed by its BN running statistics,
in graph order.
"""

import hashlib
import os
import struct
from typing import BinaryIO, Dict, Tuple

import numpy as np

from .exceptions import CheckpointError
from .graph import LayerGraph
from .logging import get_logger
from .tensor import Parameter

logger = get_logger("aseg.checkpoint")

MAGIC = b"ASEG"
VERSION = 1
DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
CODE_DTYPES = {code: dt for dt, code in DTYPE_CODES.items()}


def write_arrays(arrays: Dict[str, np.ndarray], fh: BinaryIO) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(arrays)))
    for name, arr in arrays.items():
        dt = np.dtype(arr.dtype)
        if dt not in DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {dt}")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<BB", DTYPE_CODES[dt], arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype=dt.newbyteorder("<")).tobytes())


def _take(buf: bytes, pos: int, n: int, what: str) -> Tuple[bytes, int]:
    if pos + n > len(buf):
        raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
    return buf[pos:pos + n], pos + n


def read_arrays(buf: bytes) -> Dict[str, np.ndarray]:
    head, pos = _take(buf, 0, 4, "magic")
    if head != MAGIC:
        raise CheckpointError(f"bad magic {head!r}, expected {MAGIC!r}")
    raw, pos = _take(buf, pos, 8, "header")
    version, count = struct.unpack("<II", raw)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        raw, pos = _take(buf, pos, 2, "name length")
        (n,) = struct.unpack("<H", raw)
        raw, pos = _take(buf, pos, n, "name")
        name = raw.decode("utf-8")
        raw, pos = _take(buf, pos, 2, f"{name} dtype/rank")
        code, rank = struct.unpack("<BB", raw)
        if code not in CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        raw, pos = _take(buf, pos, 4 * rank, f"{name} dims")
        dims = struct.unpack(f"<{rank}I", raw)
        dt = CODE_DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        raw, pos = _take(buf, pos, nbytes, f"{name} values")
        arrays[name] = np.frombuffer(raw, dtype=dt.newbyteorder("<")).astype(dt).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after {count} entries")
    return arrays


def save_weights(graph: LayerGraph, path: str) -> str:
    """Write parameters and running stats; returns the file's sha256."""
    if os.path.exists(path):
        raise CheckpointError(f"refusing to overwrite existing checkpoint {path}")
    with open(path, "xb") as fh:
        write_arrays(graph.state(), fh)
    digest = file_digest(path)
    logger.debug("Checkpoint saved", path=path, sha256=digest)
    return digest


def load_state(graph: LayerGraph, arrays: Dict[str, np.ndarray]) -> None:
    """Copy ``arrays`` into ``graph``; names, dtypes and shapes must match exactly."""
    params: Dict[str, Parameter] = dict(graph.named_parameters())
    buffers = dict(graph.named_buffers())
    expected = list(params) + list(buffers)
    missing = [n for n in expected if n not in arrays]
    unexpected = [n for n in arrays if n not in params and n not in buffers]
    if missing or unexpected:
        raise CheckpointError(
            f"checkpoint does not match graph: {len(missing)} missing, {len(unexpected)} unexpected",
            missing=missing, unexpected=unexpected)

    for name in expected:
        arr = arrays[name]
        current = params[name].data if name in params else buffers[name]
        if arr.dtype != current.dtype:
            raise CheckpointError(f"{name}: checkpoint dtype {arr.dtype}, graph dtype {current.dtype}")
        if arr.shape != current.shape:
            raise CheckpointError(f"{name}: checkpoint shape {arr.shape}, graph shape {current.shape}")

    for name in expected:
        if name in params:
            params[name].data = arrays[name].copy()
        else:
            graph.set_buffer(name, arrays[name])


def load_weights(graph: LayerGraph, path: str) -> None:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}")
    load_state(graph, read_arrays(buf))
    logger.debug("Checkpoint loaded", path=path)


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
