"""Binary checkpoint, label-grid and shape-sequence files."""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"F4DC"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


class VersionMismatchError(FormatError):
    pass


def write_checkpoint(path, entries: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays.

    Layout: magic, u32 version, u64 entry count, then per entry: u64 name
    length, UTF-8 name, u64 rank, rank x u64 dims, little-endian f64 values
    in C order.
    """
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(entries)))
    for name, arr in entries.items():
        arr = np.array(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic {data[:4]!r})")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(
            f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 8
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        entries[name] = arr.astype(np.float64)
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return entries


def _grid_bytes(labels: np.ndarray, voxel_size: float) -> bytes:
    nx, ny, nz = labels.shape
    header = f"F4DGRID v1 {nx} {ny} {nz} {float(voxel_size)!r}\n".encode("ascii")
    return header + np.asarray(labels, dtype=np.uint8).ravel(order="F").tobytes()


def _parse_grid(data: bytes, pos: int):
    end = data.index(b"\n", pos)
    parts = data[pos:end].decode("ascii").split()
    if len(parts) != 6 or parts[0] != "F4DGRID":
        raise FormatError(f"bad grid header {data[pos:end]!r}")
    if parts[1] != "v1":
        raise VersionMismatchError(f"grid format {parts[1]}, expected v1")
    nx, ny, nz = (int(p) for p in parts[2:5])
    voxel_size = float(parts[5])
    n = nx * ny * nz
    start = end + 1
    if len(data) < start + n:
        raise FormatError("truncated grid payload")
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=start)
    labels = labels.reshape((nx, ny, nz), order="F").copy()
    return labels, voxel_size, start + n


def write_grid(path, grid) -> None:
    Path(path).write_bytes(_grid_bytes(grid.labels, grid.voxel_size))


def read_grid(path):
    from .phantom import LabelGrid

    data = Path(path).read_bytes()
    labels, voxel_size, end = _parse_grid(data, 0)
    if end != len(data):
        raise FormatError(f"{path}: trailing bytes after grid")
    return LabelGrid(labels, voxel_size)


def write_sequence(path, seq) -> None:
    out = [f"F4DSEQ v1 {len(seq.frames)}\n".encode("ascii")]
    out += [_grid_bytes(f.labels, f.voxel_size) for f in seq.frames]
    Path(path).write_bytes(b"".join(out))


def read_sequence(path):
    from .phantom import LabelGrid, ShapeSequence

    data = Path(path).read_bytes()
    end = data.index(b"\n")
    parts = data[:end].decode("ascii").split()
    if len(parts) != 3 or parts[0] != "F4DSEQ":
        raise FormatError(f"{path}: bad sequence header")
    if parts[1] != "v1":
        raise VersionMismatchError(f"{path}: sequence format {parts[1]}, expected v1")
    m = int(parts[2])
    pos = end + 1
    frames = []
    for _ in range(m):
        labels, vs, pos = _parse_grid(data, pos)
        frames.append(LabelGrid(labels, vs))
    if pos != len(data):
        raise FormatError(f"{path}: trailing bytes after sequence")
    return ShapeSequence(frames)
