"""Dataset files and slice images.

Dataset layout, all little-endian:

    b"MUTM" | u16 version | u32 sample count
    per sample: u32 r | r^3 f32 grid (x fastest) | u32 n | n x 15 f32 event rows

Event rows are x0 (3), xf (3), d0 (3), df (3), estimated momentum,
direction chord and true momentum.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .phantom import VoxelGrid
from .simulator import EventBatch

MAGIC = b"MUTM"
VERSION = 1
_F32 = np.dtype("<f4")


class DatasetFormatError(ValueError):
    pass


@dataclass
class Sample:
    grid: VoxelGrid
    events: EventBatch


def _grid_bytes(grid: VoxelGrid) -> bytes:
    return np.asarray(grid.values, _F32).tobytes(order="F")


def encode_dataset(samples) -> bytes:
    samples = list(samples)
    parts = [MAGIC, struct.pack("<HI", VERSION, len(samples))]
    for s in samples:
        r = s.grid.resolution
        rows = np.ascontiguousarray(s.events.to_array(), dtype=_F32)
        parts += [struct.pack("<I", r), _grid_bytes(s.grid), struct.pack("<I", len(rows)), rows.tobytes()]
    return b"".join(parts)


def write_dataset(path, samples) -> None:
    Path(path).write_bytes(encode_dataset(samples))


def decode_dataset(data: bytes, extent: float = 100.0) -> list[Sample]:
    """Samples with float32 payloads widened to float64."""
    mv = memoryview(data)
    if len(mv) < 10:
        raise DatasetFormatError("truncated dataset header")
    if bytes(mv[:4]) != MAGIC:
        raise DatasetFormatError(f"bad magic {bytes(mv[:4])!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<HI", mv, 4)
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version} (reader supports {VERSION})")
    pos = 10
    out = []

    def take(nbytes, what):
        nonlocal pos
        if pos + nbytes > len(mv):
            raise DatasetFormatError(f"truncated dataset: {what} of sample {len(out)}")
        chunk = mv[pos:pos + nbytes]
        pos += nbytes
        return chunk

    for _ in range(count):
        (r,) = struct.unpack("<I", take(4, "resolution"))
        vals = np.frombuffer(take(4 * r**3, "grid"), _F32).reshape((r, r, r), order="F")
        (n,) = struct.unpack("<I", take(4, "event count"))
        rows = np.frombuffer(take(60 * n, "events"), _F32).reshape(n, 15)
        out.append(Sample(VoxelGrid(vals.astype(np.float64), extent),
                          EventBatch.from_array(rows.astype(np.float64))))
    if pos != len(mv):
        raise DatasetFormatError(f"{len(mv) - pos} trailing bytes after {count} samples")
    return out


def read_dataset(path, extent: float = 100.0) -> list[Sample]:
    return decode_dataset(Path(path).read_bytes(), extent)


def quantize(sample: Sample) -> Sample:
    """The sample as it reads back from disk (float32 payload)."""
    return decode_dataset(encode_dataset([sample]), sample.grid.extent)[0]


# ---------------------------------------------------------------------------
# slices
# ---------------------------------------------------------------------------

def slice_image(grid: VoxelGrid, axis: int, index: int, peak: float) -> np.ndarray:
    """8-bit slice, ``[0, peak]`` mapped linearly onto ``[0, 255]`` and clipped."""
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    r = grid.resolution
    if not 0 <= index < r:
        raise IndexError(f"slice index {index} out of range for resolution {r}")
    if not peak > 0:
        raise ValueError("peak must be positive")
    sl = np.take(grid.values, index, axis=axis)
    return np.clip(np.rint(sl / peak * 255.0), 0, 255).astype(np.uint8)


def render_slice(grid: VoxelGrid, axis: int, index: int, path, peak: float = 3.45) -> np.ndarray:
    """Write a binary PGM (P5) slice; returns the pixel array."""
    img = slice_image(grid, axis, index, peak)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    return img


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(data, np.uint8, count=w * h, offset=m.end()).reshape(h, w)
