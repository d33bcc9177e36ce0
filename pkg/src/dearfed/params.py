"""Flat model-parameter vectors with a named layer layout, plus binary I/O.

The on-disk container is little-endian: a 4-byte magic tag, the total
parameter count d (u64), the layer count (u32), one layout entry per layer
(name length u32, UTF-8 name bytes, offset u64, ndim u32, dims u64 each),
then d float64 values. Different network kinds use different magic tags so
a forecaster file cannot be mistaken for an embedding-network file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC_FORECASTER = b"DFS1"
MAGIC_QEEN = b"DFQ1"
MAGIC_AGENT = b"DFA1"


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple


@dataclass
class ModelParams:
    """A length-d float64 vector whose layout maps slices back onto layers."""

    values: np.ndarray
    layout: tuple

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ValueError("parameter vector must be 1-d")
        off = 0
        for entry in self.layout:
            if entry.offset != off:
                raise ValueError(
                    f"layout entry {entry.name!r} at offset {entry.offset}, expected {off}"
                )
            off += int(np.prod(entry.shape, dtype=np.int64))
        if off != self.values.size:
            raise ValueError(f"layout covers {off} values, vector has {self.values.size}")

    @property
    def d(self) -> int:
        return self.values.size

    def copy(self) -> "ModelParams":
        return ModelParams(self.values.copy(), self.layout)

    def layer(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                n = int(np.prod(entry.shape, dtype=np.int64))
                return self.values[entry.offset:entry.offset + n].reshape(entry.shape)
        raise KeyError(name)

    def same_layout(self, other: "ModelParams") -> bool:
        return self.layout == other.layout


def layout_from_shapes(named_shapes) -> tuple:
    """Build a contiguous layout from an ordered (name, shape) iterable."""
    entries, off = [], 0
    for name, shape in named_shapes:
        shape = tuple(int(s) for s in shape)
        entries.append(LayoutEntry(name, off, shape))
        off += int(np.prod(shape, dtype=np.int64))
    return tuple(entries)


def write_params(path, params: ModelParams, magic: bytes = MAGIC_FORECASTER) -> None:
    if len(magic) != 4:
        raise ValueError("magic tag must be 4 bytes")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<QI", params.d, len(params.layout)))
        for entry in params.layout:
            name = entry.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<QI", entry.offset, len(entry.shape)))
            fh.write(struct.pack(f"<{len(entry.shape)}Q", *entry.shape))
        fh.write(params.values.astype("<f8").tobytes())


def read_params(path, magic: bytes = MAGIC_FORECASTER) -> ModelParams:
    with open(path, "rb") as fh:
        tag = fh.read(4)
        if tag != magic:
            raise ValueError(f"bad container tag {tag!r}, expected {magic!r}")
        d, n_layers = struct.unpack("<QI", fh.read(12))
        entries = []
        for _ in range(n_layers):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            offset, ndim = struct.unpack("<QI", fh.read(12))
            shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
            entries.append(LayoutEntry(name, offset, tuple(int(s) for s in shape)))
        values = np.frombuffer(fh.read(8 * d), dtype="<f8").astype(np.float64)
    return ModelParams(values, tuple(entries))
