"""Synthetic identity grids and the binary grid container.

Container layout (little-endian)::

    8 bytes  magic b"AFRNGRID"
    u32      version (1)
    u32      count
    u32      H, W, D
    count x  { u32 label; H*W*D float64 values, row-major (h, w, d) }
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write

GRID_MAGIC = b"AFRNGRID"
GRID_VERSION = 1
_HEADER = struct.Struct("<8sIIIII")
_LABEL = struct.Struct("<I")


class GridFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class SyntheticDatasetSpec:
    n_identities: int
    samples_per_identity: int
    H: int
    W: int
    D: int
    prototype_scale: float = 1.0
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for f in ("n_identities", "samples_per_identity", "H", "W", "D"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")


@dataclass
class Dataset:
    grids: np.ndarray    # (S, H, W, D)
    labels: np.ndarray   # (S,)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.grids[idx], self.labels[idx])

    def samples(self) -> list:
        return [(self.grids[i], int(self.labels[i])) for i in range(len(self))]


def generate(spec: SyntheticDatasetSpec) -> Dataset:
    """One Gaussian prototype grid per identity plus Gaussian noise per sample."""
    rng = np.random.default_rng(spec.seed)
    shape = (spec.H, spec.W, spec.D)
    protos = rng.normal(0.0, spec.prototype_scale, size=(spec.n_identities,) + shape)
    labels = np.repeat(np.arange(spec.n_identities), spec.samples_per_identity)
    noise = rng.normal(0.0, 1.0, size=(len(labels),) + shape) * spec.noise
    return Dataset(protos[labels] + noise, labels)


def split(data: Dataset, holdout: float, seed) -> tuple:
    """Per-identity stratified split into ``(train, validation)``.

    Each identity with at least two samples puts ``round(n * holdout)``
    samples (clamped to [1, n-1]) in validation.
    """
    if not 0.0 < holdout < 1.0:
        raise ValueError("holdout fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, val = [], []
    for ident in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == ident)
        if idx.size < 2:
            warnings.warn(f"identity {ident} has a single sample; kept in train", stacklevel=2)
            train.extend(idx.tolist())
            continue
        idx = rng.permutation(idx)
        n_val = min(max(int(round(idx.size * holdout)), 1), idx.size - 1)
        val.extend(idx[:n_val].tolist())
        train.extend(idx[n_val:].tolist())
    return data.subset(sorted(train)), data.subset(sorted(val))


def save_grids(path, data: Dataset) -> None:
    atomic_write(path, encode_grids(data))


def encode_grids(data: Dataset) -> bytes:
    grids = np.asarray(data.grids, dtype="<f8")
    if grids.ndim != 4:
        raise ValueError(f"grids must be (count, H, W, D), got {grids.shape}")
    count, H, W, D = grids.shape
    parts = [_HEADER.pack(GRID_MAGIC, GRID_VERSION, count, H, W, D)]
    for label, grid in zip(data.labels, grids):
        parts.append(_LABEL.pack(int(label)))
        parts.append(grid.tobytes(order="C"))
    return b"".join(parts)


def load_grids(path) -> Dataset:
    return decode_grids(Path(path).read_bytes())


def decode_grids(buf: bytes) -> Dataset:
    if len(buf) < _HEADER.size:
        raise GridFormatError("truncated header", len(buf))
    magic, version, count, H, W, D = _HEADER.unpack_from(buf, 0)
    if magic != GRID_MAGIC:
        raise GridFormatError(f"bad magic {magic!r}", 0)
    if version != GRID_VERSION:
        raise GridFormatError(f"unknown version {version}", 8)
    if count and min(H, W, D) == 0:
        raise GridFormatError(f"degenerate grid shape ({H}, {W}, {D})", 16)
    per = H * W * D
    rec = _LABEL.size + 8 * per
    offset = _HEADER.size
    expected = offset + count * rec
    if len(buf) < expected:
        # offset of the first record that does not fit
        bad = offset + ((len(buf) - offset) // rec) * rec
        raise GridFormatError(f"truncated: count field declares {count} samples, "
                              f"file ends after {(len(buf) - offset) // rec}", bad)
    if len(buf) > expected:
        raise GridFormatError("trailing bytes after last sample", expected)
    labels = np.empty(count, dtype=np.int64)
    grids = np.empty((count, H, W, D), dtype=np.float64)
    for k in range(count):
        labels[k] = _LABEL.unpack_from(buf, offset)[0]
        grids[k] = np.frombuffer(buf, dtype="<f8", count=per,
                                 offset=offset + _LABEL.size).reshape(H, W, D)
        offset += rec
    return Dataset(grids, labels)
