"""Versioned binary checkpoint container.

Layout (little-endian)::

    8 bytes  magic b"AFRNCKPT"
    u32      version (1)
    u32      header length, then that many bytes of UTF-8 JSON (sorted keys):
             model config, optimizer scalars, training progress
    u32      tensor count
    per tensor: u16 name length, name, u8 ndim, ndim x u32 dims,
                prod(dims) float64 values (row-major)

Tensors are written in sorted-name order so equal contents give equal bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .model import ModelConfig, ModelParams
from .optim import AdamaxState

MAGIC = b"AFRNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(params: ModelParams, opt: Optional[AdamaxState] = None,
           progress: Optional[dict] = None) -> bytes:
    header = {"model": params.config.to_dict(), "progress": progress or {}}
    tensors = {f"param/{k}": v for k, v in params.tensors.items()}
    tensors.update({f"buffer/{k}": v for k, v in params.buffers.items()})
    if opt is not None:
        header["optimizer"] = {"type": "adamax", "beta1": opt.beta1, "beta2": opt.beta2,
                               "eps": opt.eps, "t": opt.t}
        tensors.update({f"adamax.m/{k}": v for k, v in opt.m.items()})
        tensors.update({f"adamax.u/{k}": v for k, v in opt.u.items()})
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(buf: bytes):
    """Return ``(params, optimizer_state_or_None, progress)``."""
    def need(n, off, what):
        if off + n > len(buf):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {off}")

    need(16, 0, "preamble")
    if buf[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 16
    need(hlen, off, "header")
    header = json.loads(buf[off:off + hlen].decode())
    off += hlen
    need(4, off, "tensor count")
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        need(3, off, "tensor record")
        nlen, ndim = struct.unpack_from("<HB", buf, off)
        off += 3
        need(nlen + 4 * ndim, off, "tensor name/shape")
        name = buf[off:off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        need(8 * size, off, f"tensor {name}")
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off) \
            .reshape(shape).astype(np.float64)
        off += 8 * size
    if off != len(buf):
        raise CheckpointError(f"trailing bytes after byte {off}")

    cfg = ModelConfig.from_dict(header["model"])
    pick = lambda prefix: {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
    params = ModelParams(cfg, pick("param/"), pick("buffer/"))
    params.check()
    opt = None
    if "optimizer" in header:
        o = header["optimizer"]
        opt = AdamaxState(o["beta1"], o["beta2"], o["eps"], o["t"],
                          pick("adamax.m/"), pick("adamax.u/"))
    return params, opt, header.get("progress", {})


def atomic_write(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(path, params: ModelParams, opt: Optional[AdamaxState] = None,
         progress: Optional[dict] = None) -> None:
    atomic_write(path, encode(params, opt, progress))


def load(path):
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    return decode(data)
