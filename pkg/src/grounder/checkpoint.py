"""Versioned binary checkpoints.

Layout: magic "TVGCKPT1", then a u32 entry count, then per entry a u32 name
length, the UTF-8 name, a u32 rank, u32 extents, and the row-major float32
payload.  Everything is little-endian.  Round-trips are bit-exact because all
trained state is float32.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, ShapeError

MAGIC = b"TVGCKPT1"


def save_arrays(path: Union[str, Path], arrays: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_arrays(path: Union[str, Path]) -> dict[str, np.ndarray]:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"checkpoint not found: {p}")
    blob = p.read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{p}: bad magic, not a checkpoint")
    off = len(MAGIC)

    def u32s(n: int) -> tuple:
        nonlocal off
        end = off + 4 * n
        if end > len(blob):
            raise FormatError(f"{p}: truncated checkpoint")
        vals = struct.unpack(f"<{n}I", blob[off:end])
        off = end
        return vals

    (count,) = u32s(1)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = u32s(1)
        if off + name_len > len(blob):
            raise FormatError(f"{p}: truncated checkpoint")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = u32s(1)
        shape = u32s(rank)
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        end = off + 4 * n
        if end > len(blob):
            raise FormatError(f"{p}: truncated payload for {name!r}")
        arrays[name] = np.frombuffer(blob[off:end], dtype="<f4").reshape(shape).copy()
        off = end
    if off != len(blob):
        raise FormatError(f"{p}: {len(blob) - off} trailing bytes")
    return arrays


def model_state(model, opt=None, epoch: int = None) -> dict[str, np.ndarray]:
    """Collect parameters (and optionally optimizer moments and epoch)."""
    state = {name: p.data for name, p in model.named_parameters()}
    if opt is not None:
        state["opt.step"] = np.array([opt.step_count], dtype=np.float32)
        for name, m in opt.m.items():
            state[f"opt.m.{name}"] = m
        for name, v in opt.v.items():
            state[f"opt.v.{name}"] = v
    if epoch is not None:
        state["train.epoch"] = np.array([epoch], dtype=np.float32)
    return state


def load_into(model, arrays: dict[str, np.ndarray], opt=None) -> int:
    """Restore parameters (and moments); returns the stored epoch, or 0.

    Fails atomically: nothing is written unless every array checks out.
    """
    staged = []
    for name, p in model.named_parameters():
        if name not in arrays:
            raise FormatError(f"checkpoint lacks parameter {name!r}")
        arr = arrays[name].astype(p.data.dtype)
        if arr.shape != p.data.shape:
            raise ShapeError(
                f"checkpoint array {name!r} has shape {arr.shape}, "
                f"model wants {p.data.shape}")
        staged.append((p, arr))
    opt_staged = []
    if opt is not None:
        if "opt.step" not in arrays:
            raise FormatError("checkpoint lacks optimizer state")
        for kind, store in (("m", opt.m), ("v", opt.v)):
            for name, cur in store.items():
                key = f"opt.{kind}.{name}"
                if key not in arrays:
                    raise FormatError(f"checkpoint lacks moment {key!r}")
                arr = arrays[key].astype(cur.dtype)
                if arr.shape != cur.shape:
                    raise ShapeError(
                        f"checkpoint array {key!r} has shape {arr.shape}, "
                        f"optimizer wants {cur.shape}")
                opt_staged.append((store, name, arr))
    for p, arr in staged:
        p.data = arr
    if opt is not None:
        for store, name, arr in opt_staged:
            store[name] = arr
        opt.step_count = int(arrays["opt.step"][0])
    return int(arrays["train.epoch"][0]) if "train.epoch" in arrays else 0
