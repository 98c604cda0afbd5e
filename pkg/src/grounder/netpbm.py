"""Binary netpbm image files: P6 (color) and P5 (grayscale), maxval 255."""

from __future__ import annotations

from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError


def write_ppm(path: Union[str, Path], pixels: np.ndarray) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise FormatError(f"P6 wants (H, W, 3) uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pixels.tobytes())


def write_pgm(path: Union[str, Path], pixels: np.ndarray) -> None:
    if pixels.ndim != 2 or pixels.dtype != np.uint8:
        raise FormatError(f"P5 wants (H, W) uint8, got {pixels.shape} {pixels.dtype}")
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())


def _read(path: Union[str, Path], magic: bytes, channels: int) -> np.ndarray:
    p = Path(path)
    if not p.is_file():
        raise FormatError(f"image not found: {p}")
    blob = p.read_bytes()
    if blob[:2] != magic:
        raise FormatError(f"{p}: expected {magic.decode()} file")
    # header: magic, width, height, maxval as whitespace-separated tokens,
    # '#' comments allowed, then a single whitespace byte before the payload
    tokens, off = [], 2
    while len(tokens) < 3:
        if off >= len(blob):
            raise FormatError(f"{p}: truncated header")
        ch = blob[off:off + 1]
        if ch == b"#":
            off = blob.find(b"\n", off)
            if off < 0:
                raise FormatError(f"{p}: unterminated comment")
            continue
        if ch.isspace():
            off += 1
            continue
        end = off
        while end < len(blob) and not blob[end:end + 1].isspace():
            end += 1
        tokens.append(blob[off:end])
        off = end
    off += 1  # the single whitespace separating header from payload
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise FormatError(f"{p}: non-numeric header field") from None
    if maxval != 255 or w <= 0 or h <= 0:
        raise FormatError(f"{p}: unsupported header {w}x{h} maxval {maxval}")
    need = w * h * channels
    payload = blob[off:off + need]
    if len(payload) != need:
        raise FormatError(f"{p}: payload has {len(payload)} bytes, want {need}")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def read_ppm(path: Union[str, Path]) -> np.ndarray:
    return _read(path, b"P6", 3)


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    return _read(path, b"P5", 1)
