"""Binary PGM/PPM writing and reading (netpbm P5/P6, 8-bit)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def to_uint8(img: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    """Linearly map ``[lo, hi]`` to ``[0, 255]`` with clipping and round-half-even."""
    x = (np.asarray(img, dtype=np.float64) - lo) / (hi - lo)
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, pixels: np.ndarray) -> Path:
    """Write uint8 pixels: (H, W) or (H, W, 1) as PGM, (H, W, 3) as PPM."""
    path = Path(path)
    px = np.asarray(pixels)
    if px.dtype != np.uint8:
        raise TypeError(f"write_pnm: expected uint8 pixels, got {px.dtype}")
    if px.ndim == 3 and px.shape[2] == 1:
        px = px[:, :, 0]
    if px.ndim == 2:
        magic = b"P5"
    elif px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"write_pnm: unsupported pixel shape {px.shape}")
    h, w = px.shape[:2]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(px).tobytes())
    return path


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file written by :func:`write_pnm` (no comments, maxval 255)."""
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    pos += 1
    magic, w, h, maxval = fields[0], int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm header")
    ch = 3 if magic == b"P6" else 1
    px = np.frombuffer(data, dtype=np.uint8, count=w * h * ch, offset=pos)
    return px.reshape((h, w, ch) if ch == 3 else (h, w))


def upscale(px: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour enlargement along the two leading axes."""
    if factor <= 1:
        return px
    return np.repeat(np.repeat(px, factor, axis=0), factor, axis=1)
