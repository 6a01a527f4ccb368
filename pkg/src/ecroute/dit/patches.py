from __future__ import annotations

import numpy as np


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Split (H, W, ch) or (B, H, W, ch) grids into raster-ordered flattened patches.

    Each token holds ``p * p * ch`` values ordered (row-in-patch, col-in-patch, channel).
    """
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    if single:
        image = image[None]
    if image.ndim != 4:
        raise ValueError(f"patchify: expected (H, W, ch) or (B, H, W, ch), got {image.shape}")
    b, h, w, ch = image.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ValueError(f"patchify: image {h}x{w} not divisible by patch size {p}")
    t = image.reshape(b, h // p, p, w // p, p, ch).transpose(0, 1, 3, 2, 4, 5)
    t = t.reshape(b, (h // p) * (w // p), p * p * ch)
    return t[0] if single else t


def unpatchify(tokens: np.ndarray, grid: tuple[int, int], patch_size: int, channels: int) -> np.ndarray:
    """Inverse of :func:`patchify`; ``grid`` is the (rows, cols) patch grid."""
    tokens = np.asarray(tokens, dtype=np.float64)
    single = tokens.ndim == 2
    if single:
        tokens = tokens[None]
    gh, gw = grid
    p = patch_size
    b, s, n = tokens.shape
    if s != gh * gw or n != p * p * channels:
        raise ValueError(
            f"unpatchify: {s} tokens of width {n} do not match a {gh}x{gw} grid of {p}x{p}x{channels} patches"
        )
    img = tokens.reshape(b, gh, gw, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    img = img.reshape(b, gh * p, gw * p, channels)
    return img[0] if single else img


def sincos_2d(embed_dim: int, grid: tuple[int, int]) -> np.ndarray:
    """Fixed 2-D sine/cosine position table of shape (rows * cols, embed_dim)."""
    if embed_dim % 4:
        raise ValueError(f"sincos_2d: embed_dim must be divisible by 4, got {embed_dim}")
    gh, gw = grid
    rows, cols = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    quarter = embed_dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)

    def enc(pos):
        ang = pos.reshape(-1)[:, None] * omega[None]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    return np.concatenate([enc(rows), enc(cols)], axis=1)
