"""Procedural shapes dataset with frozen synthetic caption embeddings.

Each image holds one shape (circle, square, triangle) in one of four colours,
centred near one of the four quadrant centres, on a flat grey background.
The caption id encodes (shape, colour, quadrant); its embedding has four text
tokens: shape, colour, quadrant and a per-caption global token.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHAPES = ("circle", "square", "triangle")
COLORS = ("red", "green", "blue", "yellow")
QUADRANTS = ("top-left", "top-right", "bottom-left", "bottom-right")
NUM_CAPTIONS = len(SHAPES) * len(COLORS) * len(QUADRANTS)
TEXT_LEN = 4
BACKGROUND = -0.6
EMBED_SEED = 20_240_611

_RGB = {"red": (1.0, -1.0, -1.0), "green": (-1.0, 1.0, -1.0), "blue": (-1.0, -1.0, 1.0), "yellow": (1.0, 1.0, -1.0)}
_GRAY = {"red": 1.0, "green": 0.4, "blue": -0.1, "yellow": 0.7}


def caption_id(shape: int, color: int, quadrant: int) -> int:
    return (shape * len(COLORS) + color) * len(QUADRANTS) + quadrant


def caption_parts(cid: int) -> tuple[int, int, int]:
    if not 0 <= cid < NUM_CAPTIONS:
        raise ValueError(f"caption id {cid} outside [0, {NUM_CAPTIONS})")
    rest, quadrant = divmod(cid, len(QUADRANTS))
    shape, color = divmod(rest, len(COLORS))
    return shape, color, quadrant


def caption_text(cid: int) -> str:
    s, c, q = caption_parts(cid)
    return f"a {COLORS[c]} {SHAPES[s]} in the {QUADRANTS[q]}"


def caption_table(text_dim: int, seed: int = EMBED_SEED) -> np.ndarray:
    """(NUM_CAPTIONS, 4, text_dim) embeddings; fixed for a given ``text_dim`` and seed."""
    rng = np.random.default_rng([seed, text_dim])
    shape_rows = rng.standard_normal((len(SHAPES), text_dim))
    color_rows = rng.standard_normal((len(COLORS), text_dim))
    quad_rows = rng.standard_normal((len(QUADRANTS), text_dim))
    global_rows = rng.standard_normal((NUM_CAPTIONS, text_dim))
    table = np.empty((NUM_CAPTIONS, TEXT_LEN, text_dim))
    for cid in range(NUM_CAPTIONS):
        s, c, q = caption_parts(cid)
        table[cid] = (shape_rows[s], color_rows[c], quad_rows[q], global_rows[cid])
    return table


def render(cid: int, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    shape, color, quad = caption_parts(cid)
    img = np.full((size, size, channels), BACKGROUND)
    cy = size * (0.25 if quad < 2 else 0.75) + rng.uniform(-1.0, 1.0)
    cx = size * (0.25 if quad % 2 == 0 else 0.75) + rng.uniform(-1.0, 1.0)
    r = size * rng.uniform(0.14, 0.22)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = yy - cy, xx - cx
    if SHAPES[shape] == "circle":
        mask = dy * dy + dx * dx <= r * r
    elif SHAPES[shape] == "square":
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    else:
        mask = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)
    value = np.array(_RGB[COLORS[color]]) if channels == 3 else np.full(channels, _GRAY[COLORS[color]])
    img[mask] = value
    return img


@dataclass
class SyntheticSample:
    image: np.ndarray
    caption_id: int
    caption_embedding: np.ndarray


@dataclass
class SyntheticDataset:
    images: np.ndarray
    caption_ids: np.ndarray
    embeddings: np.ndarray

    def __len__(self) -> int:
        return len(self.caption_ids)

    def __getitem__(self, i: int) -> SyntheticSample:
        cid = int(self.caption_ids[i])
        return SyntheticSample(self.images[i], cid, self.embeddings[cid])

    def context(self, caption_ids) -> np.ndarray:
        return self.embeddings[np.asarray(caption_ids)]


def gen_dataset(n: int, grid: tuple[int, int, int] = (16, 16, 3), seed: int = 0, text_dim: int = 32) -> SyntheticDataset:
    """``n`` samples on an (H, W, ch) grid with H == W, reproducible from ``seed``."""
    h, w, ch = grid
    if h != w:
        raise ValueError("gen_dataset: only square grids are supported")
    rng = np.random.default_rng(seed)
    cids = rng.integers(0, NUM_CAPTIONS, n)
    images = np.stack([render(int(c), h, ch, rng) for c in cids]) if n else np.zeros((0, h, w, ch))
    return SyntheticDataset(images, cids, caption_table(text_dim))
