"""Per-token compute-allocation maps built from recorded routing decisions."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .render import upscale, write_pnm
from .router import RoutingDecision


@dataclass
class AllocationMap:
    """How many experts picked each spatial token, for one sparse layer at one sampler step.

    Attributes:
        layer: Block number (1-based) of the sparse layer.
        step: Sampler step index, 0 at pure noise.
        t: Flow time at that step.
        counts: (grid_h, grid_w) integer counts in ``[0, num_experts]``.
        num_experts: Experts in the layer.
        capacity: Tokens each expert took.
    """

    layer: int
    step: int
    t: float
    counts: np.ndarray
    num_experts: int
    capacity: int

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def mean(self) -> float:
        return float(self.counts.mean())

    def problems(self) -> list[str]:
        out = []
        if self.total != self.num_experts * self.capacity:
            out.append(f"layer {self.layer} step {self.step}: total {self.total} != E*C "
                       f"{self.num_experts * self.capacity}")
        if self.counts.min() < 0 or self.counts.max() > self.num_experts:
            out.append(f"layer {self.layer} step {self.step}: counts outside [0, {self.num_experts}]")
        return out

    def pixels(self) -> np.ndarray:
        """Grey levels on a fixed linear scale: 0 experts is white, all E experts is black."""
        frac = self.counts.astype(np.float64) / self.num_experts
        return np.rint(255.0 * (1.0 - frac)).astype(np.uint8)


def allocation_map(decision: RoutingDecision, grid: tuple[int, int], layer: int, step: int, t: float) -> AllocationMap:
    counts = decision.token_counts()
    if counts.size != grid[0] * grid[1]:
        raise ValueError(f"decision covers {counts.size} tokens but the grid has {grid[0] * grid[1]}; "
                         "route each image as its own group")
    return AllocationMap(layer, step, t, counts.reshape(grid).astype(np.int64),
                         decision.gating.shape[1], decision.capacity)


def write_maps(maps: list[AllocationMap], out_dir, scale: int = 8, steps_to_render=None) -> list[Path]:
    """Write ``allocation.csv`` with every map and one PGM per rendered (layer, step)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "allocation.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "step", "t", "row", "col", "count"])
        for m in maps:
            for (r, c), n in np.ndenumerate(m.counts):
                w.writerow([m.layer, m.step, repr(m.t), r, c, int(n)])
    paths = []
    for m in maps:
        if steps_to_render is None or m.step in steps_to_render:
            paths.append(write_pnm(out_dir / f"alloc_layer{m.layer:02d}_step{m.step:03d}.pgm",
                                   upscale(m.pixels(), scale)))
    return paths
