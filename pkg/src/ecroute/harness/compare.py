"""Matched-compute comparison of dense, expert-choice and token-choice training runs."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..dit.model import ModelConfig
from .config import TrainConfig
from .data import gen_dataset
from .train import TrainResult, smoothed, train_loop

logger = logging.getLogger(__name__)

MODES = ("dense", "ec", "tc", "tc-noaux")
WINDOW = 100
TAIL = 500


def mode_configs(model: ModelConfig, train: TrainConfig, mode: str) -> tuple[ModelConfig, TrainConfig]:
    """Derive per-mode configs with matched activated FFN compute.

    ``dense`` widens its even-layer FFNs by the capacity factor; ``tc`` routes
    each token to ``round(capacity_factor)`` experts with the balance loss,
    and ``tc-noaux`` is the same run with the balance loss switched off.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {', '.join(MODES)}")
    if mode == "dense":
        return replace(model, num_experts=0, matched_ffn_factor=model.ffn_factor * model.capacity_factor), train
    if model.num_experts < 1:
        raise ValueError(f"mode {mode!r} needs num_experts >= 1 in the base config")
    if mode == "ec":
        return replace(model, routing_mode="expert_choice"), train
    k = min(model.num_experts, max(1, int(round(model.capacity_factor))))
    tc_model = replace(model, routing_mode="token_choice", top_k=k)
    if mode == "tc-noaux":
        return tc_model, replace(train, aux_loss_coef=0.0)
    return tc_model, train


def dataset_for(model: ModelConfig, train: TrainConfig):
    return gen_dataset(train.dataset_size, (model.image_size, model.image_size, model.channels), train.seed,
                       model.text_dim)


@dataclass
class RunSummary:
    mode: str
    seed: int
    initial_loss: float
    final_loss: float
    mean_imbalance: float
    ms_per_step: float

    @property
    def ratio(self) -> float:
        return self.final_loss / self.initial_loss


def summarize(mode: str, seed: int, result: TrainResult) -> RunSummary:
    losses = [h.loss for h in result.history]
    imb = [h.imbalance for h in result.history[-TAIL:]]
    return RunSummary(
        mode, seed,
        initial_loss=float(np.mean(losses[:WINDOW])),
        final_loss=float(smoothed(losses, WINDOW)[-1]),
        mean_imbalance=float(np.mean(imb)),
        ms_per_step=float(np.mean([h.wall_ms for h in result.history])),
    )


def run_compare(model: ModelConfig, train: TrainConfig, modes, seeds, out_dir) -> list[RunSummary]:
    """Train every (mode, seed) pair and write ``compare.csv``, ``compare_summary.csv`` and timings.

    Per-run artifacts land in ``out_dir/<mode>/seed<seed>/``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summaries = []
    with open(out_dir / "compare.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mode", "seed", "step", "loss", "smoothed_loss", "aux_loss", "imbalance"])
        for mode in modes:
            for seed in seeds:
                m_cfg, t_cfg = mode_configs(model, replace(train, seed=seed), mode)
                logger.info("compare: mode %s seed %d", mode, seed)
                result = train_loop(m_cfg, t_cfg, dataset_for(m_cfg, t_cfg), out_dir / mode / f"seed{seed}")
                sm = smoothed([h.loss for h in result.history], WINDOW)
                for h, s in zip(result.history, sm):
                    w.writerow([mode, seed, h.step, repr(h.loss), repr(float(s)), repr(h.aux_loss), repr(h.imbalance)])
                summaries.append(summarize(mode, seed, result))
    with open(out_dir / "compare_summary.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mode", "seed", "initial_loss", "final_smoothed_loss", "ratio", "mean_imbalance_tail"])
        for s in summaries:
            w.writerow([s.mode, s.seed, repr(s.initial_loss), repr(s.final_loss), repr(s.ratio), repr(s.mean_imbalance)])
    with open(out_dir / "compare_timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["mode", "seed", "ms_per_step"])
        for s in summaries:
            w.writerow([s.mode, s.seed, f"{s.ms_per_step:.3f}"])
    return summaries


def summary_table(summaries: list[RunSummary]) -> str:
    """Seed-averaged text table, one line per mode."""
    lines = [f"{'mode':<10}{'seeds':>6}{'initial':>10}{'final':>10}{'ratio':>8}{'imbalance':>11}{'ms/step':>9}"]
    for mode in dict.fromkeys(s.mode for s in summaries):
        rows = [s for s in summaries if s.mode == mode]
        avg = lambda f: float(np.mean([f(s) for s in rows]))
        lines.append(
            f"{mode:<10}{len(rows):>6}{avg(lambda s: s.initial_loss):>10.4f}{avg(lambda s: s.final_loss):>10.4f}"
            f"{avg(lambda s: s.ratio):>8.3f}{avg(lambda s: s.mean_imbalance):>11.4f}{avg(lambda s: s.ms_per_step):>9.1f}"
        )
    return "\n".join(lines)
