"""Training loop: rectified-flow loss on masked, regrouped token batches."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dit.model import ModelConfig, forward_tokens, init_params
from ..dit.patches import patchify
from ..flow import TimestepLaw, make_flow_batch, rf_loss
from ..router import load_stats
from ..tensor import Tape, backward
from .checkpoint import save_checkpoint
from .config import TrainConfig, dump_config
from .data import SyntheticDataset
from .masking import sample_keep
from .optim import RMSPropState, optimizer_step

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "loss", "aux_loss", "imbalance")


@dataclass
class StepLog:
    step: int
    loss: float
    aux_loss: float
    imbalance: float
    wall_ms: float
    layer_imbalance: dict[int, float] = field(default_factory=dict)


@dataclass
class TrainResult:
    history: list[StepLog]
    params: dict
    checkpoints: list[Path]


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_checkpoint: Path | None):
        where = f"; last good checkpoint {last_checkpoint}" if last_checkpoint else ""
        super().__init__(f"non-finite loss at step {step}{where}")
        self.step = step
        self.last_checkpoint = last_checkpoint


def _rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    init_ss, data_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(init_ss), np.random.default_rng(data_ss)


def initial_params(model_cfg: ModelConfig, seed: int):
    return init_params(model_cfg, _rngs(seed)[0])


def write_history(history: list[StepLog], out_dir: Path) -> None:
    """``loss.csv`` holds the deterministic columns; wall-clock goes to ``timing.csv``."""
    with open(out_dir / "loss.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for h in history:
            w.writerow([h.step, repr(h.loss), repr(h.aux_loss), repr(h.imbalance)])
    with open(out_dir / "timing.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "wall_ms"])
        for h in history:
            w.writerow([h.step, f"{h.wall_ms:.3f}"])
    layers = sorted({k for h in history for k in h.layer_imbalance})
    if layers:
        with open(out_dir / "load_stats.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step"] + [f"layer{k}_imbalance" for k in layers])
            for h in history:
                w.writerow([h.step] + [repr(h.layer_imbalance.get(k, 0.0)) for k in layers])


def train_loop(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    dataset: SyntheticDataset,
    out_dir=None,
    params=None,
) -> TrainResult:
    """Run ``train_cfg.total_steps`` optimisation steps.

    Each step draws a batch, samples logit-normal timesteps and noise, masks
    tokens, runs the model over routing groups of ``group_size_train`` tokens,
    and applies RMSProp. Token-choice models add ``aux_loss_coef`` times the
    summed balance loss. With ``out_dir`` the loss history, config snapshot and
    checkpoints (every ``checkpoint_every`` steps and at the end) are written.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "config.txt").write_text(dump_config(model_cfg, train_cfg))
    init_rng, rng = _rngs(train_cfg.seed)
    if params is None:
        params = init_params(model_cfg, init_rng)
    tokens_all = patchify(dataset.images, model_cfg.patch_size)
    law = TimestepLaw(train_cfg.mu_t, train_cfg.sigma_t)
    tc = model_cfg.num_experts > 0 and model_cfg.routing_mode == "token_choice"
    state = RMSPropState()
    history: list[StepLog] = []
    checkpoints: list[Path] = []
    names = list(params)

    def checkpoint(step: int) -> None:
        if out_dir is not None:
            checkpoints.append(save_checkpoint(params, out_dir / "checkpoints" / f"step_{step:06d}.ckpt", model_cfg))

    for step in range(train_cfg.total_steps):
        t0 = time.perf_counter()
        idx = rng.integers(0, len(dataset), train_cfg.batch_size)
        ctx = dataset.context(dataset.caption_ids[idx])
        batch = make_flow_batch(tokens_all[idx], rng, law)
        if train_cfg.mask_ratio > 0:
            batch = batch.select(sample_keep(train_cfg.batch_size, model_cfg.seq_len, train_cfg.mask_ratio, rng))
        captured = {}

        def model(x_t, t, ctx, positions=None):
            out = forward_tokens(params, model_cfg, x_t, t, ctx, positions, train_cfg.group_size_train)
            captured["out"] = out
            return out.velocity

        with Tape() as tape:
            loss = rf_loss(model, batch, ctx)
            out = captured["out"]
            aux = sum(out.aux_losses[1:], out.aux_losses[0]) if out.aux_losses else None
            total = loss + aux * train_cfg.aux_loss_coef if (tc and aux is not None and train_cfg.aux_loss_coef > 0) else loss
        loss_val = float(loss.data)
        if not np.isfinite(total.data).all():
            if out_dir is not None:
                write_history(history, out_dir)
            raise TrainingDiverged(step, checkpoints[-1] if checkpoints else None)
        grads = backward(total, tape, wrt=[params[n] for n in names])
        params = optimizer_step(params, {n: grads[params[n]] for n in names}, step, train_cfg, state)

        layer_imb = {
            layer: float(np.mean([load_stats(d).imbalance for d in decs])) for layer, decs in out.decisions.items()
        }
        history.append(StepLog(
            step=step,
            loss=loss_val,
            aux_loss=float(aux.data) if aux is not None else 0.0,
            imbalance=float(np.mean(list(layer_imb.values()))) if layer_imb else 0.0,
            wall_ms=(time.perf_counter() - t0) * 1e3,
            layer_imbalance=layer_imb,
        ))
        if train_cfg.log_every and (step % train_cfg.log_every == 0 or step == train_cfg.total_steps - 1):
            logger.info("step %d loss %.5f imbalance %.4f %.1f ms", step, loss_val, history[-1].imbalance,
                        history[-1].wall_ms)
        done = step + 1
        if train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0 and done < train_cfg.total_steps:
            checkpoint(done)

    checkpoint(train_cfg.total_steps)
    if out_dir is not None:
        write_history(history, out_dir)
    return TrainResult(history, params, checkpoints)


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)
