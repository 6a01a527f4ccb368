"""RMSProp with momentum and linear warmup."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..tensor import Tensor


@dataclass
class RMSPropState:
    mean_square: dict[str, np.ndarray] = field(default_factory=dict)
    momentum: dict[str, np.ndarray] = field(default_factory=dict)


def learning_rate_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 at step 0 to ``base_lr`` at ``warmup_steps``, constant after."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    step: int,
    cfg,
    state: RMSPropState,
) -> dict[str, Tensor]:
    """One update; returns fresh parameter tensors and advances ``state``.

    ``ms = rho*ms + (1-rho)*g^2``, ``m = beta*m + lr*g/(sqrt(ms)+eps)``, ``p -= m``.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient for parameter {name!r} at step {step}")
    lr = learning_rate_at(step, cfg.learning_rate, cfg.warmup_steps)
    rho, beta, eps = cfg.rms_decay, cfg.momentum, cfg.eps
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        ms = state.mean_square.get(name)
        ms = (1.0 - rho) * g * g if ms is None else rho * ms + (1.0 - rho) * g * g
        mom = state.momentum.get(name)
        upd = lr * g / (np.sqrt(ms) + eps)
        mom = upd if mom is None else beta * mom + upd
        state.mean_square[name] = ms
        state.momentum[name] = mom
        out[name] = Tensor(p.data - mom, requires_grad=p.requires_grad, name=p.name)
    return out
