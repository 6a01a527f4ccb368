"""Rectified-flow targets, logit-normal timesteps and the Euler sampler.

Data sits at t=0 and standard-normal noise at t=1; the straight path between
them has the constant velocity ``x1 - x0``, which the model regresses.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class TimestepLaw:
    mu_t: float = 0.0
    sigma_t: float = 1.0

    def __post_init__(self):
        if not self.sigma_t > 0:
            raise ValueError(f"sigma_t must be > 0, got {self.sigma_t}")


def sample_t_logit_normal(law: TimestepLaw, rng: np.random.Generator, size=None):
    """Draw ``sigmoid(n)`` with ``n ~ Normal(mu_t, sigma_t)``; values lie strictly in (0, 1)."""
    n = rng.normal(law.mu_t, law.sigma_t, size)
    t = expit(n)
    # keep endpoints excluded even when the normal draw saturates float64
    return np.clip(t, np.finfo(np.float64).tiny, 1.0 - np.finfo(np.float64).epsneg)


def interpolate_path(x0, x1, t):
    """``t * x1 + (1 - t) * x0``; ``t`` broadcasts over trailing axes (one value per sample)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise ValueError(f"interpolate_path: shapes {x0.shape} and {x1.shape} differ")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim:
        t = t.reshape(t.shape + (1,) * (x0.ndim - t.ndim))
    return t * x1 + (1.0 - t) * x0


@dataclass
class FlowBatch:
    """One training batch on the straight noise-data path.

    ``positions`` optionally records which grid tokens survive masking; when
    set, ``x0``/``x1``/``x_t``/``target`` hold only those tokens.
    """

    x0: np.ndarray
    x1: np.ndarray
    t: np.ndarray
    x_t: np.ndarray
    target: np.ndarray
    positions: np.ndarray | None = None

    @classmethod
    def build(cls, x0, x1, t, positions=None) -> FlowBatch:
        x0 = np.asarray(x0, dtype=np.float64)
        x1 = np.asarray(x1, dtype=np.float64)
        return cls(x0, x1, np.asarray(t, dtype=np.float64), interpolate_path(x0, x1, t), x1 - x0, positions)

    def select(self, positions: np.ndarray) -> FlowBatch:
        """Keep grid tokens ``positions`` (B, K) of (B, S, ...) fields."""
        pick = lambda a: np.take_along_axis(a, positions.reshape(positions.shape + (1,) * (a.ndim - 2)), axis=1)
        return FlowBatch(pick(self.x0), pick(self.x1), self.t, pick(self.x_t), pick(self.target), positions)


def make_flow_batch(x0, rng: np.random.Generator, law: TimestepLaw = TimestepLaw()) -> FlowBatch:
    x0 = np.asarray(x0, dtype=np.float64)
    t = sample_t_logit_normal(law, rng, x0.shape[0])
    x1 = rng.standard_normal(x0.shape)
    return FlowBatch.build(x0, x1, t)


def rf_loss(model: Callable, batch: FlowBatch, ctx=None) -> Tensor:
    """Mean over samples and tokens of the squared error ``||(x1 - x0) - v(x_t, t)||^2``.

    ``model(x_t, t, ctx)`` returns a Tensor shaped like the target; the last
    axis is the per-token feature axis. Masked batches pass ``positions=``.
    """
    if batch.positions is None:
        v = model(batch.x_t, batch.t, ctx)
    else:
        v = model(batch.x_t, batch.t, ctx, positions=batch.positions)
    v = T.as_tensor(v)
    if v.shape != batch.target.shape:
        raise ValueError(f"rf_loss: model output {v.shape} does not match target {batch.target.shape}")
    err = Tensor(batch.target) - v
    per_token = T.square(err).sum(axis=-1)
    return per_token.mean()


class SamplerDivergence(FloatingPointError):
    def __init__(self, step: int):
        super().__init__(f"euler_sampler: non-finite state at step {step}")
        self.step = step


def euler_sampler(
    model: Callable[[np.ndarray, float], np.ndarray],
    steps: int,
    shape: tuple[int, ...] | None = None,
    rng: np.random.Generator | None = None,
    x1: np.ndarray | None = None,
    on_step: Callable[[int, float, np.ndarray], None] | None = None,
) -> np.ndarray:
    """Integrate ``dx = v(x, t) dt`` from noise at t=1 down to t=0 with ``steps`` Euler steps.

    Start from ``x1`` if given, else draw ``Normal(0, I)`` of ``shape`` from ``rng``.
    ``on_step(k, t, x)`` is called before each update.
    """
    if steps < 1:
        raise ValueError(f"euler_sampler: steps must be >= 1, got {steps}")
    if x1 is None:
        if shape is None or rng is None:
            raise ValueError("euler_sampler: need x1, or both shape and rng")
        x1 = rng.standard_normal(shape)
    x = np.array(x1, dtype=np.float64)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        if on_step is not None:
            on_step(k, t, x)
        v = np.asarray(T.as_tensor(model(x, t)).data)
        x = x - dt * v
        if not np.isfinite(x).all():
            raise SamplerDivergence(k)
    return x
