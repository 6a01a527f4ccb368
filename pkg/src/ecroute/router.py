"""Expert-choice and token-choice mixture-of-experts routing.

Expert choice: every expert picks its ``C = floor(S * f_c / E)`` highest-affinity
tokens from the whole group, so all experts carry exactly ``C`` tokens. Token
choice (the baseline): every token picks its top-``k`` experts and each expert
keeps the first ``C`` arrivals in token order.

Routing functions accept one group of shape (S, ...) or a stack of groups
(G, S, ...). :func:`moe_forward` is the batched workhorse used by the model;
:func:`ec_moe_layer` is the single-group entry point.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor, topk_stable

logger = logging.getLogger(__name__)

RoutingMode = Literal["expert_choice", "token_choice"]


@dataclass(frozen=True)
class RouterConfig:
    num_experts: int
    capacity_factor: float = 2.0
    expert_hidden_dim: int = 256
    routing_mode: RoutingMode = "expert_choice"
    top_k: int = 2

    def __post_init__(self):
        if self.num_experts < 1:
            raise ValueError(f"num_experts must be >= 1, got {self.num_experts}")
        if not self.capacity_factor > 0:
            raise ValueError(f"capacity_factor must be > 0, got {self.capacity_factor}")
        if self.expert_hidden_dim < 1:
            raise ValueError(f"expert_hidden_dim must be >= 1, got {self.expert_hidden_dim}")
        if self.routing_mode not in ("expert_choice", "token_choice"):
            raise ValueError(f"unknown routing_mode {self.routing_mode!r}")
        if self.routing_mode == "token_choice" and not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k must be in [1, {self.num_experts}], got {self.top_k}")


@dataclass
class ExpertParams:
    """Stacked expert weights: w1 (E, d, h), w2 (E, h, d), router w_r (d, E)."""

    w_r: Tensor
    w1: Tensor
    w2: Tensor

    def __post_init__(self):
        e = self.w_r.shape[1]
        d = self.w_r.shape[0]
        if self.w1.ndim != 3 or self.w1.shape[:2] != (e, d):
            raise ShapeError(f"ExpertParams: w1 shape {self.w1.shape} does not match router {self.w_r.shape}")
        h = self.w1.shape[2]
        if self.w2.shape != (e, h, d):
            raise ShapeError(f"ExpertParams: w2 shape {self.w2.shape}, expected {(e, h, d)}")

    @property
    def num_experts(self) -> int:
        return self.w_r.shape[1]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, hidden: int, num_experts: int) -> ExpertParams:
        lim1 = np.sqrt(6.0 / (d + hidden))
        return cls(
            w_r=Tensor(rng.normal(0.0, 0.02, (d, num_experts)), requires_grad=True),
            w1=Tensor(rng.uniform(-lim1, lim1, (num_experts, d, hidden)), requires_grad=True),
            w2=Tensor(rng.uniform(-lim1, lim1, (num_experts, hidden, d)), requires_grad=True),
        )


@dataclass
class RoutingDecision:
    """Routing of one token group.

    Attributes:
        affinity: (S, E) softmax affinities.
        gating: (S, E) combine weights; zero where no assignment was kept.
        dispatch: (E, C) token index per expert slot, in selection order.
        capacity: slots per expert ``C``.
        slot_valid: (E, C) False for empty token-choice slots.
        mode: routing mode that produced the decision.
    """

    affinity: np.ndarray
    gating: np.ndarray
    dispatch: np.ndarray
    capacity: int
    slot_valid: np.ndarray = field(default=None)
    mode: RoutingMode = "expert_choice"

    def __post_init__(self):
        if self.slot_valid is None:
            self.slot_valid = np.ones(self.dispatch.shape, dtype=bool)

    @property
    def num_tokens(self) -> int:
        return self.affinity.shape[0]

    @property
    def num_experts(self) -> int:
        return self.affinity.shape[1]

    def expert_lists(self) -> list[list[int]]:
        return [row[ok].tolist() for row, ok in zip(self.dispatch, self.slot_valid)]

    def token_counts(self) -> np.ndarray:
        """Number of experts processing each token."""
        return np.bincount(self.dispatch[self.slot_valid], minlength=self.num_tokens)

    def expert_counts(self) -> np.ndarray:
        return self.slot_valid.sum(axis=1)

    def to_csv(self) -> str:
        """Rows ``token_index,expert_index,gate_value``, expert-major, slot order."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["token_index", "expert_index", "gate_value"])
        for i, (row, ok) in enumerate(zip(self.dispatch, self.slot_valid)):
            for s in row[ok]:
                w.writerow([int(s), i, repr(float(self.gating[s, i]))])
        return buf.getvalue()


def decision_from_csv(text: str, num_tokens: int, num_experts: int) -> tuple[np.ndarray, np.ndarray]:
    """Parse :meth:`RoutingDecision.to_csv` output into (S, E) gating and per-token counts."""
    gating = np.zeros((num_tokens, num_experts))
    counts = np.zeros(num_tokens, dtype=int)
    for row in csv.DictReader(io.StringIO(text)):
        s, i = int(row["token_index"]), int(row["expert_index"])
        gating[s, i] = float(row["gate_value"])
        counts[s] += 1
    return gating, counts


@dataclass(frozen=True)
class LoadStats:
    expert_counts: np.ndarray
    token_counts: np.ndarray
    imbalance: float


def load_stats(decision: RoutingDecision) -> LoadStats:
    """Per-expert and per-token assignment counts.

    ``imbalance`` is the coefficient of variation (population std / mean) of
    the per-expert counts; 0 means every expert carries the same load.
    """
    ec = decision.expert_counts()
    m = ec.mean()
    imbalance = float(ec.std() / m) if m > 0 else 0.0
    return LoadStats(ec, decision.token_counts(), imbalance)


def capacity_of(seq_len: int, capacity_factor: float, num_experts: int) -> int:
    raw = seq_len * capacity_factor / num_experts
    if raw < 1:
        logger.warning(
            "capacity S*f_c/E = %d*%g/%d = %.4g < 1; inflated to 1", seq_len, capacity_factor, num_experts, raw
        )
        return 1
    return int(np.floor(raw))


def compute_affinity(x_prime: Tensor, w_r: Tensor) -> Tensor:
    """Softmax over experts of ``x' W_r``; works on (S, d) or (G, S, d)."""
    x_prime, w_r = as_tensor(x_prime), as_tensor(w_r)
    if w_r.ndim != 2 or x_prime.shape[-1] != w_r.shape[0]:
        raise ShapeError(f"compute_affinity: x' shape {x_prime.shape} incompatible with W_r shape {w_r.shape}")
    return T.softmax(x_prime @ w_r, axis=-1)


# ---------------------------------------------------------------------------
# selection (numpy, index sets are treated as locally constant)


def _select_expert_choice(a: np.ndarray, capacity: int) -> tuple[np.ndarray, np.ndarray]:
    s = a.shape[-2]
    if capacity > s:
        raise ValueError(f"expert_choice_select: capacity {capacity} exceeds sequence length {s}")
    _, idx = topk_stable(np.swapaxes(a, -1, -2), capacity, axis=-1)
    return idx, np.ones(idx.shape, dtype=bool)


def _select_token_choice(a: np.ndarray, k: int, capacity: int, token_valid: np.ndarray | None):
    g, s, e = a.shape
    if not 1 <= k <= e:
        raise ValueError(f"token_choice_select: k={k} out of range for {e} experts")
    _, top = topk_stable(a, k, axis=-1)
    chosen = np.zeros(a.shape, dtype=bool)
    np.put_along_axis(chosen, top, True, axis=-1)
    if token_valid is not None:
        chosen &= token_valid[..., None]
    idx = np.zeros((g, e, capacity), dtype=np.intp)
    valid = np.zeros((g, e, capacity), dtype=bool)
    for gi in range(g):
        for i in range(e):
            toks = np.flatnonzero(chosen[gi, :, i])[:capacity]
            idx[gi, i, : len(toks)] = toks
            valid[gi, i, : len(toks)] = True
    return idx, valid, chosen


def _gating_matrix(shape, idx: np.ndarray, valid: np.ndarray, gates: np.ndarray) -> np.ndarray:
    gmat = np.zeros(shape)
    gi, ei, _ = np.nonzero(valid)
    gmat[gi, idx[valid], ei] = gates[valid]
    return gmat


def _decisions(affinity, gates, idx, valid, capacity, mode) -> list[RoutingDecision]:
    gmat = _gating_matrix(affinity.shape, idx, valid, gates)
    return [
        RoutingDecision(affinity[g], gmat[g], idx[g], capacity, valid[g], mode) for g in range(affinity.shape[0])
    ]


def expert_choice_select(affinity, capacity: int) -> RoutingDecision:
    a = np.asarray(affinity.data if isinstance(affinity, Tensor) else affinity, dtype=np.float64)
    idx, valid = _select_expert_choice(a[None], capacity)
    gates = np.take_along_axis(np.swapaxes(a, 0, 1), idx[0], axis=1)[None]
    return _decisions(a[None], gates, idx, valid, capacity, "expert_choice")[0]


def token_choice_select(affinity, k: int, capacity: int | None = None, capacity_factor: float = 2.0) -> RoutingDecision:
    """Each token takes its top-``k`` experts; experts keep the first ``capacity`` arrivals.

    Kept gates are the token's affinities renormalised over its own top-``k``.
    ``capacity`` defaults to ``capacity_of(S, capacity_factor, E)``.
    """
    a = np.asarray(affinity.data if isinstance(affinity, Tensor) else affinity, dtype=np.float64)
    s, e = a.shape
    if capacity is None:
        capacity = capacity_of(s, capacity_factor, e)
    idx, valid, chosen = _select_token_choice(a[None], k, capacity, None)
    w = _renormalised(a[None], chosen)
    gates = np.take_along_axis(np.swapaxes(w, 1, 2), idx, axis=2) * valid
    return _decisions(a[None], gates, idx, valid, capacity, "token_choice")[0]


def _renormalised(a: np.ndarray, chosen: np.ndarray) -> np.ndarray:
    sel = a * chosen
    denom = sel.sum(axis=-1, keepdims=True)
    return sel / np.where(denom > 0, denom, 1.0)


# ---------------------------------------------------------------------------
# dispatch / experts / combine


def _dispatch(x: Tensor, idx: np.ndarray) -> Tensor:
    g, s, d = x.shape
    _, e, c = idx.shape
    flat_idx = (np.arange(g)[:, None, None] * s + idx).reshape(-1)
    return T.gather(T.reshape(x, (g * s, d)), flat_idx).reshape(g, e, c, d)


def _combine(expert_out: Tensor, gates: Tensor, idx: np.ndarray, seq_len: int) -> Tensor:
    g, e, c, d = expert_out.shape
    weighted = expert_out * gates.reshape(g, e, c, 1)
    flat_idx = (np.arange(g)[:, None, None] * seq_len + idx).reshape(-1)
    out = T.scatter_add(weighted.reshape(g * e * c, d), flat_idx, g * seq_len)
    return out.reshape(g, seq_len, d)


def run_experts(x_in: Tensor, params: ExpertParams) -> Tensor:
    """Apply expert ``i`` (GeLU two-layer FFN) to slots ``x_in[:, i]``; x_in is (G, E, C, d)."""
    g, e, c, d = x_in.shape
    h = T.transpose(x_in, (1, 0, 2, 3)).reshape(e, g * c, d)
    h = T.gelu(h @ params.w1) @ params.w2
    return T.transpose(h.reshape(e, g, c, d), (1, 0, 2, 3))


def dispatch_tokens(x_prime: Tensor, decision: RoutingDecision) -> Tensor:
    """(S, d) tokens to (E, C, d) expert slots."""
    x_prime = as_tensor(x_prime)
    if x_prime.ndim != 2 or x_prime.shape[0] != decision.num_tokens:
        raise ShapeError(f"dispatch_tokens: x' shape {x_prime.shape} for a decision over {decision.num_tokens} tokens")
    e, c = decision.dispatch.shape
    return _dispatch(x_prime.reshape(1, *x_prime.shape), decision.dispatch[None]).reshape(e, c, x_prime.shape[1])


def combine_outputs(expert_out: Tensor, decision: RoutingDecision, gates: Tensor | None = None) -> Tensor:
    """Gate-weighted sum of expert slot outputs back onto tokens; unselected tokens get 0.

    ``gates`` (E, C) overrides the decision's constant gate values so gradients
    can reach the router.
    """
    expert_out = as_tensor(expert_out)
    e, c = decision.dispatch.shape
    if expert_out.ndim != 3 or expert_out.shape[:2] != (e, c):
        raise ShapeError(f"combine_outputs: expert output {expert_out.shape}, expected ({e}, {c}, d)")
    if gates is None:
        slot_gates = decision.gating[decision.dispatch, np.arange(e)[:, None]] * decision.slot_valid
        gates = Tensor(slot_gates)
    d = expert_out.shape[2]
    out = _combine(expert_out.reshape(1, e, c, d), gates.reshape(1, e, c), decision.dispatch[None], decision.num_tokens)
    return out.reshape(decision.num_tokens, d)


@dataclass
class MoEOutput:
    output: Tensor
    decisions: list[RoutingDecision]
    affinity: Tensor
    aux_loss: Tensor | None = None


def moe_forward(
    x: Tensor, params: ExpertParams, cfg: RouterConfig, token_valid: np.ndarray | None = None
) -> MoEOutput:
    """Route every group of ``x`` (G, S, d) and combine the expert outputs.

    ``token_valid`` (G, S) marks padding; padded tokens get zero affinity and are
    never routed ahead of a real token.
    """
    x = as_tensor(x)
    g, s, _ = x.shape
    if params.num_experts != cfg.num_experts:
        raise ShapeError(f"moe_forward: {params.num_experts} expert weights for {cfg.num_experts} experts")
    affinity = compute_affinity(x, params.w_r)
    if token_valid is not None and not token_valid.all():
        affinity = affinity * Tensor(token_valid[..., None].astype(np.float64))
    a = affinity.data
    capacity = capacity_of(s, cfg.capacity_factor, cfg.num_experts)
    e = cfg.num_experts
    flat_pos = lambda idx: (np.arange(g)[:, None, None] * s * e + idx * e + np.arange(e)[None, :, None]).reshape(-1)

    if cfg.routing_mode == "expert_choice":
        idx, valid = _select_expert_choice(a, capacity)
        gates = T.gather(affinity.reshape(g * s * e), flat_pos(idx)).reshape(g, e, capacity)
        aux = None
    else:
        idx, valid, chosen = _select_token_choice(a, cfg.top_k, capacity, token_valid)
        sel = affinity * Tensor(chosen.astype(np.float64))
        denom = sel.sum(axis=-1, keepdims=True) + Tensor((~chosen.any(axis=-1, keepdims=True)).astype(np.float64))
        w = sel / denom
        gates = T.gather(w.reshape(g * s * e), flat_pos(idx)).reshape(g, e, capacity)
        gates = gates * Tensor(valid.astype(np.float64))
        aux = aux_balance_loss(affinity, token_valid=token_valid)

    expert_out = run_experts(_dispatch(x, idx), params)
    out = _combine(expert_out, gates, idx, s)
    decisions = _decisions(a, gates.data, idx, valid, capacity, cfg.routing_mode)
    return MoEOutput(out, decisions, affinity, aux)


def ec_moe_layer(x_prime: Tensor, params: ExpertParams, cfg: RouterConfig) -> tuple[Tensor, RoutingDecision]:
    """Expert-choice MoE over one (S, d) token group."""
    if cfg.routing_mode != "expert_choice":
        raise ValueError("ec_moe_layer requires routing_mode='expert_choice'")
    x_prime = as_tensor(x_prime)
    s, d = x_prime.shape
    res = moe_forward(x_prime.reshape(1, s, d), params, cfg)
    return res.output.reshape(s, d), res.decisions[0]


def aux_balance_loss(affinity: Tensor, decision: RoutingDecision | None = None, token_valid=None) -> Tensor:
    """Switch-style balance loss ``E * sum_i f_i * P_i``.

    ``f_i`` is the fraction of tokens whose top-1 expert is ``i`` and ``P_i`` the
    mean affinity for expert ``i``. Equals 1 when routing is uniform.
    """
    affinity = as_tensor(affinity)
    a = affinity.data
    e = a.shape[-1]
    flat_a = affinity.reshape(-1, e)
    if token_valid is None:
        mask = np.ones(flat_a.shape[0], dtype=bool)
    else:
        mask = np.asarray(token_valid, dtype=bool).reshape(-1)
    n = int(mask.sum())
    top1 = np.argmax(a.reshape(-1, e)[mask], axis=1)
    f = np.bincount(top1, minlength=e) / n
    p = (flat_a * Tensor(mask[:, None].astype(np.float64))).sum(axis=0) * (1.0 / n)
    return T.scale((p * Tensor(f)).sum(), e)
