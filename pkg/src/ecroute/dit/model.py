"""Text-conditioned diffusion transformer with interleaved expert-choice MoE layers.

Parameters live in a flat ``dict[str, Tensor]`` keyed by dotted names
(``blocks.2.moe.w1``), which is also the checkpoint layout. Blocks are numbered
from 1; when ``num_experts > 0`` every even-numbered block is sparse.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np

from .. import tensor as T
from ..grouping import regroup_tokens, ungroup_tokens
from ..router import ExpertParams, RouterConfig, RoutingDecision, moe_forward
from ..tensor import Tensor
from .patches import patchify, sincos_2d, unpatchify


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 32
    num_heads: int = 4
    num_kv_heads: int = 2
    text_dim: int | None = None
    patch_size: int = 2
    num_experts: int = 4
    capacity_factor: float = 2.0
    ffn_factor: float = 4.0
    routing_mode: Literal["expert_choice", "token_choice"] = "expert_choice"
    top_k: int = 2
    image_size: int = 16
    channels: int = 3
    text_len: int = 4
    freq_dim: int = 256
    # Dense models only: FFN factor at the even (would-be sparse) positions.
    matched_ffn_factor: float | None = None

    def __post_init__(self):
        if self.text_dim is None:
            object.__setattr__(self, "text_dim", max(1, self.hidden_dim // 2))
        errors = self.problems()
        if errors:
            raise ValueError("invalid ModelConfig: " + "; ".join(errors))

    def problems(self) -> list[str]:
        out = []
        for name in ("num_layers", "hidden_dim", "num_heads", "num_kv_heads", "patch_size", "image_size",
                     "channels", "text_len", "freq_dim", "text_dim"):
            if getattr(self, name) < 1:
                out.append(f"{name} must be >= 1")
        if self.num_experts < 0:
            out.append("num_experts must be >= 0")
        if self.num_heads % max(self.num_kv_heads, 1):
            out.append(f"num_heads={self.num_heads} not divisible by num_kv_heads={self.num_kv_heads}")
        if self.hidden_dim % max(self.num_heads, 1):
            out.append(f"hidden_dim={self.hidden_dim} not divisible by num_heads={self.num_heads}")
        if self.hidden_dim % 4:
            out.append("hidden_dim must be divisible by 4 for 2-D position encoding")
        if self.freq_dim % 2:
            out.append("freq_dim must be even")
        if self.image_size % max(self.patch_size, 1):
            out.append(f"image_size={self.image_size} not divisible by patch_size={self.patch_size}")
        if self.capacity_factor <= 0:
            out.append("capacity_factor must be > 0")
        if self.ffn_factor <= 0:
            out.append("ffn_factor must be > 0")
        if self.routing_mode not in ("expert_choice", "token_choice"):
            out.append(f"routing_mode must be expert_choice or token_choice, got {self.routing_mode!r}")
        if self.num_experts and self.routing_mode == "token_choice" and not 1 <= self.top_k <= self.num_experts:
            out.append(f"top_k={self.top_k} outside [1, num_experts={self.num_experts}]")
        return out

    @property
    def grid(self) -> tuple[int, int]:
        n = self.image_size // self.patch_size
        return (n, n)

    @property
    def seq_len(self) -> int:
        return self.grid[0] * self.grid[1]

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    @property
    def expert_hidden_dim(self) -> int:
        return int(round(self.hidden_dim * self.ffn_factor))

    @property
    def sparse_layers(self) -> list[int]:
        if self.num_experts <= 0:
            return []
        return list(range(2, self.num_layers + 1, 2))

    def ffn_hidden(self, layer: int) -> int:
        if self.num_experts == 0 and self.matched_ffn_factor is not None and layer % 2 == 0:
            return int(round(self.hidden_dim * self.matched_ffn_factor))
        return self.expert_hidden_dim

    def router_config(self) -> RouterConfig:
        return RouterConfig(
            num_experts=self.num_experts,
            capacity_factor=self.capacity_factor,
            expert_hidden_dim=self.expert_hidden_dim,
            routing_mode=self.routing_mode,
            top_k=self.top_k,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TextContext:
    """Caption embeddings, (L, d_y) for one sample or (B, L, d_y) for a batch."""

    embeddings: np.ndarray

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim not in (2, 3) or self.embeddings.shape[-2] < 1:
            raise ValueError(f"TextContext: need at least one text token, got shape {self.embeddings.shape}")
        if not np.isfinite(self.embeddings).all():
            raise ValueError("TextContext: embeddings must be finite")

    @property
    def length(self) -> int:
        return self.embeddings.shape[-2]


@dataclass
class BlockParams:
    attn_q: Tensor
    attn_k: Tensor
    attn_v: Tensor
    attn_o: Tensor
    xattn_q: Tensor
    xattn_k: Tensor
    xattn_v: Tensor
    xattn_o: Tensor
    ada_w: Tensor
    ada_b: Tensor
    ffn_w1: Tensor | None = None
    ffn_w2: Tensor | None = None
    experts: ExpertParams | None = None

    @property
    def sparse(self) -> bool:
        return self.experts is not None


def block_params(params: dict[str, Tensor], layer: int) -> BlockParams:
    p = f"blocks.{layer}."
    bp = BlockParams(
        attn_q=params[p + "attn.wq"], attn_k=params[p + "attn.wk"],
        attn_v=params[p + "attn.wv"], attn_o=params[p + "attn.wo"],
        xattn_q=params[p + "xattn.wq"], xattn_k=params[p + "xattn.wk"],
        xattn_v=params[p + "xattn.wv"], xattn_o=params[p + "xattn.wo"],
        ada_w=params[p + "adaln.w"], ada_b=params[p + "adaln.b"],
    )
    if p + "moe.w_r" in params:
        bp.experts = ExpertParams(params[p + "moe.w_r"], params[p + "moe.w1"], params[p + "moe.w2"])
    else:
        bp.ffn_w1, bp.ffn_w2 = params[p + "ffn.w1"], params[p + "ffn.w2"]
    return bp


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, dy, e = cfg.hidden_dim, cfg.text_dim, cfg.num_experts
    kv = cfg.num_kv_heads * cfg.head_dim
    shapes: dict[str, tuple[int, ...]] = {
        "patch.w": (cfg.patch_dim, d),
        "patch.b": (d,),
        "temb.w1": (cfg.freq_dim, d),
        "temb.b1": (d,),
        "temb.w2": (d, d),
        "temb.b2": (d,),
    }
    sparse = set(cfg.sparse_layers)
    for i in range(1, cfg.num_layers + 1):
        p = f"blocks.{i}."
        shapes.update({
            p + "attn.wq": (d, d), p + "attn.wk": (d, kv), p + "attn.wv": (d, kv), p + "attn.wo": (d, d),
            p + "xattn.wq": (d, d), p + "xattn.wk": (dy, d), p + "xattn.wv": (dy, d), p + "xattn.wo": (d, d),
            p + "adaln.w": (d, 6 * d), p + "adaln.b": (6 * d,),
        })
        if i in sparse:
            h = cfg.expert_hidden_dim
            shapes.update({p + "moe.w_r": (d, e), p + "moe.w1": (e, d, h), p + "moe.w2": (e, h, d)})
        else:
            h = cfg.ffn_hidden(i)
            shapes.update({p + "ffn.w1": (d, h), p + "ffn.w2": (h, d)})
    shapes.update({"final.w": (d, cfg.patch_dim), "final.b": (cfg.patch_dim,)})
    return shapes


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Xavier-uniform projections, N(0, 0.02) timestep MLP and router, zero AdaLN and head."""
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("final.") or ".adaln." in name or leaf.startswith("b"):
            arr = np.zeros(shape)
        elif name.startswith("temb.") or leaf == "w_r":
            arr = rng.normal(0.0, 0.02, shape)
        else:
            fan_in, fan_out = shape[-2], shape[-1]
            lim = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-lim, lim, shape)
        params[name] = Tensor(arr, requires_grad=True, name=name)
    return params


# ---------------------------------------------------------------------------
# components


def timestep_frequencies(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * t[:, None] * freqs[None]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1)


def timestep_embed(t, params: dict[str, Tensor], cfg: ModelConfig) -> Tensor:
    """(B,) times in [0, 1] to (B, d_x): sinusoidal encoding, Linear, SiLU, Linear."""
    f = Tensor(timestep_frequencies(t, cfg.freq_dim))
    h = T.silu(f @ params["temb.w1"] + params["temb.b1"])
    return h @ params["temb.w2"] + params["temb.b2"]


def adaln_modulate(t_emb: Tensor, block: BlockParams) -> list[Tensor]:
    """Six (B, 1, d) modulations: shift, scale, gate for attention, then for the FFN."""
    b, d = t_emb.shape
    mods = (T.silu(t_emb) @ block.ada_w + block.ada_b).reshape(b, 6, d)
    return [mods[:, j : j + 1, :] for j in range(6)]


def _modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    return T.layer_norm(x) * (scale_ + 1.0) + shift


def gqa_self_attention(x: Tensor, block: BlockParams, num_heads: int, num_kv_heads: int) -> Tensor:
    """Scaled dot-product attention where query-head groups share key/value heads."""
    b, s, d = x.shape
    hd = d // num_heads
    grp = num_heads // num_kv_heads
    q = (x @ block.attn_q).reshape(b, s, num_kv_heads, grp, hd)
    q = T.transpose(q, (0, 2, 3, 1, 4)).reshape(b, num_kv_heads, grp * s, hd)
    k = T.transpose((x @ block.attn_k).reshape(b, s, num_kv_heads, hd), (0, 2, 3, 1))
    v = T.transpose((x @ block.attn_v).reshape(b, s, num_kv_heads, hd), (0, 2, 1, 3))
    att = T.softmax(T.scale(q @ k, 1.0 / math.sqrt(hd)), axis=-1)
    o = (att @ v).reshape(b, num_kv_heads, grp, s, hd)
    o = T.transpose(o, (0, 3, 1, 2, 4)).reshape(b, s, d)
    return o @ block.attn_o


def cross_attention(x: Tensor, ctx, block: BlockParams, num_heads: int) -> Tensor:
    """Multi-head attention of image tokens over text tokens, scores scaled by 1/sqrt(d_x)."""
    emb = ctx.embeddings if isinstance(ctx, TextContext) else np.asarray(ctx, dtype=np.float64)
    b, s, d = x.shape
    if emb.ndim == 2:
        emb = np.broadcast_to(emb, (b,) + emb.shape)
    if emb.shape[1] == 0:
        raise ValueError("cross_attention: empty text context")
    L = emb.shape[1]
    hd = d // num_heads
    y = Tensor(emb)
    q = T.transpose((x @ block.xattn_q).reshape(b, s, num_heads, hd), (0, 2, 1, 3))
    k = T.transpose((y @ block.xattn_k).reshape(b, L, num_heads, hd), (0, 2, 3, 1))
    v = T.transpose((y @ block.xattn_v).reshape(b, L, num_heads, hd), (0, 2, 1, 3))
    att = T.softmax(T.scale(q @ k, 1.0 / math.sqrt(d)), axis=-1)
    o = T.transpose(att @ v, (0, 2, 1, 3)).reshape(b, s, d)
    return o @ block.xattn_o


@dataclass
class BlockOutput:
    output: Tensor
    decisions: list[RoutingDecision] = field(default_factory=list)
    aux_loss: Tensor | None = None


def dit_block(
    x: Tensor,
    ctx,
    t_emb: Tensor,
    block: BlockParams,
    cfg: ModelConfig,
    router_cfg: RouterConfig | None = None,
    group_size: int | None = None,
) -> BlockOutput:
    """One block: gated self-attention, ungated cross-attention residual, gated FFN or MoE.

    ``group_size`` sets the routing group over the flattened (B*S) tokens;
    ``None`` routes each sequence separately.
    """
    shift_a, scale_a, gate_a, shift_f, scale_f, gate_f = adaln_modulate(t_emb, block)
    h = gqa_self_attention(_modulate(x, shift_a, scale_a), block, cfg.num_heads, cfg.num_kv_heads)
    x_s = x + gate_a * h
    x_p = x_s + cross_attention(x_s, ctx, block, cfg.num_heads)
    h = _modulate(x_p, shift_f, scale_f)
    if not block.sparse:
        return BlockOutput(x_p + gate_f * (T.gelu(h @ block.ffn_w1) @ block.ffn_w2))
    router_cfg = router_cfg or cfg.router_config()
    b, s, _ = h.shape
    grouped, info = regroup_tokens(h, group_size or s)
    res = moe_forward(grouped, block.experts, router_cfg, info.valid if info.pad else None)
    return BlockOutput(x_p + gate_f * ungroup_tokens(res.output, info), res.decisions, res.aux_loss)


@dataclass
class ForwardOutput:
    velocity: Tensor
    decisions: dict[int, list[RoutingDecision]]
    aux_losses: list[Tensor]


def forward_tokens(
    params: dict[str, Tensor],
    cfg: ModelConfig,
    tokens,
    t,
    ctx,
    positions: np.ndarray | None = None,
    group_size: int | None = None,
) -> ForwardOutput:
    """Velocity prediction for (B, K, patch_dim) tokens at grid ``positions`` (B, K).

    ``positions=None`` means the full raster-ordered sequence.
    """
    tokens = T.as_tensor(tokens)
    b, k, _ = tokens.shape
    pos_table = sincos_2d(cfg.hidden_dim, cfg.grid)
    pos = pos_table[:k][None] if positions is None else pos_table[np.asarray(positions)]
    x = tokens @ params["patch.w"] + params["patch.b"] + Tensor(np.broadcast_to(pos, (b, k, cfg.hidden_dim)))
    t_emb = timestep_embed(np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)), params, cfg)
    router_cfg = cfg.router_config() if cfg.num_experts else None
    decisions: dict[int, list[RoutingDecision]] = {}
    aux: list[Tensor] = []
    for layer in range(1, cfg.num_layers + 1):
        out = dit_block(x, ctx, t_emb, block_params(params, layer), cfg, router_cfg, group_size)
        x = out.output
        if block_is_sparse(cfg, layer):
            decisions[layer] = out.decisions
            if out.aux_loss is not None:
                aux.append(out.aux_loss)
    v = T.layer_norm(x) @ params["final.w"] + params["final.b"]
    return ForwardOutput(v, decisions, aux)


def block_is_sparse(cfg: ModelConfig, layer: int) -> bool:
    return cfg.num_experts > 0 and layer % 2 == 0


def model_forward(params, cfg: ModelConfig, x_t: np.ndarray, t, ctx, group_size: int | None = None):
    """Images (B, H, W, ch) to predicted velocity images plus per-layer routing decisions."""
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 3
    if single:
        x_t = x_t[None]
    expected = (cfg.image_size, cfg.image_size, cfg.channels)
    if x_t.shape[1:] != expected:
        raise ValueError(f"model_forward: image shape {x_t.shape[1:]} does not match config {expected}")
    out = forward_tokens(params, cfg, patchify(x_t, cfg.patch_size), t, ctx, group_size=group_size)
    v = unpatchify(out.velocity.data, cfg.grid, cfg.patch_size, cfg.channels)
    return (v[0] if single else v), out.decisions


def velocity_field(params, cfg: ModelConfig, ctx, group_size: int | None = None, on_decisions=None):
    """Closure ``v(x, t)`` over images for the sampler; ``on_decisions(decisions)`` observes routing."""

    def v(x: np.ndarray, t: float) -> np.ndarray:
        out, decisions = model_forward(params, cfg, x, t, ctx, group_size)
        if on_decisions is not None:
            on_decisions(decisions)
        return out

    return v


def with_overrides(cfg: ModelConfig, **kw) -> ModelConfig:
    return replace(cfg, **kw)
