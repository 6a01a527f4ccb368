"""Closed-form parameter accounting for dense and expert-choice DiT configurations."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ArchSpec:
    """The architecture columns needed for parameter arithmetic."""

    name: str
    num_layers: int
    hidden_dim: int
    num_heads: int
    num_kv_heads: int
    ffn_factor: float = 4.0
    capacity_factor: float = 2.0

    @property
    def num_sparse_layers(self) -> int:
        return self.num_layers // 2

    @property
    def attn_key_dim(self) -> float:
        return self.hidden_dim / self.num_heads


@dataclass(frozen=True)
class Preset:
    arch: ArchSpec
    dense_total: float
    totals: dict[int, float]
    activated: float
    default_experts: int
    note: str = ""


PRESETS: dict[str, Preset] = {
    "XL": Preset(ArchSpec("XL", 28, 1152, 18, 6), 1.47e9, {8: 2.51e9, 16: 3.70e9, 32: 6.08e9}, 1.62e9, 8),
    "XXL": Preset(ArchSpec("XXL", 38, 1536, 24, 6), 2.35e9, {8: 4.87e9, 16: 7.73e9, 32: 13.47e9}, 2.71e9, 8),
    "3XL": Preset(
        ArchSpec("3XL", 42, 2304, 36, 6), 4.50e9, {8: 10.74e9, 16: 17.87e9, 32: 32.15e9}, 5.18e9, 8,
        note="tabulated activated count (5.18B) disagrees with the increment formula under f_c=2 "
        "and 21 sparse layers",
    ),
    "M": Preset(
        ArchSpec("M", 38, 3072, 48, 12), 8.03e9, {64: 97.21e9}, 8.27e9, 64,
        note="dense base has 46 layers while the sparse model has 38, so table differences mix two depths",
    ),
}


@dataclass(frozen=True)
class ActivatedBreakdown:
    dense_ffn_size: float
    router_size: float
    attn_size: float
    activated_dense_total: float
    activated_sparse_total: float
    increment: float


def activated_breakdown(arch: ArchSpec, num_experts: int) -> ActivatedBreakdown:
    """Per-term evaluation of the activated-parameter increment over the sparse layers."""
    arch = as_arch(arch)
    d = arch.hidden_dim
    dense_ffn_size = 2 * d * d * arch.ffn_factor
    router_size = num_experts * d
    attn_size = d * (arch.num_heads + arch.num_kv_heads * 2 + arch.num_heads) * arch.attn_key_dim
    n = arch.num_sparse_layers
    dense_total = (attn_size + dense_ffn_size) * n
    sparse_total = (attn_size + 2 * d * d * arch.ffn_factor * arch.capacity_factor + router_size) * n
    return ActivatedBreakdown(dense_ffn_size, router_size, attn_size, dense_total, sparse_total, sparse_total - dense_total)


def as_arch(cfg) -> ArchSpec:
    """Accept an :class:`ArchSpec` or a model config carrying the same fields."""
    if isinstance(cfg, ArchSpec):
        return cfg
    return ArchSpec(
        "custom", cfg.num_layers, cfg.hidden_dim, cfg.num_heads, cfg.num_kv_heads,
        cfg.ffn_factor, cfg.capacity_factor,
    )


def activated_param_increment(cfg, num_experts: int | None = None) -> float:
    """Extra parameters touched per token by the sparse model over its dense base."""
    arch = as_arch(cfg)
    if num_experts is None:
        num_experts = getattr(cfg, "num_experts", 0)
    if num_experts < 0:
        raise ValueError("num_experts must be >= 0")
    return activated_breakdown(arch, num_experts).increment


def total_param_delta(cfg, num_experts: int) -> float:
    """Extra stored parameters of an ``num_experts``-expert model over its dense base.

    Each sparse layer holds ``E - 1`` additional FFN copies and a ``d x E`` router.
    """
    if num_experts < 1:
        raise ValueError("num_experts must be >= 1")
    arch = as_arch(cfg)
    d = arch.hidden_dim
    ffn = 2 * d * d * arch.ffn_factor
    return arch.num_sparse_layers * ((num_experts - 1) * ffn + num_experts * d)


def param_report(name: str, experts: list[int] | None = None) -> str:
    """Human-readable accounting for a preset, compared with its tabulated totals."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}")
    pre = PRESETS[name]
    arch = pre.arch
    experts = experts or sorted(pre.totals)
    bd = activated_breakdown(arch, pre.default_experts)
    lines = [
        f"preset {arch.name}: layers={arch.num_layers} hidden_dim={arch.hidden_dim} heads={arch.num_heads} "
        f"kv_heads={arch.num_kv_heads} sparse_layers={arch.num_sparse_layers} "
        f"ffn_factor={arch.ffn_factor} capacity_factor={arch.capacity_factor}",
        f"dense_ffn_size        {bd.dense_ffn_size:.6g}",
        f"router_size (E={pre.default_experts})    {bd.router_size:.6g}",
        f"attn_size             {bd.attn_size:.6g}",
        f"activated_dense_total {bd.activated_dense_total:.6g}",
        f"activated_sparse_total {bd.activated_sparse_total:.6g}",
        f"activated_increment   {bd.increment:.6g}",
    ]
    act = pre.dense_total + bd.increment
    dev = act / pre.activated - 1
    lines.append(
        f"activated: dense {pre.dense_total / 1e9:.2f}B + increment = {act / 1e9:.3f}B "
        f"(table {pre.activated / 1e9:.2f}B, deviation {dev:+.2%})"
    )
    for e in experts:
        delta = total_param_delta(arch, e)
        row = f"total E={e}: delta {delta:.6g} -> {(pre.dense_total + delta) / 1e9:.3f}B"
        if e in pre.totals:
            ref = pre.totals[e] - pre.dense_total
            row += f" (table delta {ref:.6g}, deviation {delta / ref - 1:+.2%})"
        lines.append(row)
    if pre.note:
        lines.append(f"note: {pre.note}")
    return "\n".join(lines)


def config_report(cfg, experts: list[int] | None = None) -> str:
    """Accounting lines for an arbitrary model config (no reference totals)."""
    arch = as_arch(cfg)
    e = getattr(cfg, "num_experts", 0) or 1
    bd = activated_breakdown(arch, e)
    lines = [
        f"config: layers={arch.num_layers} hidden_dim={arch.hidden_dim} heads={arch.num_heads} "
        f"kv_heads={arch.num_kv_heads} sparse_layers={arch.num_sparse_layers} "
        f"ffn_factor={arch.ffn_factor} capacity_factor={arch.capacity_factor}",
        f"dense_ffn_size        {bd.dense_ffn_size:.6g}",
        f"router_size (E={e})    {bd.router_size:.6g}",
        f"attn_size             {bd.attn_size:.6g}",
        f"activated_dense_total {bd.activated_dense_total:.6g}",
        f"activated_sparse_total {bd.activated_sparse_total:.6g}",
        f"activated_increment   {bd.increment:.6g}",
    ]
    for n in experts or [e]:
        lines.append(f"total E={n}: delta {total_param_delta(arch, n):.6g}")
    return "\n".join(lines)
