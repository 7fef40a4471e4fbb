"""Analytical MAC accounting.

Only matmul multiply-accumulates are counted; layer norm, softmax, GELU and
bias adds are excluded. One MAC is reported as one FLOP, the fvcore
convention, under which the published DeiT figures are stated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from .atme import MergePlan


@dataclass(frozen=True)
class BlockChannels:
    """Retained widths of one block: per-head q(=k) and v dims, proj outputs, fc1 width."""
    dq: tuple[int, ...]
    dv: tuple[int, ...]
    proj_out: int
    fc1: int


def full_channels(config) -> list[BlockChannels]:
    h, d = config.heads, config.head_dim
    return [BlockChannels((d,) * h, (d,) * h, config.dim, config.mlp_ratio * config.dim)
            for _ in range(config.depth)]


def _channels(config, channels):
    if channels is None:
        return full_channels(config)
    if isinstance(channels, dict):
        base = full_channels(config)
        return [channels.get(i, base[i]) for i in range(config.depth)]
    if len(channels) != config.depth:
        raise ValueError(f"channel state has {len(channels)} blocks, config has {config.depth}")
    return list(channels)


@dataclass
class FlopsReport:
    components: dict[str, int]
    total: int
    baseline: int
    ratio: float = field(init=False)

    def __post_init__(self):
        assert self.total == sum(self.components.values())
        self.ratio = 1.0 - self.total / self.baseline if self.baseline else 0.0

    def to_dict(self) -> dict:
        return {"components": dict(self.components), "total": self.total,
                "baseline": self.baseline, "ratio": self.ratio}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        width = max(len(k) for k in self.components) if self.components else 10
        rows = [f"{'component':<{width}}  {'MACs':>16}"]
        rows += [f"{k:<{width}}  {v:>16,d}" for k, v in self.components.items()]
        rows.append("-" * (width + 18))
        rows.append(f"{'total':<{width}}  {self.total:>16,d}  ({self.total / 1e9:.3f} G)")
        rows.append(f"{'baseline':<{width}}  {self.baseline:>16,d}  ({self.baseline / 1e9:.3f} G)")
        rows.append(f"{'reduction':<{width}}  {self.ratio:>16.2%}")
        return "\n".join(rows)


def _count(config, plan: MergePlan | None, channels) -> dict[str, int]:
    plan = plan or MergePlan()
    chans = _channels(config, channels)
    c, cls_extra = config.dim, int(config.use_cls)
    grid = (config.grid, config.grid)
    grids = plan.block_grids(config.depth, grid)
    merge_at = {e.block: e.direction for e in plan.entries}
    comp = {"patch_embed": config.num_spatial * config.in_chans * config.patch ** 2 * c}
    for b, ((h, w), ch) in enumerate(zip(grids, chans)):
        n = h * w + cls_extra
        sq, sv = sum(ch.dq), sum(ch.dv)
        comp[f"block{b}.qkv"] = n * c * (2 * sq + sv)
        comp[f"block{b}.attn"] = n * n * sq + n * n * sv
        comp[f"block{b}.proj"] = n * sv * ch.proj_out
        comp[f"block{b}.ffn"] = 2 * n * c * ch.fc1
        if b in merge_at:
            n_out = h * w // 2
            comp[f"merge{b}.{merge_at[b]}"] = n_out * 2 * c * c
    comp["head"] = c * config.classes
    return comp


def model_flops(config, merge_plan: MergePlan | None = None, channels=None) -> FlopsReport:
    comp = _count(config, merge_plan, channels)
    base = sum(_count(config, None, None).values())
    return FlopsReport(comp, sum(comp.values()), base)


def total_macs(config, merge_plan=None, channels=None) -> int:
    return sum(_count(config, merge_plan, channels).values())


def reduction_ratio(config, merge_plan=None, channels=None) -> float:
    return 1.0 - total_macs(config, merge_plan, channels) / total_macs(config)


def channel_reduction(config, merge_plan, channels) -> float:
    """Reduction due to channel pruning alone, with the merge plan held fixed."""
    return 1.0 - total_macs(config, merge_plan, channels) / total_macs(config, merge_plan)


def model_params(config, merge_plan: MergePlan | None = None, channels=None) -> int:
    plan = merge_plan or MergePlan()
    chans = _channels(config, channels)
    c = config.dim
    n = config.num_tokens
    total = config.in_chans * config.patch ** 2 * c + c  # patch embed
    total += c * int(config.use_cls) + n * c  # cls + positions
    for ch in chans:
        sq, sv = sum(ch.dq), sum(ch.dv)
        total += 2 * (c * sq + sq) + c * sv + sv
        total += sv * ch.proj_out + ch.proj_out
        total += c * ch.fc1 + ch.fc1 + ch.fc1 * c + c
        total += 4 * c  # two layer norms
    total += len(plan) * (2 * 2 * c + 2 * c * c + c)
    total += 2 * c  # final norm
    total += c * config.classes + config.classes
    return total


def split_budget(joint: float, token_ratio: float) -> float:
    """Channel ratio (relative to the merged model) that completes a joint reduction."""
    if token_ratio >= joint:
        return 0.0
    return 1.0 - (1.0 - joint) / (1.0 - token_ratio)
