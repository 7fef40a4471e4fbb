"""Asymmetric token merging: horizontal/vertical pair fusion and placement planning."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .numerics import Tensor, concat, layer_norm, linear, reshape, transpose

HORIZONTAL = "h"
VERTICAL = "v"


class PlacementError(ValueError):
    pass


class PlanningError(ValueError):
    def __init__(self, msg: str, max_ratio: float | None = None):
        super().__init__(msg)
        self.max_ratio = max_ratio


@dataclass(frozen=True)
class MergeEntry:
    block: int  # last block processed at the old resolution
    direction: str

    def __str__(self):
        return f"{self.block}{self.direction}"


@dataclass(frozen=True)
class MergePlan:
    entries: tuple[MergeEntry, ...] = ()

    @classmethod
    def parse(cls, text: str) -> "MergePlan":
        """Parse the compact form used on the command line, e.g. ``"3h,7v"``."""
        text = (text or "").strip()
        if not text:
            return cls()
        entries = []
        for tok in text.split(","):
            tok = tok.strip().lower()
            if len(tok) < 2 or tok[-1] not in (HORIZONTAL, VERTICAL) or not tok[:-1].isdigit():
                raise PlacementError(f"bad merge entry {tok!r}; expected e.g. '3h'")
            entries.append(MergeEntry(int(tok[:-1]), tok[-1]))
        return cls(tuple(entries))

    @classmethod
    def from_blocks(cls, blocks) -> "MergePlan":
        dirs = (HORIZONTAL, VERTICAL)
        return cls(tuple(MergeEntry(int(b), dirs[i % 2]) for i, b in enumerate(blocks)))

    def __str__(self):
        return ",".join(str(e) for e in self.entries)

    def __len__(self):
        return len(self.entries)

    @property
    def blocks(self) -> tuple[int, ...]:
        return tuple(e.block for e in self.entries)

    def to_dict(self) -> list[dict]:
        return [{"block": e.block, "direction": e.direction} for e in self.entries]

    @classmethod
    def from_dict(cls, items) -> "MergePlan":
        return cls(tuple(MergeEntry(int(d["block"]), str(d["direction"])) for d in items))

    def validate(self, depth: int, grid: tuple[int, int]) -> None:
        h, w = grid
        prev = -1
        for i, e in enumerate(self.entries):
            want = HORIZONTAL if i % 2 == 0 else VERTICAL
            if e.direction != want:
                raise PlacementError(f"entry {i} must be {want!r} (directions alternate, horizontal first)")
            if e.block <= prev:
                raise PlacementError(f"block indices must strictly increase: {self}")
            if not 0 <= e.block <= depth - 2:
                raise PlacementError(f"merge after block {e.block} is outside 0..{depth - 2}")
            if e.direction == HORIZONTAL:
                if w % 2:
                    raise PlacementError(f"horizontal merge after block {e.block} needs even width, got {w}")
                w //= 2
            else:
                if h % 2:
                    raise PlacementError(f"vertical merge after block {e.block} needs even height, got {h}")
                h //= 2
            prev = e.block

    def block_grids(self, depth: int, grid: tuple[int, int]) -> list[tuple[int, int]]:
        """Spatial grid seen by each block's MHSA."""
        self.validate(depth, grid)
        by_block = {e.block: e.direction for e in self.entries}
        h, w = grid
        out = []
        for b in range(depth):
            out.append((h, w))
            d = by_block.get(b)
            if d == HORIZONTAL:
                w //= 2
            elif d == VERTICAL:
                h //= 2
        return out


@dataclass
class MergeLayer:
    """Fusion of a concatenated token pair: Linear(LayerNorm(x)) from 2C to C."""
    direction: str
    norm_g: Tensor
    norm_b: Tensor
    w: Tensor
    b: Tensor

    @classmethod
    def averaging(cls, direction: str, dim: int) -> "MergeLayer":
        half = 0.5 * np.eye(dim, dtype=np.float32)
        return cls(
            direction,
            Tensor(np.ones(2 * dim), requires_grad=True),
            Tensor(np.zeros(2 * dim), requires_grad=True),
            Tensor(np.concatenate([half, half], axis=0), requires_grad=True),
            Tensor(np.zeros(dim), requires_grad=True),
        )

    def named_parameters(self, prefix: str):
        yield f"{prefix}.norm_g", self.norm_g
        yield f"{prefix}.norm_b", self.norm_b
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b

    def fuse(self, pairs: Tensor, pass_through_norm: bool = False) -> Tensor:
        x = pairs if pass_through_norm else layer_norm(pairs, self.norm_g, self.norm_b)
        return linear(x, self.w, self.b)


def _split_cls(tokens: Tensor, grid: tuple[int, int]):
    n = tokens.shape[-2]
    spatial = grid[0] * grid[1]
    if n == spatial:
        return None, tokens
    if n == spatial + 1:
        return tokens[..., :1, :], tokens[..., 1:, :]
    raise PlacementError(f"{n} tokens do not fit grid {grid} (with or without CLS)")


def _merge(tokens: Tensor, grid, layer: MergeLayer, direction: str, pass_through_norm: bool):
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = reshape(tokens, (1,) + tokens.shape)
    h, w = grid
    cls_tok, sp = _split_cls(tokens, grid)
    bsz, _, c = sp.shape
    if direction == HORIZONTAL:
        if w % 2:
            raise PlacementError(f"horizontal merge needs even width, grid is {grid}")
        # columns (2j, 2j+1) of a row are adjacent in row-major order
        pairs = reshape(sp, (bsz, h * (w // 2), 2 * c))
        new_grid = (h, w // 2)
    else:
        if h % 2:
            raise PlacementError(f"vertical merge needs even height, grid is {grid}")
        x = reshape(sp, (bsz, h // 2, 2, w, c))
        x = transpose(x, (0, 1, 3, 2, 4))
        pairs = reshape(x, (bsz, (h // 2) * w, 2 * c))
        new_grid = (h // 2, w)
    fused = layer.fuse(pairs, pass_through_norm)
    out = fused if cls_tok is None else concat([cls_tok, fused], axis=1)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out, new_grid


def htm(tokens: Tensor, grid: tuple[int, int], layer: MergeLayer, pass_through_norm: bool = False):
    """Horizontal merge: fuse columns (2j, 2j+1) of every row. Returns (tokens, new grid)."""
    return _merge(tokens, grid, layer, HORIZONTAL, pass_through_norm)


def vtm(tokens: Tensor, grid: tuple[int, int], layer: MergeLayer, pass_through_norm: bool = False):
    """Vertical merge: fuse rows (2i, 2i+1) of every column."""
    return _merge(tokens, grid, layer, VERTICAL, pass_through_norm)


def apply_merge(tokens: Tensor, grid, layer: MergeLayer):
    fn = htm if layer.direction == HORIZONTAL else vtm
    return fn(tokens, grid, layer)


# ------------------------------------------------------------------ planning

def max_merges(depth: int, grid: tuple[int, int]) -> int:
    h, w = grid
    k = 0
    while k < depth - 1:
        if k % 2 == 0:
            if w % 2:
                break
            w //= 2
        else:
            if h % 2:
                break
            h //= 2
        k += 1
    return k


def uniform_plan(depth: int, k: int) -> MergePlan:
    """k merges splitting `depth` blocks into k+1 stages of (near) equal depth."""
    blocks = []
    for i in range(k):
        b = math.floor((i + 1) * depth / (k + 1) + 0.5) - 1
        b = max(b, blocks[-1] + 1 if blocks else 0)
        blocks.append(b)
    if blocks and blocks[-1] > depth - 2:
        raise PlacementError(f"cannot place {k} merges in {depth} blocks")
    return MergePlan.from_blocks(blocks)


@dataclass
class PlanResult:
    plan: MergePlan
    achieved: float
    target: float
    uniform: MergePlan
    uniform_ratio: float
    moves: list[tuple[str, float]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"target reduction   {self.target:.2%}",
            f"uniform plan       {self.uniform or '(none)'}  -> {self.uniform_ratio:.2%}",
        ]
        for plan, r in self.moves:
            lines.append(f"  adjusted         {plan}  -> {r:.2%}")
        lines.append(f"final plan         {self.plan or '(none)'}  -> {self.achieved:.2%}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "plan": str(self.plan),
            "entries": self.plan.to_dict(),
            "achieved": self.achieved,
            "target": self.target,
            "uniform_plan": str(self.uniform),
            "uniform_ratio": self.uniform_ratio,
            "moves": [{"plan": p, "ratio": r} for p, r in self.moves],
        }


def plan_merges(config, target_ratio: float,
                flops_fn: Callable[[object, MergePlan], float] | None = None) -> PlanResult:
    """Uniform stage split, then greedy +-1 block moves toward `target_ratio`."""
    if not 0.0 < target_ratio < 1.0:
        raise ValueError(f"target ratio must lie in (0, 1), got {target_ratio}")
    if flops_fn is None:
        from .flops import reduction_ratio as flops_fn
    depth, grid = config.depth, (config.grid, config.grid)
    kmax = max_merges(depth, grid)
    if kmax == 0:
        raise PlanningError("grid/depth admit no merges", 0.0)

    best_max = max(flops_fn(config, MergePlan.from_blocks(range(k))) for k in range(1, kmax + 1))
    if target_ratio > best_max:
        raise PlanningError(
            f"target {target_ratio:.2%} exceeds the maximum achievable reduction {best_max:.2%}", best_max)

    cands = []
    for k in range(1, kmax + 1):
        p = uniform_plan(depth, k)
        cands.append((abs(flops_fn(config, p) - target_ratio), k, p))
    _, _, start = min(cands, key=lambda t: (t[0], t[1]))
    uni_ratio = flops_fn(config, start)

    cur, cur_r = start, uni_ratio
    moves = []
    while True:
        options = []
        for i in range(len(cur)):
            for d in (-1, 1):
                blocks = list(cur.blocks)
                blocks[i] += d
                cand = MergePlan.from_blocks(blocks)
                try:
                    cand.validate(depth, grid)
                except PlacementError:
                    continue
                r = flops_fn(config, cand)
                # ties: later merge first, then the smaller model
                options.append((round(abs(r - target_ratio), 12), -i, -r, cand))
        if not options:
            break
        err, _, neg_r, cand = min(options, key=lambda t: t[:3])
        if err >= round(abs(cur_r - target_ratio), 12):
            break
        cur, cur_r = cand, -neg_r
        moves.append((str(cur), cur_r))
    return PlanResult(cur, cur_r, target_ratio, start, uni_ratio, moves)
