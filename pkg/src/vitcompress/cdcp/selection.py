"""Consistency-constrained channel selection over compactor column scores."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from ..flops import BlockChannels, channel_reduction
from ..vit import KIND_ORDER
from .compactor import HEAD_KINDS


class SelectionError(RuntimeError):
    def __init__(self, msg: str, max_ratio: float):
        super().__init__(msg)
        self.max_ratio = max_ratio


class MinimumRetentionError(RuntimeError):
    pass


class ChannelRef(NamedTuple):
    block: int
    kind: str
    head: int | None
    col: int

    def sort_key(self):
        return (self.block, KIND_ORDER[self.kind], -1 if self.head is None else self.head, self.col)

    def __str__(self):
        h = "" if self.head is None else f".h{self.head}"
        return f"{self.block}.{self.kind}{h}[{self.col}]"


def _partner(ref: ChannelRef) -> ChannelRef:
    return ref._replace(kind="k" if ref.kind == "q" else "q")


class ScoreBoard:
    """Global score set S with per-compactor local views (lazy-deletion heaps)."""

    def __init__(self, scores: dict[ChannelRef, float]):
        self.scores = dict(scores)
        self._alive = set(scores)
        self._global = [(s, r.sort_key(), r) for r, s in scores.items()]
        heapq.heapify(self._global)
        self._local: dict[tuple, list] = {}
        for r, s in scores.items():
            self._local.setdefault((r.block, r.kind, r.head), []).append((s, r.col, r))
        for h in self._local.values():
            heapq.heapify(h)

    @classmethod
    def from_model(cls, model) -> "ScoreBoard":
        """s = column norm; paired q/k columns both get the mean of their two norms."""
        scores = {}
        for b in range(len(model.blocks)):
            nq = model.compactors[(b, "q")].column_norms()
            nk = model.compactors[(b, "k")].column_norms()
            qk = 0.5 * (nq + nk)
            nv = model.compactors[(b, "v")].column_norms()
            for h in range(qk.shape[0]):
                for j in range(qk.shape[1]):
                    scores[ChannelRef(b, "q", h, j)] = float(qk[h, j])
                    scores[ChannelRef(b, "k", h, j)] = float(qk[h, j])
                for j in range(nv.shape[1]):
                    scores[ChannelRef(b, "v", h, j)] = float(nv[h, j])
            for kind in ("proj", "fc1"):
                for j, s in enumerate(model.compactors[(b, kind)].column_norms()):
                    scores[ChannelRef(b, kind, None, j)] = float(s)
        return cls(scores)

    def __contains__(self, ref) -> bool:
        return ref in self._alive

    def __len__(self) -> int:
        return len(self._alive)

    def copy(self) -> "ScoreBoard":
        return ScoreBoard({r: self.scores[r] for r in self._alive})

    def remove(self, ref: ChannelRef) -> None:
        self._alive.discard(ref)

    def pop_min(self) -> ChannelRef | None:
        while self._global:
            _, _, ref = heapq.heappop(self._global)
            if ref in self._alive:
                self._alive.discard(ref)
                return ref
        return None

    def local_argmin(self, block: int, kind: str, head: int | None) -> ChannelRef | None:
        heap = self._local.get((block, kind, head), [])
        while heap and heap[0][2] not in self._alive:
            heapq.heappop(heap)
        return heap[0][2] if heap else None

    def local_size(self, block: int, kind: str, head: int | None) -> int:
        return sum(1 for _, _, r in self._local.get((block, kind, head), []) if r in self._alive)


def head_consistency_expand(c: ChannelRef, board: ScoreBoard, heads: int | None = None) -> set[ChannelRef]:
    """{c} plus the lowest-scored same-kind channel of every sibling head.

    All returned channels are removed from the board.
    """
    if c.kind not in HEAD_KINDS:
        raise ValueError(f"{c} is not a per-head channel")
    if heads is None:
        heads = 1 + max((h for (b, k, h) in board._local if b == c.block and k == c.kind), default=0)
    board.remove(c)
    out = {c}
    for h in range(heads):
        if h == c.head:
            continue
        sib = board.local_argmin(c.block, c.kind, h)
        if sib is None:
            raise MinimumRetentionError(f"head {h} of block {c.block} has no prunable {c.kind} channel left")
        out.add(sib)
        board.remove(sib)
    return out


def attention_consistency_expand(c: ChannelRef, board: ScoreBoard) -> set[ChannelRef]:
    """{c, partner}: the same (block, head, col) on the other side of q/k."""
    if c.kind not in ("q", "k"):
        raise ValueError(f"{c} is not a query/key channel")
    p = _partner(c)
    board.remove(c)
    board.remove(p)
    return {c, p}


@dataclass
class PruneState:
    pruned: frozenset = frozenset()
    r_current: float = 0.0
    r_target: float = 0.0
    history: list[float] = field(default_factory=list)

    def sorted(self) -> list[ChannelRef]:
        return sorted(self.pruned, key=ChannelRef.sort_key)

    def to_dict(self) -> dict:
        return {"r_current": self.r_current, "r_target": self.r_target,
                "pruned": [[r.block, r.kind, r.head, r.col] for r in self.sorted()]}

    @classmethod
    def from_dict(cls, d: dict) -> "PruneState":
        refs = frozenset(ChannelRef(int(b), k, None if h is None else int(h), int(c)) for b, k, h, c in d["pruned"])
        return cls(refs, float(d["r_current"]), float(d["r_target"]))


def channel_state(model, pruned) -> list[BlockChannels]:
    """Retained widths per block if the channels in `pruned` were removed."""
    counts: dict[tuple, int] = {}
    for r in pruned:
        key = (r.block, r.kind, r.head)
        counts[key] = counts.get(key, 0) + 1
    return _state_from_counts(model, counts)


def _state_from_counts(model, counts: dict) -> list[BlockChannels]:
    out = []
    for b, blk in enumerate(model.blocks):
        dq = tuple(blk.dq - counts.get((b, "q", h), 0) for h in range(blk.heads))
        dv = tuple(blk.dv - counts.get((b, "v", h), 0) for h in range(blk.heads))
        out.append(BlockChannels(dq, dv, blk.proj_out - counts.get((b, "proj", None), 0),
                                 blk.hidden - counts.get((b, "fc1", None), 0)))
    return out


def _floor_state(model) -> list[BlockChannels]:
    return [BlockChannels((1,) * blk.heads, (1,) * blk.heads, 1, 1) for blk in model.blocks]


def select_channels(board: ScoreBoard, model, merge_plan, r_target: float,
                    flops_fn: Callable[[list[BlockChannels]], float] | None = None) -> PruneState:
    """Pop the global minimum until the channel FLOPs reduction reaches r_target.

    proj/fc1 channels go straight to P; v channels are expanded across heads;
    q/k channels are expanded across heads and then mirrored onto the partner.
    Each compactor keeps at least one column. The board is copied, so P is
    always rebuilt from scratch.
    """
    if flops_fn is None:
        cfg = model.config

        def flops_fn(state):
            return channel_reduction(cfg, merge_plan, state)

    state = PruneState(r_target=r_target)
    if r_target <= 0:
        return state
    r_max = flops_fn(_floor_state(model))
    if r_target > r_max + 1e-12:
        raise SelectionError(f"channel target {r_target:.2%} exceeds the maximum achievable {r_max:.2%}", r_max)

    board = board.copy()
    pruned: set[ChannelRef] = set()
    counts: dict[tuple, int] = {}
    width: dict[tuple, int] = {}
    for b, blk in enumerate(model.blocks):
        width[(b, "qk")] = blk.dq
        width[(b, "v")] = blk.dv
        width[(b, "proj")] = blk.proj_out
        width[(b, "fc1")] = blk.hidden
    r = 0.0
    while r < r_target:
        c = board.pop_min()
        if c is None:
            raise SelectionError(f"score board exhausted at {r:.2%} < {r_target:.2%}", r)
        group = (c.block, "qk" if c.kind in ("q", "k") else c.kind)
        if width[group] <= 1:
            continue  # minimum retention reached; channel is dropped from S
        heads = model.blocks[c.block].heads
        if c.kind in ("proj", "fc1"):
            new = {c}
        elif c.kind == "v":
            new = head_consistency_expand(c, board, heads)
        else:
            new = set()
            for c2 in head_consistency_expand(c, board, heads):
                new |= attention_consistency_expand(c2, board)
        for ref in new - pruned:
            key = (ref.block, ref.kind, ref.head)
            counts[key] = counts.get(key, 0) + 1
        pruned |= new
        width[group] -= 1
        r = flops_fn(_state_from_counts(model, counts))
        state.history.append(r)
    state.pruned = frozenset(pruned)
    state.r_current = r
    return state


def pruned_columns(pruned, block: int, kind: str, head: int | None = None) -> np.ndarray:
    return np.array(sorted(r.col for r in pruned if r.block == block and r.kind == kind and r.head == head),
                    dtype=np.int64)


def state_from_masks(model, r_target: float | None = None) -> PruneState:
    """Recover P from the zero mask bits of a compacted model."""
    refs = []
    for (b, kind), comp in model.compactors.items():
        if comp.per_head:
            refs += [ChannelRef(b, kind, int(h), int(c)) for h, c in zip(*np.nonzero(comp.mask == 0))]
        else:
            refs += [ChannelRef(b, kind, None, int(c)) for c in np.nonzero(comp.mask == 0)[0]]
    P = frozenset(refs)
    r = channel_reduction(model.config, model.plan, channel_state(model, P))
    return PruneState(P, r, r if r_target is None else r_target)
