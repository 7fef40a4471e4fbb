from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics import DTYPE, Tensor

KINDS = ("q", "k", "v", "proj", "fc1")
HEAD_KINDS = ("q", "k", "v")
# below this column norm the lasso subgradient is taken as zero
NORM_FLOOR = 1e-12


@dataclass
class Compactor:
    """Square matrix post-multiplying one weight. Columns index output channels.

    q/k/v compactors of a block are stored stacked, matrix [heads, d, d] and
    mask [heads, d]; proj/fc1 have matrix [d, d] and mask [d].
    """
    block: int
    kind: str
    matrix: Tensor
    mask: np.ndarray

    @classmethod
    def identity(cls, block: int, kind: str, d: int, heads: int | None = None) -> "Compactor":
        eye = np.eye(d, dtype=DTYPE)
        if heads is None:
            m, mask = eye, np.ones(d, dtype=DTYPE)
        else:
            m, mask = np.stack([eye] * heads), np.ones((heads, d), dtype=DTYPE)
        return cls(block, kind, Tensor(m, requires_grad=True), mask)

    @property
    def per_head(self) -> bool:
        return self.kind in HEAD_KINDS

    @property
    def d(self) -> int:
        return self.matrix.shape[-1]

    def column(self, col: int, head: int | None = None) -> np.ndarray:
        m = self.matrix.data
        return m[head, :, col] if self.per_head else m[:, col]

    def column_norms(self) -> np.ndarray:
        """L2 norm of every column, shape [heads, d] or [d] (float64)."""
        return np.sqrt((self.matrix.data.astype(np.float64) ** 2).sum(axis=-2))


def insert_compactors(model) -> None:
    """Attach identity compactors to every q/k/v (per head), proj and fc1 of `model`."""
    comps = {}
    for b, blk in enumerate(model.blocks):
        comps[(b, "q")] = Compactor.identity(b, "q", blk.dq, blk.heads)
        comps[(b, "k")] = Compactor.identity(b, "k", blk.dq, blk.heads)
        comps[(b, "v")] = Compactor.identity(b, "v", blk.dv, blk.heads)
        comps[(b, "proj")] = Compactor.identity(b, "proj", blk.proj_out)
        comps[(b, "fc1")] = Compactor.identity(b, "fc1", blk.hidden)
    model.compactors = comps


def compactor_grad(c: np.ndarray, m: float, g_cls: np.ndarray, lam: float) -> np.ndarray:
    """Gradient assembled for one compactor column: m * dL_cls/dc + lam * c/||c||."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    c64 = np.asarray(c, dtype=np.float64)
    n = np.sqrt((c64 ** 2).sum())
    lasso = c64 / n if n >= NORM_FLOOR else np.zeros_like(c64)
    return (m * np.asarray(g_cls, dtype=np.float64) + lam * lasso).astype(DTYPE)


def assemble_grad(comp: Compactor, g_cls: np.ndarray, lam: float) -> np.ndarray:
    """Column-wise compactor_grad over a whole (possibly stacked) compactor."""
    m = comp.matrix.data.astype(np.float64)
    norms = np.sqrt((m ** 2).sum(axis=-2, keepdims=True))
    safe = np.where(norms >= NORM_FLOOR, norms, 1.0)
    lasso = np.where(norms >= NORM_FLOOR, m / safe, 0.0)
    mask = comp.mask[..., None, :]
    return (mask * g_cls + lam * lasso).astype(DTYPE)


def reset_masks(model, pruned) -> None:
    """Masks to 1 everywhere except the channels in `pruned` (ChannelRefs)."""
    for comp in model.compactors.values():
        comp.mask[...] = 1.0
    for ref in pruned:
        comp = model.compactors[(ref.block, ref.kind)]
        if comp.per_head:
            comp.mask[ref.head, ref.col] = 0.0
        else:
            comp.mask[ref.col] = 0.0


def zero_columns(model, pruned) -> float:
    """Hard-zero the columns in `pruned`; returns the largest norm removed."""
    worst = 0.0
    for ref in pruned:
        m = model.compactors[(ref.block, ref.kind)].matrix.data
        col = m[ref.head, :, ref.col] if ref.head is not None else m[:, ref.col]
        worst = max(worst, float(np.sqrt((col.astype(np.float64) ** 2).sum())))
        col[...] = 0.0
    return worst


def masked_count(model) -> int:
    return int(sum((c.mask == 0).sum() for c in model.compactors.values()))
