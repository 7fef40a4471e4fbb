from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..numerics import DTYPE, Tensor
from ..vit import BlockWeights, ConsistencyError, ViTModel
from .compactor import zero_columns
from .selection import PruneState, pruned_columns


def fold(w: np.ndarray, b: np.ndarray, m_bar: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Absorb a (column-restricted) compactor: W_bar = W M_bar, b_bar = b M_bar."""
    w64, m64 = np.asarray(w, np.float64), np.asarray(m_bar, np.float64)
    return (w64 @ m64).astype(DTYPE), (np.asarray(b, np.float64) @ m64).astype(DTYPE)


@dataclass
class FoldResult:
    model: ViTModel
    retained: dict  # "b.kind[.hH]" -> retained index list
    max_pruned_norm: float


def _p(a) -> Tensor:
    return Tensor(np.ascontiguousarray(a, dtype=DTYPE), requires_grad=True)


def _kept(d: int, pruned: np.ndarray) -> np.ndarray:
    return np.setdiff1d(np.arange(d), pruned)


def prune_model(model: ViTModel, state: PruneState, check_masks: bool = True) -> FoldResult:
    """Hard-zero P, fold every compactor, and drop dead dimensions structurally.

    The query side of each head is rescaled by sqrt(dq_new/dq_old) so that the
    logit scale 1/sqrt(dq_new) of the pruned block reproduces the original one.
    """
    if not model.compactors:
        raise ValueError("model carries no compactors to fold")
    P = state.pruned
    if check_masks:
        for ref in P:
            comp = model.compactors[(ref.block, ref.kind)]
            bit = comp.mask[ref.head, ref.col] if comp.per_head else comp.mask[ref.col]
            if bit != 0:
                raise ValueError(f"channel {ref} is in P but its mask is still 1")
    src = model.copy()
    worst = zero_columns(src, P)
    retained: dict[str, list[int]] = {}
    blocks = []
    for b, blk in enumerate(src.blocks):
        comps = {k: src.compactors[(b, k)] for k in ("q", "k", "v", "proj", "fc1")}
        H = blk.heads
        kq = [_kept(blk.dq, pruned_columns(P, b, "q", h)) for h in range(H)]
        kk = [_kept(blk.dq, pruned_columns(P, b, "k", h)) for h in range(H)]
        kv = [_kept(blk.dv, pruned_columns(P, b, "v", h)) for h in range(H)]
        for h in range(H):
            if not np.array_equal(kq[h], kk[h]):
                raise ConsistencyError(f"block {b} head {h}: q/k retained sets differ")
        if len({len(x) for x in kq}) != 1 or len({len(x) for x in kv}) != 1:
            raise ConsistencyError(f"block {b}: heads retain different numbers of channels")
        qscale = math.sqrt(len(kq[0]) / blk.dq)

        def per_head(kind, keep, mult=1.0):
            ws, bs = [], []
            for h in range(H):
                w, bias = blk.head_weights(kind, h)
                m_bar = comps[kind].matrix.data[h][:, keep[h]]
                fw, fb = fold(w, bias, m_bar)
                ws.append(fw * mult)
                bs.append(fb * mult)
            return np.concatenate(ws, axis=1), np.concatenate(bs)

        wq, bq = per_head("q", kq, qscale)
        wk, bk = per_head("k", kk)
        wv, bv = per_head("v", kv)
        # proj input rows follow the surviving v channels of each head
        rows = np.concatenate([h * blk.dv + kv[h] for h in range(H)])
        kp = _kept(blk.proj_out, pruned_columns(P, b, "proj"))
        wproj, bproj = fold(blk.wproj.data[rows], blk.bproj.data, comps["proj"].matrix.data[:, kp])
        base_idx = np.arange(blk.proj_out) if blk.proj_idx is None else blk.proj_idx
        proj_idx = base_idx[kp]
        if len(proj_idx) == src.config.dim and np.array_equal(proj_idx, np.arange(src.config.dim)):
            proj_idx = None
        kf = _kept(blk.hidden, pruned_columns(P, b, "fc1"))
        wfc1, bfc1 = fold(blk.wfc1.data, blk.bfc1.data, comps["fc1"].matrix.data[:, kf])
        wfc2 = blk.wfc2.data[kf]
        blocks.append(BlockWeights(
            H, _p(blk.ln1_g.data), _p(blk.ln1_b.data),
            _p(wq), _p(bq), _p(wk), _p(bk), _p(wv), _p(bv),
            _p(wproj), _p(bproj), _p(blk.ln2_g.data), _p(blk.ln2_b.data),
            _p(wfc1), _p(bfc1), _p(wfc2), _p(blk.bfc2.data), proj_idx))
        for h in range(H):
            retained[f"{b}.qk.h{h}"] = kq[h].tolist()
            retained[f"{b}.v.h{h}"] = kv[h].tolist()
        retained[f"{b}.proj"] = (base_idx[kp]).tolist()
        retained[f"{b}.fc1"] = kf.tolist()
    src.blocks = blocks
    src.compactors = {}
    return FoldResult(src, retained, worst)
