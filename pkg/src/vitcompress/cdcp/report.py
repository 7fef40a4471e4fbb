from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .selection import PruneState, pruned_columns

# masked columns must have shrunk below this by the end of fine-tuning
PRUNED_NORM_TOL = 1e-2


@dataclass
class PruneReport:
    rows: list[dict]
    r_current: float
    r_target: float
    audits: dict[str, bool] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.audits.values())

    def to_dict(self) -> dict:
        return {"r_current": self.r_current, "r_target": self.r_target, "audits": self.audits,
                "ok": self.ok, "rows": self.rows, **self.extra}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        hdr = f"{'block':>5} {'kind':>4} {'head':>4} {'total':>6} {'pruned':>6} {'kept':>6} " \
              f"{'min kept':>10} {'max kept':>10} {'max pruned':>10}"
        out = [hdr, "-" * len(hdr)]
        for r in self.rows:
            head = "-" if r["head"] is None else str(r["head"])
            out.append(f"{r['block']:>5} {r['kind']:>4} {head:>4} {r['total']:>6} {r['pruned']:>6} "
                       f"{r['retained']:>6} {r['min_retained_norm']:>10.4g} {r['max_retained_norm']:>10.4g} "
                       f"{r['max_pruned_norm']:>10.3g}")
        out.append("")
        out.append(f"r_current {self.r_current:.4%}   r_target {self.r_target:.4%}")
        for name, ok in self.audits.items():
            out.append(f"audit {name:<24} {'PASS' if ok else 'FAIL'}")
        return "\n".join(out)


def build_prune_report(model, state: PruneState, pruned_norm_tol: float = PRUNED_NORM_TOL) -> PruneReport:
    """Per-compactor counts and norms for a compacted model, plus invariant audits."""
    rows = []
    P = state.pruned
    head_uniform = qk_aligned = True
    worst_pruned = 0.0
    for b, blk in enumerate(model.blocks):
        for kind in ("q", "k", "v", "proj", "fc1"):
            comp = model.compactors[(b, kind)]
            norms = comp.column_norms()
            heads = range(blk.heads) if comp.per_head else [None]
            counts = []
            for h in heads:
                n = norms[h] if h is not None else norms
                cols = pruned_columns(P, b, kind, h)
                keep = np.setdiff1d(np.arange(len(n)), cols)
                mp = float(n[cols].max()) if len(cols) else 0.0
                worst_pruned = max(worst_pruned, mp)
                counts.append(len(cols))
                rows.append({
                    "block": b, "kind": kind, "head": h, "total": int(len(n)), "pruned": int(len(cols)),
                    "retained": int(len(keep)),
                    "min_retained_norm": float(n[keep].min()) if len(keep) else 0.0,
                    "max_retained_norm": float(n[keep].max()) if len(keep) else 0.0,
                    "max_pruned_norm": mp,
                })
            if comp.per_head and len(set(counts)) > 1:
                head_uniform = False
        for h in range(blk.heads):
            if not np.array_equal(pruned_columns(P, b, "q", h), pruned_columns(P, b, "k", h)):
                qk_aligned = False
    audits = {
        "head_uniformity": head_uniform,
        "qk_alignment": qk_aligned,
        "target_reached": state.r_current >= state.r_target,
        "pruned_norms_small": worst_pruned <= pruned_norm_tol,
    }
    return PruneReport(rows, state.r_current, state.r_target, audits,
                       {"max_pruned_norm": worst_pruned, "pruned_count": len(P)})
