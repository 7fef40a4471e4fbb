"""Pretraining and compactor fine-tuning with the masked group-lasso gradient rule."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable

import numpy as np

from .cdcp import (
    PruneState,
    ScoreBoard,
    assemble_grad,
    insert_compactors,
    masked_count,
    reset_masks,
    select_channels,
)
from .data import Dataset
from .numerics import DTYPE, Tensor, cross_entropy, grad_of, log_softmax_np, no_grad
from .vit import ViTModel, model_forward, predict

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class Schedule:
    epochs: int = 30
    batch_size: int = 64
    base_lr: float = 1e-3
    min_lr: float = 1e-6
    lr_warmup_epochs: float = 2
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    compactor_beta1: float = 0.99
    compactor_lr_scale: float = 1.0
    # pruning ramp: starts after warmup_epochs, one step every interval_iters
    warmup_epochs: float = 30
    interval_iters: int = 25
    ratio_step: float = 0.00025  # 0.025 percentage points
    ratio_step_mode: str = "points"  # or "relative": step is a fraction of final_ratio
    ramp_end_fraction: float | None = None  # if set, derive ratio_step to finish the ramp here
    lam: float = 1e-5
    final_ratio: float = 0.0
    label_smoothing: float = 0.0
    distill_alpha: float = 0.0
    hflip: bool = False

    def __post_init__(self):
        if self.interval_iters < 1:
            raise ValueError("interval_iters must be >= 1")
        if self.ratio_step_mode not in ("points", "relative"):
            raise ValueError(f"unknown ratio_step_mode {self.ratio_step_mode!r}")

    @classmethod
    def imagenet(cls, **kw) -> "Schedule":
        """Full-scale fine-tuning values: 300 ImageNet epochs."""
        base = dict(epochs=300, batch_size=256, base_lr=1e-4, lr_warmup_epochs=5, weight_decay=0.05,
                    warmup_epochs=30, interval_iters=25, ratio_step=0.00025, lam=1e-5,
                    label_smoothing=0.1, distill_alpha=0.1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def desk(cls, epochs: int = 30, **kw) -> "Schedule":
        """The imagenet schedule shape compressed to a few minutes of CPU time."""
        base = dict(epochs=epochs, batch_size=16, base_lr=1e-3, lr_warmup_epochs=max(1, round(0.05 * epochs)),
                    warmup_epochs=max(1, round(0.1 * epochs)), interval_iters=5, ramp_end_fraction=0.3,
                    compactor_lr_scale=10.0)
        base.update(kw)
        return cls(**base)

    def step_size(self, iters_per_epoch: int) -> float:
        if self.ramp_end_fraction is not None:
            total = self.epochs * iters_per_epoch
            start = self.warmup_iters(iters_per_epoch)
            n_int = max(1, int((self.ramp_end_fraction * total - start) // self.interval_iters))
            return self.final_ratio / n_int
        if self.ratio_step_mode == "relative":
            return self.ratio_step * self.final_ratio
        return self.ratio_step

    def warmup_iters(self, iters_per_epoch: int) -> int:
        return int(round(self.warmup_epochs * iters_per_epoch))

    def r_target_at(self, it: int, iters_per_epoch: int) -> float:
        """Target after iteration `it` (0-based): one ramp step per completed post-warmup interval."""
        start = self.warmup_iters(iters_per_epoch)
        if it < start or self.final_ratio <= 0:
            return 0.0
        t = (it - start) // self.interval_iters + 1
        return min(self.final_ratio, t * self.step_size(iters_per_epoch))

    def lr_at(self, it: int, total: int, iters_per_epoch: int) -> float:
        warm = int(round(self.lr_warmup_epochs * iters_per_epoch))
        if it < warm:
            return self.base_lr * (it + 1) / warm
        span = max(1, total - warm)
        s = min(1.0, (it - warm) / span)
        return self.min_lr + 0.5 * (self.base_lr - self.min_lr) * (1 + math.cos(math.pi * s))

    def to_dict(self) -> dict:
        return asdict(self)


class AdamW:
    """Decoupled-weight-decay Adam with per-parameter beta1, lr scale and decay."""

    def __init__(self, params, beta2: float = 0.999, eps: float = 1e-8):
        # params: list of (tensor, beta1, weight_decay, lr_scale)
        self.groups = list(params)
        self.beta2, self.eps = beta2, eps
        self.m = [np.zeros_like(p.data) for p, *_ in self.groups]
        self.v = [np.zeros_like(p.data) for p, *_ in self.groups]
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b2 = self.beta2
        for i, (p, b1, wd, scale) in enumerate(self.groups):
            g = grads.get(p)
            if g is None:
                continue
            a = lr * scale
            m, v = self.m[i], self.v[i]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            upd = a * mhat / (np.sqrt(vhat) + self.eps)
            if wd:
                p.data *= DTYPE(1 - a * wd)
            p.data -= upd.astype(DTYPE)

    def reset(self, p: Tensor, where: np.ndarray) -> None:
        """Clear both moments of `p` at the entries selected by boolean `where`."""
        for i, (q, *_) in enumerate(self.groups):
            if q is p:
                self.m[i][where] = 0.0
                self.v[i][where] = 0.0
                return


@dataclass
class TrainReport:
    records: list[dict] = field(default_factory=list)

    def add(self, **rec) -> dict:
        self.records.append(rec)
        return rec

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def column(self, key: str) -> list:
        return [r[key] for r in self.records]


def evaluate(model: ViTModel, ds: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """(top-1 accuracy, mean cross-entropy) on `ds`."""
    if not len(ds):
        return float("nan"), float("nan")
    with no_grad():
        logits = predict(ds.images, model, batch_size)
    logp = log_softmax_np(logits)
    loss = float(-logp[np.arange(len(ds)), ds.labels].mean())
    return float((logits.argmax(1) == ds.labels).mean()), loss


def _soft_targets(labels: np.ndarray, k: int, smoothing: float) -> np.ndarray:
    t = np.full((len(labels), k), smoothing / k, dtype=np.float64)
    t[np.arange(len(labels)), labels] += 1.0 - smoothing
    return t


def _optimizer(model: ViTModel, sched: Schedule) -> AdamW:
    comp_ids = {id(c.matrix) for c in model.compactors.values()}
    groups = []
    for name, p in model.named_parameters():
        if id(p) in comp_ids:
            groups.append((p, sched.compactor_beta1, 0.0, sched.compactor_lr_scale))
        else:
            # biases, norms and token/position embeddings are not decayed
            wd = sched.weight_decay if p.data.ndim >= 2 and name != "pos" else 0.0
            groups.append((p, sched.beta1, wd, 1.0))
    return AdamW(groups, beta2=sched.beta2)


def _loss(model, x, y, sched: Schedule, teacher: ViTModel | None):
    logits = model_forward(x, model)
    k = model.config.classes
    distill = teacher is not None and sched.distill_alpha > 0
    if not (distill or sched.label_smoothing):
        return logits, cross_entropy(logits, y)
    target = _soft_targets(y, k, sched.label_smoothing)
    if distill:
        with no_grad():
            t_prob = np.exp(log_softmax_np(model_forward(x, teacher).data))
        target = (1 - sched.distill_alpha) * target + sched.distill_alpha * t_prob
    return logits, cross_entropy(logits, target)


def _check_data(model: ViTModel, ds: Dataset):
    cfg = model.config
    if len(ds) and (ds.images.shape[1:] != (cfg.in_chans, cfg.img, cfg.img) or ds.classes != cfg.classes):
        raise TrainingError(f"dataset {ds.images.shape[1:]}/{ds.classes} classes does not match model config")


def pretrain(model: ViTModel, data: Dataset, sched: Schedule, seed: int = 0,
             on_record: Callable[[dict], None] | None = None) -> TrainReport:
    """Plain cross-entropy training (cosine lr with linear warmup), in place."""
    if model.compactors:
        raise TrainingError("pretrain expects a model without compactors")
    _check_data(model, data)
    train, test = data.split("train"), data.split("test")
    opt = _optimizer(model, sched)
    params = model.parameters()
    ipe = max(1, math.ceil(len(train) / sched.batch_size))
    total = sched.epochs * ipe
    rng = np.random.default_rng(seed)
    report = TrainReport()
    it = 0
    for epoch in range(sched.epochs):
        losses, correct, seen = [], 0, 0
        for x, y in train.batches(sched.batch_size, rng, sched.hflip):
            logits, loss = _loss(model, x, y, sched, None)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite loss {lv} at epoch {epoch} iter {it}")
            grads = grad_of(loss, params)
            opt.step(grads, sched.lr_at(it, total, ipe))
            losses.append(lv)
            correct += int((logits.data.argmax(1) == y).sum())
            seen += len(y)
            it += 1
        acc, _ = evaluate(model, test)
        rec = report.add(epoch=epoch, iter=it, loss=float(np.mean(losses)) if losses else float("nan"),
                         acc=correct / max(seen, 1), test_acc=acc, r_target=0.0, r_current=0.0,
                         masked_count=0, max_masked_norm=0.0)
        log.info("pretrain epoch %d loss %.4f test acc %.4f", epoch, rec["loss"], acc)
        if on_record:
            on_record(rec)
    return report


@dataclass
class FinetuneResult:
    model: ViTModel
    state: PruneState
    report: TrainReport


def prepare_compacted(model: ViTModel, plan) -> ViTModel:
    """Copy of a pretrained model with averaging merge layers and identity compactors."""
    m = model.copy()
    if len(plan):
        m.insert_merges(plan)
    insert_compactors(m)
    return m


def finetune_cait(model: ViTModel, merge_plan, data: Dataset, sched: Schedule, seed: int = 0,
                  teacher: ViTModel | None = None,
                  on_record: Callable[[dict], None] | None = None,
                  probe: Callable[[int, ViTModel, dict, dict], None] | None = None) -> FinetuneResult:
    """Fine-tune with compactors while ramping the channel target and rebuilding P.

    `model` is left untouched; a compacted copy is returned. `probe(it, m, g_cls,
    g_applied)` is called before every update with the model being trained and
    the task and assembled compactor gradients keyed by (block, kind).
    """
    if model.compactors:
        raise TrainingError("finetune expects a pretrained model without compactors")
    _check_data(model, data)
    m = prepare_compacted(model, merge_plan)
    plan = m.plan
    train, test = data.split("train"), data.split("test")
    opt = _optimizer(m, sched)
    params = m.parameters()
    comps = list(m.compactors.items())
    ipe = max(1, math.ceil(len(train) / sched.batch_size))
    total = sched.epochs * ipe
    start = sched.warmup_iters(ipe)
    rng = np.random.default_rng(seed)
    report = TrainReport()
    state = PruneState()
    it = 0
    for epoch in range(sched.epochs):
        losses, correct, seen = [], 0, 0
        for x, y in train.batches(sched.batch_size, rng, sched.hflip):
            logits, loss = _loss(m, x, y, sched, teacher)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingError(f"non-finite loss {lv} at epoch {epoch} iter {it}; "
                                    f"r_target {state.r_target:.4f}, masked {masked_count(m)}")
            grads = grad_of(loss, params)
            g_task = {}
            g_applied = {}
            for key, comp in comps:
                g = grads[comp.matrix]
                if probe is not None:
                    g_task[key] = g.copy()
                grads[comp.matrix] = assemble_grad(comp, g, sched.lam)
                if probe is not None:
                    g_applied[key] = grads[comp.matrix]
            if probe is not None:
                probe(it, m, g_task, g_applied)
            opt.step(grads, sched.lr_at(it, total, ipe))
            losses.append(lv)
            correct += int((logits.data.argmax(1) == y).sum())
            seen += len(y)
            it += 1
            if it > start and (it - start) % sched.interval_iters == 0 and sched.final_ratio > 0:
                r_t = sched.r_target_at(it - 1, ipe)
                state = select_channels(ScoreBoard.from_model(m), m, plan, r_t)
                before = {key: comp.mask.copy() for key, comp in comps}
                reset_masks(m, state.pruned)
                # columns whose mask flipped start from fresh moments, so a newly masked
                # column is driven by the lasso term instead of stale task-gradient scale
                for key, comp in comps:
                    flipped = before[key] != comp.mask
                    if flipped.any():
                        opt.reset(comp.matrix, np.broadcast_to(flipped[..., None, :], comp.matrix.shape))
        acc, _ = evaluate(m, test)
        rec = report.add(epoch=epoch, iter=it, loss=float(np.mean(losses)) if losses else float("nan"),
                         acc=correct / max(seen, 1), test_acc=acc, r_target=state.r_target,
                         r_current=state.r_current, masked_count=masked_count(m),
                         max_masked_norm=_max_masked_norm(m))
        log.info("finetune epoch %d loss %.4f test acc %.4f r_target %.4f r_current %.4f masked %d",
                 epoch, rec["loss"], acc, state.r_target, state.r_current, rec["masked_count"])
        if on_record:
            on_record(rec)
    return FinetuneResult(m, state, report)


def _max_masked_norm(model: ViTModel) -> float:
    worst = 0.0
    for comp in model.compactors.values():
        norms = comp.column_norms()
        dead = comp.mask == 0
        if dead.any():
            worst = max(worst, float(norms[dead].max()))
    return worst


def with_ratio(sched: Schedule, final_ratio: float) -> Schedule:
    return replace(sched, final_ratio=final_ratio)
