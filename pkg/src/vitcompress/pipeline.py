"""Stage functions composing pretrain → plan → fine-tune → fold → eval.

Each stage writes its artifacts under the run's output root and stamps them
with the config hash and seed, so any artifact can be traced back to the
(config, seed) pair that produced it.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flops
from .atme import MergePlan, plan_merges
from .cdcp import PruneState, build_prune_report, prune_model, state_from_masks, zero_columns
from .checkpoint import file_sha256, load_model, save_model
from .config import RunConfig
from .data import Dataset, load_dataset, synth_generate
from .trainer import TrainReport, evaluate, finetune_cait, pretrain, with_ratio
from .vit import ViTModel, predict

log = logging.getLogger(__name__)

# folded and zeroed-compacted logits must agree to this sup-norm
FOLD_TOL = 1e-4


class StageError(RuntimeError):
    def __init__(self, stage: str, msg: str):
        super().__init__(f"stage {stage} failed: {msg}")
        self.stage = stage


def stamp(cfg: RunConfig, d: dict) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed, **d}


def write_report(root: Path, name: str, cfg: RunConfig, payload: dict, text: str) -> None:
    """Dual-emit a report as <name>.txt (human) and <name>.json (machine)."""
    root.mkdir(parents=True, exist_ok=True)
    head = f"config_hash {cfg.hash}  seed {cfg.seed}\n\n"
    (root / f"{name}.txt").write_text(head + text.rstrip() + "\n")
    (root / f"{name}.json").write_text(json.dumps(stamp(cfg, payload), indent=2, sort_keys=True) + "\n")


def write_jsonl(root: Path, name: str, cfg: RunConfig, report: TrainReport) -> None:
    lines = [json.dumps(stamp(cfg, r), sort_keys=True) for r in report.records]
    (root / name).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_data(cfg: RunConfig) -> Dataset:
    if cfg.data.path:
        ds = load_dataset(cfg.data.path)
    else:
        ds = synth_generate(cfg.seeds()["data"], cfg.data.n, img=cfg.model.img, classes=cfg.model.classes,
                            test_fraction=cfg.data.test_fraction, noise=cfg.data.noise)
    return ds


@dataclass
class PlanChoice:
    plan: MergePlan
    token_ratio: float
    channel_ratio: float
    joint_target: float
    detail: dict

    def to_dict(self) -> dict:
        return {"merge_plan": str(self.plan), "token_ratio": self.token_ratio,
                "channel_ratio": self.channel_ratio, "joint_target": self.joint_target, **self.detail}

    def to_text(self) -> str:
        return (f"merge plan      {self.plan or '(none)'}\n"
                f"token ratio     {self.token_ratio:.4%}\n"
                f"channel ratio   {self.channel_ratio:.4%}\n"
                f"joint target    {self.joint_target:.4%}")


def choose_plan(cfg: RunConfig) -> PlanChoice:
    mc = cfg.model
    detail = {}
    if cfg.merges.plan is not None:
        plan = MergePlan.parse(cfg.merges.plan)
        plan.validate(mc.depth, (mc.grid, mc.grid))
    elif cfg.merges.target_ratio is not None:
        res = plan_merges(mc, cfg.merges.target_ratio)
        plan = res.plan
        detail["planner"] = res.to_dict()
    else:
        plan = MergePlan()
    r_tok = flops.reduction_ratio(mc, plan)
    if cfg.budget.channel_ratio is not None:
        r_ch = cfg.budget.channel_ratio
    else:
        r_ch = flops.split_budget(cfg.budget.joint_ratio, r_tok)
    joint = 1 - (1 - r_tok) * (1 - r_ch)
    return PlanChoice(plan, r_tok, r_ch, joint, detail)


def stage_pretrain(cfg: RunConfig, data: Dataset, root: Path) -> ViTModel:
    if cfg.baseline:
        model, _ = load_model(cfg.baseline)
        return model
    seeds = cfg.seeds()
    model = ViTModel.init(cfg.model, seeds["init"])
    report = pretrain(model, data, cfg.pretrain, seed=seeds["pretrain"])
    write_jsonl(root, "pretrain_report.jsonl", cfg, report)
    save_model(model, root / "baseline.ckpt", meta=stamp(cfg, {"stage": "pretrain"}))
    return model


def stage_finetune(cfg: RunConfig, baseline: ViTModel, data: Dataset, choice: PlanChoice, root: Path):
    sched = with_ratio(cfg.finetune, choice.channel_ratio)
    teacher = baseline if cfg.distill else None
    res = finetune_cait(baseline, choice.plan, data, sched, seed=cfg.seeds()["finetune"], teacher=teacher)
    write_jsonl(root, "finetune_report.jsonl", cfg, res.report)
    (root / "prune_state.json").write_text(json.dumps(stamp(cfg, res.state.to_dict()), sort_keys=True) + "\n")
    save_model(res.model, root / "compacted.ckpt",
               meta=stamp(cfg, {"stage": "finetune", "r_target": res.state.r_target}))
    return res


def fold_checkpoint(model: ViTModel, state: PruneState):
    """Fold a compacted model; returns (fold result, prune report)."""
    report = build_prune_report(model, state)
    folded = prune_model(model, state)
    return folded, report


def fold_equivalence(compacted: ViTModel, state: PruneState, folded: ViTModel, images: np.ndarray) -> float:
    """Sup-norm gap between the zeroed compacted model and its folded form."""
    zeroed = compacted.copy()
    zero_columns(zeroed, state.pruned)
    if not len(images):
        return 0.0
    return float(np.abs(predict(images, zeroed) - predict(images, folded)).max())


def stage_fold(cfg: RunConfig, compacted: ViTModel, state: PruneState, root: Path):
    res, report = fold_checkpoint(compacted, state)
    write_report(root, "prune_report", cfg, report.to_dict(), report.to_text())
    sha = save_model(res.model, root / "folded.ckpt", meta=stamp(cfg, {"stage": "fold"}),
                     retained=res.retained)
    return res, report, sha


def stage_eval(cfg: RunConfig, data: Dataset, baseline: ViTModel, compacted: ViTModel, state: PruneState,
               folded: ViTModel, choice: PlanChoice, root: Path) -> dict:
    test = data.split("test")
    base_acc, _ = evaluate(baseline, test)
    comp_acc, _ = evaluate(compacted, test)
    fold_acc, _ = evaluate(folded, test)
    gap = fold_equivalence(compacted, state, folded, test.images)
    channels = folded.channels()
    fr = flops.model_flops(cfg.model, choice.plan, channels)
    joint = 1 - fr.total / fr.baseline
    summary = {
        "baseline_acc": base_acc, "compacted_acc": comp_acc, "folded_acc": fold_acc,
        "acc_drop_pp": 100 * (base_acc - fold_acc),
        "fold_max_abs_diff": gap, "fold_equivalent": gap <= FOLD_TOL,
        "merge_plan": str(choice.plan), "token_ratio": choice.token_ratio,
        "channel_target": state.r_target, "channel_achieved": state.r_current,
        "joint_target": choice.joint_target, "joint_achieved": joint,
        "baseline_params": baseline.num_params(), "folded_params": folded.num_params(),
        "flops": fr.to_dict(),
    }
    text = "\n".join([
        f"baseline acc      {base_acc:.4f}",
        f"compacted acc     {comp_acc:.4f}",
        f"folded acc        {fold_acc:.4f}   (drop {summary['acc_drop_pp']:.2f} pp)",
        f"fold max |diff|   {gap:.3g}   {'PASS' if summary['fold_equivalent'] else 'FAIL'} (tol {FOLD_TOL:g})",
        f"merge plan        {choice.plan or '(none)'}",
        f"channel ratio     {state.r_current:.4%} (target {state.r_target:.4%})",
        f"joint reduction   {joint:.4%} (target {choice.joint_target:.4%})",
        "",
        fr.to_text(),
    ])
    write_report(root, "eval", cfg, summary, text)
    return summary


@dataclass
class PipelineResult:
    root: Path
    summary: dict
    prune_ok: bool
    folded_sha256: str

    @property
    def ok(self) -> bool:
        return self.prune_ok and self.summary["fold_equivalent"]


def _stage(name: str, fn, *args):
    log.info("stage %s", name)
    try:
        return fn(*args)
    except (FileNotFoundError, ValueError) as e:
        # bad inputs surface as usage errors, not stage failures
        if name in ("config", "data", "plan"):
            raise
        raise StageError(name, str(e)) from e
    except Exception as e:
        raise StageError(name, f"{type(e).__name__}: {e}") from e


def run_pipeline(cfg: RunConfig) -> PipelineResult:
    cfg.validate_paths()
    root = cfg.output_root()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(stamp(cfg, cfg.to_dict()), indent=2, sort_keys=True) + "\n")
    data = _stage("data", load_data, cfg)
    if data.img != cfg.model.img or data.classes != cfg.model.classes:
        raise ValueError(f"dataset ({data.img}px, {data.classes} classes) does not match the model "
                         f"({cfg.model.img}px, {cfg.model.classes} classes)")
    choice = _stage("plan", choose_plan, cfg)
    write_report(root, "plan", cfg, choice.to_dict(), choice.to_text())
    baseline = _stage("pretrain", stage_pretrain, cfg, data, root)
    ft = _stage("finetune", stage_finetune, cfg, baseline, data, choice, root)
    fres, report, sha = _stage("fold", stage_fold, cfg, ft.model, ft.state, root)
    summary = _stage("eval", stage_eval, cfg, data, baseline, ft.model, ft.state, fres.model, choice, root)
    summary["folded_sha256"] = sha
    summary["audits"] = report.audits
    return PipelineResult(root, summary, report.ok, sha)


def fold_from_checkpoint(path, out=None):
    """Fold a compacted checkpoint using P recovered from its masks."""
    model, header = load_model(path)
    if not model.compactors:
        raise ValueError(f"{path}: checkpoint carries no compactors")
    r_target = header.get("meta", {}).get("r_target")
    state = state_from_masks(model, r_target)
    res, report = fold_checkpoint(model, state)
    sha = None
    if out is not None:
        sha = save_model(res.model, out, meta={**header.get("meta", {}), "stage": "fold"}, retained=res.retained)
    return model, state, res, report, sha


__all__ = [
    "FOLD_TOL", "PipelineResult", "PlanChoice", "StageError", "choose_plan", "file_sha256", "fold_checkpoint",
    "fold_equivalence", "fold_from_checkpoint", "load_data", "run_pipeline", "stage_eval", "stage_finetune",
    "stage_fold", "stage_pretrain", "stamp", "write_report",
]
