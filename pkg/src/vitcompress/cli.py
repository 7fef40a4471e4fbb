"""Command-line entry point: ``vitcompress <command> ...``.

Exit codes: 0 success, 1 a stage failed, 2 bad usage or unreadable input.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import flops
from .atme import MergePlan, PlanningError, plan_merges
from .checkpoint import load_model, save_model
from .config import RunConfig
from .data import load_dataset, save_dataset, synth_generate
from .pipeline import (
    FOLD_TOL,
    StageError,
    choose_plan,
    fold_equivalence,
    fold_from_checkpoint,
    load_data,
    run_pipeline,
    stage_finetune,
    stage_pretrain,
    stamp,
    write_report,
)
from .trainer import evaluate
from .vit import PRESETS

EXIT_OK, EXIT_STAGE, EXIT_USAGE = 0, 1, 2


class UsageError(ValueError):
    pass


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True) if args.json else text)


def _model_source(args):
    """(config, merge plan, channels) from --arch, --config or --checkpoint."""
    plan = MergePlan.parse(args.merges) if getattr(args, "merges", None) else None
    if getattr(args, "checkpoint", None):
        model, _ = load_model(args.checkpoint)
        return model.config, plan if plan is not None else model.plan, model.channels()
    if getattr(args, "config", None):
        return RunConfig.load(args.config).model, plan, None
    name = getattr(args, "arch", None) or "deit-small"
    if name not in PRESETS:
        raise UsageError(f"unknown arch {name!r}; choose from {', '.join(PRESETS)}")
    return PRESETS[name], plan, None


def cmd_flops(args) -> int:
    cfg, plan, channels = _model_source(args)
    if plan is not None:
        plan.validate(cfg.depth, (cfg.grid, cfg.grid))
    rep = flops.model_flops(cfg, plan, channels)
    payload = {**rep.to_dict(), "params": flops.model_params(cfg, plan, channels),
               "merge_plan": str(plan or MergePlan())}
    _emit(args, payload, rep.to_text() + f"\nparams {payload['params'] / 1e6:.3f} M")
    return EXIT_OK


def cmd_plan(args) -> int:
    if args.config and args.target is None:
        choice = choose_plan(RunConfig.load(args.config))
        _emit(args, choice.to_dict(), choice.to_text())
        return EXIT_OK
    cfg, _, _ = _model_source(args)
    if args.target is None:
        raise UsageError("plan needs --target (or --config with a merges section)")
    try:
        res = plan_merges(cfg, args.target)
    except PlanningError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    _emit(args, res.to_dict(), res.to_text())
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = synth_generate(args.seed, args.n, img=args.img, classes=args.classes, noise=args.noise)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def _run_cfg(args) -> RunConfig:
    cfg = RunConfig.load(args.config)
    cfg.validate_paths()
    return cfg


def cmd_pretrain(args) -> int:
    cfg = _run_cfg(args)
    root = cfg.output_root()
    root.mkdir(parents=True, exist_ok=True)
    data = load_data(cfg)
    try:
        model = stage_pretrain(cfg, data, root)
    except Exception as e:
        raise StageError("pretrain", str(e)) from e
    acc, _ = evaluate(model, data.split("test"))
    print(f"baseline test acc {acc:.4f}  -> {root / 'baseline.ckpt'}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _run_cfg(args)
    root = cfg.output_root()
    base_path = Path(args.baseline or cfg.baseline or root / "baseline.ckpt")
    if not base_path.is_file():
        raise FileNotFoundError(f"baseline checkpoint not found: {base_path}")
    baseline, _ = load_model(base_path)
    data = load_data(cfg)
    choice = choose_plan(cfg)
    write_report(root, "plan", cfg, choice.to_dict(), choice.to_text())
    try:
        res = stage_finetune(cfg, baseline, data, choice, root)
    except Exception as e:
        raise StageError("finetune", str(e)) from e
    print(f"r_current {res.state.r_current:.4%} (target {res.state.r_target:.4%})  -> {root / 'compacted.ckpt'}")
    return EXIT_OK


def cmd_fold(args) -> int:
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name("folded.ckpt")
    model, state, res, report, sha = fold_from_checkpoint(args.checkpoint, out)
    payload = {**report.to_dict(), "folded": str(out), "folded_sha256": sha}
    text = report.to_text() + f"\n\nfolded checkpoint {out}\nsha256 {sha}"
    if args.data:
        images = load_dataset(args.data).split("test").images
        gap = fold_equivalence(model, state, res.model, images)
        payload["fold_max_abs_diff"] = gap
        text += f"\nfold max |diff| {gap:.3g} ({'PASS' if gap <= FOLD_TOL else 'FAIL'})"
    _emit(args, payload, text)
    return EXIT_OK


def _dataset_for(args):
    if args.data:
        return load_dataset(args.data)
    if args.config:
        return load_data(RunConfig.load(args.config))
    raise UsageError("eval needs --data or --config")


def cmd_eval(args) -> int:
    ds = _dataset_for(args).split("test")
    rows = []
    for path in args.checkpoint:
        model, header = load_model(path)
        acc, loss = evaluate(model, ds)
        rows.append({"checkpoint": str(path), "acc": acc, "loss": loss, "params": model.num_params(),
                     "macs": flops.total_macs(model.config, model.plan, model.channels()),
                     "config_hash": header.get("meta", {}).get("config_hash")})
    text = "\n".join(f"{r['checkpoint']}: acc {r['acc']:.4f} loss {r['loss']:.4f} "
                     f"params {r['params']} macs {r['macs']}" for r in rows)
    _emit(args, {"n_test": len(ds), "results": rows}, text)
    return EXIT_OK


def cmd_report(args) -> int:
    model, header = load_model(args.checkpoint)
    fr = flops.model_flops(model.config, model.plan, model.channels())
    payload = {"checkpoint": str(args.checkpoint), "meta": header.get("meta", {}), "flops": fr.to_dict()}
    text = fr.to_text()
    if model.compactors:
        report = fold_from_checkpoint(args.checkpoint)[3]
        payload["prune"] = report.to_dict()
        text = report.to_text() + "\n\n" + text
    _emit(args, payload, text)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = RunConfig.load(args.config)
    res = run_pipeline(cfg)
    s = res.summary
    payload = stamp(cfg, {**s, "root": str(res.root), "ok": res.ok})
    text = (f"run {res.root}  config_hash {cfg.hash}  seed {cfg.seed}\n"
            f"baseline acc {s['baseline_acc']:.4f}  folded acc {s['folded_acc']:.4f}\n"
            f"joint reduction {s['joint_achieved']:.4%} (target {s['joint_target']:.4%})\n"
            + "\n".join(f"audit {k:<24} {'PASS' if v else 'FAIL'}" for k, v in s["audits"].items())
            + f"\naudit {'fold_equivalence':<24} {'PASS' if s['fold_equivalent'] else 'FAIL'}"
            + f"\nfolded sha256 {res.folded_sha256}")
    _emit(args, payload, text)
    return EXIT_OK if res.ok else EXIT_STAGE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vitcompress", description="Token merging and channel pruning for ViTs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def src(sp, merges=True):
        g = sp.add_mutually_exclusive_group()
        g.add_argument("--arch", help=f"preset: {', '.join(PRESETS)}")
        g.add_argument("--config", help="run config (YAML)")
        g.add_argument("--checkpoint", help="model checkpoint")
        if merges:
            sp.add_argument("--merges", help="merge plan, e.g. 3h,7v")

    sp = sub.add_parser("flops", help="analytical FLOPs and parameter audit")
    src(sp)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_flops)

    sp = sub.add_parser("plan", help="place merges for a target token-FLOPs reduction")
    src(sp, merges=False)
    sp.add_argument("--target", type=float, help="reduction ratio, e.g. 0.433")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_plan)

    sp = sub.add_parser("synth", help="write a synthetic stripe dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=1500)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--img", type=int, default=32)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--noise", type=float, default=0.15)
    sp.set_defaults(fn=cmd_synth)

    for name, fn, text in (("pretrain", cmd_pretrain, "train the uncompressed baseline"),
                           ("finetune", cmd_finetune, "fine-tune with merges and compactors"),
                           ("pipeline", cmd_pipeline, "run every stage end to end")):
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", required=True)
        if name == "finetune":
            sp.add_argument("--baseline", help="pretrained checkpoint (default: <out>/baseline.ckpt)")
        if name == "pipeline":
            sp.add_argument("--json", action="store_true")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("fold", help="fold compactors of a compacted checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")
    sp.add_argument("--data", help="dataset manifest for the equivalence check")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_fold)

    sp = sub.add_parser("eval", help="test accuracy of one or more checkpoints")
    sp.add_argument("--checkpoint", required=True, action="append")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--data")
    g.add_argument("--config")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("report", help="prune and FLOPs report for a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.fn(args)
    except RuntimeError as e:
        # StageError and consistency violations found while folding
        print(f"error: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (FileNotFoundError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
