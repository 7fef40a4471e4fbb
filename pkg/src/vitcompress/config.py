"""Run configuration: one YAML file drives every pipeline stage.

Recognised keys (anything else is rejected)::

    seed: 0                      # every random stream is derived from this
    out_dir: runs/desk           # overridden by $VITCOMPRESS_OUT when set
    baseline: null               # optional pretrained checkpoint; skips pretraining
    model:    {preset: desk, <ViTConfig field>: value, ...}
    data:     {path: null, n: 1500, noise: 0.15, test_fraction: 0.2}
    pretrain: {profile: desk, <Schedule field>: value, ...}
    finetune: {profile: desk, <Schedule field>: value, ...}
    merges:   {plan: "1h,2v"} | {target_ratio: 0.3} | {}
    budget:   {joint_ratio: 0.40} | {channel_ratio: 0.15}
    distill:  false              # self-distil from the frozen baseline
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from .trainer import Schedule
from .vit import PRESETS, ConfigError, ViTConfig

OUT_ENV = "VITCOMPRESS_OUT"


def _reject_unknown(section: str, got: dict, allowed) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"{section}: unknown key(s) {', '.join(map(str, extra))}")


@dataclass(frozen=True)
class DataConfig:
    path: str | None = None
    n: int = 1500
    noise: float = 0.15
    test_fraction: float = 0.2


@dataclass(frozen=True)
class MergeConfig:
    plan: str | None = None
    target_ratio: float | None = None

    def __post_init__(self):
        if self.plan is not None and self.target_ratio is not None:
            raise ConfigError("merges: give either plan or target_ratio, not both")


@dataclass(frozen=True)
class BudgetConfig:
    joint_ratio: float | None = 0.40
    channel_ratio: float | None = None

    def __post_init__(self):
        if (self.joint_ratio is None) == (self.channel_ratio is None):
            raise ConfigError("budget: give exactly one of joint_ratio, channel_ratio")
        r = self.joint_ratio if self.joint_ratio is not None else self.channel_ratio
        if not 0 <= r < 1:
            raise ConfigError(f"budget: ratio {r} outside [0, 1)")


def _schedule(section: str, raw: dict | None) -> tuple[Schedule, str]:
    raw = dict(raw or {})
    profile = raw.pop("profile", "desk")
    _reject_unknown(section, raw, [f.name for f in fields(Schedule)])
    if profile == "desk":
        sched = Schedule.desk(**raw)
    elif profile == "imagenet":
        sched = Schedule.imagenet(**raw)
    else:
        raise ConfigError(f"{section}: unknown profile {profile!r}")
    return sched, profile


@dataclass(frozen=True)
class RunConfig:
    model: ViTConfig
    pretrain: Schedule
    finetune: Schedule
    data: DataConfig = field(default_factory=DataConfig)
    merges: MergeConfig = field(default_factory=MergeConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    seed: int = 0
    out_dir: str = "runs/desk"
    baseline: str | None = None
    distill: bool = False
    model_preset: str | None = "desk"

    KEYS = ("seed", "out_dir", "baseline", "model", "data", "pretrain", "finetune", "merges", "budget",
            "distill")

    @classmethod
    def from_dict(cls, raw: dict | None) -> "RunConfig":
        raw = dict(raw or {})
        _reject_unknown("config", raw, cls.KEYS)
        m = dict(raw.get("model") or {})
        preset = m.pop("preset", "desk")
        _reject_unknown("model", m, [f.name for f in fields(ViTConfig)])
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"model: unknown preset {preset!r}")
            model = replace(PRESETS[preset], **m)
        else:
            model = ViTConfig(**m)
        for name, typ in (("data", DataConfig), ("merges", MergeConfig), ("budget", BudgetConfig)):
            _reject_unknown(name, raw.get(name) or {}, [f.name for f in fields(typ)])
        pre, _ = _schedule("pretrain", raw.get("pretrain"))
        fine, _ = _schedule("finetune", raw.get("finetune"))
        return cls(model=model, pretrain=pre, finetune=fine,
                   data=DataConfig(**(raw.get("data") or {})),
                   merges=MergeConfig(**(raw.get("merges") or {})),
                   budget=BudgetConfig(**(raw.get("budget") or {})),
                   seed=int(raw.get("seed", 0)), out_dir=str(raw.get("out_dir", "runs/desk")),
                   baseline=raw.get("baseline"), distill=bool(raw.get("distill", False)),
                   model_preset=preset)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: invalid YAML ({e})") from None
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        cfg = cls.from_dict(raw)
        # relative paths inside the file are taken relative to the file
        base = p.parent
        fix = {}
        if cfg.baseline and not Path(cfg.baseline).is_absolute():
            fix["baseline"] = str(base / cfg.baseline)
        if cfg.data.path and not Path(cfg.data.path).is_absolute():
            fix["data"] = replace(cfg.data, path=str(base / cfg.data.path))
        return replace(cfg, **fix)

    def to_dict(self) -> dict:
        """Fully resolved settings; the config hash is computed from this."""
        return {
            "seed": self.seed,
            "baseline": self.baseline,
            "distill": self.distill,
            "model": self.model.to_dict(),
            "data": asdict(self.data),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "merges": asdict(self.merges),
            "budget": asdict(self.budget),
        }

    @property
    def hash(self) -> str:
        # out_dir is excluded: moving a run must not change its identity
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def output_root(self) -> Path:
        return Path(os.environ.get(OUT_ENV) or self.out_dir)

    def validate_paths(self) -> None:
        if self.baseline and not Path(self.baseline).is_file():
            raise FileNotFoundError(f"baseline checkpoint not found: {self.baseline}")
        if self.data.path and not Path(self.data.path).is_file():
            raise FileNotFoundError(f"dataset not found: {self.data.path}")
        root = self.output_root()
        if root.exists() and not root.is_dir():
            raise ConfigError(f"output root {root} exists and is not a directory")

    def seeds(self) -> dict[str, int]:
        """Independent integer seeds per stage, all derived from `seed`."""
        names = ("data", "init", "pretrain", "finetune")
        vals = np.random.SeedSequence(self.seed).generate_state(len(names))
        return {n: int(v) for n, v in zip(names, vals)}
