"""Bit-exact checkpoint format shared by baseline, compacted and folded models.

    VITCKPT 1 <header bytes>\\n
    <json header: config, merge plan, per-block structure, tensor manifest, metadata>
    <payload: little-endian f32 tensors in manifest order>

Each manifest entry is {name, dtype="f32", shape, offset}, offsets relative to
the start of the payload. Folded checkpoints record per-block retained-channel
index lists under "retained".
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .atme import MergeLayer, MergePlan
from .cdcp.compactor import Compactor
from .numerics import DTYPE, Tensor
from .vit import BlockWeights, ViTConfig, ViTModel

MAGIC = b"VITCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _tensors(model: ViTModel):
    for name, t in model.named_parameters():
        yield name, t.data
    for key in sorted(model.compactors, key=lambda k: (k[0], k[1])):
        yield f"compactors.{key[0]}.{key[1]}.mask", model.compactors[key].mask


def to_bytes(model: ViTModel, meta: dict | None = None, retained: dict | None = None) -> bytes:
    manifest, chunks, off = [], [], 0
    for name, arr in _tensors(model):
        buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append({"name": name, "dtype": "f32", "shape": list(arr.shape), "offset": off})
        chunks.append(buf)
        off += len(buf)
    header = {
        "version": VERSION,
        "config": model.config.to_dict(),
        "merge_plan": model.plan.to_dict(),
        "blocks": [{"heads": b.heads, "proj_idx": None if b.proj_idx is None else [int(i) for i in b.proj_idx]}
                   for b in model.blocks],
        "compacted": bool(model.compactors),
        "tensors": manifest,
        "meta": meta or {},
    }
    if retained is not None:
        header["retained"] = retained
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + f" {VERSION} {len(hbytes)}\n".encode() + hbytes + b"".join(chunks)


def save_model(model: ViTModel, path, meta: dict | None = None, retained: dict | None = None) -> str:
    """Write `model` to `path`; returns the sha256 of the file."""
    data = to_bytes(model, meta, retained)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_header(path) -> dict:
    return _parse(Path(path).read_bytes())[0]


def _parse(raw: bytes):
    nl = raw.find(b"\n")
    first = raw[:nl].split() if nl > 0 else []
    if len(first) != 3 or first[0] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    if int(first[1]) != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {first[1].decode()}")
    hlen = int(first[2])
    header = json.loads(raw[nl + 1:nl + 1 + hlen])
    return header, raw[nl + 1 + hlen:]


def load_model(path) -> tuple[ViTModel, dict]:
    """Read a checkpoint; returns (model, header)."""
    header, payload = _parse(Path(path).read_bytes())
    arrays = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        end = ent["offset"] + 4 * count
        if end > len(payload):
            raise CheckpointError(f"tensor {ent['name']} runs past the payload ({end} > {len(payload)})")
        arrays[ent["name"]] = np.frombuffer(payload, dtype="<f4", count=count,
                                            offset=ent["offset"]).reshape(shape).astype(DTYPE)
    cfg = ViTConfig(**header["config"])

    def p(name):
        return Tensor(arrays[name].copy(), requires_grad=True)

    blocks = []
    for i, info in enumerate(header["blocks"]):
        pre = f"blocks.{i}."
        idx = info["proj_idx"]
        blocks.append(BlockWeights(int(info["heads"]), *[p(pre + n) for n in BlockWeights._TENSORS],
                                   proj_idx=None if idx is None else np.asarray(idx, dtype=np.int64)))
    cls_tok = p("cls") if cfg.use_cls else Tensor(np.zeros(cfg.dim), requires_grad=True)
    model = ViTModel(cfg, p("patch_w"), p("patch_b"), cls_tok, p("pos"), blocks,
                     p("norm_g"), p("norm_b"), p("head_w"), p("head_b"))
    plan = MergePlan.from_dict(header["merge_plan"])
    for e in plan.entries:
        pre = f"merges.{e.block}."
        model.merges[e.block] = MergeLayer(e.direction, p(pre + "norm_g"), p(pre + "norm_b"),
                                           p(pre + "w"), p(pre + "b"))
    if header.get("compacted"):
        for b in range(cfg.depth):
            for kind in ("q", "k", "v", "proj", "fc1"):
                pre = f"compactors.{b}.{kind}"
                model.compactors[(b, kind)] = Compactor(b, kind, p(pre), arrays[pre + ".mask"].copy())
    return model, header


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
