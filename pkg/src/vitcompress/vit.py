"""Pre-norm ViT (DeiT layout) with optional merge layers and compactors."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .atme import MergeLayer, MergePlan, apply_merge
from .flops import BlockChannels
from .numerics import (
    DTYPE,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    linear,
    matmul,
    no_grad,
    reshape,
    scale,
    scatter_last,
    softmax,
    transpose,
)

LN_EPS = 1e-6


class ConfigError(ValueError):
    pass


class ConsistencyError(RuntimeError):
    pass


@dataclass(frozen=True)
class ViTConfig:
    depth: int
    dim: int
    heads: int
    head_dim: int
    patch: int
    img: int
    classes: int
    use_cls: bool = True
    mlp_ratio: int = 4
    in_chans: int = 3

    def __post_init__(self):
        if self.img % self.patch:
            raise ConfigError(f"image side {self.img} not divisible by patch {self.patch}")
        if self.heads * self.head_dim != self.dim:
            raise ConfigError(f"heads*head_dim = {self.heads * self.head_dim} != dim {self.dim}")
        if min(self.dim, self.heads, self.patch, self.classes) < 1 or self.depth < 0:
            raise ConfigError(f"non-positive extent in {self}")

    @property
    def grid(self) -> int:
        return self.img // self.patch

    @property
    def num_spatial(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_spatial + int(self.use_cls)

    def to_dict(self) -> dict:
        return asdict(self)


PRESETS = {
    "deit-tiny": ViTConfig(12, 192, 3, 64, 16, 224, 1000),
    "deit-small": ViTConfig(12, 384, 6, 64, 16, 224, 1000),
    "deit-base": ViTConfig(12, 768, 12, 64, 16, 224, 1000),
    "desk": ViTConfig(4, 64, 4, 16, 4, 32, 10),
}


def preset(name: str) -> ViTConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown architecture {name!r}; choose from {sorted(PRESETS)}") from None


def _param(arr) -> Tensor:
    return Tensor(np.asarray(arr, dtype=DTYPE), requires_grad=True)


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.standard_normal(shape), -2.0, 2.0) * std


@dataclass
class BlockWeights:
    heads: int
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor  # [C, heads*dq], head-major columns
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor  # [C, heads*dv]
    bv: Tensor
    wproj: Tensor  # [heads*dv, proj_out]
    bproj: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    wfc1: Tensor  # [C, F]
    bfc1: Tensor
    wfc2: Tensor  # [F, C]
    bfc2: Tensor
    # residual-stream columns written by proj; None means all C in order
    proj_idx: np.ndarray | None = None

    _TENSORS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wproj", "bproj",
                "ln2_g", "ln2_b", "wfc1", "bfc1", "wfc2", "bfc2")

    @classmethod
    def init(cls, rng, dim: int, heads: int, head_dim: int, hidden: int) -> "BlockWeights":
        inner = heads * head_dim
        return cls(
            heads,
            _param(np.ones(dim)), _param(np.zeros(dim)),
            _param(_trunc_normal(rng, (dim, inner))), _param(np.zeros(inner)),
            _param(_trunc_normal(rng, (dim, inner))), _param(np.zeros(inner)),
            _param(_trunc_normal(rng, (dim, inner))), _param(np.zeros(inner)),
            _param(_trunc_normal(rng, (inner, dim))), _param(np.zeros(dim)),
            _param(np.ones(dim)), _param(np.zeros(dim)),
            _param(_trunc_normal(rng, (dim, hidden))), _param(np.zeros(hidden)),
            _param(_trunc_normal(rng, (hidden, dim))), _param(np.zeros(dim)),
        )

    @property
    def dq(self) -> int:
        return self.wq.shape[1] // self.heads

    @property
    def dv(self) -> int:
        return self.wv.shape[1] // self.heads

    @property
    def hidden(self) -> int:
        return self.wfc1.shape[1]

    @property
    def proj_out(self) -> int:
        return self.wproj.shape[1]

    def head_weights(self, kind: str, h: int) -> tuple[np.ndarray, np.ndarray]:
        """(W, b) of one head for kind in q/k/v, shapes [C, d] and [d]."""
        w, b = getattr(self, "w" + kind), getattr(self, "b" + kind)
        d = w.shape[1] // self.heads
        return w.data[:, h * d:(h + 1) * d], b.data[h * d:(h + 1) * d]

    def channels(self) -> BlockChannels:
        return BlockChannels((self.dq,) * self.heads, (self.dv,) * self.heads, self.proj_out, self.hidden)

    def named_parameters(self, prefix: str):
        for n in self._TENSORS:
            yield f"{prefix}.{n}", getattr(self, n)


@dataclass
class ViTModel:
    config: ViTConfig
    patch_w: Tensor
    patch_b: Tensor
    cls: Tensor
    pos: Tensor
    blocks: list[BlockWeights]
    norm_g: Tensor
    norm_b: Tensor
    head_w: Tensor
    head_b: Tensor
    merges: dict[int, MergeLayer] = field(default_factory=dict)
    # (block, kind) -> Compactor; per-head compactors are stacked along axis 0
    compactors: dict = field(default_factory=dict)

    @classmethod
    def init(cls, config: ViTConfig, seed: int = 0) -> "ViTModel":
        rng = np.random.default_rng(seed)
        c = config.dim
        pdim = config.in_chans * config.patch ** 2
        hidden = config.mlp_ratio * c
        patch_w = _param(_trunc_normal(rng, (pdim, c)))
        cls_tok = _param(_trunc_normal(rng, (c,)))
        pos = _param(_trunc_normal(rng, (config.num_tokens, c)))
        blocks = [BlockWeights.init(rng, c, config.heads, config.head_dim, hidden) for _ in range(config.depth)]
        head_w = _param(_trunc_normal(rng, (c, config.classes)))
        return cls(config, patch_w, _param(np.zeros(c)), cls_tok, pos, blocks,
                   _param(np.ones(c)), _param(np.zeros(c)), head_w, _param(np.zeros(config.classes)))

    @property
    def plan(self) -> MergePlan:
        return MergePlan.from_blocks(sorted(self.merges)) if self.merges else MergePlan()

    def insert_merges(self, plan: MergePlan) -> None:
        plan.validate(self.config.depth, (self.config.grid, self.config.grid))
        self.merges = {e.block: MergeLayer.averaging(e.direction, self.config.dim) for e in plan.entries}

    def channels(self) -> list[BlockChannels]:
        return [b.channels() for b in self.blocks]

    def named_parameters(self):
        yield "patch_w", self.patch_w
        yield "patch_b", self.patch_b
        if self.config.use_cls:
            yield "cls", self.cls
        yield "pos", self.pos
        for i, blk in enumerate(self.blocks):
            yield from blk.named_parameters(f"blocks.{i}")
        for b in sorted(self.merges):
            yield from self.merges[b].named_parameters(f"merges.{b}")
        for key in sorted(self.compactors, key=compactor_sort_key):
            yield f"compactors.{key[0]}.{key[1]}", self.compactors[key].matrix
        yield "norm_g", self.norm_g
        yield "norm_b", self.norm_b
        yield "head_w", self.head_w
        yield "head_b", self.head_b

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def num_params(self, include_compactors: bool = False) -> int:
        return sum(t.data.size for n, t in self.named_parameters()
                   if include_compactors or not n.startswith("compactors."))

    def copy(self) -> "ViTModel":
        return copy.deepcopy(self)


KIND_ORDER = {"q": 0, "k": 1, "v": 2, "proj": 3, "fc1": 4}


def compactor_sort_key(key):
    return key[0], KIND_ORDER[key[1]]


# ------------------------------------------------------------------- forward

def patchify(image, model: ViTModel) -> Tensor:
    """Images [B,3,img,img] (or a single [3,img,img]) to tokens [B,N,C]."""
    cfg = model.config
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=DTYPE)
    single = img.ndim == 3
    if single:
        img = img[None]
    if img.shape[1:] != (cfg.in_chans, cfg.img, cfg.img):
        raise ConfigError(f"image shape {img.shape[1:]} does not match config "
                          f"({cfg.in_chans}, {cfg.img}, {cfg.img})")
    b, g, p = img.shape[0], cfg.grid, cfg.patch
    patches = img.reshape(b, cfg.in_chans, g, p, g, p).transpose(0, 2, 4, 1, 3, 5)
    patches = np.ascontiguousarray(patches.reshape(b, g * g, cfg.in_chans * p * p), dtype=DTYPE)
    x = linear(Tensor(patches), model.patch_w, model.patch_b)
    if cfg.use_cls:
        cls_tok = add(Tensor(np.zeros((b, 1, cfg.dim), dtype=DTYPE)), reshape(model.cls, (1, 1, cfg.dim)))
        x = concat([cls_tok, x], axis=1)
    x = add(x, model.pos)
    if single:
        x = reshape(x, x.shape[1:])
    return x


def _heads(x: Tensor, heads: int) -> Tensor:
    b, n, hd = x.shape
    return transpose(reshape(x, (b, n, heads, hd // heads)), (0, 2, 1, 3))


def mhsa_forward(x: Tensor, block: BlockWeights, compactors: dict | None = None) -> Tensor:
    """Multi-head self-attention on tokens [B,N,C] or [N,C].

    With compactors, q/k/v (per head) and proj outputs are post-multiplied by
    their compactor matrices. The logit scale is 1/sqrt of the current q/k dim.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if block.wq.shape != block.wk.shape:
        raise ConsistencyError(f"q/k projections disagree: {block.wq.shape} vs {block.wk.shape}")
    bsz, n, c = x.shape
    h = block.heads
    q = _heads(linear(x, block.wq, block.bq), h)
    k = _heads(linear(x, block.wk, block.bk), h)
    v = _heads(linear(x, block.wv, block.bv), h)
    if compactors:
        q = matmul(q, compactors["q"].matrix)
        k = matmul(k, compactors["k"].matrix)
        v = matmul(v, compactors["v"].matrix)
    logits = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(block.dq))
    o = matmul(softmax(logits, axis=-1), v)
    o = reshape(transpose(o, (0, 2, 1, 3)), (bsz, n, h * block.dv))
    out = linear(o, block.wproj, block.bproj)
    if compactors:
        out = linear(out, compactors["proj"].matrix)
    if block.proj_idx is not None:
        out = scatter_last(out, block.proj_idx, c)
    elif out.shape[-1] != c:
        raise ConsistencyError(f"proj writes {out.shape[-1]} channels into a {c}-wide stream without an index")
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def ffn_forward(x: Tensor, block: BlockWeights, compactors: dict | None = None) -> Tensor:
    hdn = linear(x, block.wfc1, block.bfc1)
    if compactors:
        hdn = linear(hdn, compactors["fc1"].matrix)
    return linear(gelu(hdn), block.wfc2, block.bfc2)


def block_compactors(model: ViTModel, b: int) -> dict | None:
    if not model.compactors:
        return None
    return {kind: model.compactors[(b, kind)] for kind in KIND_ORDER}


def forward_features(images, model: ViTModel) -> Tensor:
    cfg = model.config
    x = patchify(images, model)
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    grid = (cfg.grid, cfg.grid)
    for i, blk in enumerate(model.blocks):
        comp = block_compactors(model, i)
        x = add(x, mhsa_forward(layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS), blk, comp))
        x = add(x, ffn_forward(layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS), blk, comp))
        if i in model.merges:
            x, grid = apply_merge(x, grid, model.merges[i])
    x = layer_norm(x, model.norm_g, model.norm_b, LN_EPS)
    pooled = x[:, 0, :] if cfg.use_cls else x.mean(axis=1)
    if single:
        pooled = reshape(pooled, pooled.shape[1:])
    return pooled


def model_forward(images, model: ViTModel) -> Tensor:
    """Logits [B, classes] for a batch, or [classes] for one image."""
    return linear(forward_features(images, model), model.head_w, model.head_b)


def predict(images: np.ndarray, model: ViTModel, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for s in range(0, len(images), batch_size):
            out.append(model_forward(images[s:s + batch_size], model).data)
    if not out:
        return np.zeros((0, model.config.classes), dtype=DTYPE)
    return np.concatenate(out, axis=0)
