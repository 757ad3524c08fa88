"""Task-conditional hierarchical transformer: patch embedding, four stages of
pre-norm blocks carrying Mix Task Adapters, multi-scale fusion, the Task Gate
Decoder and per-task prediction heads.

One forward pass serves one task: ``model.forward(image, t)``.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .adapter import MixTaskAdapterParams, bottleneck_width, mix_adapter_forward, \
    rank_width, register_mix_adapter
from .errors import ConfigError, DimensionError, UnknownTaskError
from .gate import TaskGateDecoderParams, register_task_gate, task_gate_forward
from .nn import MsaConfig, ParamStore
from .tensor import Tensor


@dataclass(frozen=True)
class TaskSpec:
    name: str
    out_channels: int
    metric: str
    higher_better: bool

    @property
    def polarity(self):
        return 1 if self.higher_better else -1


def nyud_tasks(num_classes=5):
    return (
        TaskSpec("semseg", num_classes, "miou", True),
        TaskSpec("depth", 1, "rmse", False),
        TaskSpec("normals", 3, "merr", False),
        TaskSpec("edge", 1, "f1", True),
    )


@dataclass(frozen=True)
class ModelConfig:
    H: int = 64
    W: int = 64
    C: int = 16
    depths: tuple = (1, 1, 2, 1)
    heads: tuple = (2, 2, 4, 4)
    alpha: float = 0.25
    m_ratio: float = 0.5
    k: int = 64
    c_t: int = 16
    mlp_ratio: int = 4
    tasks: tuple = field(default_factory=nyud_tasks)
    embed_upsample: str = "nearest"

    def __post_init__(self):
        object.__setattr__(self, "depths", tuple(self.depths))
        object.__setattr__(self, "heads", tuple(self.heads))
        object.__setattr__(self, "tasks", tuple(
            t if isinstance(t, TaskSpec) else TaskSpec(**t) for t in self.tasks))
        self.validate()

    def validate(self):
        if self.H % 32 or self.W % 32 or self.H <= 0 or self.W <= 0:
            raise ConfigError(f"H and W must be positive multiples of 32, got {self.H}x{self.W}")
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("depths and heads need exactly four stages")
        if any(d < 1 for d in self.depths):
            raise ConfigError(f"every stage needs at least one block, got {self.depths}")
        for d, h in zip(self.dims, self.heads):
            MsaConfig(d, h)
            rank_width(bottleneck_width(d, self.alpha), self.m_ratio)
        names = [t.name for t in self.tasks]
        if not names or len(set(names)) != len(names):
            raise ConfigError(f"task names must be unique and non-empty, got {names}")
        if self.embed_upsample not in ("nearest", "bilinear"):
            raise ConfigError(f"unknown embedding upsample mode {self.embed_upsample!r}")

    @property
    def dims(self):
        return tuple(self.C * 2 ** i for i in range(4))

    @property
    def n_tasks(self):
        return len(self.tasks)

    @property
    def grid(self):
        return (self.H // 32, self.W // 32)

    def stage_shapes(self):
        return [(self.H // 2 ** (i + 2), self.W // 2 ** (i + 2), d) for i, d in enumerate(self.dims)]

    def task_index(self, t):
        if isinstance(t, (int, np.integer)) and not isinstance(t, bool):
            if 0 <= t < self.n_tasks:
                return int(t)
            raise UnknownTaskError(f"task index {t} out of range for {self.n_tasks} tasks")
        for i, spec in enumerate(self.tasks):
            if spec.name == t:
                return i
        raise UnknownTaskError(f"unknown task {t!r}; known: {[s.name for s in self.tasks]}")

    def to_dict(self):
        d = asdict(self)
        d["depths"] = list(self.depths)
        d["heads"] = list(self.heads)
        d["tasks"] = [asdict(t) for t in self.tasks]
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def register_model(store: ParamStore, cfg: ModelConfig):
    nt = cfg.n_tasks
    nn.register_linear(store, "patch_embed", 48, cfg.C, std=_fan_in_std(48))
    for s, (d, depth, heads) in enumerate(zip(cfg.dims, cfg.depths, cfg.heads)):
        if s > 0:
            nn.register_linear(store, f"stage{s}.merge", 2 * d, d)
        for b in range(depth):
            pre = f"stage{s}.block{b}"
            nn.register_layer_norm(store, f"{pre}.norm1", d)
            nn.register_msa(store, f"{pre}.attn", MsaConfig(d, heads))
            register_mix_adapter(store, f"{pre}.adapter0", d, cfg.alpha, cfg.m_ratio, nt)
            nn.register_layer_norm(store, f"{pre}.norm2", d)
            nn.register_mlp(store, f"{pre}.mlp", d, cfg.mlp_ratio)
            register_mix_adapter(store, f"{pre}.adapter1", d, cfg.alpha, cfg.m_ratio, nt)
        nn.register_linear(store, f"fuse.proj{s}", d, cfg.C, std=_fan_in_std(d))
    nn.register_linear(store, "fuse.out", 4 * cfg.C, cfg.C, std=_fan_in_std(4 * cfg.C))
    register_task_gate(store, "decoder", nt, cfg.k, cfg.c_t, cfg.C, cfg.grid)
    for t, spec in enumerate(cfg.tasks):
        register_head(store, f"head.{t}", cfg.C, spec.out_channels, owner=t)


def _fan_in_std(fan_in, gain=1.0):
    return gain / math.sqrt(fan_in)


def register_head(store, name, C, out_channels, owner):
    for i in (1, 2):
        store.add(f"{name}.conv{i}.weight", (3, 3, C, C), owner=owner,
                  std=_fan_in_std(9 * C, math.sqrt(2.0)))
        store.add(f"{name}.conv{i}.bias", (C,), init="zeros", owner=owner, kind="bias")
    store.add(f"{name}.out.weight", (1, 1, C, out_channels), owner=owner, std=_fan_in_std(C))
    store.add(f"{name}.out.bias", (out_channels,), init="zeros", owner=owner, kind="bias")


def head_count(C, out_channels):
    return 2 * (9 * C * C + C) + C * out_channels + out_channels


# ---------------------------------------------------------------------------
# layers


def patch_embed(store, x: Tensor, name="patch_embed"):
    """[B, H, W, 3] image -> [B, H/4, W/4, C] tokens from 4x4 patches."""
    if x.ndim != 4 or x.shape[-1] != 3:
        raise DimensionError(f"expected an image batch [B, H, W, 3], got {list(x.shape)}")
    B, H, W, _ = x.shape
    if H % 4 or W % 4:
        raise ConfigError(f"image {H}x{W} does not tile into 4x4 patches")
    p = x.reshape(B, H // 4, 4, W // 4, 4, 3)
    p = T.transpose(p, (0, 1, 3, 2, 4, 5)).reshape(B, H // 4, W // 4, 48)
    return nn.linear(store, name, p)


def patch_merge(store, x: Tensor, name):
    """[B, h, w, c] -> [B, h/2, w/2, 2c]: concat 2x2 neighbours, project 4c -> 2c."""
    B, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"patch merge needs even extents, got {h}x{w}")
    g = x.reshape(B, h // 2, 2, w // 2, 2, c)
    # neighbour order (0,0), (1,0), (0,1), (1,1): column offset major
    g = T.transpose(g, (0, 1, 3, 4, 2, 5)).reshape(B, h // 2, w // 2, 4 * c)
    return nn.linear(store, name, g)


class TITModel:
    def __init__(self, cfg: ModelConfig, seed=0, store=None):
        self.cfg = cfg
        if store is None:
            store = ParamStore()
            register_model(store, cfg)
            nn.init_params(store, seed)
        self.store = store

    # -- parameter views

    def mix_params(self, stage, block, site) -> MixTaskAdapterParams:
        return MixTaskAdapterParams.from_store(
            self.store, f"stage{stage}.block{block}.adapter{site}", self.cfg.n_tasks)

    def gate_params(self) -> TaskGateDecoderParams:
        c = self.cfg
        return TaskGateDecoderParams.from_store(self.store, "decoder", c.n_tasks, c.grid, c.c_t,
                                                c.embed_upsample)

    def adapter_sites(self):
        return [(s, b, a) for s, depth in enumerate(self.cfg.depths)
                for b in range(depth) for a in (0, 1)]

    # -- forward pieces

    def block(self, x: Tensor, t: int, stage: int, b: int) -> Tensor:
        """Pre-norm block on tokens [B, L, d] with adapters after MSA and MLP."""
        st = self.store
        pre = f"stage{stage}.block{b}"
        cfg = MsaConfig(self.cfg.dims[stage], self.cfg.heads[stage])
        if x.shape[-1] != cfg.dim:
            raise DimensionError(f"{pre}: token width {x.shape[-1]} != stage width {cfg.dim}")
        y = nn.msa(st, f"{pre}.attn", nn.layer_norm(st, f"{pre}.norm1", x), cfg)
        x = x + mix_adapter_forward(y, self.mix_params(stage, b, 0), t)
        y = nn.mlp_block(st, f"{pre}.mlp", nn.layer_norm(st, f"{pre}.norm2", x))
        return x + mix_adapter_forward(y, self.mix_params(stage, b, 1), t)

    def encode(self, image, t):
        t = self.cfg.task_index(t)
        x = T.as_tensor(image)
        B, H, W = x.shape[:3]
        if (H, W) != (self.cfg.H, self.cfg.W):
            raise ConfigError(f"model built for {self.cfg.H}x{self.cfg.W}, got {H}x{W}")
        x = patch_embed(self.store, x)
        feats = []
        for s, depth in enumerate(self.cfg.depths):
            if s > 0:
                x = patch_merge(self.store, x, f"stage{s}.merge")
            _, h, w, d = x.shape
            tok = x.reshape(B, h * w, d)
            for b in range(depth):
                tok = self.block(tok, t, s, b)
            x = tok.reshape(B, h, w, d)
            feats.append(x)
        return feats

    def fuse(self, feats):
        if len(feats) != 4:
            raise DimensionError(f"fusion expects four stage maps, got {len(feats)}")
        h, w = feats[0].shape[1:3]
        maps = []
        for s, f in enumerate(feats):
            if f.shape[1] * 2 ** s != h or f.shape[2] * 2 ** s != w:
                raise DimensionError(f"stage {s} map {list(f.shape)} does not align with {h}x{w}")
            y = nn.linear(self.store, f"fuse.proj{s}", f)
            if s:
                y = T.upsample(y, 2 ** s, "bilinear")
            maps.append(y)
        return nn.linear(self.store, "fuse.out", T.concat(maps, axis=-1))

    def head(self, x, t):
        t = self.cfg.task_index(t)
        st, pre = self.store, f"head.{t}"
        for i in (1, 2):
            x = T.upsample(x, 2, "bilinear")
            x = T.gelu(T.conv2d(x, st[f"{pre}.conv{i}.weight"], st[f"{pre}.conv{i}.bias"]))
        return T.conv2d(x, st[f"{pre}.out.weight"], st[f"{pre}.out.bias"])

    def decode(self, fused, t):
        return task_gate_forward(fused, self.cfg.task_index(t), self.gate_params())

    def forward(self, image, t):
        t = self.cfg.task_index(t)
        x = T.as_tensor(image)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        return self.head(self.decode(self.fuse(self.encode(x, t)), t), t)

    __call__ = forward

    def num_params(self):
        return self.store.num_params()


def tape_owners(store: ParamStore, out: Tensor):
    """Owner tags of every store parameter reachable from ``out``."""
    ids = {id(e.tensor): (n, e.owner) for n, e in store.items() if e.tensor is not None}
    found = {}
    for leaf in T.Tape.from_output(out).leaves():
        if id(leaf) in ids:
            n, owner = ids[id(leaf)]
            found[n] = owner
    return found
