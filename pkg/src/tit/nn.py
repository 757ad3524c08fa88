"""Named parameter store and the transformer building blocks.

Blocks are plain functions reading their weights from a :class:`ParamStore`
by dotted name; ``register_*`` functions declare the weights a block needs.
"""
from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

SHARED = None


@dataclass
class Param:
    shape: tuple
    init: str = "normal"          # normal | zeros | ones | const
    std: float = 0.02
    value: float = 0.0
    owner: int | None = SHARED    # task index for task-owned entries
    kind: str = "weight"          # weight | bias | norm
    trainable: bool = True
    tensor: Tensor | None = field(default=None, repr=False)

    @property
    def size(self):
        return int(np.prod(self.shape, dtype=np.int64))

    @property
    def decay(self):
        return self.kind == "weight"


class ParamStore:
    def __init__(self):
        self._entries: dict[str, Param] = {}

    def add(self, name, shape, init="normal", std=0.02, value=0.0, owner=SHARED,
            kind="weight", trainable=True):
        if name in self._entries:
            raise ValueError(f"parameter {name!r} already registered")
        self._entries[name] = Param(tuple(int(s) for s in shape), init, std, value,
                                    owner, kind, trainable)
        return name

    def entry(self, name) -> Param:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"unknown parameter {name!r}") from None

    def __getitem__(self, name) -> Tensor:
        e = self.entry(name)
        if e.tensor is None:
            raise RuntimeError(f"parameter {name!r} is registered but not initialized")
        return e.tensor

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return sorted(self._entries)

    def items(self):
        return [(n, self._entries[n]) for n in self.names()]

    def tensors(self):
        return [(n, e.tensor) for n, e in self.items() if e.tensor is not None]

    def num_params(self, owner="any", prefix=""):
        """Trainable element count, optionally filtered by owner tag and name prefix."""
        total = 0
        for n, e in self.items():
            if not e.trainable or not n.startswith(prefix):
                continue
            if owner != "any" and e.owner != owner:
                continue
            total += e.size
        return total

    def owner_of(self, tensor) -> tuple[str, int | None] | None:
        for n, e in self._entries.items():
            if e.tensor is tensor:
                return n, e.owner
        return None

    def zero_grad(self):
        for e in self._entries.values():
            if e.tensor is not None:
                e.tensor.grad = None

    def state(self):
        return {n: e.tensor.data for n, e in self.items() if e.tensor is not None}

    def load_state(self, arrays):
        for n, e in self.items():
            a = np.asarray(arrays[n], dtype=np.float64)
            if a.shape != e.shape:
                raise DimensionError(f"{n}: stored shape {list(a.shape)} != registered {list(e.shape)}")
            e.tensor = Tensor(a.copy(), requires_grad=e.trainable, name=n)


def _trunc_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_params(store: ParamStore, seed: int) -> None:
    """Fill every registered entry. Each name draws from its own stream
    seeded by (seed, crc32(name)), so registering more parameters never
    changes the values of existing ones."""
    for name, e in store.items():
        if e.init == "normal":
            rng = np.random.default_rng([int(seed), zlib.crc32(name.encode())])
            data = _trunc_normal(rng, e.shape, e.std)
        elif e.init == "zeros":
            data = np.zeros(e.shape)
        elif e.init == "ones":
            data = np.ones(e.shape)
        elif e.init == "const":
            data = np.full(e.shape, float(e.value))
        else:
            raise ConfigError(f"unknown init {e.init!r} for {name}")
        e.tensor = Tensor(data, requires_grad=e.trainable, name=name)


# ---------------------------------------------------------------------------
# linear


def register_linear(store, name, d_in, d_out, owner=SHARED, bias=True, std=0.02):
    store.add(f"{name}.weight", (d_in, d_out), std=std, owner=owner)
    if bias:
        store.add(f"{name}.bias", (d_out,), init="zeros", owner=owner, kind="bias")


def linear(store, name, x):
    w = store[f"{name}.weight"]
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear {name}: input width {x.shape[-1]} != weight rows {w.shape[0]}")
    y = T.matmul(x, w)
    bname = f"{name}.bias"
    return y + store[bname] if bname in store else y


# ---------------------------------------------------------------------------
# layer norm


def register_layer_norm(store, name, d, owner=SHARED):
    store.add(f"{name}.gamma", (d,), init="ones", owner=owner, kind="norm")
    store.add(f"{name}.beta", (d,), init="zeros", owner=owner, kind="norm")


def layer_norm(store, name, x, eps=1e-5):
    return T.layer_stats(x, eps) * store[f"{name}.gamma"] + store[f"{name}.beta"]


# ---------------------------------------------------------------------------
# attention


@dataclass(frozen=True)
class MsaConfig:
    dim: int
    heads: int

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"{self.heads} heads do not divide width {self.dim}")

    @property
    def head_dim(self):
        return self.dim // self.heads


def register_msa(store, name, cfg: MsaConfig, owner=SHARED):
    for part in ("q", "k", "v", "proj"):
        register_linear(store, f"{name}.{part}", cfg.dim, cfg.dim, owner=owner)


def attention_weights(store, name, x, cfg: MsaConfig):
    B, L, _ = x.shape
    h, hd = cfg.heads, cfg.head_dim

    def heads(t):
        return T.transpose(t.reshape(B, L, h, hd), (0, 2, 1, 3))

    q = heads(linear(store, f"{name}.q", x))
    k = heads(linear(store, f"{name}.k", x))
    v = heads(linear(store, f"{name}.v", x))
    scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(hd))
    return T.softmax(scores, axis=-1), v


def msa(store, name, x, cfg: MsaConfig):
    """Full multi-head self-attention over tokens [B, L, d]."""
    if x.ndim != 3 or x.shape[-1] != cfg.dim:
        raise DimensionError(f"msa {name}: expected [B, L, {cfg.dim}], got {list(x.shape)}")
    B, L, _ = x.shape
    attn, v = attention_weights(store, name, x, cfg)
    out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3)).reshape(B, L, cfg.dim)
    return linear(store, f"{name}.proj", out)


# ---------------------------------------------------------------------------
# MLP


def register_mlp(store, name, d, expansion=4, owner=SHARED):
    register_linear(store, f"{name}.fc1", d, expansion * d, owner=owner)
    register_linear(store, f"{name}.fc2", expansion * d, d, owner=owner)


def mlp_block(store, name, x):
    return linear(store, f"{name}.fc2", T.gelu(linear(store, f"{name}.fc1", x)))


def linear_count(d_in, d_out, bias=True):
    return d_in * d_out + (d_out if bias else 0)


def msa_count(d):
    return 4 * linear_count(d, d)


def mlp_count(d, expansion=4):
    return linear_count(d, expansion * d) + linear_count(expansion * d, d)
