"""Task Gate Decoder: a per-task code expanded into a dense embedding that
drives GRU-style reset/update gates over the fused feature map.
"""
from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError, UnknownTaskError
from .nn import ParamStore
from .tensor import Tensor


@dataclass
class TaskGateDecoderParams:
    v: list                  # per task [k]
    embed_w: Tensor          # [k, gh*gw*c_t]
    embed_b: Tensor
    conv_r_w: Tensor         # [kh, kw, c_t + C, C]
    conv_r_b: Tensor
    conv_z_w: Tensor
    conv_z_b: Tensor
    conv_o_w: Tensor
    conv_o_b: Tensor
    grid: tuple              # (H/32, W/32)
    c_t: int
    upsample_mode: str = "nearest"

    @classmethod
    def from_store(cls, store, name, n_tasks, grid, c_t, upsample_mode="nearest"):
        g = lambda s: store[f"{name}.{s}"]
        return cls([g(f"v.{t}") for t in range(n_tasks)], g("embed.weight"), g("embed.bias"),
                   g("conv_r.weight"), g("conv_r.bias"), g("conv_z.weight"), g("conv_z.bias"),
                   g("conv_o.weight"), g("conv_o.bias"), tuple(grid), c_t, upsample_mode)


def register_task_gate(store: ParamStore, name, n_tasks, k, c_t, channels, grid,
                       kernel=3, v_std=1.0, z_bias=-1.0):
    gh, gw = grid
    for t in range(n_tasks):
        store.add(f"{name}.v.{t}", (k,), std=v_std, owner=t)
    store.add(f"{name}.embed.weight", (k, gh * gw * c_t))
    store.add(f"{name}.embed.bias", (gh * gw * c_t,), init="zeros", kind="bias")
    cin = c_t + channels
    for gate in ("r", "z", "o"):
        store.add(f"{name}.conv_{gate}.weight", (kernel, kernel, cin, channels))
    store.add(f"{name}.conv_r.bias", (channels,), init="zeros", kind="bias")
    # negative update-gate bias starts the module close to the identity
    store.add(f"{name}.conv_z.bias", (channels,), init="const", value=z_bias, kind="bias")
    store.add(f"{name}.conv_o.bias", (channels,), init="zeros", kind="bias")


def task_embedding(t: int, p: TaskGateDecoderParams, H: int, W: int) -> Tensor:
    """Dense embedding [1, H/4, W/4, c_t] for task ``t``."""
    if H % 32 or W % 32:
        raise ConfigError(f"image size {H}x{W} is not divisible by 32")
    gh, gw = H // 32, W // 32
    if (gh, gw) != tuple(p.grid):
        raise ConfigError(f"embedding grid is fixed at {tuple(p.grid)}; {H}x{W} needs {(gh, gw)}")
    if not 0 <= t < len(p.v):
        raise UnknownTaskError(f"task index {t} not among {len(p.v)} task vectors")
    flat = T.matmul(p.v[t].reshape(1, -1), p.embed_w) + p.embed_b
    e = flat.reshape(1, gh, gw, p.c_t)
    return T.upsample(e, 8, p.upsample_mode)


def gates(e: Tensor, x: Tensor, p: TaskGateDecoderParams):
    if e.shape[:3] != x.shape[:3]:
        raise DimensionError(f"embedding {list(e.shape)} and features {list(x.shape)} "
                             f"differ spatially")
    ex = T.concat([e, x], axis=-1)
    r = T.sigmoid(T.conv2d(ex, p.conv_r_w, p.conv_r_b))
    z = T.sigmoid(T.conv2d(ex, p.conv_z_w, p.conv_z_b))
    return r, z


def candidate(e, x, r, p: TaskGateDecoderParams):
    return T.tanh(T.conv2d(T.concat([e, r * x], axis=-1), p.conv_o_w, p.conv_o_b))


def gated_update(e, x, r, z, p: TaskGateDecoderParams, return_candidate=False):
    if not (x.shape == r.shape == z.shape):
        raise DimensionError(f"gate shapes r {list(r.shape)}, z {list(z.shape)} "
                             f"do not match features {list(x.shape)}")
    xt = candidate(e, x, r, p)
    out = (1.0 - z) * x + z * xt
    return (out, xt) if return_candidate else out


def task_gate_forward(x: Tensor, t: int, p: TaskGateDecoderParams) -> Tensor:
    """Refine fused features [B, H/4, W/4, C] for task ``t``."""
    if x.ndim != 4:
        raise DimensionError(f"expected [B, h, w, C], got {list(x.shape)}")
    B, h, w, _ = x.shape
    e = task_embedding(t, p, 4 * h, 4 * w)
    e = T.broadcast_to(e, (B, h, w, p.c_t))
    r, z = gates(e, x, p)
    return gated_update(e, x, r, z, p)
