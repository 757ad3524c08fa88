"""Bottleneck Adapter and the Mix Task Adapter, plus parameter accounting.

The Mix Task Adapter factors the down projection as ``down_p @ down_q[t]`` and
the up projection as ``up_q @ up_p``. Only ``down_q[t]`` (the task indicating
matrix) belongs to a task; everything else, biases included, is shared.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, UnknownTaskError
from .nn import SHARED, ParamStore
from .tensor import Tensor


def _exact(value, what):
    frac = Fraction(value).limit_denominator(1 << 20)
    if frac.denominator != 1:
        raise ConfigError(f"{what} = {float(value):g} is not an integer")
    return int(frac)


def bottleneck_width(d, alpha):
    if not 0 < alpha < 1:
        raise ConfigError(f"projection ratio alpha must lie in (0, 1), got {alpha}")
    n = _exact(Fraction(alpha).limit_denominator(1 << 20) * d, f"n = alpha*d for d={d}")
    if n < 1:
        raise ConfigError(f"bottleneck width n={n} for d={d}")
    return n


def rank_width(n, m_ratio):
    m = _exact(Fraction(m_ratio).limit_denominator(1 << 20) * n, f"m = m_ratio*n for n={n}")
    if not 1 <= m < n:
        raise ConfigError(f"rank m={m} must satisfy 1 <= m < n={n}")
    return m


# ---------------------------------------------------------------------------
# parameter containers


@dataclass
class AdapterParams:
    w_down: Tensor
    b_down: Tensor
    w_up: Tensor
    b_up: Tensor

    @classmethod
    def from_store(cls, store, name):
        return cls(store[f"{name}.w_down"], store[f"{name}.b_down"],
                   store[f"{name}.w_up"], store[f"{name}.b_up"])


@dataclass
class MixTaskAdapterParams:
    down_p: Tensor            # [d, m], shared
    down_q: list              # per task [m, n]
    up_q: Tensor              # [n, m], shared
    up_p: Tensor              # [m, d], shared
    b_down: Tensor            # [n], shared
    b_up: Tensor              # [d], shared

    @classmethod
    def from_store(cls, store, name, n_tasks):
        return cls(store[f"{name}.down_p"],
                   [store[f"{name}.down_q.{t}"] for t in range(n_tasks)],
                   store[f"{name}.up_q"], store[f"{name}.up_p"],
                   store[f"{name}.b_down"], store[f"{name}.b_up"])

    def shared(self):
        return [self.down_p, self.up_q, self.up_p, self.b_down, self.b_up]

    def composed(self, t) -> AdapterParams:
        """Plain Adapter with the low-rank products multiplied out (no autodiff)."""
        return AdapterParams(Tensor(self.down_p.data @ self.down_q[t].data), self.b_down,
                             Tensor(self.up_q.data @ self.up_p.data), self.b_up)


def register_adapter(store: ParamStore, name, d, alpha, owner=SHARED):
    n = bottleneck_width(d, alpha)
    store.add(f"{name}.w_down", (d, n), owner=owner)
    store.add(f"{name}.b_down", (n,), init="zeros", owner=owner, kind="bias")
    store.add(f"{name}.w_up", (n, d), init="zeros", owner=owner)
    store.add(f"{name}.b_up", (d,), init="zeros", owner=owner, kind="bias")


def register_mix_adapter(store: ParamStore, name, d, alpha, m_ratio, n_tasks):
    n = bottleneck_width(d, alpha)
    m = rank_width(n, m_ratio)
    store.add(f"{name}.down_p", (d, m))
    for t in range(n_tasks):
        store.add(f"{name}.down_q.{t}", (m, n), owner=t)
    store.add(f"{name}.up_q", (n, m))
    # zero so the adapter starts as the identity map
    store.add(f"{name}.up_p", (m, d), init="zeros")
    store.add(f"{name}.b_down", (n,), init="zeros", kind="bias")
    store.add(f"{name}.b_up", (d,), init="zeros", kind="bias")


# ---------------------------------------------------------------------------
# forward


def adapter_forward(x: Tensor, p: AdapterParams) -> Tensor:
    d = p.w_down.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"adapter width {d} does not match input {list(x.shape)}")
    h = T.gelu(T.matmul(x, p.w_down) + p.b_down)
    return T.matmul(h, p.w_up) + p.b_up + x


def mix_adapter_forward(x: Tensor, p: MixTaskAdapterParams, t: int) -> Tensor:
    d = p.down_p.shape[0]
    if x.shape[-1] != d:
        raise DimensionError(f"mix adapter width {d} does not match input {list(x.shape)}")
    if not 0 <= t < len(p.down_q):
        raise UnknownTaskError(f"task index {t} not in bank of {len(p.down_q)}")
    # multiply through the low-rank factors, never forming the d x n products
    h = T.matmul(T.matmul(x, p.down_p), p.down_q[t]) + p.b_down
    h = T.gelu(h)
    return T.matmul(T.matmul(h, p.up_q), p.up_p) + p.b_up + x


def _is_zero(t: Tensor):
    return t.grad is None or not np.any(t.grad)


def grads_isolated(p: MixTaskAdapterParams, t: int) -> bool:
    others_clean = all(_is_zero(q) for i, q in enumerate(p.down_q) if i != t)
    shared_live = all(not _is_zero(s) for s in (p.down_p, p.up_q, p.up_p))
    return others_clean and shared_live


# ---------------------------------------------------------------------------
# accounting


def count_adapter_params(d, alpha, n_tasks=1, include_bias=False):
    """One bottleneck Adapter per task: 2nd weights (+ n + d biases) each."""
    n = bottleneck_width(d, alpha)
    per = 2 * n * d + (n + d if include_bias else 0)
    return n_tasks * per


def count_mix_params(d, alpha, m_ratio, n_tasks=1, include_bias=False):
    """(N+1)mn + 2md weights (+ shared n + d biases)."""
    n = bottleneck_width(d, alpha)
    m = rank_width(n, m_ratio)
    return (n_tasks + 1) * m * n + 2 * m * d + (n + d if include_bias else 0)


@dataclass(frozen=True)
class AccountingRow:
    module_site: str
    d: int
    n: int
    m: int | None
    per_task: int
    shared: int
    total: int

    def as_dict(self):
        return {"module_site": self.module_site, "d": self.d, "n": self.n, "m": self.m,
                "per_task": self.per_task, "shared": self.shared, "total": self.total}


SWIN_T_NYUD = {
    "dims": (96, 192, 384, 768),
    "depths": (2, 2, 6, 2),
    "sites_per_block": 2,
    "n_tasks": 4,
    "alpha": 0.25,
}

PRESETS = {"swin-t-nyud": SWIN_T_NYUD}


def adapter_sites(dims: Sequence[int], depths: Sequence[int], sites_per_block=2):
    sites = []
    for s, (d, depth) in enumerate(zip(dims, depths)):
        for b in range(depth):
            for a in range(sites_per_block):
                sites.append((f"stage{s}.block{b}.adapter{a}", d))
    return sites


def accounting_rows(dims, depths, sites_per_block, alpha, n_tasks, m_ratio=None,
                    include_bias=True):
    """One row per adapter site. ``m_ratio=None`` means separate plain Adapters per task."""
    rows = []
    bias = include_bias
    for site, d in adapter_sites(dims, depths, sites_per_block):
        n = bottleneck_width(d, alpha)
        if m_ratio is None:
            per_task = count_adapter_params(d, alpha, 1, bias)
            rows.append(AccountingRow(site, d, n, None, per_task, 0, n_tasks * per_task))
        else:
            m = rank_width(n, m_ratio)
            total = count_mix_params(d, alpha, m_ratio, n_tasks, bias)
            rows.append(AccountingRow(site, d, n, m, m * n, total - n_tasks * m * n, total))
    return rows


def enumerate_counts(dims, depths, sites_per_block, alpha, n_tasks, m_ratio=None,
                     include_bias=True):
    """Register every adapter in a fresh store and count elements (no allocation)."""
    store = ParamStore()
    for site, d in adapter_sites(dims, depths, sites_per_block):
        if m_ratio is None:
            for t in range(n_tasks):
                register_adapter(store, f"{site}.task{t}", d, alpha, owner=t)
        else:
            register_mix_adapter(store, site, d, alpha, m_ratio, n_tasks)
    if not include_bias:
        for name, e in store.items():
            if e.kind == "bias":
                e.trainable = False
    return store.num_params()


def format_rows(rows, title=None):
    head = f"{'module_site':<28}{'d':>6}{'n':>6}{'m':>6}{'per_task':>11}{'shared':>11}{'total':>11}"
    lines = [title] if title else []
    lines += [head, "-" * len(head)]
    for r in rows:
        m = "-" if r.m is None else str(r.m)
        lines.append(f"{r.module_site:<28}{r.d:>6}{r.n:>6}{m:>6}{r.per_task:>11}{r.shared:>11}{r.total:>11}")
    lines.append(f"{'TOTAL':<46}{sum(r.per_task for r in rows):>11}"
                 f"{sum(r.shared for r in rows):>11}{sum(r.total for r in rows):>11}")
    return "\n".join(lines)
