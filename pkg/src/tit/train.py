"""Task losses, AdamW, round-robin task-conditional training, dense metrics
and the multi-task score (average signed relative change vs single-task)."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .adapter import bottleneck_width, count_mix_params, rank_width
from .data import SceneSpec, batch
from .errors import ConfigError, DimensionError, NumericError
from .model import TaskSpec, TITModel, head_count
from .tensor import Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# losses


def semseg_loss(pred: Tensor, target):
    B, H, W, K = pred.shape
    if target.shape != (B, H, W):
        raise DimensionError(f"semseg target {list(target.shape)} vs logits {list(pred.shape)}")
    onehot = np.eye(K)[target]
    return -(T.log_softmax(pred, axis=-1) * onehot).sum() * (1.0 / (B * H * W))


def depth_loss(pred: Tensor, target):
    if pred.shape[:3] != target.shape or pred.shape[-1] != 1:
        raise DimensionError(f"depth target {list(target.shape)} vs prediction {list(pred.shape)}")
    return T.abs_(pred - target[..., None]).mean()


def normals_loss(pred: Tensor, target, eps=1e-12):
    if pred.shape != target.shape:
        raise DimensionError(f"normals target {list(target.shape)} vs prediction {list(pred.shape)}")
    norm = T.sqrt(T.square(pred).sum(axis=-1, keepdims=True) + eps)
    cos = ((pred / norm) * target).sum(axis=-1)
    return 1.0 - cos.mean()


def edge_loss(pred: Tensor, target):
    if pred.shape[:3] != target.shape or pred.shape[-1] != 1:
        raise DimensionError(f"edge target {list(target.shape)} vs prediction {list(pred.shape)}")
    y = target[..., None].astype(np.float64)
    pos = y.sum()
    neg = y.size - pos
    w = neg / pos if pos > 0 else 1.0
    return (T.softplus(-pred) * (w * y) + T.softplus(pred) * (1.0 - y)).mean()


LOSSES = {"miou": semseg_loss, "rmse": depth_loss, "merr": normals_loss, "f1": edge_loss}


def task_loss(pred: Tensor, target, task: TaskSpec) -> Tensor:
    return LOSSES[task.metric](pred, target)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay. Parameters that received no gradient
    this step (``grad is None``) are skipped entirely, moments included."""

    def __init__(self, store, lr=1e-4, weight_decay=1e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0 or weight_decay < 0:
            raise ConfigError(f"need lr > 0 and weight_decay >= 0, got {lr}, {weight_decay}")
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state = {}

    def step(self):
        b1, b2 = self.betas
        live = [(n, e) for n, e in self.store.items()
                if e.trainable and e.tensor is not None and e.tensor.grad is not None]
        for name, e in live:
            if not np.all(np.isfinite(e.tensor.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        for name, e in live:
            p = e.tensor
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            st["t"] += 1
            g = p.grad
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            mhat = st["m"] / (1.0 - b1 ** st["t"])
            vhat = st["v"] / (1.0 - b2 ** st["t"])
            if e.decay and self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self):
        self.store.zero_grad()


def optimizer_step(store, opt: AdamW):
    opt.step()


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    steps: int = 200
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    num_samples: int = 8
    augment: bool = False
    schedule: str = "round-robin"

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay <= 0:
            raise ConfigError(f"lr and weight_decay must be positive, got {self.lr}, {self.weight_decay}")
        if self.steps < 0 or self.batch_size < 1 or self.num_samples < 1:
            raise ConfigError("steps >= 0, batch_size >= 1 and num_samples >= 1 required")
        if self.schedule != "round-robin":
            raise ConfigError(f"unknown task schedule {self.schedule!r}")


class TrainingAborted(NumericError):
    def __init__(self, msg, step, task):
        super().__init__(msg)
        self.step = step
        self.task = task


def task_schedule(n_tasks, steps):
    return [s % n_tasks for s in range(steps)]


def train(model: TITModel, data: SceneSpec, cfg: TrainConfig, on_record=None):
    """Round-robin task-conditional training; returns [{step, task, loss}]."""
    rng = np.random.default_rng(cfg.seed)
    opt = AdamW(model.store, cfg.lr, cfg.weight_decay)
    pool = np.arange(cfg.num_samples)
    fixed = None if cfg.augment else batch(data, pool)
    tasks = model.cfg.tasks
    history = []
    for step, t in enumerate(task_schedule(len(tasks), cfg.steps)):
        take = rng.choice(pool, size=min(cfg.batch_size, pool.size), replace=False)
        if fixed is None:
            b = batch(data, take, augment_data=True, salt=step)
        else:
            b = {k: v[take] for k, v in fixed.items()}
        spec = tasks[t]
        opt.zero_grad()
        loss = task_loss(model.forward(b["image"], t), b[spec.name], spec)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite loss at step {step} on task {spec.name!r}",
                                  step, spec.name)
        T.backward(loss)
        try:
            opt.step()
        except NumericError as exc:
            raise TrainingAborted(f"step {step}, task {spec.name!r}: {exc}", step, spec.name) from exc
        rec = {"step": step, "task": spec.name, "loss": value}
        history.append(rec)
        if on_record is not None:
            on_record(rec)
        log.debug("step %d task %s loss %.5f", step, spec.name, value)
    opt.zero_grad()
    return history


def smoothed(values, window=20):
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        window = max(v.size, 1)
    return np.convolve(v, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------------------
# metrics

EDGE_THRESHOLDS = np.linspace(0.0, 1.0, 21)


def miou(pred_labels, target, num_classes):
    inter, union = _iou_counts(pred_labels, target, num_classes)
    return _miou_from_counts(inter, union)


def _iou_counts(pred_labels, target, K):
    p = np.asarray(pred_labels).ravel()
    g = np.asarray(target).ravel()
    inter = np.bincount(g[p == g], minlength=K)[:K]
    area_p = np.bincount(p, minlength=K)[:K]
    area_g = np.bincount(g, minlength=K)[:K]
    return inter, area_p + area_g - inter


def _miou_from_counts(inter, union):
    ok = union > 0
    return float((inter[ok] / union[ok]).mean()) if ok.any() else float("nan")


def rmse(pred, target):
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


def angular_errors(pred, target):
    """Per-pixel angle in degrees between unit-normalized vectors."""
    p = pred / np.maximum(np.linalg.norm(pred, axis=-1, keepdims=True), 1e-12)
    g = target / np.maximum(np.linalg.norm(target, axis=-1, keepdims=True), 1e-12)
    return np.degrees(np.arccos(np.clip((p * g).sum(-1), -1.0, 1.0)))


def mean_angular_error(pred, target):
    return float(angular_errors(pred, target).mean())


def _edge_counts(prob, target, thresholds=EDGE_THRESHOLDS):
    y = np.asarray(target).astype(bool).ravel()
    p = np.asarray(prob).ravel()
    counts = np.zeros((len(thresholds), 3), dtype=np.int64)
    for i, th in enumerate(thresholds):
        hit = p >= th
        counts[i] = (np.sum(hit & y), np.sum(hit & ~y), np.sum(~hit & y))
    return counts


def _f1_from_counts(counts):
    tp, fp, fn = counts[:, 0], counts[:, 1], counts[:, 2]
    denom = 2 * tp + fp + fn
    f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
    return float(f1.max())


def edge_f1(prob, target, thresholds=EDGE_THRESHOLDS):
    """Max pixel-exact F1 over binarization thresholds (dataset-level)."""
    return _f1_from_counts(_edge_counts(prob, target, thresholds))


class MetricAccumulator:
    """Sufficient statistics per task so results ignore batch partitioning."""

    def __init__(self, task: TaskSpec):
        self.task = task
        self.n = 0
        self.total = 0.0
        self.inter = self.union = None
        self.counts = None
        self.errs = []

    def update(self, pred: np.ndarray, target):
        m = self.task.metric
        if m == "miou":
            K = self.task.out_channels
            i, u = _iou_counts(pred.argmax(-1), target, K)
            self.inter = i if self.inter is None else self.inter + i
            self.union = u if self.union is None else self.union + u
        elif m == "rmse":
            self.errs.append(((pred[..., 0] - target) ** 2).ravel())
        elif m == "merr":
            self.errs.append(angular_errors(pred, target).ravel())
        elif m == "f1":
            c = _edge_counts(1.0 / (1.0 + np.exp(-pred[..., 0])), target)
            self.counts = c if self.counts is None else self.counts + c
        else:
            raise ConfigError(f"no evaluator for metric {m!r}")

    def value(self):
        m = self.task.metric
        if m == "miou":
            return _miou_from_counts(self.inter, self.union)
        if m == "rmse":
            return float(np.sqrt(np.mean(np.concatenate(self.errs))))
        if m == "merr":
            return float(np.mean(np.concatenate(self.errs)))
        return _f1_from_counts(self.counts)


def evaluate(model: TITModel, data: SceneSpec, indices, batch_size=8, tasks=None):
    indices = list(indices)
    if not indices:
        raise ValueError("evaluate needs a non-empty dataset")
    tasks = list(range(model.cfg.n_tasks)) if tasks is None else \
        [model.cfg.task_index(t) for t in tasks]
    accs = {t: MetricAccumulator(model.cfg.tasks[t]) for t in tasks}
    for start in range(0, len(indices), batch_size):
        b = batch(data, indices[start:start + batch_size])
        for t, acc in accs.items():
            acc.update(model.forward(b["image"], t).data, b[acc.task.name])
    return {model.cfg.tasks[t].name: acc.value() for t, acc in accs.items()}


# ---------------------------------------------------------------------------
# multi-task score


def delta_m(multi, single, polarity):
    """Mean polarity-signed relative change, in percent."""
    multi, single, polarity = list(multi), list(single), list(polarity)
    if not (len(multi) == len(single) == len(polarity)) or not multi:
        raise ValueError("multi, single and polarity must be equally long and non-empty")
    total = 0.0
    for m, s, p in zip(multi, single, polarity):
        if s == 0:
            raise ZeroDivisionError("single-task reference value is zero")
        sign = p if isinstance(p, (int, float)) else (1 if p in ("higher", "higher-better", True) else -1)
        total += sign * (m - s) / s
    return 100.0 * total / len(multi)


def delta_m_table(rows, single, tasks):
    """Aligned text table: one line per (label, values) with a Δm column."""
    pol = [t.polarity for t in tasks]
    cols = [f"{t.name} ({t.metric}){'↑' if t.higher_better else '↓'}" for t in tasks]
    width = max(14, *(len(c) + 2 for c in cols))
    lines = ["Model".ljust(16) + "".join(c.rjust(width) for c in cols) + "Δm%↑".rjust(10)]
    for label, vals in [("single-task", single)] + list(rows):
        dm = delta_m(vals, single, pol)
        lines.append(label.ljust(16) + "".join(f"{v:.4f}".rjust(width) for v in vals)
                     + f"{dm:+.2f}".rjust(10))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# parameter report


def param_report(model: TITModel):
    cfg = model.cfg
    st = model.store
    names = [t.name for t in cfg.tasks]
    heads = {names[t]: st.num_params(owner=t, prefix=f"head.{t}.") for t in range(cfg.n_tasks)}
    per_task = {names[t]: st.num_params(owner=t) for t in range(cfg.n_tasks)}
    adapters = sum(st.num_params(prefix=f"stage{s}.block{b}.adapter{a}.")
                   for s, b, a in model.adapter_sites())
    formula = sum(count_mix_params(cfg.dims[s], cfg.alpha, cfg.m_ratio, cfg.n_tasks, True)
                  for s, b, a in model.adapter_sites())
    site_mn = sum(bottleneck_width(cfg.dims[s], cfg.alpha)
                  * rank_width(bottleneck_width(cfg.dims[s], cfg.alpha), cfg.m_ratio)
                  for s, b, a in model.adapter_sites())
    return {
        "total": st.num_params(),
        "shared": st.num_params(owner=None),
        "per_task": per_task,
        "heads": heads,
        "adapters": adapters,
        "adapters_formula": formula,
        "adapter_per_task": site_mn,
        "task_vector": cfg.k,
        "expected_head": {names[t]: head_count(cfg.C, cfg.tasks[t].out_channels)
                          for t in range(cfg.n_tasks)},
    }


def format_param_report(rep):
    lines = [f"{'component':<24}{'params':>12}",
             f"{'total':<24}{rep['total']:>12}",
             f"{'shared':<24}{rep['shared']:>12}",
             f"{'mix adapters (all)':<24}{rep['adapters']:>12}",
             f"{'  closed form':<24}{rep['adapters_formula']:>12}"]
    for name, n in rep["per_task"].items():
        lines.append(f"{'task ' + name:<24}{n:>12}   (head {rep['heads'][name]})")
    return "\n".join(lines)


def write_jsonl(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
