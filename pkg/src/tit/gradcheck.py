"""Finite-difference checks of every differentiable component.

Parameters are re-drawn from N(0, 0.3^2), zero-initialized ones included, so
that no path is dead at the check point.
"""
from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .adapter import AdapterParams, MixTaskAdapterParams, adapter_forward, \
    mix_adapter_forward, register_adapter, register_mix_adapter
from .gate import TaskGateDecoderParams, register_task_gate, task_gate_forward
from .model import ModelConfig, TITModel
from .nn import MsaConfig, ParamStore
from .tensor import Tensor
from .train import task_loss

TOLERANCE = 1e-4
EPS = 1e-5
# Central differences on an O(1) probe carry ~1e-11 of rounding noise, so
# gradients under FLOOR (e.g. attention key biases, which softmax ignores)
# are held to an absolute bound of TOLERANCE * FLOOR instead.
FLOOR = 1e-5


def tiny_config(**kw):
    base = dict(H=32, W=32, C=8, depths=(1, 1, 1, 1), heads=(1, 1, 2, 2), k=8, c_t=4)
    base.update(kw)
    return ModelConfig(**base)


def randomize(store: ParamStore, rng, std=0.3):
    for _, e in store.items():
        e.tensor = Tensor(rng.normal(0.0, std, e.shape), requires_grad=True)


def _probe(out: Tensor, rng):
    w = rng.uniform(-1.0, 1.0, out.shape)
    return lambda o: (o * w).sum() * (1.0 / o.size)


def _check(fn, x, params, rng, max_elems):
    params = list(params)
    probe = [None]

    def loss():
        out = fn(x)
        if probe[0] is None:
            probe[0] = _probe(out, rng)
        return probe[0](out)

    targets = ([x] if x is not None and x.requires_grad else []) + params
    return T.param_grad_check(loss, targets, eps=EPS, max_elems=max_elems, rng=rng,
                              floor=FLOOR)


def _ops(rng):
    u = lambda *s: rng.uniform(-1.0, 1.0, s)
    cases = {
        "matmul": (lambda a, b: T.matmul(a, b), [u(2, 3, 4), u(4, 5)]),
        "add/sub/mul/div": (lambda a, b: (a + b) * (a - b) / (2.0 + T.tanh(b)), [u(3, 4), u(4)]),
        "sigmoid/tanh/gelu": (lambda a: T.sigmoid(a) * T.tanh(a) + T.gelu(a), [u(4, 5)]),
        "relu/softplus": (lambda a: T.relu(a + 0.05) + T.softplus(a), [u(4, 5)]),
        "exp/log/sqrt/abs": (lambda a: T.log(T.exp(a) + 1.0) + T.sqrt(T.abs_(a) + 0.5), [u(3, 4)]),
        "softmax/log_softmax": (lambda a: T.softmax(a, -1) * T.log_softmax(a, 1), [u(2, 3, 4)]),
        "layer_stats": (lambda a: T.layer_stats(a), [u(3, 6)]),
        "reshape/transpose/concat": (
            lambda a, b: T.concat([T.transpose(a.reshape(3, 2, 2), (1, 0, 2)), b], axis=1),
            [u(2, 6), u(2, 1, 2)]),
        "reduce": (lambda a: a.sum(axis=0) * a.mean(axis=1, keepdims=True), [u(3, 3)]),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b), [u(2, 5, 4, 3), u(3, 3, 3, 2), u(2)]),
        "upsample_nearest": (lambda x: T.upsample(x, 2, "nearest"), [u(1, 3, 2, 2)]),
        "upsample_bilinear": (lambda x: T.upsample(x, 4, "bilinear"), [u(2, 3, 2, 2)]),
    }
    rows = {}
    for name, (fn, arrays) in cases.items():
        ts = [Tensor(a, requires_grad=True) for a in arrays]
        rows[f"op:{name}"] = _check(lambda _: fn(*ts), None, ts, rng, None)
    return rows


def run_suite(cfg: ModelConfig | None = None, seed=0, max_elems=3):
    """Return {component: max relative error}."""
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    rows = _ops(rng)

    st = ParamStore()
    register_adapter(st, "ad", 8, 0.25)
    register_mix_adapter(st, "mix", 8, 0.25, 0.5, 3)
    register_task_gate(st, "gate", 2, 6, 3, 4, (1, 1))
    nn.register_mlp(st, "mlp", 4)
    nn.register_msa(st, "msa", MsaConfig(4, 2))
    nn.register_layer_norm(st, "ln", 4)
    randomize(st, rng)
    x8 = Tensor(rng.uniform(-1, 1, (2, 5, 8)), requires_grad=True)
    x4 = Tensor(rng.uniform(-1, 1, (2, 5, 4)), requires_grad=True)
    g = lambda prefix: [t for n, t in st.tensors() if n.startswith(prefix)]

    rows["adapter"] = _check(lambda x: adapter_forward(x, AdapterParams.from_store(st, "ad")),
                             x8, g("ad."), rng, None)
    mp = MixTaskAdapterParams.from_store(st, "mix", 3)
    rows["mix-adapter"] = _check(lambda x: mix_adapter_forward(x, mp, 1), x8,
                                 [mp.down_p, mp.down_q[1], mp.up_q, mp.up_p, mp.b_down, mp.b_up],
                                 rng, None)
    rows["layer-norm"] = _check(lambda x: nn.layer_norm(st, "ln", x), x4, g("ln."), rng, None)
    rows["msa"] = _check(lambda x: nn.msa(st, "msa", x, MsaConfig(4, 2)), x4, g("msa."), rng, None)
    rows["mlp"] = _check(lambda x: nn.mlp_block(st, "mlp", x), x4, g("mlp."), rng, None)

    gp = TaskGateDecoderParams.from_store(st, "gate", 2, (1, 1), 3)
    xg = Tensor(rng.uniform(-1, 1, (2, 8, 8, 4)), requires_grad=True)
    gate_params = [gp.v[0], gp.embed_w, gp.embed_b, gp.conv_r_w, gp.conv_r_b,
                   gp.conv_z_w, gp.conv_z_b, gp.conv_o_w, gp.conv_o_b]
    rows["gate-decoder"] = _check(lambda x: task_gate_forward(x, 0, gp), xg, gate_params, rng, 12)

    model = TITModel(cfg)
    randomize(model.store, rng)
    d0 = cfg.dims[0]
    h0, w0 = cfg.H // 4, cfg.W // 4
    tok = Tensor(rng.uniform(-1, 1, (1, h0 * w0, d0)), requires_grad=True)
    blk = [t for n, t in model.store.tensors() if n.startswith("stage0.block0.")
           and not (".down_q." in n and not n.endswith(".down_q.0"))]
    rows["block"] = _check(lambda x: model.block(x, 0, 0, 0), tok, blk, rng, max_elems)

    feat = Tensor(rng.uniform(-1, 1, (1, h0, w0, cfg.C)), requires_grad=True)
    last = cfg.n_tasks - 1
    head = [t for n, t in model.store.tensors() if n.startswith(f"head.{last}.")]
    rows["head"] = _check(lambda x: model.head(x, last), feat, head, rng, max_elems)

    image = Tensor(rng.uniform(0, 1, (1, cfg.H, cfg.W, 3)))
    t = 1 % cfg.n_tasks
    used = [model.store[n] for n in sorted(_owners_for(model, image, t))]
    rows["model"] = _check(lambda _: model.forward(image, t), None, used, rng, max_elems)

    rows["task-losses"] = _loss_check(model.cfg.tasks, rng)
    return rows


def _owners_for(model, image, t):
    from .model import tape_owners
    return tape_owners(model.store, model.forward(image, t))


def _loss_check(tasks, rng):
    worst = 0.0
    for spec in tasks:
        shape = (2, 4, 4, spec.out_channels)
        if spec.metric == "miou":
            target = rng.integers(0, spec.out_channels, shape[:3])
        elif spec.metric == "merr":
            v = rng.normal(size=shape)
            target = v / np.linalg.norm(v, axis=-1, keepdims=True)
        elif spec.metric == "f1":
            target = (rng.random(shape[:3]) < 0.3).astype(np.uint8)
        else:
            target = rng.uniform(0.5, 3.0, shape[:3])
        pred = Tensor(rng.uniform(-1, 1, shape), requires_grad=True)
        worst = max(worst, T.grad_check(lambda p: task_loss(p, target, spec), pred, eps=EPS,
                                        floor=FLOOR))
    return worst


def format_rows(rows, tol=TOLERANCE):
    width = max(len(k) for k in rows) + 2
    lines = [f"{'component':<{width}}{'max_rel_err':>14}  status"]
    for k, v in rows.items():
        lines.append(f"{k:<{width}}{v:>14.3e}  {'ok' if v < tol else 'FAIL'}")
    return "\n".join(lines)
