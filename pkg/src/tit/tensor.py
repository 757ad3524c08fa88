"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op that touches a gradient-tracking input records its parents and a
local backward rule on the output tensor. ``backward`` sorts the recorded
graph into a :class:`Tape` and replays the rules in reverse.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from . import _kernels
from .errors import DimensionError, NumericError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64) if not isinstance(data, np.ndarray) \
            else data.astype(np.float64, copy=False)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={list(self.shape)}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, rule, op):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
        out.op = op
    return out


def _unbroadcast(g, shape):
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} "
                             f"are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Recorded ops reachable from an output, in topological order."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return cls(order)

    def leaves(self):
        return [n for n in self.nodes if n.is_leaf]

    def ops(self):
        return [n for n in self.nodes if not n.is_leaf]

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {list(loss.shape)}")
    if not loss.requires_grad:
        return
    tape = Tape.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
                 "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)), "div")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def _unary(a, fwd, dfdx, op):
    a = as_tensor(a)
    y = fwd(a.data)
    return _make(y, (a,), lambda g: (g * dfdx(a.data, y),), op)


def sigmoid(a):
    def f(x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    return _unary(a, f, lambda x, y: y * (1.0 - y), "sigmoid")


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y, "tanh")


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64), "relu")


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact (erf) GELU."""
    return _unary(a, lambda x: 0.5 * x * (1.0 + erf(x / _SQRT2)),
                  lambda x, y: 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x),
                  "gelu")


def softplus(a):
    return _unary(a, lambda x: np.logaddexp(0.0, x),
                  lambda x, y: 1.0 / (1.0 + np.exp(-x)), "softplus")


def exp(a):
    return _unary(a, np.exp, lambda x, y: y, "exp")


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x, "log")


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y, "sqrt")


def abs_(a):
    return _unary(a, np.abs, lambda x, y: np.sign(x), "abs")


def square(a):
    return _unary(a, np.square, lambda x, y: 2.0 * x, "square")


ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div,
    "sigmoid": sigmoid, "tanh": tanh, "relu": relu, "gelu": gelu,
}


def elementwise(op, *args):
    try:
        fn = ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# contraction


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {list(a.shape)} and {list(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {list(a.shape)} x {list(b.shape)}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: batch extents differ, {list(a.shape)} x {list(b.shape)}") from None

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make(out, (a, b), rule, "matmul")


# ---------------------------------------------------------------------------
# reductions and shape ops


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def rule(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), rule, "sum")


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum_(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {list(a.shape)} as {list(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a, shape):
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {list(a.shape)} to {list(shape)}") from None
    return _make(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast_to")


def swapaxes(a, i, j):
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def index(a, idx):
    a = as_tensor(a)
    out = a.data[idx]

    basic = all(isinstance(i, (slice, int, type(None), type(Ellipsis)))
                for i in (idx if isinstance(idx, tuple) else (idx,)))

    def rule(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out), (a,), rule, "index")


def concat(tensors: Sequence[Tensor], axis=-1):
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat of an empty sequence")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat along axis {axis}: shapes "
                                 f"{[list(u.shape) for u in ts]} disagree off-axis")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def rule(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _make(out, ts, rule, "concat")


def split(a, sizes: Sequence[int], axis=-1):
    a = as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of extent {a.shape[ax]}")
    parts, start = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, start + s)
        parts.append(index(a, tuple(sl)))
        start += s
    return parts


def softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _make(y, (a,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    sm = np.exp(y)
    return _make(y, (a,), lambda g: (g - sm * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_stats(a, eps=1e-5):
    """Normalize over the trailing axis to zero mean and unit variance."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def rule(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _make(xhat, (a,), rule, "layer_stats")


# ---------------------------------------------------------------------------
# spatial ops, channels-last [B, H, W, C]


def conv2d(x, w, b=None):
    """Same-padded stride-1 cross-correlation. ``w`` is [kh, kw, Cin, Cout]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d needs x [B,H,W,C] and w [kh,kw,Cin,Cout], "
                             f"got {list(x.shape)} and {list(w.shape)}")
    kh, kw, cin, cout = w.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[3] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[3]} channels, kernel expects {cin} "
                             f"(x {list(x.shape)}, w {list(w.shape)})")
    B, H, W, _ = x.shape
    K = kh * kw * cin
    wm = w.data.reshape(K, cout)
    if kh == 1 and kw == 1:
        cols = x.data
    else:
        ph, pw = kh // 2, kw // 2
        xp = np.pad(x.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
        cols = _kernels.im2col(xp, kh, kw, H, W)
    out = cols @ wm
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise DimensionError(f"conv2d bias shape {list(b.shape)} != [{cout}]")
        out = out + b.data
        parents.append(b)

    def rule(g):
        gx = gw = gb = None
        if x.requires_grad:
            dcol = g @ wm.T
            if kh == 1 and kw == 1:
                gx = dcol
            else:
                dxp = _kernels.col2im(dcol, kh, kw, cin)
                gx = dxp[:, kh // 2:kh // 2 + H, kw // 2:kw // 2 + W, :]
        if w.requires_grad:
            gw = (cols.reshape(-1, K).T @ g.reshape(-1, cout)).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g.reshape(-1, cout).sum(axis=0)
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _make(out, parents, rule, "conv2d")


def upsample(x, factor: int, mode: str = "nearest"):
    x = as_tensor(x)
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    if x.ndim != 4:
        raise DimensionError(f"upsample needs [B,h,w,C], got {list(x.shape)}")
    if factor == 1:
        return _make(x.data.copy(), (x,), lambda g: (g,), "upsample")
    B, h, w, C = x.shape
    if mode == "nearest":
        out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)
        rule = lambda g: (g.reshape(B, h, factor, w, factor, C).sum(axis=(2, 4)),)
    elif mode == "bilinear":
        out = _kernels.bilinear(x.data, factor)
        rule = lambda g: (_kernels.bilinear_grad(g, factor),)
    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return _make(out, (x,), rule, f"upsample_{mode}")


# ---------------------------------------------------------------------------
# finite-difference verification


def param_grad_check(loss_fn: Callable[[], Tensor], params: Iterable[Tensor], eps=1e-5,
                     max_elems=None, rng=None, floor=1e-8) -> float:
    """Max relative error between autodiff and central differences.

    ``loss_fn`` is re-evaluated with each checked element of each param
    perturbed in place. With ``max_elems`` only that many elements per param
    (drawn by ``rng``) are checked. The error denominator is
    ``max(|analytic|, |numeric|, floor)``, so gradients below ``floor`` are
    compared in absolute terms.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NumericError("loss is not finite at the check point")
    backward(loss)
    worst = 0.0
    for p in params:
        ag = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_elems is not None and flat.size > max_elems:
            rng = rng if rng is not None else np.random.default_rng(0)
            idxs = rng.choice(flat.size, size=max_elems, replace=False)
        agf = ag.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn().item()
            flat[i] = orig - eps
            fm = loss_fn().item()
            flat[i] = orig
            cd = (fp - fm) / (2.0 * eps)
            a = agf[i]
            if not (math.isfinite(cd) and math.isfinite(a)):
                raise NumericError(f"non-finite gradient at element {i} of {p!r}")
            err = abs(a - cd) / max(abs(a), abs(cd), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


def grad_check(f: Callable[[Tensor], Tensor], x, eps=1e-5, max_elems=None, rng=None,
               floor=1e-8) -> float:
    xt = Tensor(np.array(as_tensor(x).data, copy=True), requires_grad=True)
    return param_grad_check(lambda: f(xt), [xt], eps=eps, max_elems=max_elems, rng=rng,
                            floor=floor)
