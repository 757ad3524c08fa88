"""Hot numeric kernels: im2col/col2im for same-padded convolution and
align-corners=False bilinear resampling.

Each kernel has a numba ``@njit`` implementation and a pure-numpy
implementation with identical semantics. The numba path is used when numba
imports cleanly and neither ``TIT_DISABLE_NUMBA`` nor ``NUMBA_DISABLE_JIT`` is
set to a truthy value.
"""
import os

import numpy as np

_FALSY = ("", "0", "false", "no")


def _numba_requested():
    for var in ("TIT_DISABLE_NUMBA", "NUMBA_DISABLE_JIT"):
        if os.environ.get(var, "").strip().lower() not in _FALSY:
            return False
    return True


try:
    if not _numba_requested():
        raise ImportError
    import numba

    njit = numba.njit(cache=True, nogil=True)
    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations


def _im2col_np(xp, kh, kw, H, W):
    # xp: [B, H+kh-1, W+kw-1, C] -> [B, H, W, kh*kw*C], patch order (i, j, c)
    cols = [xp[:, i:i + H, j:j + W, :] for i in range(kh) for j in range(kw)]
    return np.concatenate(cols, axis=-1)


def _col2im_np(dcol, kh, kw, C):
    B, H, W, _ = dcol.shape
    dxp = np.zeros((B, H + kh - 1, W + kw - 1, C))
    idx = 0
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + H, j:j + W, :] += dcol[..., idx * C:(idx + 1) * C]
            idx += 1
    return dxp


def interp_matrix(n_in, factor):
    """Dense [n_in*factor, n_in] bilinear (align_corners=False) weights."""
    n_out = n_in * factor
    src = (np.arange(n_out) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, None)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    U = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(U, (rows, i0), 1.0 - lam)
    np.add.at(U, (rows, i1), lam)
    return U


def _bilinear_np(x, factor):
    B, h, w, C = x.shape
    Uh = interp_matrix(h, factor)
    Uw = interp_matrix(w, factor)
    return np.einsum("ph,bhwc,qw->bpqc", Uh, x, Uw, optimize=True)


def _bilinear_grad_np(g, factor):
    B, H, W, C = g.shape
    Uh = interp_matrix(H // factor, factor)
    Uw = interp_matrix(W // factor, factor)
    return np.einsum("ph,bpqc,qw->bhwc", Uh, g, Uw, optimize=True)


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:

    @njit
    def _im2col_nb(xp, kh, kw, H, W):
        B = xp.shape[0]
        C = xp.shape[3]
        out = np.empty((B, H, W, kh * kw * C))
        for b in range(B):
            for y in range(H):
                for x in range(W):
                    base = 0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(C):
                                out[b, y, x, base + c] = xp[b, y + i, x + j, c]
                            base += C
        return out

    @njit
    def _col2im_nb(dcol, kh, kw, C):
        B, H, W, _ = dcol.shape
        dxp = np.zeros((B, H + kh - 1, W + kw - 1, C))
        for b in range(B):
            for y in range(H):
                for x in range(W):
                    base = 0
                    for i in range(kh):
                        for j in range(kw):
                            for c in range(C):
                                dxp[b, y + i, x + j, c] += dcol[b, y, x, base + c]
                            base += C
        return dxp

    @njit
    def _src_index(o, factor, n_in):
        s = (o + 0.5) / factor - 0.5
        if s < 0.0:
            s = 0.0
        i0 = int(np.floor(s))
        if i0 > n_in - 1:
            i0 = n_in - 1
        i1 = i0 + 1
        if i1 > n_in - 1:
            i1 = n_in - 1
        return i0, i1, s - i0

    @njit
    def _bilinear_nb(x, factor):
        B, h, w, C = x.shape
        H = h * factor
        W = w * factor
        out = np.zeros((B, H, W, C))
        for p in range(H):
            y0, y1, ly = _src_index(p, factor, h)
            for q in range(W):
                x0, x1, lx = _src_index(q, factor, w)
                w00 = (1.0 - ly) * (1.0 - lx)
                w01 = (1.0 - ly) * lx
                w10 = ly * (1.0 - lx)
                w11 = ly * lx
                for b in range(B):
                    for c in range(C):
                        out[b, p, q, c] = (w00 * x[b, y0, x0, c] + w01 * x[b, y0, x1, c]
                                           + w10 * x[b, y1, x0, c] + w11 * x[b, y1, x1, c])
        return out

    @njit
    def _bilinear_grad_nb(g, factor):
        B, H, W, C = g.shape
        h = H // factor
        w = W // factor
        dx = np.zeros((B, h, w, C))
        for p in range(H):
            y0, y1, ly = _src_index(p, factor, h)
            for q in range(W):
                x0, x1, lx = _src_index(q, factor, w)
                w00 = (1.0 - ly) * (1.0 - lx)
                w01 = (1.0 - ly) * lx
                w10 = ly * (1.0 - lx)
                w11 = ly * lx
                for b in range(B):
                    for c in range(C):
                        v = g[b, p, q, c]
                        dx[b, y0, x0, c] += w00 * v
                        dx[b, y0, x1, c] += w01 * v
                        dx[b, y1, x0, c] += w10 * v
                        dx[b, y1, x1, c] += w11 * v
        return dx


NUMPY_KERNELS = {
    "im2col": _im2col_np,
    "col2im": _col2im_np,
    "bilinear": _bilinear_np,
    "bilinear_grad": _bilinear_grad_np,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "im2col": _im2col_nb,
        "col2im": _col2im_nb,
        "bilinear": _bilinear_nb,
        "bilinear_grad": _bilinear_grad_nb,
    }
    BACKEND = "numba"
    _active = NUMBA_KERNELS
else:
    NUMBA_KERNELS = None
    BACKEND = "numpy"
    _active = NUMPY_KERNELS


def im2col(xp, kh, kw, H, W):
    return _active["im2col"](np.ascontiguousarray(xp), kh, kw, H, W)


def col2im(dcol, kh, kw, C):
    return _active["col2im"](np.ascontiguousarray(dcol), kh, kw, C)


def bilinear(x, factor):
    return _active["bilinear"](np.ascontiguousarray(x), int(factor))


def bilinear_grad(g, factor):
    return _active["bilinear_grad"](np.ascontiguousarray(g), int(factor))
