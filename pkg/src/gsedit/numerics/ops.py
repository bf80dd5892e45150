"""Differentiable tensor operations.

Every op computes in float64 and stores the result in the operands' dtype
(float32 unless a float64 tensor is involved).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DTensor, ShapeError, as_tensor, make_node

F64 = np.float64


def _f64(t: DTensor) -> np.ndarray:
    return t.data.astype(F64, copy=False)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: DTensor, b: DTensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"shapes {a.shape} and {b.shape} are not broadcastable") from None


def _pair(a, b) -> tuple[DTensor, DTensor]:
    if isinstance(a, DTensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise ----------------------------------------------------------

def add(a, b) -> DTensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(_f64(a) + _f64(b), (a, b), bw, "add")


def sub(a, b) -> DTensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(_f64(a) - _f64(b), (a, b), bw, "sub")


def mul(a, b) -> DTensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    av, bv = _f64(a), _f64(b)

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return make_node(av * bv, (a, b), bw, "mul")


def div(a, b) -> DTensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b)
    av, bv = _f64(a), _f64(b)

    def bw(g):
        return _unbroadcast(g / bv, a.shape), _unbroadcast(-g * av / (bv * bv), b.shape)

    return make_node(av / bv, (a, b), bw, "div")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: DTensor) -> DTensor:
    s = _sigmoid(_f64(x))
    return make_node(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def silu(x: DTensor) -> DTensor:
    xv = _f64(x)
    s = _sigmoid(xv)
    return make_node(xv * s, (x,), lambda g: (g * (s + xv * s * (1.0 - s)),), "silu")


def softplus(x: DTensor) -> DTensor:
    xv = _f64(x)
    out = np.logaddexp(0.0, xv)
    return make_node(out, (x,), lambda g: (g * _sigmoid(xv),), "softplus")


def abs(x: DTensor) -> DTensor:  # noqa: A001
    xv = _f64(x)
    return make_node(np.abs(xv), (x,), lambda g: (g * np.sign(xv),), "abs")


def exp(x: DTensor) -> DTensor:
    out = np.exp(_f64(x))
    return make_node(out, (x,), lambda g: (g * out,), "exp")


_UNARY = {"silu": silu, "softplus": softplus, "abs": abs}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a: DTensor, b: DTensor | None = None) -> DTensor:
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op {op!r}")


# -- reductions and shape ops ---------------------------------------------

def sum(x: DTensor, axis=None, keepdims: bool = False) -> DTensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(_f64(x).sum(axis=axis, keepdims=keepdims), (x,), bw, "sum")


def mean(x: DTensor, axis=None, keepdims: bool = False) -> DTensor:
    xv = _f64(x)
    n = xv.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_node(xv.mean(axis=axis, keepdims=keepdims), (x,), bw, "mean")


def reshape(x: DTensor, shape: Sequence[int]) -> DTensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: DTensor, axes: Sequence[int] | None = None) -> DTensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_node(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def index(x: DTensor, idx) -> DTensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=F64)
        np.add.at(full, idx, g)
        return (full,)

    return make_node(np.array(x.data[idx]), (x,), bw, "index")


def concat(tensors: Sequence[DTensor], axis: int = 0) -> DTensor:
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    try:
        out = np.concatenate([_f64(t) for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"cannot concatenate shapes {[t.shape for t in tensors]}") from None

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return make_node(out, tuple(tensors), bw, "concat")


# -- linear algebra -------------------------------------------------------

def matmul(a: DTensor, b: DTensor) -> DTensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    av, bv = _f64(a), _f64(b)

    def bw(g):
        return g @ bv.T, av.T @ g

    return make_node(av @ bv, (a, b), bw, "matmul")


def _as_pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv2d(x: DTensor, kernel: DTensor, stride: int = 1, padding=0) -> DTensor:
    """Cross-correlation of a C_in x H x W map with a C_out x C_in x kh x kw kernel.

    ``padding`` may be an int or an (rows, cols) pair; borders are zero padded.
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects C x H x W input and 4-d kernel, got {x.shape}, {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc, kh, kw = kernel.shape
    if kc != c_in:
        raise ShapeError(f"kernel expects {kc} input channels, input has {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
    ph, pw = _as_pair(padding)
    s = int(stride)
    span_h, span_w = h + 2 * ph - kh, w + 2 * pw - kw
    if span_h < 0 or span_w < 0 or span_h % s or span_w % s:
        raise ShapeError(
            f"conv2d output size is not an integer for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {s}, padding {(ph, pw)}"
        )
    ho, wo = span_h // s + 1, span_w // s + 1
    xp = np.pad(_f64(x), ((0, 0), (ph, ph), (pw, pw)))
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::s, ::s]
    kv = _f64(kernel)
    out = np.tensordot(kv, cols, axes=([1, 2, 3], [0, 3, 4]))

    def bw(g):
        gk = np.tensordot(g, cols, axes=([1, 2], [1, 2]))
        gcols = np.tensordot(kv, g, axes=([0], [0]))  # C_in x kh x kw x ho x wo
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, i : i + s * ho : s, j : j + s * wo : s] += gcols[:, i, j]
        return gxp[:, ph : ph + h, pw : pw + w], gk

    return make_node(out, (x, kernel), bw, "conv2d")


# -- normalisation --------------------------------------------------------

def softmax(x: DTensor, axis: int = -1) -> DTensor:
    xv = _f64(x)
    e = np.exp(xv - xv.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), bw, "softmax")


def layernorm(x: DTensor, axis: int, gamma: DTensor, beta: DTensor, eps: float = 1e-5) -> DTensor:
    """Normalise every slice along ``axis`` to zero mean / unit variance, then scale and shift."""
    axis = axis % x.ndim
    n = x.shape[axis]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"gamma/beta must have shape ({n},), got {gamma.shape}, {beta.shape}")
    if eps <= 0:
        raise ValueError("eps must be positive")
    bshape = [1] * x.ndim
    bshape[axis] = n
    xv = _f64(x)
    gv = _f64(gamma).reshape(bshape)
    mu = xv.mean(axis=axis, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gv * xhat + _f64(beta).reshape(bshape)
    others = tuple(i for i in range(x.ndim) if i != axis)

    def bw(g):
        gxhat = g * gv
        gx = inv / n * (
            n * gxhat
            - gxhat.sum(axis=axis, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=axis, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=others), g.sum(axis=others)

    return make_node(out, (x, gamma, beta), bw, "layernorm")


# -- image-space ops ------------------------------------------------------

def _bilinear_matrix(n: int, factor: int) -> np.ndarray:
    """(factor*n) x n interpolation matrix, half-pixel centres, edge clamped."""
    m = np.zeros((n * factor, n))
    src = (np.arange(n * factor) + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, n - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    rows = np.arange(n * factor)
    np.add.at(m, (rows, i0), 1.0 - frac)
    np.add.at(m, (rows, i1), frac)
    return m


def resample(x: DTensor, factor: int, mode: str) -> DTensor:
    if x.ndim != 3:
        raise ShapeError(f"resample expects C x H x W, got {x.shape}")
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    c, h, w = x.shape
    xv = _f64(x)
    if mode == "down_average":
        if h % factor or w % factor:
            raise ShapeError(f"{h}x{w} is not divisible by factor {factor}")
        out = xv.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))

        def bw(g):
            g = np.repeat(np.repeat(g, factor, axis=1), factor, axis=2)
            return (g / (factor * factor),)

        return make_node(out, (x,), bw, "down_average")
    if mode == "up_bilinear":
        mh, mw = _bilinear_matrix(h, factor), _bilinear_matrix(w, factor)
        out = np.einsum("ih,chw,jw->cij", mh, xv, mw, optimize=True)

        def bw(g):
            return (np.einsum("ih,cij,jw->chw", mh, g, mw, optimize=True),)

        return make_node(out, (x,), bw, "up_bilinear")
    raise ValueError(f"unknown resample mode {mode!r}")


def spatial_gradient(x: DTensor, axis: str) -> DTensor:
    """Forward difference along columns (``"x"``) or rows (``"y"``); zero on the trailing border."""
    if x.ndim != 3:
        raise ShapeError(f"spatial_gradient expects C x H x W, got {x.shape}")
    if x.shape[1] < 2 or x.shape[2] < 2:
        raise ShapeError(f"spatial_gradient needs H, W >= 2, got {x.shape}")
    if axis not in ("x", "y"):
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")
    xv = _f64(x)
    out = np.zeros_like(xv)
    if axis == "x":
        out[:, :, :-1] = xv[:, :, 1:] - xv[:, :, :-1]
    else:
        out[:, :-1, :] = xv[:, 1:, :] - xv[:, :-1, :]

    def bw(g):
        gx = np.zeros_like(g)
        if axis == "x":
            gv = g[:, :, :-1]
            gx[:, :, 1:] += gv
            gx[:, :, :-1] -= gv
        else:
            gv = g[:, :-1, :]
            gx[:, 1:, :] += gv
            gx[:, :-1, :] -= gv
        return (gx,)

    return make_node(out, (x,), bw, f"grad_{axis}")


def unfold_neighbors(x: DTensor, k: int) -> DTensor:
    """Gather each pixel's k x k zero-padded neighbourhood: C x H x W -> C x k*k x H x W."""
    if k % 2 == 0:
        raise ShapeError(f"window size must be odd, got {k}")
    c, h, w = x.shape
    r = k // 2
    xp = np.pad(_f64(x), ((0, 0), (r, r), (r, r)))
    out = np.empty((c, k * k, h, w))
    for di in range(k):
        for dj in range(k):
            out[:, di * k + dj] = xp[:, di : di + h, dj : dj + w]

    def bw(g):
        gp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gp[:, di : di + h, dj : dj + w] += g[:, di * k + dj]
        return (gp[:, r : r + h, r : r + w],)

    return make_node(out, (x,), bw, "unfold")
