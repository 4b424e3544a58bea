"""Differentiable primitives.

Every function here computes its forward value with numpy and registers a
backward rule on the result. Shapes are checked eagerly; mismatches raise
``ShapeError`` naming both operands.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import Tensor, grad_enabled


class ShapeError(ValueError):
    pass


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._make(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return Tensor._make(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return Tensor._make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "pow")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# ---- unary maps ------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._make(np.log(ad), (a,), lambda g: (g / ad,), "log")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    # branch-free stable form: 0.5 * (1 + tanh(x/2))
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid_np(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), exact at +-inf."""
    x = a.data
    with np.errstate(invalid="ignore"):
        out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    out = np.where(np.isneginf(x), 0.0, out)
    return Tensor._make(out, (a,), lambda g: (g * _sigmoid_np(x),), "softplus")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    x2 = x * x  # x ** 3 goes through pow and is several times slower
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), back, "gelu")


def cast(a: Tensor, dtype) -> Tensor:
    src = a.data.dtype
    return Tensor._make(a.data.astype(dtype), (a,), lambda g: (g.astype(src),), "cast")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(np.where(mask, g, 0.0), sa) if a.requires_grad else None,
                _unbroadcast(np.where(mask, 0.0, g), sb) if b.requires_grad else None)

    return Tensor._make(out, (a, b), back, "where")


def maximum(a, b) -> Tensor:
    a, b = _pair(a, b)
    return where(a.data >= b.data, a, b)


# ---- reductions ------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return Tensor._make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


# ---- shape manipulation ----------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return Tensor._make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return Tensor._make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def index(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; gradients scatter-add back."""
    if isinstance(idx, Tensor):
        raise TypeError("index with a Tensor is not supported; use a numpy array")
    out = a.data[idx]
    shape, dtype = a.shape, a.dtype
    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return Tensor._make(np.array(out, copy=True), (a,), back, "index")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._make(out, tuple(tensors), lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``table[ids]``."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {table.shape[0]})")
    out = table.data[ids]
    shape, dtype = table.shape, table.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (full,)

    return Tensor._make(out, (table,), back, "embedding")


def gather_rows(x: Tensor, positions: np.ndarray) -> Tensor:
    """For x of shape (B, L, D) and integer positions (B, n): out[b, i] = x[b, positions[b, i]]."""
    positions = np.asarray(positions)
    if x.ndim != 3 or positions.ndim != 2 or positions.shape[0] != x.shape[0]:
        raise ShapeError(f"gather_rows: x {x.shape} incompatible with positions {positions.shape}")
    bidx = np.arange(x.shape[0])[:, None]
    out = x.data[bidx, positions]
    shape, dtype = x.shape, x.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, (bidx, positions), g)
        return (full,)

    return Tensor._make(out, (x,), back, "gather_rows")


def place_rows(base: Tensor, positions: np.ndarray, values: Tensor) -> Tensor:
    """Copy of ``base`` (B, L, D) whose rows ``positions`` (B, n) are replaced by ``values`` (B, n, D).

    Positions within one batch row must be distinct.
    """
    positions = np.asarray(positions)
    expect = positions.shape + base.shape[2:]
    if values.shape != expect:
        raise ShapeError(f"place_rows: values {values.shape} do not match positions/base {expect}")
    bidx = np.arange(base.shape[0])[:, None]
    out = base.data.copy()
    out[bidx, positions] = values.data

    def back(g):
        gb = g.copy()
        gb[bidx, positions] = 0.0
        return (gb, g[bidx, positions])

    return Tensor._make(out, (base, values), back, "place_rows")


# ---- linear algebra --------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operands {a.shape} and {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) where x is (..., din) and w is (din, dout); leading dims are flattened."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    xd = x.data.reshape(-1, x.shape[-1])
    wd = w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(lead + (wd.shape[1],))

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],)) if x.requires_grad else None
        gw = xd.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, back, "linear")


# ---- normalisation / softmax ----------------------------------------------

def softmax(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along ``axis``; entries where ``mask`` is False get probability 0."""
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    out = np.exp(x - m)
    out /= out.sum(axis=axis, keepdims=True)

    def back(g):
        s = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - s),)

    return Tensor._make(out, (a,), back, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return Tensor._make(out, (a,), back, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    xd = x.data
    d = xd.shape[-1]
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if weight is not None:
        if weight.shape != (d,):
            raise ShapeError(f"layer_norm: weight {weight.shape} vs features {d}")
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    red = tuple(range(xd.ndim - 1))

    def back(g):
        gw = (g * xhat).sum(axis=red) if weight is not None else None
        gb = g.sum(axis=red) if bias is not None else None
        gh = g * weight.data if weight is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                     - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        res = [gx]
        if weight is not None:
            res.append(gw)
        if bias is not None:
            res.append(gb)
        return tuple(res)

    parents = [x]
    if weight is not None:
        parents.append(weight)
    if bias is not None:
        parents.append(bias)
    return Tensor._make(out, tuple(parents), back, "layer_norm")


# ---- 2-D grids -------------------------------------------------------------

@lru_cache(maxsize=256)
def resample_matrix(n_in: int, n_out: int, mode: str = "bilinear", antialias: bool = True) -> np.ndarray:
    """(n_out, n_in) interpolation operator along one axis, half-pixel centred.

    Bilinear uses a triangle kernel; when shrinking with ``antialias`` the
    kernel is widened by the scale factor so every input sample contributes.
    Equal sizes give the exact identity.
    """
    if n_in < 1 or n_out < 1:
        raise ValueError(f"resample sizes must be >= 1, got {n_in} -> {n_out}")
    if n_in == n_out:
        return np.eye(n_out)
    scale = n_in / n_out
    mat = np.zeros((n_out, n_in))
    if mode == "nearest":
        src = np.minimum(np.floor((np.arange(n_out) + 0.5) * scale).astype(int), n_in - 1)
        mat[np.arange(n_out), src] = 1.0
        return mat
    if mode != "bilinear":
        raise ValueError(f"unknown resample mode {mode!r}")
    support = scale if (antialias and scale > 1.0) else 1.0
    for i in range(n_out):
        center = (i + 0.5) * scale - 0.5
        if support == 1.0:
            lo = int(math.floor(center))
            frac = center - lo
            for j, w in ((lo, 1.0 - frac), (lo + 1, frac)):
                mat[i, min(max(j, 0), n_in - 1)] += w
        else:
            js = np.arange(n_in)
            w = np.maximum(0.0, 1.0 - np.abs(js - center) / support)
            mat[i] = w / w.sum()
    return mat


def resample2d(x: Tensor, size: tuple[int, int], mode: str = "bilinear", antialias: bool = True) -> Tensor:
    """Resize the two spatial axes of a channels-last grid (..., H, W, C)."""
    if x.ndim < 3:
        raise ShapeError(f"resample2d: expected (..., H, W, C), got {x.shape}")
    h_in, w_in = x.shape[-3], x.shape[-2]
    h_out, w_out = size
    rh = resample_matrix(h_in, h_out, mode, antialias).astype(x.dtype, copy=False)
    rw = resample_matrix(w_in, w_out, mode, antialias).astype(x.dtype, copy=False)
    out = np.einsum("ih,...hwc,jw->...ijc", rh, x.data, rw, optimize=True)

    def back(g):
        return (np.einsum("ih,...ijc,jw->...hwc", rh, g, rw, optimize=True),)

    return Tensor._make(out, (x,), back, "resample2d")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Channels-last convolution: x (B, H, W, Cin), w (kh, kw, Cin, Cout)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    if x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d: input channels {x.shape} do not match weight {w.shape}")
    kh, kw, cin, cout = w.shape
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    bsz, hp, wp, _ = xd.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape[:2]} larger than padded input {xd.shape[1:3]}")
    win = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride][:, :ho, :wo]  # (B, ho, wo, Cin, kh, kw)
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(bsz * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(bsz, ho, wo, cout)
    in_shape = x.shape

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(bsz, ho, wo, kh, kw, cin)
            gpad = np.zeros((bsz, hp, wp, cin), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gpad[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, i, j]
            gx = gpad[:, padding:padding + in_shape[1], padding:padding + in_shape[2]] if padding else gpad
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._make(out, parents, back, "conv2d")


# ---- losses built from primitives -----------------------------------------

def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise -log p(target) for Bernoulli(sigmoid(logit)); finite at infinite logits."""
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: logits {logits.shape} vs targets {targets.shape}")
    if not np.all((targets == 0) | (targets == 1)):
        raise ValueError("bce_with_logits: targets must be in {0, 1}")
    sign = (1.0 - 2.0 * targets).astype(logits.dtype)
    return softplus(logits * sign)


def cross_entropy(logits: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean token cross-entropy over positions selected by ``mask``."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    if mask is None:
        mask = np.ones(targets.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise ValueError("cross_entropy: empty loss mask")
    lp = log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, np.where(mask, targets, 0)[..., None], 1.0, axis=-1)
    onehot *= mask[..., None]
    return -(lp * onehot).sum() * (1.0 / n)


def is_grad_enabled() -> bool:
    return grad_enabled()
