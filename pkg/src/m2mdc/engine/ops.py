"""Differentiable operators used by the residual CNN pipeline.

All image tensors are NCHW. Convolutions carry no bias; ``linear`` does.
"""

from __future__ import annotations

import logging

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
COSINE_NORM_FLOOR = 1e-12

_degenerate_cosine = 0


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


def degenerate_cosine_count() -> int:
    """Number of zero-norm rows seen by ``cosine_similarity`` so far."""
    return _degenerate_cosine


def reset_degenerate_cosine_count() -> None:
    global _degenerate_cosine
    _degenerate_cosine = 0


# convolution ----------------------------------------------------------------


def _out_extent(size: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded {axis} extent {size + 2 * padding}")
    return span // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # rows ordered (n, oh, ow); columns ordered (c, i, j) to match weight.reshape(Cout, -1)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    n, c = xp.shape[:2]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def _col2im(dcols: np.ndarray, xp_shape, kh, kw, stride, ho, wo) -> np.ndarray:
    n, c = xp_shape[:2]
    d = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    # fixed accumulation order over kernel taps
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d[:, :, i, j]
    return dxp


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of ``x`` [N,Cin,H,W] with ``weight`` [Cout,Cin/groups,kh,kw]."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"conv2d: channels (Cin={cin}, Cout={cout}) not divisible by groups={groups}")
    if cin // groups != cin_g:
        raise ShapeError(f"conv2d: input channel dim Cin={cin} does not match weight Cin/groups={cin_g} (groups={groups})")
    ho = _out_extent(h, kh, stride, padding, "H")
    wo = _out_extent(w, kw, stride, padding, "W")
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: empty output extent H'={ho}, W'={wo}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp_shape = xd.shape
    cout_g = cout // groups
    cols_per_group = []
    outs = []
    for g in range(groups):
        xg = xd[:, g * cin_g : (g + 1) * cin_g] if groups > 1 else xd
        cols = _im2col(xg, kh, kw, stride, ho, wo)
        wm = weight.data[g * cout_g : (g + 1) * cout_g].reshape(cout_g, -1)
        outs.append(cols @ wm.T)
        cols_per_group.append(cols)
    out = outs[0] if groups == 1 else np.concatenate(outs, axis=1)
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def backward(gout):
        gm = gout.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        dw = np.empty_like(weight.data) if weight.requires_grad else None
        dxp = np.zeros(xp_shape, dtype=gout.dtype) if x.requires_grad else None
        for g in range(groups):
            gg = gm[:, g * cout_g : (g + 1) * cout_g]
            wm = weight.data[g * cout_g : (g + 1) * cout_g].reshape(cout_g, -1)
            if dw is not None:
                dw[g * cout_g : (g + 1) * cout_g] = (gg.T @ cols_per_group[g]).reshape(cout_g, cin_g, kh, kw)
            if dxp is not None:
                part = _col2im(gg @ wm, (n, cin_g) + xp_shape[2:], kh, kw, stride, ho, wo)
                dxp[:, g * cin_g : (g + 1) * cin_g] = part
        dx = None
        if dxp is not None:
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
            dx = np.ascontiguousarray(dx)
        return dx, dw

    return Tensor._from_op(out, (x, weight), backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho = _out_extent(h, kernel, stride, padding, "H")
    wo = _out_extent(w, kernel, stride, padding, "W")
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xd, (kernel, kernel), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xd.shape, dtype=g.dtype)
        ki, kj = np.divmod(arg, kernel)
        rows = ki + (np.arange(ho) * stride)[None, None, :, None]
        cols = kj + (np.arange(wo) * stride)[None, None, None, :]
        nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
        np.add.at(dxp, (nn_[..., None, None], cc[..., None, None], rows, cols), g)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (np.ascontiguousarray(dx),)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


# normalization --------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    mode: str = "eval",
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel batch normalization.

    ``train`` and ``recalibrate`` normalize with batch statistics and fold them
    into the running buffers (unbiased variance, as is conventional);
    ``recalibrate`` additionally never records a tape. ``eval`` uses the
    running buffers.
    """
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects NCHW input, got {x.shape}")
    c = x.shape[1]
    for label, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (c,):
            raise ShapeError(f"batchnorm2d: {label} has {t.shape[0] if t.ndim else 0} channels, input has C={c}")
    if mode not in ("train", "eval", "recalibrate"):
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    g4 = gamma.data.reshape(1, c, 1, 1)
    b4 = beta.data.reshape(1, c, 1, 1)
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var.data + eps)
        xhat = (x.data - running_mean.data.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)
        out = xhat * g4 + b4

        def backward(g):
            dx = g * (g4 * inv_std.reshape(1, c, 1, 1)) if x.requires_grad else None
            dg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
            db = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
            return dx, dg, db

        return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "bn_eval")

    m = x.shape[0] * x.shape[2] * x.shape[3]
    mean = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mean.reshape(1, c, 1, 1)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(1, c, 1, 1)
    out = xhat * g4 + b4

    unbiased = var * (m / (m - 1)) if m > 1 else var
    running_mean.data[...] = (1 - momentum) * running_mean.data + momentum * mean
    running_var.data[...] = (1 - momentum) * running_var.data + momentum * unbiased

    if mode == "recalibrate":
        return Tensor(out)

    def backward(g):
        dg = (g * xhat).sum(axis=(0, 2, 3))
        db = g.sum(axis=(0, 2, 3))
        dx = None
        if x.requires_grad:
            scale = (gamma.data * inv_std / m).reshape(1, c, 1, 1)
            dx = scale * (m * g - db.reshape(1, c, 1, 1) - xhat * dg.reshape(1, c, 1, 1))
        return dx, (dg if gamma.requires_grad else None), (db if beta.requires_grad else None)

    return Tensor._from_op(out, (x, gamma, beta), backward, "bn_train")


# elementwise / reductions ---------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def residual_add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"residual_add: branch shape {a.shape} != skip shape {b.shape}")
    return Tensor._from_op(a.data + b.data, (a, b), lambda g: (g, g), "residual_add")


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    area = h * w

    def backward(g):
        return (np.broadcast_to((g / area).reshape(n, c, 1, 1), x.shape).astype(x.dtype),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), (x,), backward, "gap")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} does not match out features {weight.shape[0]}")
        out = out + bias.data

    def backward(g):
        dx = g @ weight.data if x.requires_grad else None
        dw = g.T @ x.data if weight.requires_grad else None
        db = g.sum(axis=0) if bias is not None else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "linear")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of -log softmax(logits)[label]."""
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return Tensor._from_op(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    """Cosine along the last axis; rows with a near-zero norm yield 0."""
    global _degenerate_cosine
    if u.shape != v.shape:
        raise ShapeError(f"cosine_similarity: shapes {u.shape} and {v.shape} differ")
    nu = np.sqrt((u.data * u.data).sum(axis=-1))
    nv = np.sqrt((v.data * v.data).sum(axis=-1))
    dot = (u.data * v.data).sum(axis=-1)
    ok = (nu >= COSINE_NORM_FLOOR) & (nv >= COSINE_NORM_FLOOR)
    bad = int(np.size(ok) - np.count_nonzero(ok))
    if bad:
        _degenerate_cosine += bad
        logger.debug("cosine_similarity: %d degenerate row(s)", bad)
    safe_u = np.where(ok, nu, 1.0)
    safe_v = np.where(ok, nv, 1.0)
    cos = np.where(ok, dot / (safe_u * safe_v), 0.0).astype(u.dtype)

    def backward(g):
        gk = (g * ok)[..., None]
        su, sv, c = safe_u[..., None], safe_v[..., None], cos[..., None]
        du = gk * (v.data / (su * sv) - c * u.data / (su * su)) if u.requires_grad else None
        dv = gk * (u.data / (su * sv) - c * v.data / (sv * sv)) if v.requires_grad else None
        return du, dv

    return Tensor._from_op(np.asarray(cos), (u, v), backward, "cosine")


__all__ = [
    "ShapeError",
    "batchnorm2d",
    "conv2d",
    "cosine_similarity",
    "cross_entropy",
    "degenerate_cosine_count",
    "global_avg_pool",
    "linear",
    "max_pool2d",
    "no_grad",
    "relu",
    "reset_degenerate_cosine_count",
    "residual_add",
]
