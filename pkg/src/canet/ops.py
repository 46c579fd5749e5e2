"""Differentiable primitives over (n, c, h, w) tensors.

Every op computes its forward in NumPy and, when a tape is active and some
input requires a gradient, records a closure mapping the upstream gradient
to one gradient per input (``None`` where the input needs none).
"""
from __future__ import annotations

import contextlib
from typing import List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import NonFiniteError, Tensor, active_tape, is_checked

__all__ = [
    "conv2d",
    "depthwise_conv2d",
    "conv_transpose2d",
    "maxpool2d",
    "avgpool2d",
    "global_avg_pool",
    "global_max_pool",
    "channel_reduce_max",
    "channel_reduce_mean",
    "concat_channels",
    "batchnorm2d",
    "sigmoid",
    "relu",
    "relu6",
    "linear",
    "softmax_cross_entropy",
    "add",
    "sub",
    "mul",
    "sum",
    "mean",
    "frozen_branches",
]

# Non-smooth ops (relu, max reductions) route their branch decisions through
# _branch. Under ``frozen_branches`` the first pass records them and later
# passes replay them, so a gradient check can difference the smooth piece
# the analytic gradient belongs to.
class _BranchLog:
    def __init__(self):
        self.decisions: List[np.ndarray] = []
        self.replay = False
        self.pos = 0


_branch_log: Optional[_BranchLog] = None


@contextlib.contextmanager
def frozen_branches(log: Optional[_BranchLog] = None):
    """Record branch decisions (fresh log) or replay them (log from a previous pass)."""
    global _branch_log
    if log is None:
        log = _BranchLog()
    else:
        log.replay, log.pos = True, 0
    prev, _branch_log = _branch_log, log
    try:
        yield log
    finally:
        _branch_log = prev


def _branch(decision: np.ndarray) -> np.ndarray:
    log = _branch_log
    if log is None:
        return decision
    if not log.replay:
        log.decisions.append(decision)
        return decision
    stored = log.decisions[log.pos]
    log.pos += 1
    if stored.shape != decision.shape:
        raise RuntimeError("frozen_branches: replayed op sequence differs from the recorded one")
    return stored


def _result(data: np.ndarray, parents: Sequence[Tensor], fn, name: str) -> Tensor:
    out = Tensor(data)
    if is_checked() and not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"{name} produced non-finite values")
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, tuple(parents), fn, name)
    return out


def _tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _need(t: Optional[Tensor]) -> bool:
    return t is not None and t.requires_grad


def _check_rank4(x: Tensor, name: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{name} expects a rank-4 (n, c, h, w) tensor, got shape {x.shape}")


def _out_size(size: int, k: int, stride: int, padding: int, name: str) -> int:
    out = (size + 2 * padding - k) // stride + 1
    if out <= 0 or size + 2 * padding < k:
        raise ValueError(f"{name}: output dimension would be non-positive (size={size}, k={k})")
    return out


def _pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    p = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    return np.pad(x, p, mode="constant", constant_values=value)


def _windows(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Strided view (n, c, oh, ow, k, k) of the k×k windows of ``xp``."""
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]


def _scatter_windows(dw: np.ndarray, shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: sum (n, c, oh, ow, k, k) back into ``shape``."""
    _, _, oh, ow = dw.shape[:4]
    out = np.zeros(shape, dtype=dw.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += dw[
                :, :, :, :, i, j
            ]
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- convolutions -----------------------------------------------------------


def _im2col(xt: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """(c, n, H, W) -> (c*k*k, n*oh*ow) patch matrix."""
    c, n = xt.shape[:2]
    cols = np.empty((c, k, k, n, oh, ow), dtype=xt.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride]
    return cols.reshape(c * k * k, n * oh * ow)


def _col2im(cols: np.ndarray, shape, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; ``shape`` is the (c, n, H, W) target."""
    c, n = shape[:2]
    cols = cols.reshape(c, k, k, n, oh, ow)
    out = np.zeros(shape, dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (oh - 1) + 1 : stride, j : j + stride * (ow - 1) + 1 : stride] += cols[:, i, j]
    return out


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with a (c_out, c_in, k, k) kernel via im2col."""
    _check_rank4(x, "conv2d")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    n, c, h, w = x.shape
    co, ci, k, k2 = weight.shape
    if k != k2:
        raise ValueError("conv2d: only square kernels are supported")
    if ci != c:
        raise ValueError(f"conv2d: input has {c} channels, weight expects {ci}")
    oh = _out_size(h, k, stride, padding, "conv2d")
    ow = _out_size(w, k, stride, padding, "conv2d")

    # channel-major layout keeps the im2col copies contiguous
    xt = _pad(np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)), padding)
    cols = _im2col(xt, k, stride, oh, ow)
    wm = weight.data.reshape(co, c * k * k)
    out = wm @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(co, n, oh, ow).transpose(1, 0, 2, 3))

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, n * oh * ow)
        dx = dw = db = None
        if weight.requires_grad:
            dw = (gm @ cols.T).reshape(weight.shape)
        if _need(bias):
            db = gm.sum(axis=1)
        if x.requires_grad:
            dxt = _col2im(wm.T @ gm, xt.shape, k, stride, oh, ow)
            if padding:
                dxt = dxt[:, :, padding : padding + h, padding : padding + w]
            dx = np.ascontiguousarray(dxt.transpose(1, 0, 2, 3))
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Per-channel convolution with a (c, 1, k, k) kernel."""
    _check_rank4(x, "depthwise_conv2d")
    n, c, h, w = x.shape
    cw, one, k, _ = weight.shape
    if cw != c or one != 1:
        raise ValueError(f"depthwise_conv2d: weight {weight.shape} does not match {c} channels")
    oh = _out_size(h, k, stride, padding, "depthwise_conv2d")
    ow = _out_size(w, k, stride, padding, "depthwise_conv2d")
    xp = _pad(x.data, padding)
    win = _windows(xp, k, stride, oh, ow)
    out = np.einsum("ncpqij,cij->ncpq", win, weight.data[:, 0], optimize=True)

    def backward(g):
        dx = dw = None
        if weight.requires_grad:
            dw = np.einsum("ncpqij,ncpq->cij", win, g, optimize=True)[:, None]
        if x.requires_grad:
            dwin = g[:, :, :, :, None, None] * weight.data[None, :, 0, None, None, :, :]
            dxp = _scatter_windows(dwin, xp.shape, k, stride)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dw

    return _result(out, (x, weight), backward, "depthwise_conv2d")


def conv_transpose2d(x: Tensor, weight: Tensor, stride: int = 1) -> Tensor:
    """Transposed convolution (adjoint of an unpadded conv2d) with a (c_in, c_out, k, k) kernel."""
    _check_rank4(x, "conv_transpose2d")
    if stride < 1:
        raise ValueError("conv_transpose2d: stride must be >= 1")
    n, c, h, w = x.shape
    ci, co, k, _ = weight.shape
    if ci != c:
        raise ValueError(f"conv_transpose2d: input has {c} channels, weight expects {ci}")
    oh, ow = (h - 1) * stride + k, (w - 1) * stride + k

    xm = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, n * h * w)
    wm = weight.data.reshape(ci, co * k * k)
    out = _col2im(wm.T @ xm, (co, n, oh, ow), k, stride, h, w)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def backward(g):
        dcols = _im2col(np.ascontiguousarray(g.transpose(1, 0, 2, 3)), k, stride, h, w)
        dx = dw = None
        if x.requires_grad:
            dx = np.ascontiguousarray((wm @ dcols).reshape(c, n, h, w).transpose(1, 0, 2, 3))
        if weight.requires_grad:
            dw = (xm @ dcols.T).reshape(weight.shape)
        return dx, dw

    return _result(out, (x, weight), backward, "conv_transpose2d")


# -- pooling and reductions -------------------------------------------------


def maxpool2d(x: Tensor, k: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Window max; the gradient goes to the first row-major maximum."""
    _check_rank4(x, "maxpool2d")
    if k < 1:
        raise ValueError("maxpool2d: k must be >= 1")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    oh = _out_size(h, k, stride, padding, "maxpool2d")
    ow = _out_size(w, k, stride, padding, "maxpool2d")
    xp = _pad(x.data, padding, -np.inf)
    win = _windows(xp, k, stride, oh, ow).reshape(n, c, oh, ow, k * k)
    arg = _branch(win.argmax(axis=-1))
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        flat = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(flat, arg[..., None], g[..., None], axis=-1)
        dxp = _scatter_windows(flat.reshape(n, c, oh, ow, k, k), xp.shape, k, stride)
        return (dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp,)

    return _result(out, (x,), backward, "maxpool2d")


def avgpool2d(x: Tensor, k: int, stride: Optional[int] = None, padding: int = 0) -> Tensor:
    """Window mean; zero padding counts toward the divisor."""
    _check_rank4(x, "avgpool2d")
    if k < 1:
        raise ValueError("avgpool2d: k must be >= 1")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    oh = _out_size(h, k, stride, padding, "avgpool2d")
    ow = _out_size(w, k, stride, padding, "avgpool2d")
    xp = _pad(x.data, padding)
    out = _windows(xp, k, stride, oh, ow).mean(axis=(-2, -1))

    def backward(g):
        dwin = np.broadcast_to((g / (k * k))[..., None, None], (n, c, oh, ow, k, k))
        dxp = _scatter_windows(dwin, xp.shape, k, stride)
        return (dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp,)

    return _result(out.astype(x.dtype, copy=False), (x,), backward, "avgpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    _check_rank4(x, "global_avg_pool")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _result(out, (x,), backward, "global_avg_pool")


def global_max_pool(x: Tensor) -> Tensor:
    _check_rank4(x, "global_max_pool")
    n, c, h, w = x.shape
    flat = x.data.reshape(n, c, h * w)
    arg = _branch(flat.argmax(axis=-1)[..., None])
    out = np.take_along_axis(flat, arg, axis=-1).reshape(n, c, 1, 1)

    def backward(g):
        d = np.zeros_like(flat)
        np.put_along_axis(d, arg, g.reshape(n, c, 1), axis=-1)
        return (d.reshape(x.shape),)

    return _result(out, (x,), backward, "global_max_pool")


def channel_reduce_max(x: Tensor) -> Tensor:
    """Per-pixel max over channels, (n, c, h, w) -> (n, 1, h, w)."""
    _check_rank4(x, "channel_reduce_max")
    arg = _branch(x.data.argmax(axis=1)[:, None])
    out = np.take_along_axis(x.data, arg, axis=1)

    def backward(g):
        d = np.zeros_like(x.data)
        np.put_along_axis(d, arg, g, axis=1)
        return (d,)

    return _result(out, (x,), backward, "channel_reduce_max")


def channel_reduce_mean(x: Tensor) -> Tensor:
    """Per-pixel mean over channels, (n, c, h, w) -> (n, 1, h, w)."""
    _check_rank4(x, "channel_reduce_mean")
    c = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def backward(g):
        return (np.broadcast_to(g / c, x.shape).copy(),)

    return _result(out, (x,), backward, "channel_reduce_mean")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels: nothing to concatenate")
    for p in parts:
        _check_rank4(p, "concat_channels")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ValueError(f"concat_channels: shape mismatch {p.shape} vs {ref}")
    if len(parts) == 1:
        return parts[0]
    out = np.concatenate([p.data for p in parts], axis=1)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] if p.requires_grad else None for i, p in enumerate(parts))

    return _result(out, parts, backward, "concat_channels")


# -- normalization ----------------------------------------------------------


def batchnorm2d(x: Tensor, bank, dataset_id, mode: str = "train") -> Tensor:
    """Batch normalization using the ``dataset_id`` entry of a BN bank.

    Train mode normalizes with biased batch statistics and folds them into
    the entry's running statistics (unbiased variance); eval mode uses the
    running statistics.
    """
    _check_rank4(x, "batchnorm2d")
    entry = bank.entry(dataset_id)
    gamma, beta, eps = entry.gamma, entry.beta, entry.eps
    n, c, h, w = x.shape
    if c != gamma.shape[0]:
        raise ValueError(f"batchnorm2d: input has {c} channels, bank expects {gamma.shape[0]}")
    shape = (1, c, 1, 1)
    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d: train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        entry.update_running(mu, var * (m / (m - 1)))
    elif mode == "eval":
        if entry.running_mean is None:
            raise RuntimeError(f"batchnorm2d: no running statistics for dataset {dataset_id!r}")
        mu, var = entry.running_mean, entry.running_var
    else:
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")
    dtype = x.dtype
    invstd = (1.0 / np.sqrt(var + eps)).astype(dtype)
    xhat = (x.data - mu.astype(dtype).reshape(shape)) * invstd.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        dbeta = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            scale = (gamma.data * invstd).reshape(shape)
            if mode == "train":
                gsum = g.mean(axis=(0, 2, 3)).reshape(shape)
                gxhat = (g * xhat).mean(axis=(0, 2, 3)).reshape(shape)
                dx = scale * (g - gsum - xhat * gxhat)
            else:
                dx = scale * g
        return dx, dgamma, dbeta

    return _result(out, (x, gamma, beta), backward, "batchnorm2d")


# -- elementwise ------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function, clipped so results stay strictly inside (0, 1)."""
    d = x.data
    z = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype, copy=False)
    fi = np.finfo(x.dtype)
    np.clip(out, fi.tiny, np.nextafter(x.dtype.type(1), x.dtype.type(0)), out=out)

    def backward(g):
        return (g * out * (1 - out),)

    return _result(out, (x,), backward, "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = _branch(x.data > 0)
    out = x.data * mask

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward, "relu")


def relu6(x: Tensor) -> Tensor:
    # region 0: below zero, 1: linear, 2: saturated at 6
    region = _branch((x.data > 0).astype(np.int8) + (x.data >= 6))
    mask = region == 1
    out = np.where(mask, x.data, np.where(region == 2, x.dtype.type(6), x.dtype.type(0)))

    def backward(g):
        return (g * mask,)

    return _result(out, (x,), backward, "relu6")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map on features; accepts (n, f) or (n, f, 1, 1) inputs."""
    rank4 = x.data.ndim == 4
    if rank4 and x.shape[2:] != (1, 1):
        raise ValueError(f"linear: expected flattened (n, f, 1, 1) input, got {x.shape}")
    xm = x.data.reshape(x.shape[0], -1)
    out_f, in_f = weight.shape
    if xm.shape[1] != in_f:
        raise ValueError(f"linear: input has {xm.shape[1]} features, weight expects {in_f}")
    out = xm @ weight.data.T
    if bias is not None:
        out = out + bias.data
    if rank4:
        out = out.reshape(x.shape[0], out_f, 1, 1)

    def backward(g):
        gm = g.reshape(g.shape[0], out_f)
        dx = (gm @ weight.data).reshape(x.shape) if x.requires_grad else None
        dw = gm.T @ xm if weight.requires_grad else None
        db = gm.sum(axis=0) if _need(bias) else None
        return dx, dw, db

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "linear")


def _binary(a, b, name):
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError(f"{name}: at least one operand must be a Tensor")
    like = a if isinstance(a, Tensor) else b
    return _tensor(a, like), _tensor(b, like)


def add(a, b) -> Tensor:
    a, b = _binary(a, b, "add")
    out = a.data + b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _binary(a, b, "sub")
    out = a.data - b.data

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _binary(a, b, "mul")
    out = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), backward, "mul")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    out = np.asarray(x.data.sum(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    out = np.asarray(x.data.mean(), dtype=x.dtype)

    def backward(g):
        return (np.full(x.shape, g / x.size, dtype=x.dtype),)

    return _result(out, (x,), backward, "mean")


# -- loss -------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean two-class cross-entropy over every pixel of every pair."""
    _check_rank4(logits, "softmax_cross_entropy")
    n, c, h, w = logits.shape
    if c != 2:
        raise ValueError(f"softmax_cross_entropy: expected 2 channels, got {c}")
    t = np.asarray(target)
    if t.shape != (n, h, w):
        raise ValueError(f"softmax_cross_entropy: target shape {t.shape} != {(n, h, w)}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("softmax_cross_entropy: target values must be 0 or 1")
    t = t.astype(np.intp)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    picked = np.take_along_axis(logp, t[:, None], axis=1)
    m = n * h * w
    out = np.asarray(-picked.sum() / m, dtype=logits.dtype)

    def backward(g):
        d = np.exp(logp)
        onehot = np.zeros_like(d)
        np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
        return ((d - onehot) * (g / m),)

    return _result(out, (logits,), backward, "softmax_cross_entropy")
