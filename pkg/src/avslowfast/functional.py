"""Differentiable operators on :class:`~avslowfast.tensor.Tensor`.

Every function computes its forward value with numpy and records a closure
returning the input gradients. Convolutions use an im2col lowering; their
backward scatters column gradients back with one strided add per kernel tap.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(out, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "mul", (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)
    return make_result(out, "relu", (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return make_result(s, "sigmoid", (x,), lambda g: (g * s * (1.0 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


# ---------------------------------------------------------------- reductions / shape

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), "sum", (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = tuple(range(x.ndim)) if axis is None else (axis if isinstance(axis, tuple) else (axis,))
    count = math.prod(x.shape[a] for a in axes)
    out = np.mean(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(out), "mean", (x,), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape).copy()
    return make_result(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return make_result(out, "transpose", (x,), lambda g: (g.transpose(inverse),))


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    out = np.take(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None),) * axis + (idx,), g)
        return (gx,)

    return make_result(out, "take", (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ValueError(
                f"concat along axis {axis}: shape {t.shape} does not match {ref} off that axis"
            )
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return make_result(out, "concat", tensors, backward)


concat_channels = concat


def global_avg_pool(x: Tensor) -> Tensor:
    """[N, C, ...] -> [N, C]."""
    return mean(x, axis=tuple(range(2, x.ndim)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_result(out, "matmul", (a, b), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return make_result(s, "softmax", (x,), backward)


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` laid out [out, in]."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fully_connected: input {x.shape} vs weight {weight.shape}")
    out = x.data @ weight.data.T
    inputs: tuple[Tensor, ...] = (x, weight)
    if bias is not None:
        out = out + bias.data
        inputs = (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_result(out, "fc", inputs, backward)


linear = fully_connected


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout: kept activations are scaled by 1/(1-rate) during training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return make_result(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- convolution / pooling

def _tuple(v, d: int) -> tuple[int, ...]:
    return (int(v),) * d if np.isscalar(v) else tuple(int(a) for a in v)


def _windows(xp: np.ndarray, kernel, stride, d: int) -> np.ndarray:
    """[N, C, *L] -> [N, *out, C, *kernel] strided window view (no copy)."""
    win = sliding_window_view(xp, kernel, axis=tuple(range(2, 2 + d)))
    win = win[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)]
    return win.transpose((0, *range(2, 2 + d), 1, *range(2 + d, 2 + 2 * d)))


def _scatter_windows(gcols: np.ndarray, padded_shape, kernel, stride, out_sz) -> np.ndarray:
    """Adjoint of :func:`_windows`: gcols [N, *out, C, *kernel] -> padded input grad."""
    d = len(kernel)
    gxp = np.zeros(padded_shape)
    for off in np.ndindex(*kernel):
        idx = (slice(None), slice(None)) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sz)
        )
        gxp[idx] += np.moveaxis(gcols[(Ellipsis,) + off], -1, 1) if d else gcols
    return gxp


def _conv(x: Tensor, w: Tensor, stride, padding, d: int, op: str) -> Tensor:
    if x.ndim != d + 2 or w.ndim != d + 2:
        raise ValueError(f"{op}: expected rank-{d + 2} input and kernel, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"{op}: kernel {w.shape} expects {w.shape[1]} input channels, input {x.shape} has {x.shape[1]}"
        )
    stride, padding = _tuple(stride, d), _tuple(padding, d)
    if any(s < 1 for s in stride) or any(p < 0 for p in padding):
        raise ValueError(f"{op}: strides must be >= 1 and padding >= 0, got {stride}, {padding}")
    n, c = x.shape[:2]
    co, kernel = w.shape[0], w.shape[2:]
    out_sz = tuple((x.shape[2 + i] + 2 * padding[i] - kernel[i]) // stride[i] + 1 for i in range(d))
    if any(o < 1 for o in out_sz):
        raise ValueError(
            f"{op}: input {x.shape} with kernel {w.shape}, stride {stride}, padding {padding} "
            f"gives non-positive output extent {out_sz}"
        )
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(p, p) for p in padding]) if any(padding) else x.data
    rows = n * math.prod(out_sz)
    cols = _windows(xp, kernel, stride, d).reshape(rows, c * math.prod(kernel))
    wm = w.data.reshape(co, -1)
    out = np.moveaxis((cols @ wm.T).reshape(n, *out_sz, co), -1, 1)

    def backward(g):
        gm = np.moveaxis(g, 1, -1).reshape(rows, co)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (gm @ wm).reshape(n, *out_sz, c, *kernel)
            gxp = _scatter_windows(gcols, xp.shape, kernel, stride, out_sz)
            crop = (slice(None), slice(None)) + tuple(
                slice(p, p + x.shape[2 + i]) for i, p in enumerate(padding)
            )
            gx = gxp[crop]
        return gx, gw

    return make_result(out, op, (x, w), backward)


def conv3d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """x [N, C, T, H, W] * kernel [C_out, C, kt, kh, kw] -> [N, C_out, T', H', W']."""
    return _conv(x, kernel, stride, padding, 3, "conv3d")


def conv2d(x: Tensor, kernel: Tensor, stride=1, padding=0) -> Tensor:
    """x [N, C, F, T] * kernel [C_out, C, kf, kt] -> [N, C_out, F', T']."""
    return _conv(x, kernel, stride, padding, 2, "conv2d")


def max_pool(x: Tensor, kernel, stride, padding=0) -> Tensor:
    """Max pooling over every axis after [N, C]; padding behaves as -inf."""
    d = x.ndim - 2
    kernel, stride, padding = _tuple(kernel, d), _tuple(stride, d), _tuple(padding, d)
    n, c = x.shape[:2]
    out_sz = tuple((x.shape[2 + i] + 2 * padding[i] - kernel[i]) // stride[i] + 1 for i in range(d))
    if any(o < 1 for o in out_sz):
        raise ValueError(f"max_pool: input {x.shape} gives non-positive output extent {out_sz}")
    pads = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    xp = np.pad(x.data, pads, constant_values=-np.inf) if any(padding) else x.data
    k = math.prod(kernel)
    cols = _windows(xp, kernel, stride, d).reshape(n, *out_sz, c, k)
    arg = cols.argmax(axis=-1)
    out = np.moveaxis(np.take_along_axis(cols, arg[..., None], axis=-1)[..., 0], -1, 1)

    def backward(g):
        gcols = np.zeros((n, *out_sz, c, k))
        np.put_along_axis(gcols, arg[..., None], np.moveaxis(g, 1, -1)[..., None], axis=-1)
        gxp = _scatter_windows(gcols.reshape(n, *out_sz, c, *kernel), xp.shape, kernel, stride, out_sz)
        crop = (slice(None), slice(None)) + tuple(
            slice(p, p + x.shape[2 + i]) for i, p in enumerate(padding)
        )
        return (gxp[crop],)

    return make_result(np.ascontiguousarray(out), "max_pool", (x,), backward)


# ---------------------------------------------------------------- normalization

@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    count: int = 0

    @classmethod
    def zeros(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), 0)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    training: bool,
    running: RunningStats | None = None,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel normalization over every axis except 1."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} vs {c} channels")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        m = x.size // c
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if running is not None:
            unbiased = var * m / (m - 1) if m > 1 else var
            running.mean = (1.0 - momentum) * running.mean + momentum * mu
            running.var = (1.0 - momentum) * running.var + momentum * unbiased
            running.count += 1
    else:
        if running is None or running.count == 0:
            raise RuntimeError("batch_norm: eval mode requested before any statistics were recorded")
        mu, var = running.mean, running.var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.size // c
            gx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return make_result(out, "batch_norm", (x, gamma, beta), backward)


# ---------------------------------------------------------------- losses

def _labels(labels, k: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{y.min()}, {y.max()}]")
    return y


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ValueError(f"softmax_cross_entropy expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    y = _labels(labels, k)
    if y.size != n:
        raise ValueError(f"{n} logit rows but {y.size} labels")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(lse - z[np.arange(n), y])
    p = np.exp(z - lse[:, None])

    def backward(g):
        grad = p.copy()
        grad[np.arange(n), y] -= 1.0
        return (grad * (g / n),)

    return make_result(np.asarray(loss), "softmax_ce", (logits,), backward)


def sigmoid_bce(logits: Tensor, labels) -> Tensor:
    """Mean binary cross-entropy of a logit vector against 0/1 labels."""
    z = logits.data.reshape(-1)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if y.size != z.size:
        raise ValueError(f"{z.size} logits but {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("binary labels must be 0 or 1")
    n = z.size
    loss = np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z))))
    s = _sigmoid(z)

    def backward(g):
        return (((s - y) * (g / n)).reshape(logits.shape),)

    return make_result(np.asarray(loss), "sigmoid_bce", (logits,), backward)
