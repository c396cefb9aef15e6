"""Layer primitives built on :mod:`forge.tensor`."""
from __future__ import annotations

from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result, relu, sqrt  # noqa: F401  (re-exported)
from . import tensor as T

IntPair = Union[int, Tuple[int, int]]


class ShapeError(ValueError):
    """Operand dimensions do not fit the primitive."""


def pair(v: IntPair) -> Tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: Tuple[int, int]) -> np.ndarray:
    # (N, C, Ho, Wo, kh, kw) view
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride[0], ::stride[1]]


def _scatter_windows(dwin: np.ndarray, padded_shape, stride: Tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_windows`: accumulate window gradients into the input."""
    n, c, ho, wo, kh, kw = dwin.shape
    sh, sw = stride
    out = np.zeros(padded_shape, dtype=dwin.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + sh * (ho - 1) + 1:sh, j:j + sw * (wo - 1) + 1:sw] += dwin[..., i, j]
    return out


def _pad(x: np.ndarray, padding: Tuple[int, int], value: float = 0.0) -> np.ndarray:
    ph, pw = padding
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)), constant_values=value)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: IntPair = 1,
           padding: IntPair = 0, groups: int = 1) -> Tensor:
    """2D cross-correlation over an NCHW batch."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cg, kh, kw = weight.shape
    if cin % groups or cout % groups:
        raise ShapeError(f"channels in={cin} out={cout} not divisible by groups={groups}")
    if cg != cin // groups:
        raise ShapeError(f"weight expects {cg * groups} input channels, input has {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} does not match {cout} output channels")
    stride, padding = pair(stride), pair(padding)
    xp = _pad(x.data, padding)
    ho = conv_output_size(h, kh, stride[0], padding[0])
    wo = conv_output_size(w, kw, stride[1], padding[1])
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {xp.shape[2:]}")
    win = _windows(xp, kh, kw, stride)
    og = cout // groups
    wd = weight.data

    if groups == 1:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
        w2 = wd.reshape(cout, -1)
        out = (cols @ w2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    elif cg == 1 and og == 1:
        cols = None
        out = np.einsum("nchwij,cij->nchw", win, wd[:, 0], optimize=True)
    else:
        cols = None
        wins = win.reshape(n, groups, cg, ho, wo, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", wins, wd.reshape(groups, og, cg, kh, kw),
                        optimize=True).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if groups == 1:
            g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            gw = (g2.T @ cols).reshape(wd.shape)
            dwin = (g2 @ w2).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        elif cg == 1 and og == 1:
            gw = np.einsum("nchw,nchwij->cij", g, win, optimize=True)[:, None]
            dwin = np.einsum("nchw,cij->nchwij", g, wd[:, 0], optimize=True)
        else:
            gg = g.reshape(n, groups, og, ho, wo)
            wins = win.reshape(n, groups, cg, ho, wo, kh, kw)
            gw = np.einsum("ngohw,ngchwij->gocij", gg, wins, optimize=True).reshape(wd.shape)
            dwin = np.einsum("ngohw,gocij->ngchwij", gg, wd.reshape(groups, og, cg, kh, kw),
                             optimize=True).reshape(n, cin, ho, wo, kh, kw)
        dxp = _scatter_windows(dwin, xp.shape, stride)
        ph, pw = padding
        gx = dxp[:, :, ph:ph + h, pw:pw + w]
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs {weight.shape[0]} outputs")
        out = out + bias
    return out


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def global_avgpool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


def maxpool2d(x: Tensor, kernel_size: IntPair, stride: Optional[IntPair] = None,
              padding: IntPair = 0) -> Tensor:
    kh, kw = pair(kernel_size)
    stride = pair(stride if stride is not None else kernel_size)
    padding = pair(padding)
    xp = _pad(x.data, padding, value=-np.inf)
    win = _windows(xp, kh, kw, stride)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kh * kw)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        dwin = np.zeros((n, c, ho, wo, kh * kw), dtype=g.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dxp = _scatter_windows(dwin.reshape(n, c, ho, wo, kh, kw), xp.shape, stride)
        ph, pw = padding
        return (dxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]],)

    return make_result(np.ascontiguousarray(out), (x,), backward)


def avgpool2d(x: Tensor, kernel_size: IntPair, stride: Optional[IntPair] = None,
              padding: IntPair = 0) -> Tensor:
    kh, kw = pair(kernel_size)
    stride = pair(stride if stride is not None else kernel_size)
    padding = pair(padding)
    xp = _pad(x.data, padding)
    win = _windows(xp, kh, kw, stride)
    out = win.mean(axis=(-2, -1))
    scale = 1.0 / (kh * kw)

    def backward(g):
        dwin = np.broadcast_to((g * scale)[..., None, None], win.shape)
        dxp = _scatter_windows(dwin, xp.shape, stride)
        ph, pw = padding
        return (dxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]],)

    return make_result(np.ascontiguousarray(out, dtype=x.dtype), (x,), backward)


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: Tensor,
              running_var: Tensor, training: bool, momentum: float = 0.1,
              eps: float = 1e-5) -> Tensor:
    """Batch normalization over the channel axis (axis 1) of a 2D or 4D input.

    In training mode the batch statistics normalize the input and the running
    buffers are updated in place (unbiased variance, as in common frameworks).
    """
    if x.ndim not in (2, 4) or x.shape[1] != gamma.shape[0]:
        raise ShapeError(f"batchnorm: input {x.shape} vs {gamma.shape[0]} features")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
    if training:
        mu = x.mean(axis=axes, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=axes, keepdims=True)
        count = x.size // x.shape[1]
        with T.no_grad():
            running_mean.data *= 1 - momentum
            running_mean.data += momentum * mu.data.reshape(-1)
            unbiased = var.data.reshape(-1) * (count / max(count - 1, 1))
            running_var.data *= 1 - momentum
            running_var.data += momentum * unbiased
        xhat = centered / T.sqrt(var + eps)
    else:
        xhat = (x - running_mean.data.reshape(bshape)) / np.sqrt(running_var.data.reshape(bshape) + eps)
    return xhat * gamma.reshape(bshape) + beta.reshape(bshape)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), backward)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    labels = labels.astype(np.int64)
    logp = log_softmax(logits, axis=1)
    picked = logp.data[np.arange(n), labels]
    onehot = np.zeros_like(logp.data)
    onehot[np.arange(n), labels] = 1.0

    def backward(g):
        return (-g * onehot / n,)

    return make_result(np.asarray(-picked.mean(), dtype=logits.dtype), (logp,), backward)
