"""Straight-through binarization, Gumbel-Softmax and fake quantizers."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .functional import softmax
from .tensor import Tensor, as_tensor, make_result


def heaviside_ste(theta: Tensor, threshold: float = 0.5) -> Tensor:
    """Binarize ``theta`` (1 where ``theta >= threshold``).

    The backward pass is the identity, so the gradient reaches ``theta``
    unchanged whether the element was kept or dropped.
    """
    out = (theta.data >= threshold).astype(theta.dtype)
    return make_result(out, (theta,), lambda g: (g,))


def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax(logits: Tensor, tau: float = 1.0, noise: Optional[np.ndarray] = None) -> Tensor:
    """Tempered softmax of ``logits + noise``; no noise means plain softmax."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = logits if noise is None else logits + np.asarray(noise, dtype=logits.dtype)
    return softmax(z * (1.0 / tau), axis=-1)


def minmax_scale(w: np.ndarray, bits: int) -> float:
    qmax = 2 ** (bits - 1) - 1
    top = float(np.max(np.abs(w))) if w.size else 0.0
    return top / qmax if top > 0 else 1.0


def fake_quant_weight_minmax(w: Tensor, bits: int) -> Tensor:
    """Symmetric per-tensor min-max fake quantization.

    The scale is ``max|w| / (2**(bits-1) - 1)`` (1 for an all-zero tensor).
    Gradients pass straight through inside the clamp range.
    """
    if bits < 2:
        raise ValueError(f"bit-width must be >= 2, got {bits}")
    qmax = 2 ** (bits - 1) - 1
    qmin = -(2 ** (bits - 1))
    top = float(np.max(np.abs(w.data))) if w.size else 0.0
    if top > 0:
        q = w.data * (qmax / top)
        scale = top / qmax
    else:
        q = w.data
        scale = 1.0
    q = np.round(q)
    inside = (q >= qmin) & (q <= qmax)
    out = (np.clip(q, qmin, qmax) * scale).astype(w.dtype)
    return make_result(out, (w,), lambda g: (g * inside,))


def fake_quant_act_pact(x: Tensor, bits: int, alpha: Tensor, signed: bool = False) -> Tensor:
    """PACT activation fake quantization with a trainable clipping level.

    Unsigned: ``round(clamp(x, 0, a) / s) * s`` with ``s = a / (2**bits - 1)``.
    The signed variant clamps to ``[-a, a]`` with ``2**(bits-1) - 1`` positive
    levels, for edges whose values may be negative.
    """
    if bits < 2:
        raise ValueError(f"bit-width must be >= 2, got {bits}")
    alpha = as_tensor(alpha)
    a = float(alpha.data.reshape(-1)[0])
    if a <= 0:
        raise ValueError(f"PACT clipping level must be positive, got {a}")
    xd = x.data
    if signed:
        levels = 2 ** (bits - 1) - 1
        lo = -a
    else:
        levels = 2 ** bits - 1
        lo = 0.0
    scale = a / levels
    clipped = np.clip(xd, lo, a)
    out = (np.round(clipped / scale) * scale).astype(x.dtype)
    above = xd >= a
    below = xd <= lo if signed else np.zeros_like(above)
    inside = ((xd > lo) if signed else (xd >= lo)) & ~above

    def backward(g):
        galpha = (g * above).sum() - (g * below).sum()
        return g * inside, np.full(alpha.shape, galpha, dtype=alpha.dtype)

    return make_result(out, (x, alpha), backward)
