"""Layer primitives with explicit gradient rules.

All ops accept and return `Tensor`s. Convolution is cross-correlation (the
usual deep-learning convention) and is backed by an im2col/col2im pair so
the same code path serves single feature maps and agent stacks.
"""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, accumulate, make_op


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is fixed to 0."""
    mask = x.data > 0
    return make_op(np.where(mask, x.data, 0.0), (x,),
                   lambda g: accumulate(x, g * mask))


def _im2col(xp: np.ndarray, k: int, stride: int, oh: int, ow: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, c, k, k, oh, ow), (sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False)
    return np.ascontiguousarray(win.transpose(0, 4, 5, 1, 2, 3)).reshape(n, oh * ow, c * k * k)


def _col2im(gcols: np.ndarray, padded_shape, k: int, stride: int,
            oh: int, ow: int) -> np.ndarray:
    n, c, hp, wp = padded_shape
    g6 = gcols.reshape(n, oh, ow, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    gx = np.zeros(padded_shape)
    for ki in range(k):
        for kj in range(k):
            gx[:, :, ki:ki + stride * oh:stride, kj:kj + stride * ow:stride] += g6[:, :, ki, kj]
    return gx


def conv2d(x: Tensor, weight: Tensor, bias: Tensor,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with per-channel bias.

    `x` is [C_in, H, W] or [N, C_in, H, W] (the kernel is shared across the
    leading axis), `weight` is [C_out, C_in, k, k], `bias` is [C_out].
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"conv2d: weight must be [C_out, C_in, k, k], got {weight.shape}")
    k = weight.shape[2]
    if k % 2 != 1:
        raise ConfigError(f"conv2d: kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ConfigError(f"conv2d: invalid stride={stride} or padding={padding}")
    squeeze = x.ndim == 3
    if x.ndim not in (3, 4):
        raise ShapeError(f"conv2d: input must be 3- or 4-dimensional, got shape {x.shape}")
    xshape = (1, *x.shape) if squeeze else x.shape
    n, cin, h, w = xshape
    cout = weight.shape[0]
    if cin != weight.shape[1]:
        raise ShapeError(
            f"conv2d: input has {cin} channels but weight expects {weight.shape[1]}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: output would be {oh}x{ow} for input {h}x{w}, k={k}, "
            f"stride={stride}, padding={padding}")

    x4 = x.data.reshape(xshape)
    xp = np.pad(x4, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = _im2col(xp, k, stride, oh, ow)
    wmat = weight.data.reshape(cout, -1)
    y = cols @ wmat.T + bias.data
    out = y.transpose(0, 2, 1).reshape(n, cout, oh, ow)
    if squeeze:
        out = out.reshape(cout, oh, ow)

    def backward(g):
        g4 = g.reshape(n, cout, oh, ow)
        g2 = g4.reshape(n, cout, oh * ow).transpose(0, 2, 1)
        accumulate(bias, g4.sum(axis=(0, 2, 3)))
        accumulate(weight, np.einsum("npo,npk->ok", g2, cols).reshape(weight.shape))
        if x.requires_grad:
            gxp = _col2im(g2 @ wmat, xp.shape, k, stride, oh, ow)
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
            accumulate(x, gx.reshape(x.shape))

    return make_op(out, (x, weight, bias), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map along the last axis, broadcast over all leading axes."""
    if weight.ndim != 2:
        raise ShapeError(f"linear: weight must be 2-dimensional, got {weight.shape}")
    cout, cin = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"linear: input last axis {x.shape[-1]} != weight C_in {cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"linear: bias shape {bias.shape} != ({cout},)")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        g2 = g.reshape(-1, cout)
        accumulate(bias, g2.sum(axis=0))
        accumulate(weight, g2.T @ x.data.reshape(-1, cin))
        accumulate(x, (g2 @ weight.data).reshape(x.shape))

    return make_op(out, (x, weight, bias), backward)


def scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel affine transform of a [N, C, H, W] stack."""
    if x.ndim != 4:
        raise ShapeError(f"scale_shift: input must be [N, C, H, W], got {x.shape}")
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(
            f"scale_shift: scale {scale.shape} / shift {shift.shape} must be ({c},)")
    s = scale.data[None, :, None, None]
    out = s * x.data + shift.data[None, :, None, None]

    def backward(g):
        accumulate(x, g * s)
        accumulate(scale, (g * x.data).sum(axis=(0, 2, 3)))
        accumulate(shift, g.sum(axis=(0, 2, 3)))

    return make_op(out, (x, scale, shift), backward)


def agent_max_pool(x: Tensor) -> Tensor:
    """Elementwise maximum over the agent axis of a [N, C, H, W] stack.

    The gradient routes entirely to the winning element; ties break toward
    the lowest agent index (numpy argmax picks the first maximum).
    """
    if x.ndim != 4:
        raise ShapeError(f"agent_max_pool: input must be [N, C, H, W], got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("agent_max_pool: empty agent stack")
    idx = np.argmax(x.data, axis=0)
    out = np.take_along_axis(x.data, idx[None], axis=0)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx[None], g, axis=0)
        accumulate(x, gx)

    return make_op(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits_sum(logits: Tensor, targets: np.ndarray,
                        weights: np.ndarray) -> Tensor:
    """Weighted sum of binary cross-entropy terms, numerically stable.

    `targets` and `weights` are constants (no gradient flows into them).
    """
    z = logits.data
    per = weights * (np.maximum(z, 0.0) - z * targets + np.log1p(np.exp(-np.abs(z))))

    def backward(g):
        accumulate(logits, g * weights * (_sigmoid(z) - targets))

    return make_op(np.asarray(per.sum()), (logits,), backward)


def smooth_l1_sum(pred: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Masked sum of smooth-L1 terms (quadratic core, |e| - 0.5 tails)."""
    e = (pred.data - targets) * mask
    a = np.abs(e)
    per = np.where(a < 1.0, 0.5 * e * e, a - 0.5)

    def backward(g):
        accumulate(pred, g * mask * np.clip(e, -1.0, 1.0))

    return make_op(np.asarray(per.sum()), (pred,), backward)
