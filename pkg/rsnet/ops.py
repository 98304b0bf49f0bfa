"""Forward ops with their backward rules, on (batch, channels, height, width) tensors."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from rsnet.errors import ShapeError
from rsnet.rng import Rng
from rsnet.tensor import Tensor, make

BN_EPS = 1e-5
GN_EPS = 1e-5


def _require_rank4(op: str, x: Tensor) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op}: expected a (B, C, H, W) tensor, got shape {x.shape}")


def conv_output_size(size: int, kernel: int, stride: int, pad: int, dilation: int) -> int:
    return (size + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, dilation: int) -> np.ndarray:
    """Strided view of shape (B, C, Ho, Wo, kh, kw) over an already padded input."""
    eh = dilation * (kh - 1) + 1
    ew = dilation * (kw - 1) + 1
    view = sliding_window_view(x, (eh, ew), axis=(2, 3))
    return view[:, :, ::stride, ::stride, ::dilation, ::dilation]


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _conv_forward(x, w, stride, pad, dilation, groups) -> np.ndarray:
    batch, channels = x.shape[:2]
    out_channels, group_in, kh, kw = w.shape
    win = _windows(_pad(x, pad), kh, kw, stride, dilation)
    ho, wo = win.shape[2:4]
    win = win.reshape(batch, groups, group_in, ho, wo, kh, kw)
    wg = w.reshape(groups, out_channels // groups, group_in, kh, kw)
    out = np.einsum("bgchwij,gocij->bgohw", win, wg, optimize=True)
    return out.reshape(batch, out_channels, ho, wo)


def _conv_weight_grad(x, grad_out, w_shape, stride, pad, dilation, groups) -> np.ndarray:
    batch = x.shape[0]
    out_channels, group_in, kh, kw = w_shape
    win = _windows(_pad(x, pad), kh, kw, stride, dilation)
    ho, wo = win.shape[2:4]
    win = win.reshape(batch, groups, group_in, ho, wo, kh, kw)
    g5 = grad_out.reshape(batch, groups, out_channels // groups, ho, wo)
    grad = np.einsum("bgchwij,bgohw->gocij", win, g5, optimize=True)
    return grad.reshape(w_shape)


def _conv_input_grad(grad_out, w, x_shape, stride, pad, dilation, groups) -> np.ndarray:
    """Scatter ``grad_out`` back through the filter; the exact adjoint of ``_conv_forward``."""
    batch, channels, height, width = x_shape
    out_channels, group_in, kh, kw = w.shape
    ho, wo = grad_out.shape[2:]
    padded = np.zeros((batch, groups, group_in, height + 2 * pad, width + 2 * pad), dtype=grad_out.dtype)
    g5 = grad_out.reshape(batch, groups, out_channels // groups, ho, wo)
    wg = w.reshape(groups, out_channels // groups, group_in, kh, kw)
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("bgohw,goc->bgchw", g5, wg[..., i, j], optimize=True)
            top, left = i * dilation, j * dilation
            padded[:, :, :, top:top + stride * (ho - 1) + 1:stride, left:left + stride * (wo - 1) + 1:stride] += contrib
    padded = padded.reshape(batch, channels, height + 2 * pad, width + 2 * pad)
    return padded[:, :, pad:pad + height, pad:pad + width]


def conv2d(
    x: Tensor,
    w: Tensor,
    b: Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    _require_rank4("conv2d", x)
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (C_out, C_in/groups, kH, kW), got {w.shape}")
    if stride < 1 or dilation < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride and dilation must be positive and pad non-negative "
                         f"(stride={stride}, dilation={dilation}, pad={pad})")
    channels = x.shape[1]
    out_channels, group_in, kh, kw = w.shape
    if groups < 1 or channels % groups or out_channels % groups:
        raise ShapeError(f"conv2d: groups={groups} must divide input ({channels}) and output ({out_channels}) channels")
    if group_in != channels // groups:
        raise ShapeError(f"conv2d: weight expects {group_in * groups} input channels, input has {channels}")
    if b is not None and b.shape != (out_channels,):
        raise ShapeError(f"conv2d: bias must have shape ({out_channels},), got {b.shape}")
    ho = conv_output_size(x.shape[2], kh, stride, pad, dilation)
    wo = conv_output_size(x.shape[3], kw, stride, pad, dilation)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} (dilation {dilation}) does not fit input {x.shape[2:]} with pad {pad}")

    out = _conv_forward(x.data, w.data, stride, pad, dilation, groups)
    if b is not None:
        out = out + b.data.reshape(1, -1, 1, 1)

    def backward_fn(g):
        grads = [
            _conv_input_grad(g, w.data, x.shape, stride, pad, dilation, groups) if x.requires_grad else None,
            _conv_weight_grad(x.data, g, w.shape, stride, pad, dilation, groups) if w.requires_grad else None,
        ]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return make("conv2d", out, inputs, backward_fn)


def conv_transpose2d(x: Tensor, w: Tensor, stride: int = 1, groups: int = 1) -> Tensor:
    """Transposed convolution; ``w`` has shape (C_in, C_out/groups, kH, kW)."""
    _require_rank4("conv_transpose2d", x)
    if w.ndim != 4:
        raise ShapeError(f"conv_transpose2d: weight must be (C_in, C_out/groups, kH, kW), got {w.shape}")
    if stride < 1:
        raise ShapeError(f"conv_transpose2d: stride must be >= 1, got {stride}")
    in_channels, group_out, kh, kw = w.shape
    if x.shape[1] != in_channels:
        raise ShapeError(f"conv_transpose2d: weight expects {in_channels} input channels, input has {x.shape[1]}")
    if groups < 1 or in_channels % groups:
        raise ShapeError(f"conv_transpose2d: groups={groups} must divide {in_channels} input channels")
    batch, _, height, width = x.shape
    out_shape = (batch, group_out * groups, (height - 1) * stride + kh, (width - 1) * stride + kw)
    out = _conv_input_grad(x.data, w.data, out_shape, stride, 0, 1, groups)

    def backward_fn(g):
        return (
            _conv_forward(g, w.data, stride, 0, 1, groups) if x.requires_grad else None,
            _conv_weight_grad(g, x.data, w.shape, stride, 0, 1, groups) if w.requires_grad else None,
        )

    return make("conv_transpose2d", out, (x, w), backward_fn)


@dataclass
class RunningStats:
    """Batch-norm running estimates, updated in place by training-mode calls."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, momentum: float = 0.1, dtype=np.float32) -> "RunningStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), momentum)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    mode: str = "train",
    eps: float = BN_EPS,
) -> Tensor:
    _require_rank4("batch_norm", x)
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({channels},), got {gamma.shape}/{beta.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'eval', got {mode!r}")
    shape = (1, channels, 1, 1)

    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        m = stats.momentum
        stats.mean[...] = (1 - m) * stats.mean + m * mean
        unbiased = var * count / max(count - 1, 1)
        stats.var[...] = (1 - m) * stats.var + m * unbiased
    else:
        mean = stats.mean.copy()
        var = stats.var.copy()

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data.reshape(shape)
        if mode == "eval":
            return dxhat * inv_std.reshape(shape), dgamma, dbeta
        n = x.shape[0] * x.shape[2] * x.shape[3]
        dx = (inv_std.reshape(shape) / n) * (
            n * dxhat
            - dxhat.sum(axis=(0, 2, 3), keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        )
        return dx, dgamma, dbeta

    return make("batch_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), backward_fn)


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = GN_EPS) -> Tensor:
    _require_rank4("group_norm", x)
    batch, channels, height, width = x.shape
    if num_groups < 1 or channels % num_groups:
        raise ShapeError(f"group_norm: {num_groups} groups do not divide {channels} channels")
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"group_norm: gamma/beta must have shape ({channels},)")
    shape = (1, channels, 1, 1)
    grouped = x.data.reshape(batch, num_groups, -1)
    mean = grouped.mean(axis=2, keepdims=True)
    var = grouped.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat_g = (grouped - mean) * inv_std
    xhat = xhat_g.reshape(x.shape)
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = (g * gamma.data.reshape(shape)).reshape(batch, num_groups, -1)
        n = dxhat.shape[2]
        dx = (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=2, keepdims=True) - xhat_g * (dxhat * xhat_g).sum(axis=2, keepdims=True)
        )
        return dx.reshape(x.shape), dgamma, dbeta

    return make("group_norm", out.astype(x.dtype, copy=False), (x, gamma, beta), backward_fn)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def relu6(x: Tensor) -> Tensor:
    # Subgradient at the kinks 0 and 6 is 0.
    mask = (x.data > 0) & (x.data < 6)
    return make("relu6", np.clip(x.data, 0, 6), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)
    return make("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def silu(x: Tensor) -> Tensor:
    s = expit(x.data)
    return make("silu", x.data * s, (x,), lambda g: (g * s * (1 + x.data * (1 - s)),))


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def elementwise_mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_mul", a, b)
    return make("elementwise_mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def elementwise_add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("elementwise_add", a, b)
    return make("elementwise_add", a.data + b.data, (a, b), lambda g: (g, g))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ShapeError("concat_channels: nothing to concatenate")
    for t in tensors:
        _require_rank4("concat_channels", t)
    first = tensors[0]
    for t in tensors[1:]:
        if (t.shape[0], t.shape[2], t.shape[3]) != (first.shape[0], first.shape[2], first.shape[3]):
            raise ShapeError(f"concat_channels: batch and spatial dims must match, got {first.shape} and {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def backward_fn(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return make("concat_channels", out, tuple(tensors), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_rank4("global_avg_pool", x)
    count = x.shape[2] * x.shape[3]
    out = x.data.mean(axis=(2, 3), keepdims=True)
    return make("global_avg_pool", out, (x,), lambda g: (np.broadcast_to(g / count, x.shape).copy(),))


def dropout(x: Tensor, p: float, mode: str, rng: Rng | None = None) -> Tensor:
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval" or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs a random stream")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1 - p)
    return make("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def pad_bottom_right(x: Tensor, bottom: int, right: int) -> Tensor:
    _require_rank4("pad_bottom_right", x)
    if bottom == 0 and right == 0:
        return x
    height, width = x.shape[2:]
    out = np.pad(x.data, ((0, 0), (0, 0), (0, bottom), (0, right)))
    return make("pad", out, (x,), lambda g: (g[:, :, :height, :width],))


def upsample_nearest2x(x: Tensor) -> Tensor:
    _require_rank4("upsample_nearest2x", x)
    batch, channels, height, width = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return make(
        "upsample_nearest2x",
        out,
        (x,),
        lambda g: (g.reshape(batch, channels, height, 2, width, 2).sum(axis=(3, 5)),),
    )


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise binary cross-entropy on logits, numerically stable for large |x|."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets {targets.shape} vs logits {logits.shape}")
    x = logits.data
    out = np.maximum(x, 0) - x * targets + np.log1p(np.exp(-np.abs(x)))
    return make("bce_with_logits", out, (logits,), lambda g: (g * (expit(x) - targets),))
