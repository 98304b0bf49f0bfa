"""Haar filter-bank analysis (wavelet pooling) and synthesis (wavelet unpooling).

Subbands are stacked along channels in fixed block order [LL | LH | HL | HH], each
block holding the source's C channels. Checkpoints depend on that order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from rsnet import ops
from rsnet.errors import ShapeError
from rsnet.tensor import Tensor

logger = logging.getLogger("rsnet.wavelet")

SUBBANDS = ("LL", "LH", "HL", "HH")

# Applied as correlations, exactly as written. Read at call time so the
# self-check can be pointed at a corrupted bank.
FILTER_BANK = np.array(
    [
        [[0.5, 0.5], [0.5, 0.5]],
        [[-0.5, -0.5], [0.5, 0.5]],
        [[-0.5, 0.5], [-0.5, 0.5]],
        [[0.5, -0.5], [-0.5, 0.5]],
    ],
    dtype=np.float64,
)

AGGREGATES = ("stack", "sum")


def gram_matrix(bank: np.ndarray | None = None) -> np.ndarray:
    flat = (FILTER_BANK if bank is None else bank).reshape(4, 4)
    return flat @ flat.T


@dataclass(frozen=True)
class SubbandTensor:
    """Analysis output: ``tensor`` is B x 4C x H/2 x W/2; ``padded`` is the (bottom, right) zero padding added first."""

    tensor: Tensor
    channels: int
    padded: tuple[int, int] = (0, 0)

    def block(self, name: str) -> Tensor:
        j = SUBBANDS.index(name)
        return self.tensor[:, j * self.channels:(j + 1) * self.channels]


def _interleaved_weight(channels: int, dtype) -> Tensor:
    # Group c of a depthwise conv emits its four subbands as channels 4c..4c+3.
    bank = FILTER_BANK.astype(dtype)[:, None]
    return Tensor(np.tile(bank, (channels, 1, 1, 1)))


def _block_order(channels: int) -> np.ndarray:
    # perm[j*C + c] = 4c + j
    return np.arange(4 * channels).reshape(channels, 4).T.reshape(-1)


def haar_analysis(x: Tensor) -> SubbandTensor:
    if x.ndim != 4:
        raise ShapeError(f"haar_analysis: expected a (B, C, H, W) tensor, got {x.shape}")
    batch, channels, height, width = x.shape
    if height == 0 or width == 0 or channels == 0:
        raise ShapeError(f"haar_analysis: empty input {x.shape}")
    padded = (height % 2, width % 2)
    if any(padded):
        logger.warning("odd spatial size %dx%d zero-padded to %dx%d before wavelet analysis",
                       height, width, height + padded[0], width + padded[1])
        x = ops.pad_bottom_right(x, *padded)
    interleaved = ops.conv2d(x, _interleaved_weight(channels, x.dtype), stride=2, groups=channels)
    return SubbandTensor(interleaved[:, _block_order(channels)], channels, padded)


def haar_synthesis(s: SubbandTensor | Tensor) -> Tensor:
    """Sum of stride-2 transposed convolutions of each subband with its own filter.

    Given a ``SubbandTensor`` the analysis padding is cropped away again, making this
    an exact left inverse of ``haar_analysis`` for any input size.
    """
    tensor = s.tensor if isinstance(s, SubbandTensor) else s
    if tensor.ndim != 4:
        raise ShapeError(f"haar_synthesis: expected a (B, 4C, H, W) tensor, got {tensor.shape}")
    if tensor.shape[1] % 4:
        raise ShapeError(f"haar_synthesis: channel count {tensor.shape[1]} is not divisible by 4")
    channels = tensor.shape[1] // 4
    inverse = np.argsort(_block_order(channels))
    interleaved = tensor[:, inverse]
    out = ops.conv_transpose2d(interleaved, _interleaved_weight(channels, tensor.dtype), stride=2, groups=channels)
    if isinstance(s, SubbandTensor) and any(s.padded):
        height, width = out.shape[2] - s.padded[0], out.shape[3] - s.padded[1]
        out = out[:, :, :height, :width]
    return out


def wavelet_pool(
    x: Tensor,
    pointwise: Tensor,
    bias: Tensor | None = None,
    aggregate: str = "stack",
) -> Tensor:
    """Haar analysis followed by a learned 1x1 channel mix; output is B x c_out x H/2 x W/2.

    ``stack`` feeds all 4C subband channels to the 1x1 conv; ``sum`` adds the four
    subbands first and mixes only C channels.
    """
    if aggregate not in AGGREGATES:
        raise ValueError(f"wavelet aggregate must be one of {AGGREGATES}, got {aggregate!r}")
    channels = x.shape[1]
    expected = 4 * channels if aggregate == "stack" else channels
    if pointwise.ndim != 4 or pointwise.shape[1:] != (expected, 1, 1):
        raise ShapeError(f"wavelet_pool: pointwise weight must be (c_out, {expected}, 1, 1), got {pointwise.shape}")
    subbands = haar_analysis(x)
    if aggregate == "stack":
        mixed_in = subbands.tensor
    else:
        mixed_in = subbands.block("LL")
        for name in SUBBANDS[1:]:
            mixed_in = ops.elementwise_add(mixed_in, subbands.block(name))
    return ops.conv2d(mixed_in, pointwise, bias)


def wavelet_unpool(x: Tensor) -> Tensor:
    """Parameter-free synthesis: B x 4k x H x W -> B x k x 2H x 2W."""
    return haar_synthesis(x)
