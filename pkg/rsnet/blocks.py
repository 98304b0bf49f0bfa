"""The learned RSNet blocks: wavelet pooling units, ContextGuided, Star, StarFusion and the LS head."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from rsnet import ops
from rsnet.errors import ConfigError, ShapeError
from rsnet.layers import CSP, BatchNorm2d, Conv2d, ConvNormAct, Module, ModuleList, Scale
from rsnet.rng import Rng
from rsnet.tensor import Tensor, mul
from rsnet.wavelet import AGGREGATES, wavelet_pool, wavelet_unpool

logger = logging.getLogger("rsnet.blocks")

# Logit of a 0.01 prior.
CLS_PRIOR_BIAS = -4.59


class WaveletPool(Module):
    """Fixed Haar analysis, then a learned 1x1 mix to ``c_out`` channels at half resolution."""

    kind = "wavelet_pool"

    def __init__(self, c_in: int, c_out: int, aggregate: str = "stack", bias: bool = True, *, rng: Rng):
        super().__init__()
        if aggregate not in AGGREGATES:
            raise ConfigError(f"wavelet_aggregate must be one of {'|'.join(AGGREGATES)}, got {aggregate!r}")
        self.aggregate = aggregate
        self.c_in, self.c_out = c_in, c_out
        mixed = 4 * c_in if aggregate == "stack" else c_in
        self.pointwise = Conv2d(mixed, c_out, 1, bias=bias, rng=rng.split("pointwise"))

    def forward(self, x):
        return wavelet_pool(x, self.pointwise.weight, self.pointwise.bias, self.aggregate)

    def trace(self, shape, trace):
        c, h, w = shape
        ho, wo = (h + 1) // 2, (w + 1) // 2
        mixed = 4 * c if self.aggregate == "stack" else c
        params = self.c_out * mixed + (self.c_out if self.pointwise.bias is not None else 0)
        # Fixed filter bank: four taps per subband output.
        macs = 4 * 4 * c * ho * wo + self.c_out * mixed * ho * wo
        out = (self.c_out, ho, wo)
        trace.add(self, params, macs, out)
        return out


class WaveletUnPool(Module):
    kind = "wavelet_unpool"

    def forward(self, x):
        return wavelet_unpool(x)

    def trace(self, shape, trace):
        c, h, w = shape
        if c % 4:
            raise ShapeError(f"{self.path}: {c} channels cannot be read as four subbands")
        out = (c // 4, 2 * h, 2 * w)
        trace.add(self, 0, 4 * out[0] * out[1] * out[2], out)
        return out


class Upsample(Module):
    """Nearest-neighbour 2x upsampling (used only by the non-wavelet neck variant)."""

    kind = "upsample"

    def forward(self, x):
        return ops.upsample_nearest2x(x)

    def trace(self, shape, trace):
        c, h, w = shape
        out = (c, 2 * h, 2 * w)
        trace.add(self, 0, 0, out)
        return out


class GlobalGate(Module):
    """Squeeze-and-excite channel gate: pool, reduce, ReLU, expand, sigmoid, scale."""

    kind = "global_gate"

    def __init__(self, channels: int, reduction: int = 16, *, rng: Rng):
        super().__init__()
        hidden = max(channels // reduction, 1)
        self.channels = channels
        self.reduce = Conv2d(channels, hidden, 1, bias=True, rng=rng.split("reduce"))
        self.expand = Conv2d(hidden, channels, 1, bias=True, rng=rng.split("expand"))

    def gate(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.expand(ops.relu(self.reduce(ops.global_avg_pool(x)))))

    def forward(self, x):
        return mul(x, self.gate(x))

    def trace(self, shape, trace):
        c, h, w = shape
        pooled = self.reduce.trace((c, 1, 1), trace)
        self.expand.trace(pooled, trace)
        return shape


class ContextGuided(Module):
    """Local depthwise branch and dilated surrounding branch, joined, normalized, gated,
    then added to the (projected) input."""

    kind = "context_guided"

    def __init__(self, c_in: int, c_out: int, dilation: int = 2, reduction: int = 16, *, rng: Rng):
        super().__init__()
        if c_out % 2:
            raise ConfigError(f"context-guided block needs an even output width, got {c_out}")
        if dilation < 1:
            raise ConfigError(f"context-guided dilation must be >= 1, got {dilation}")
        n = c_out // 2
        self.c_in, self.c_out = c_in, c_out
        self.conv1x1 = ConvNormAct(c_in, n, 1, rng=rng.split("conv1x1"))
        self.local = Conv2d(n, n, 3, groups=n, bias=True, rng=rng.split("local"))
        self.surround = Conv2d(n, n, 3, dilation=dilation, groups=n, bias=True, rng=rng.split("surround"))
        self.norm = BatchNorm2d(c_out)
        self.glo = GlobalGate(c_out, reduction, rng=rng.split("glo"))
        self.shortcut = None if c_in == c_out else ConvNormAct(c_in, c_out, 1, act=None, rng=rng.split("shortcut"))

    def forward(self, x):
        y = self.conv1x1(x)
        joint = ops.silu(self.norm(ops.concat_channels([self.local(y), self.surround(y)])))
        residual = x if self.shortcut is None else self.shortcut(x)
        return ops.elementwise_add(residual, self.glo(joint))

    def trace(self, shape, trace):
        c, h, w = shape
        y = self.conv1x1.trace(shape, trace)
        local = self.local.trace(y, trace)
        self.surround.trace(y, trace)
        joint = self.norm.trace((2 * local[0], local[1], local[2]), trace)
        self.glo.trace(joint, trace)
        if self.shortcut is not None:
            self.shortcut.trace(shape, trace)
        return joint


class Star(Module):
    """Depthwise 7x7, two 1x1 expansions multiplied through ReLU6, project back, depthwise 7x7,
    residual add with dropout on the new branch."""

    kind = "star"

    def __init__(self, channels: int, mlp_ratio: int = 3, drop: float = 0.0, *, rng: Rng):
        super().__init__()
        if not 0 <= drop < 1:
            raise ConfigError(f"star dropout must be in [0, 1), got {drop}")
        hidden = mlp_ratio * channels
        if hidden != int(hidden) or hidden < 1:
            raise ConfigError(f"star expansion {mlp_ratio} x {channels} is not a positive integer width")
        hidden = int(hidden)
        self.channels = channels
        self.drop = drop
        self.dwconv = ConvNormAct(channels, channels, 7, groups=channels, act=None, rng=rng.split("dwconv"))
        self.f1 = Conv2d(channels, hidden, 1, bias=True, rng=rng.split("f1"))
        self.f2 = Conv2d(channels, hidden, 1, bias=True, rng=rng.split("f2"))
        self.g = ConvNormAct(hidden, channels, 1, act=None, rng=rng.split("g"))
        self.dwconv2 = Conv2d(channels, channels, 7, groups=channels, bias=True, rng=rng.split("dwconv2"))
        self.dropout_rng = rng.split("dropout")
        self.step = 0
        self._calls = 0

    def at_step(self, step: int) -> None:
        """Dropout masks are keyed by (step, call within the step), not by a running stream."""
        self.step = step
        self._calls = 0

    def _dropout_stream(self) -> Rng | None:
        if self.mode == "eval" or self.drop == 0:
            return None
        stream = self.dropout_rng.split(f"step{self.step}.call{self._calls}")
        self._calls += 1
        return stream

    def new_features(self, x: Tensor) -> Tensor:
        y = self.dwconv(x)
        y = ops.elementwise_mul(ops.relu6(self.f1(y)), self.f2(y))
        return self.dwconv2(self.g(y))

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ShapeError(f"{self.path}: expects {self.channels} channels, got {x.shape[1]}")
        new = ops.dropout(self.new_features(x), self.drop, self.mode, self._dropout_stream())
        return ops.elementwise_add(x, new)

    def trace(self, shape, trace):
        y = self.dwconv.trace(shape, trace)
        hidden = self.f1.trace(y, trace)
        self.f2.trace(y, trace)
        return self.dwconv2.trace(self.g.trace(hidden, trace), trace)


class StarFusion(CSP):
    """CSP unit whose inner blocks are Star blocks; with ``n=0`` only the split/fuse convs remain."""

    kind = "star_fusion"

    def __init__(self, c_in: int, c_out: int, n: int = 1, mlp_ratio: int = 3, drop: float = 0.0, *, rng: Rng):
        super().__init__(c_in, c_out, n, block=lambda c, rng: Star(c, mlp_ratio, drop, rng=rng), rng=rng)


class HeadTower(Module):
    """Two 3x3 conv + group-norm + SiLU units and the 1x1 box and class projections."""

    kind = "head_tower"

    def __init__(self, hidden: int, num_classes: int, *, rng: Rng):
        super().__init__()
        self.convs = ModuleList(
            ConvNormAct(hidden, hidden, 3, norm="gn", rng=rng.split(f"conv{i}")) for i in range(2)
        )
        self.box = Conv2d(hidden, 4, 1, bias=True, rng=rng.split("box"))
        self.cls = Conv2d(hidden, num_classes, 1, bias=True, rng=rng.split("cls"))
        self.cls.bias.assign(np.full(num_classes, CLS_PRIOR_BIAS, dtype=np.float32))

    def forward(self, x):
        for conv in self.convs:
            x = conv(x)
        return self.box(x), self.cls(x)

    def trace(self, shape, trace):
        for conv in self.convs:
            shape = conv.trace(shape, trace)
        self.box.trace(shape, trace)
        return self.cls.trace(shape, trace)


class LSHead(Module):
    """Per-level 1x1 group-norm adapters feeding one tower shared by every level.

    With ``shared=False`` each level gets its own tower (the unshared comparison head).
    Box logits are multiplied by a learnable per-level scale.
    """

    kind = "ls_head"

    def __init__(self, in_channels: Sequence[int], hidden: int, num_classes: int = 1, shared: bool = True, *, rng: Rng):
        super().__init__()
        self.in_channels = tuple(in_channels)
        self.num_classes = num_classes
        self.shared = shared
        self.adapters = ModuleList(
            ConvNormAct(c, hidden, 1, norm="gn", rng=rng.split(f"adapter{i}")) for i, c in enumerate(in_channels)
        )
        if shared:
            tower = HeadTower(hidden, num_classes, rng=rng.split("tower"))
            self.towers = ModuleList(tower for _ in in_channels)
        else:
            self.towers = ModuleList(
                HeadTower(hidden, num_classes, rng=rng.split(f"tower{i}")) for i in range(len(in_channels))
            )
        self.scales = ModuleList(Scale() for _ in in_channels)

    def forward(self, features: Sequence[Tensor]) -> list[tuple[Tensor, Tensor]]:
        if len(features) != len(self.in_channels):
            raise ShapeError(f"{self.path or 'head'}: expected {len(self.in_channels)} levels, got {len(features)}")
        outputs = []
        for x, adapter, tower, scale in zip(features, self.adapters, self.towers, self.scales):
            box, cls = tower(adapter(x))
            outputs.append((scale(box), cls))
        return outputs

    def trace_levels(self, shapes, trace) -> list:
        outs = []
        for shape, adapter, tower, scale in zip(shapes, self.adapters, self.towers, self.scales):
            hidden = adapter.trace(shape, trace)
            cls = tower.trace(hidden, trace)
            scale.trace((4, hidden[1], hidden[2]), trace)
            outs.append(cls)
        return outs
