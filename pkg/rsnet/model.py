"""Full detector assembly: backbone, neck and head, plus parameter and FLOP accounting."""
from __future__ import annotations

import logging
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from rsnet import ops
from rsnet.arch import ArchConfig
from rsnet.blocks import ContextGuided, LSHead, Star, StarFusion, Upsample, WaveletPool, WaveletUnPool
from rsnet.errors import ConfigError, ShapeError
from rsnet.layers import CSP, ConvNormAct, CountRow, Module, ModuleList, Shape, Trace
from rsnet.rng import Rng
from rsnet.tensor import Tensor

logger = logging.getLogger("rsnet.model")

# Highest-resolution neck output, the one small targets are detected on.
DEFAULT_HEATMAP_LAYER = "neck.top2"


class Stage(Module):
    kind = "stage"

    def __init__(self, cfg: ArchConfig, c_in: int, c_out: int, depth: int, *, rng: Rng):
        super().__init__()
        if cfg.downsample == "wavelet":
            self.down = WaveletPool(c_in, c_out, cfg.wavelet_aggregate, rng=rng.split("down"))
        else:
            self.down = ConvNormAct(c_in, c_out, 3, 2, rng=rng.split("down"))
        if cfg.stage_block == "cgb":
            self.blocks = ModuleList(
                ContextGuided(c_out, c_out, cfg.dilation, cfg.reduction, rng=rng.split(f"cgb{i}")) for i in range(depth)
            )
        else:
            self.blocks = ModuleList([CSP(c_out, c_out, depth, rng=rng.split("c2f"))])

    def forward(self, x):
        x = self.down(x)
        for block in self.blocks:
            x = block(x)
        return x

    def trace(self, shape, trace):
        shape = self.down.trace(shape, trace)
        for block in self.blocks:
            shape = block.trace(shape, trace)
        return shape


class Backbone(Module):
    kind = "backbone"

    def __init__(self, cfg: ArchConfig, *, rng: Rng):
        super().__init__()
        s0, s1 = cfg.stem
        self.stem0 = ConvNormAct(cfg.in_channels, s0, 3, 2, rng=rng.split("stem0"))
        self.stem1 = ConvNormAct(s0, s1, 3, 2, rng=rng.split("stem1"))
        self.stem_csp = CSP(s1, s1, cfg.stem_depth, rng=rng.split("stem_csp")) if cfg.stem_depth else None
        widths = (s1, *cfg.stages)
        self.stages = ModuleList(
            Stage(cfg, widths[i], widths[i + 1], cfg.depths[i], rng=rng.split(f"stage{i}")) for i in range(3)
        )

    def _stem(self):
        return [m for m in (self.stem0, self.stem1, self.stem_csp) if m is not None]

    def forward(self, x) -> list[Tensor]:
        for module in self._stem():
            x = module(x)
        taps = []
        for stage in self.stages:
            x = stage(x)
            taps.append(x)
        return taps

    def trace_levels(self, shape, trace) -> list[Shape]:
        for module in self._stem():
            shape = module.trace(shape, trace)
        taps = []
        for stage in self.stages:
            shape = stage.trace(shape, trace)
            taps.append(shape)
        return taps


def _crop_to(x: Tensor, like: Tensor) -> Tensor:
    height, width = like.shape[2:]
    if x.shape[2:] == (height, width):
        return x
    return x[:, :, :height, :width]


class Neck(Module):
    """Top-down then bottom-up fusion over the three backbone taps.

    top1 = fuse(up(P5), P4); top2 = fuse(up(top1), P3);
    bottom1 = fuse(down(top2), top1); bottom2 = fuse(down(bottom1), P5).
    Outputs are (top2, bottom1, bottom2) at strides 8, 16, 32.
    """

    kind = "neck"
    EDGES = (
        ("backbone.stages.2", "neck.up1"),
        ("neck.up1", "neck.top1"),
        ("backbone.stages.1", "neck.top1"),
        ("neck.top1", "neck.up2"),
        ("neck.up2", "neck.top2"),
        ("backbone.stages.0", "neck.top2"),
        ("neck.top2", "neck.down1"),
        ("neck.down1", "neck.bottom1"),
        ("neck.top1", "neck.bottom1"),
        ("neck.bottom1", "neck.down2"),
        ("neck.down2", "neck.bottom2"),
        ("backbone.stages.2", "neck.bottom2"),
    )
    OUTPUTS = ("neck.top2", "neck.bottom1", "neck.bottom2")

    def __init__(self, cfg: ArchConfig, *, rng: Rng):
        super().__init__()
        c3, c4, c5 = cfg.stages
        n0, n1, n2 = cfg.neck_widths
        if cfg.neck == "wsf":
            depth = cfg.neck_depth if cfg.neck_star else 0

            def fuse(c_in, c_out, name):
                return StarFusion(c_in, c_out, depth, cfg.mlp_ratio, cfg.star_drop, rng=rng.split(name))

            self.up1 = WaveletUnPool()
            self.up2 = WaveletUnPool()
            self.down1 = WaveletPool(n0, n0, cfg.wavelet_aggregate, rng=rng.split("down1"))
            self.down2 = WaveletPool(n1, n1, cfg.wavelet_aggregate, rng=rng.split("down2"))
            up1_channels, up2_channels = c5 // 4, n1 // 4
        else:
            def fuse(c_in, c_out, name):
                return CSP(c_in, c_out, cfg.neck_depth, rng=rng.split(name))

            self.up1 = Upsample()
            self.up2 = Upsample()
            self.down1 = ConvNormAct(n0, n0, 3, 2, rng=rng.split("down1"))
            self.down2 = ConvNormAct(n1, n1, 3, 2, rng=rng.split("down2"))
            up1_channels, up2_channels = c5, n1
        self.top1 = fuse(up1_channels + c4, n1, "top1")
        self.top2 = fuse(up2_channels + c3, n0, "top2")
        self.bottom1 = fuse(n0 + n1, n1, "bottom1")
        self.bottom2 = fuse(n1 + c5, n2, "bottom2")

    def forward(self, taps: list[Tensor]) -> list[Tensor]:
        p3, p4, p5 = taps
        top1 = self.top1(ops.concat_channels([_crop_to(self.up1(p5), p4), p4]))
        top2 = self.top2(ops.concat_channels([_crop_to(self.up2(top1), p3), p3]))
        bottom1 = self.bottom1(ops.concat_channels([self.down1(top2), top1]))
        bottom2 = self.bottom2(ops.concat_channels([self.down2(bottom1), p5]))
        return [top2, bottom1, bottom2]

    def trace_levels(self, taps: list[Shape], trace: Trace) -> list[Shape]:
        p3, p4, p5 = taps

        def cat(a: Shape, b: Shape) -> Shape:
            return (a[0] + b[0], b[1], b[2])

        top1 = self.top1.trace(cat(self.up1.trace(p5, trace), p4), trace)
        top2 = self.top2.trace(cat(self.up2.trace(top1, trace), p3), trace)
        bottom1 = self.bottom1.trace(cat(self.down1.trace(top2, trace), top1), trace)
        bottom2 = self.bottom2.trace(cat(self.down2.trace(bottom1, trace), p5), trace)
        return [top2, bottom1, bottom2]


class RSNet(Module):
    kind = "rsnet"

    def __init__(self, cfg: ArchConfig, seed: int = 0):
        super().__init__()
        rng = Rng(seed, "model")
        self.cfg = cfg
        self.seed = seed
        self.backbone = Backbone(cfg, rng=rng.split("backbone"))
        self.neck = Neck(cfg, rng=rng.split("neck"))
        self.head = LSHead(cfg.neck_widths, cfg.head_hidden, cfg.num_classes, cfg.head_shared, rng=rng.split("head"))
        self.assign_names()

    @property
    def dtype(self):
        return self.backbone.stem0.conv.weight.dtype

    def forward(self, images) -> list[tuple[Tensor, Tensor]]:
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim != 4:
            raise ShapeError(f"expected an image batch (B, C, H, W), got shape {x.shape}")
        if x.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"model expects {self.cfg.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2] % 32 or x.shape[3] % 32:
            raise ShapeError(f"input size {x.shape[2]}x{x.shape[3]} is not divisible by 32")
        return self.head(self.neck(self.backbone(x)))

    def at_step(self, step: int) -> "RSNet":
        for _, module in self.named_modules():
            if isinstance(module, Star):
                module.at_step(step)
        return self

    def layer_names(self) -> list[str]:
        return [path for path, _ in self.named_modules() if path]

    def trace(self, input_size: tuple[int, int] | None = None) -> Trace:
        height, width = input_size or self.cfg.input_size
        trace = Trace()
        taps = self.backbone.trace_levels((self.cfg.in_channels, height, width), trace)
        levels = self.neck.trace_levels(taps, trace)
        self.head.trace_levels(levels, trace)
        return trace


def build_model(cfg: ArchConfig, seed: int = 0) -> RSNet:
    """Deterministic in ``seed``: every layer draws from its own named random stream."""
    model = RSNet(cfg, seed)
    logger.debug("built %s with %d parameter tensors", cfg.name, len(model.parameters()))
    return model


def forward_multi_scale(model: RSNet, images) -> list[tuple[Tensor, Tensor]]:
    """Raw (box, class) maps per pyramid level, strides 8, 16 and 32."""
    return model(images)


@dataclass(frozen=True)
class LayerRecord:
    name: str
    kind: str
    params: tuple[str, ...]


@dataclass(frozen=True)
class ModelGraph:
    layers: tuple[LayerRecord, ...]
    taps: tuple[str, ...]
    outputs: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def topological_order(self) -> list[str]:
        """Kahn's algorithm over the block-level edges; raises if a cycle exists."""
        nodes = {n for edge in self.edges for n in edge}
        indegree = {n: 0 for n in nodes}
        successors = defaultdict(list)
        for src, dst in self.edges:
            successors[src].append(dst)
            indegree[dst] += 1
        queue = deque(sorted(n for n, d in indegree.items() if d == 0))
        order = []
        while queue:
            node = queue.popleft()
            order.append(node)
            for nxt in successors[node]:
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    queue.append(nxt)
        if len(order) != len(nodes):
            raise ConfigError("model graph has a cycle")
        return order


def describe_graph(model: RSNet) -> ModelGraph:
    layers = []
    for path, module in model.named_modules():
        own = tuple(f"{path}.{name}" for name in module._params)
        if own or module.kind in ("wavelet_unpool", "upsample"):
            layers.append(LayerRecord(path, module.kind, own))
    chain = ["input", "backbone.stem0", "backbone.stem1"]
    if model.backbone.stem_csp is not None:
        chain.append("backbone.stem_csp")
    chain += [f"backbone.stages.{i}" for i in range(3)]
    edges = list(zip(chain, chain[1:]))
    edges += Neck.EDGES
    edges += [(out, "head") for out in Neck.OUTPUTS]
    return ModelGraph(
        layers=tuple(layers),
        taps=tuple(f"backbone.stages.{i}" for i in range(3)),
        outputs=Neck.OUTPUTS,
        edges=tuple(edges),
    )


@dataclass(frozen=True)
class CountReport:
    config: str
    input_size: tuple[int, int]
    rows: tuple[CountRow, ...]

    @property
    def total_params(self) -> int:
        return sum(row.params for row in self.rows)

    @property
    def total_macs(self) -> int:
        return sum(row.macs for row in self.rows)

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs


def count_flops(model: RSNet, input_size: tuple[int, int] | None = None) -> CountReport:
    """Analytic per-layer counts at ``input_size``: convs and norms, activations ignored."""
    size = tuple(input_size or model.cfg.input_size)
    trace = model.trace(size)
    return CountReport(model.cfg.name, size, tuple(trace.rows))


def count_params(model: RSNet) -> CountReport:
    return count_flops(model, model.cfg.input_size)


def enumerate_params(model: Module) -> int:
    """Direct count over the parameter store; must equal ``count_params(...).total_params``."""
    return sum(param.size for param in model.parameters())
