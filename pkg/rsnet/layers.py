"""Module tree, leaf layers and the conv-norm-activation / CSP units the backbone and neck reuse.

Every module can ``trace`` a (C, H, W) shape through itself without running any
arithmetic, recording analytic parameter and multiply-accumulate counts per leaf
layer. Shared modules contribute their parameters once, their MACs at every visit.
"""
from __future__ import annotations

import contextlib
import contextvars
import logging
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from rsnet import ops
from rsnet.errors import ConfigError, NumericError, ShapeError
from rsnet.rng import Rng
from rsnet.tensor import Parameter, Tensor, mul

logger = logging.getLogger("rsnet.layers")

Shape = tuple[int, int, int]


@dataclass(frozen=True)
class CountRow:
    name: str
    kind: str
    params: int
    macs: int
    out_shape: Shape
    shared: bool = False


class Trace:
    def __init__(self):
        self.rows: list[CountRow] = []
        self._seen: set[int] = set()

    def add(self, module: "Module", params: int, macs: int, out_shape: Shape) -> None:
        first = id(module) not in self._seen
        self._seen.add(id(module))
        self.rows.append(CountRow(module.path, module.kind, params if first else 0, macs, out_shape, not first))


class ActivationCapture:
    def __init__(self, names):
        self.names = set(names)
        self.activations: dict[str, np.ndarray] = {}


_capture: contextvars.ContextVar[ActivationCapture | None] = contextvars.ContextVar("rsnet_capture", default=None)


@contextlib.contextmanager
def capture_activations(names) -> Iterator[ActivationCapture]:
    capture = ActivationCapture(names)
    token = _capture.set(capture)
    try:
        yield capture
    finally:
        _capture.reset(token)


class Module:
    kind = "module"

    def __init__(self):
        self.__dict__["_params"] = {}
        self.__dict__["_modules"] = {}
        self.__dict__["_buffers"] = {}
        self.training = True
        self.path = ""

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        elif isinstance(value, ops.RunningStats):
            self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        try:
            out = self.forward(*args, **kwargs)
        except NumericError as err:
            raise err.with_layer(self.path or type(self).__name__)
        capture = _capture.get()
        if capture is not None and self.path in capture.names and isinstance(out, Tensor):
            capture.activations[self.path] = out.data
        return out

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def trace(self, shape: Shape, trace: Trace) -> Shape:
        raise NotImplementedError(f"{type(self).__name__} does not support counting")

    @property
    def mode(self) -> str:
        return "train" if self.training else "eval"

    def named_modules(self, prefix: str = "", _seen: set[int] | None = None) -> Iterator[tuple[str, "Module"]]:
        seen = set() if _seen is None else _seen
        if id(self) in seen:
            return
        seen.add(id(self))
        yield prefix, self
        for name, child in self._modules.items():
            yield from child.named_modules(f"{prefix}.{name}" if prefix else name, seen)

    def named_parameters(self) -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for path, module in self.named_modules():
            for name, param in module._params.items():
                if id(param) in seen:
                    continue
                seen.add(id(param))
                yield (f"{path}.{name}" if path else name), param

    def parameters(self) -> list[Parameter]:
        return [param for _, param in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for path, module in self.named_modules():
            for name, stats in module._buffers.items():
                base = f"{path}.{name}" if path else name
                yield f"{base}.mean", stats.mean
                yield f"{base}.var", stats.var

    def assign_names(self) -> None:
        """Give every module its dotted path and every parameter its dotted name (first path wins)."""
        for path, module in self.named_modules():
            module.path = path
        for name, param in self.named_parameters():
            param.name = name

    def train(self, training: bool = True) -> "Module":
        for _, module in self.named_modules():
            module.training = training
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for param in self.parameters():
            param.data = param.data.astype(dtype)
            param.zero_grad()
        for _, module in self.named_modules():
            for stats in module._buffers.values():
                stats.mean = stats.mean.astype(dtype)
                stats.var = stats.var.astype(dtype)
        return self


class ModuleList(Module):
    kind = "list"

    def __init__(self, modules=()):
        super().__init__()
        self._items: list[Module] = []
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, index: int) -> Module:
        return self._items[index]


def conv_init(rng: Rng, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(shape, std=1.0 / np.sqrt(fan_in))


class Conv2d(Module):
    kind = "conv"

    def __init__(self, c_in, c_out, k=1, stride=1, pad=None, dilation=1, groups=1, bias=False, *, rng: Rng):
        super().__init__()
        if c_in % groups or c_out % groups:
            raise ConfigError(f"conv {c_in}->{c_out}: groups={groups} must divide both channel counts")
        self.c_in, self.c_out, self.k = c_in, c_out, k
        self.stride, self.dilation, self.groups = stride, dilation, groups
        self.pad = dilation * (k // 2) if pad is None else pad
        self.weight = Parameter(conv_init(rng.split("weight"), (c_out, c_in // groups, k, k)))
        self.bias = Parameter(np.zeros(c_out, dtype=np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.dilation, self.groups)

    def trace(self, shape, trace):
        c, h, w = shape
        if c != self.c_in:
            raise ShapeError(f"{self.path}: expects {self.c_in} channels, got {c}")
        ho = ops.conv_output_size(h, self.k, self.stride, self.pad, self.dilation)
        wo = ops.conv_output_size(w, self.k, self.stride, self.pad, self.dilation)
        per_out = (self.c_in // self.groups) * self.k * self.k
        params = self.c_out * per_out + (self.c_out if self.bias is not None else 0)
        out = (self.c_out, ho, wo)
        trace.add(self, params, self.c_out * per_out * ho * wo, out)
        return out


class BatchNorm2d(Module):
    kind = "batchnorm"

    def __init__(self, channels: int, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))
        self.stats = ops.RunningStats.fresh(channels, momentum)

    def forward(self, x):
        return ops.batch_norm(x, self.weight, self.bias, self.stats, self.mode)

    def trace(self, shape, trace):
        trace.add(self, 2 * self.channels, shape[0] * shape[1] * shape[2], shape)
        return shape


class GroupNorm(Module):
    kind = "groupnorm"

    def __init__(self, channels: int, groups: int | None = None):
        super().__init__()
        groups = min(16, channels) if groups is None else groups
        if channels % groups:
            raise ConfigError(f"group norm: {groups} groups do not divide {channels} channels")
        self.channels, self.groups = channels, groups
        self.weight = Parameter(np.ones(channels, dtype=np.float32))
        self.bias = Parameter(np.zeros(channels, dtype=np.float32))

    def forward(self, x):
        return ops.group_norm(x, self.groups, self.weight, self.bias)

    def trace(self, shape, trace):
        trace.add(self, 2 * self.channels, shape[0] * shape[1] * shape[2], shape)
        return shape


class Scale(Module):
    """A single learnable scalar multiplying its input."""

    kind = "scale"

    def __init__(self, value: float = 1.0):
        super().__init__()
        self.scale = Parameter(np.full(1, value, dtype=np.float32))

    def forward(self, x):
        return mul(x, self.scale)

    def trace(self, shape, trace):
        trace.add(self, 1, shape[0] * shape[1] * shape[2], shape)
        return shape


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "silu": ops.silu,
    "relu": ops.relu,
    "relu6": ops.relu6,
}


class ConvNormAct(Module):
    """Convolution, then batch or group norm, then an optional activation (SiLU by default)."""

    kind = "conv_norm_act"

    def __init__(self, c_in, c_out, k=1, stride=1, dilation=1, groups=1, act: str | None = "silu",
                 norm: str = "bn", *, rng: Rng):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, stride, dilation=dilation, groups=groups, rng=rng.split("conv"))
        if norm == "bn":
            self.norm = BatchNorm2d(c_out)
        elif norm == "gn":
            self.norm = GroupNorm(c_out)
        else:
            raise ConfigError(f"unknown norm {norm!r}")
        self.act = ACTIVATIONS[act] if act else None
        self.c_out = c_out

    def forward(self, x):
        y = self.norm(self.conv(x))
        return self.act(y) if self.act else y

    def trace(self, shape, trace):
        return self.norm.trace(self.conv.trace(shape, trace), trace)


class Bottleneck(Module):
    kind = "bottleneck"

    def __init__(self, channels: int, shortcut: bool = True, *, rng: Rng):
        super().__init__()
        self.cv1 = ConvNormAct(channels, channels, 3, rng=rng.split("cv1"))
        self.cv2 = ConvNormAct(channels, channels, 3, rng=rng.split("cv2"))
        self.shortcut = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return ops.elementwise_add(x, y) if self.shortcut else y

    def trace(self, shape, trace):
        return self.cv2.trace(self.cv1.trace(shape, trace), trace)


BlockFactory = Callable[..., Module]


class CSP(Module):
    """C2f-style split unit ("c2f-lite"): 1x1 expand, split in halves, chain ``n`` inner
    blocks on one half, concatenate every intermediate and fuse with a 1x1 conv."""

    kind = "csp"

    def __init__(self, c_in: int, c_out: int, n: int = 1, block: BlockFactory | None = None, *, rng: Rng):
        super().__init__()
        if c_out % 2:
            raise ConfigError(f"csp unit needs an even width, got {c_out}")
        self.hidden = c_out // 2
        block = block or (lambda c, rng: Bottleneck(c, rng=rng))
        self.cv1 = ConvNormAct(c_in, 2 * self.hidden, 1, rng=rng.split("cv1"))
        self.m = ModuleList(block(self.hidden, rng=rng.split(f"m{i}")) for i in range(n))
        self.cv2 = ConvNormAct((2 + n) * self.hidden, c_out, 1, rng=rng.split("cv2"))

    def forward(self, x):
        y = self.cv1(x)
        parts = [y[:, :self.hidden], y[:, self.hidden:]]
        for block in self.m:
            parts.append(block(parts[-1]))
        return self.cv2(ops.concat_channels(parts))

    def trace(self, shape, trace):
        c, h, w = self.cv1.trace(shape, trace)
        for block in self.m:
            block.trace((self.hidden, h, w), trace)
        return self.cv2.trace(((2 + len(self.m)) * self.hidden, h, w), trace)
