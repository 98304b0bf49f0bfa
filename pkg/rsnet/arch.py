"""Declarative architecture descriptions.

A config is a flat ``key = value`` file (see ``rsnet.textconf``). Named configs ship
inside the package under ``rsnet/configs``; anything else is read as a path.
"""
from __future__ import annotations

import dataclasses
import hashlib
import logging
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from rsnet.errors import ConfigError
from rsnet.textconf import TextConfig, dump

logger = logging.getLogger("rsnet.arch")

DOWNSAMPLES = ("wavelet", "conv")
STAGE_BLOCKS = ("cgb", "c2f")
NECKS = ("wsf", "c2f")
AGGREGATES = ("stack", "sum")
# Two stride-2 stem convs, then one stride-2 downsample per stage.
LEVEL_STRIDES = (8, 16, 32)
ABLATION_CONFIGS = ("rsnet-baseline", "rsnet-wcg", "rsnet-wcg-wsf", "rsnet-ref")


@dataclass(frozen=True)
class ArchConfig:
    name: str = "custom"
    input_size: tuple[int, int] = (640, 640)
    in_channels: int = 3
    stem: tuple[int, int] = (16, 32)
    stem_depth: int = 1
    stages: tuple[int, int, int] = (64, 128, 384)
    depths: tuple[int, int, int] = (1, 2, 2)
    downsample: str = "wavelet"
    stage_block: str = "cgb"
    wavelet_aggregate: str = "stack"
    dilation: int = 2
    reduction: int = 16
    neck: str = "wsf"
    neck_widths: tuple[int, int, int] = (64, 128, 320)
    neck_depth: int = 1
    neck_star: bool = True
    mlp_ratio: int = 3
    star_drop: float = 0.0
    head_hidden: int = 80
    head_shared: bool = True
    num_classes: int = 1
    strides: tuple[int, int, int] = LEVEL_STRIDES
    assign_ranges: tuple[float, float] = (64.0, 128.0)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def fail(message: str):
            raise ConfigError(f"config '{self.name}': {message}")

        if len(self.input_size) != 2 or min(self.input_size) < 32:
            fail(f"input_size must be two sizes >= 32, got {self.input_size}")
        if any(size % 32 for size in self.input_size):
            fail(f"input_size {self.input_size} must be divisible by 32")
        for key in ("stages", "depths", "neck_widths", "strides"):
            if len(getattr(self, key)) != 3:
                fail(f"{key} needs exactly 3 entries (one per pyramid level)")
        if self.in_channels < 1:
            fail("in_channels must be >= 1")
        if len(self.stem) != 2:
            fail("stem needs two widths")
        if tuple(self.strides) != LEVEL_STRIDES:
            fail(f"strides {self.strides} do not match the level downsampling {LEVEL_STRIDES}")
        widths = (*self.stem, *self.stages, *self.neck_widths, self.head_hidden)
        if any(w < 2 for w in widths):
            fail("all widths must be >= 2")
        if any(w % 2 for w in (self.stem[1], *self.stages, *self.neck_widths)):
            fail("stem, stage and neck widths must be even")
        if any(d < 1 for d in self.depths) or self.stem_depth < 0 or self.neck_depth < 1:
            fail("depths must be >= 1")
        if self.downsample not in DOWNSAMPLES:
            fail(f"downsample must be one of {'|'.join(DOWNSAMPLES)}")
        if self.stage_block not in STAGE_BLOCKS:
            fail(f"stage_block must be one of {'|'.join(STAGE_BLOCKS)}")
        if self.neck not in NECKS:
            fail(f"neck must be one of {'|'.join(NECKS)}")
        if self.wavelet_aggregate not in AGGREGATES:
            fail(f"wavelet_aggregate must be one of {'|'.join(AGGREGATES)}")
        if self.neck == "wsf" and (self.stages[2] % 4 or self.neck_widths[1] % 4):
            fail("wavelet unpooling needs the top stage width and the middle neck width divisible by 4")
        groups = min(16, self.head_hidden)
        if self.head_hidden % groups:
            fail(f"head_hidden {self.head_hidden} is not divisible by its {groups} group-norm groups")
        if self.dilation < 1 or self.reduction < 1 or self.mlp_ratio < 1:
            fail("dilation, reduction and mlp_ratio must be >= 1")
        if not 0 <= self.star_drop < 1:
            fail("star_drop must be in [0, 1)")
        if self.num_classes < 1:
            fail("num_classes must be >= 1")
        if len(self.assign_ranges) != 2 or not 0 < self.assign_ranges[0] < self.assign_ranges[1]:
            fail(f"assign_ranges must be two increasing positive sizes, got {self.assign_ranges}")

    @classmethod
    def from_text(cls, conf: TextConfig) -> "ArchConfig":
        defaults = cls.__dataclass_fields__
        size = conf.get_int_list("input_size", defaults["input_size"].default)
        values = dict(
            name=conf.get_str("name", Path(conf.source).stem),
            input_size=(size[0], size[0]) if len(size) == 1 else size,
            in_channels=conf.get_int("in_channels", 3),
            stem=conf.get_int_list("stem", defaults["stem"].default),
            stem_depth=conf.get_int("stem_depth", 1),
            stages=conf.get_int_list("stages", defaults["stages"].default),
            depths=conf.get_int_list("depths", defaults["depths"].default),
            downsample=conf.get_choice("downsample", DOWNSAMPLES, "wavelet"),
            stage_block=conf.get_choice("stage_block", STAGE_BLOCKS, "cgb"),
            wavelet_aggregate=conf.get_choice("wavelet_aggregate", AGGREGATES, "stack"),
            dilation=conf.get_int("dilation", 2),
            reduction=conf.get_int("reduction", 16),
            neck=conf.get_choice("neck", NECKS, "wsf"),
            neck_widths=conf.get_int_list("neck_widths", defaults["neck_widths"].default),
            neck_depth=conf.get_int("neck_depth", 1),
            neck_star=conf.get_bool("neck_star", True),
            mlp_ratio=conf.get_int("mlp_ratio", 3),
            star_drop=conf.get_float("star_drop", 0.0),
            head_hidden=conf.get_int("head_hidden", 80),
            head_shared=conf.get_bool("head_shared", True),
            num_classes=conf.get_int("num_classes", 1),
            strides=conf.get_int_list("strides", LEVEL_STRIDES),
            assign_ranges=conf.get_float_list("assign_ranges", (64.0, 128.0)),
        )
        conf.finish()
        return cls(**values)

    @classmethod
    def parse(cls, text: str, source: str = "<string>") -> "ArchConfig":
        return cls.from_text(TextConfig.parse(text, source))

    def to_text(self) -> str:
        return dump((field.name, getattr(self, field.name)) for field in dataclasses.fields(self))

    def digest(self) -> bytes:
        """SHA-256 of everything that shapes the parameter set (name and input size excluded)."""
        shaping = [
            (field.name, getattr(self, field.name))
            for field in dataclasses.fields(self)
            if field.name not in ("name", "input_size", "star_drop", "assign_ranges")
        ]
        return hashlib.sha256(dump(shaping).encode("utf-8")).digest()

    def replace(self, **changes) -> "ArchConfig":
        return dataclasses.replace(self, **changes)


def named_configs() -> list[str]:
    folder = resources.files("rsnet").joinpath("configs")
    return sorted(entry.name[:-4] for entry in folder.iterdir() if entry.name.endswith(".cfg"))


def load_config(name_or_path: str | Path) -> ArchConfig:
    """Resolve a shipped config name (``rsnet-ref``) or read a config file."""
    text_name = str(name_or_path)
    shipped = resources.files("rsnet").joinpath("configs").joinpath(f"{text_name}.cfg")
    if "/" not in text_name and shipped.is_file():
        return ArchConfig.parse(shipped.read_text(encoding="utf-8"), source=f"{text_name}.cfg")
    path = Path(name_or_path)
    if not path.exists() and path.suffix == "":
        raise ConfigError(f"unknown config '{text_name}' (shipped: {', '.join(named_configs())})")
    return ArchConfig.from_text(TextConfig.read(path))
