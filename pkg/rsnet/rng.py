"""Named, seedable random streams.

Every consumer (layer initializers, dropout, scene synthesis) asks for a child stream
by name, so adding a layer never shifts the numbers another layer receives.
"""
from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> tuple[int, ...]:
    return tuple(zlib.crc32(part.encode("utf-8")) for part in name.split(".") if part)


class Rng:
    def __init__(self, seed: int, name: str = ""):
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)
        self.name = name
        sequence = np.random.SeedSequence(self.seed, spawn_key=_name_key(name))
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def split(self, name: str) -> "Rng":
        child = f"{self.name}.{name}" if self.name else name
        return Rng(self.seed, child)

    def normal(self, shape: tuple[int, ...], std: float = 1.0, dtype=np.float32) -> np.ndarray:
        return (self.generator.standard_normal(shape) * std).astype(dtype)

    def uniform(self, low: float, high: float, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self.generator.integers(low, high, size=size)

    def random(self, shape: tuple[int, ...] | None = None):
        return self.generator.random(shape)

    def gamma(self, shape: float, scale: float, size=None):
        return self.generator.gamma(shape, scale, size)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, name={self.name!r})"
