from __future__ import annotations


class RsnetError(Exception):
    """Base class for every error raised by the rsnet package."""


class ConfigError(RsnetError, ValueError):
    pass


class ShapeError(RsnetError, ValueError):
    pass


class DataError(RsnetError, ValueError):
    pass


class CheckpointError(DataError):
    pass


class NumericError(RsnetError, ArithmeticError):
    """A forward op produced NaN or Inf.

    ``op`` names the primitive that produced the value; ``layer`` is the dotted
    path of the first model layer it surfaced in (filled in by the model).
    """

    def __init__(self, op: str, layer: str | None = None):
        self.op = op
        self.layer = layer
        super().__init__(self._message())

    def _message(self) -> str:
        where = f" in layer '{self.layer}'" if self.layer else ""
        return f"non-finite values produced by {self.op}{where}"

    def with_layer(self, layer: str) -> "NumericError":
        if self.layer is None:
            self.layer = layer
            self.args = (self._message(),)
        return self
