"""Central finite-difference checks of tape gradients, shared by the tests and ``rsnet check``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from rsnet.rng import Rng
from rsnet.tensor import Tape, Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# Gradients smaller than this are compared in absolute terms.
_FLOOR = 1e-3


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_rel_error: float
    checked: int
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tolerance


def _as_list(outputs) -> list[Tensor]:
    if isinstance(outputs, Tensor):
        return [outputs]
    flat: list[Tensor] = []
    for item in outputs:
        flat.extend(_as_list(item))
    return flat


def gradcheck(
    fn: Callable[[], object],
    inputs: Sequence[Tensor],
    name: str = "",
    step: float = STEP,
    tolerance: float = TOLERANCE,
    max_checks: int = 48,
    seed: int = 0,
) -> GradCheckResult:
    """Compare d<fn(), R>/d input against central differences for every tensor in ``inputs``.

    ``fn`` takes no arguments and reads the inputs by reference; it must be deterministic
    and may return a tensor or a (nested) sequence of tensors. ``R`` is a fixed random
    projection so every output element contributes. At most ``max_checks`` entries per
    input are checked.
    """
    rng = Rng(seed, f"gradcheck.{name}" if name else "gradcheck")
    for tensor in inputs:
        if tensor.dtype != np.float64:
            raise ValueError(f"gradcheck needs float64 inputs, got {tensor.dtype}")
        tensor.requires_grad = True
        tensor.data = np.ascontiguousarray(tensor.data).copy()
        tensor.grad = None

    projections = [rng.normal(out.shape, dtype=np.float64) for out in _as_list(fn())]

    def objective() -> Tensor:
        total = None
        for out, proj in zip(_as_list(fn()), projections):
            term = (out * proj).sum()
            total = term if total is None else total + term
        return total

    with Tape() as tape:
        loss = objective()
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    checked = 0
    for tensor, grad in zip(inputs, analytic):
        flat = tensor.data.reshape(-1)
        count = min(max_checks, flat.size)
        for index in rng.generator.choice(flat.size, size=count, replace=False):
            original = flat[index]
            flat[index] = original + step
            plus = objective().item()
            flat[index] = original - step
            minus = objective().item()
            flat[index] = original
            numeric = (plus - minus) / (2 * step)
            exact = grad.reshape(-1)[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), _FLOOR)
            worst = max(worst, float(error))
            checked += 1
    return GradCheckResult(name, worst, checked, tolerance)
