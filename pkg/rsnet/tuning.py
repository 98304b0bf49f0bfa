"""Grid search over width multipliers towards a parameter budget."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Sequence

from rsnet.arch import ArchConfig
from rsnet.errors import ConfigError
from rsnet.model import build_model, count_flops

logger = logging.getLogger("rsnet.tuning")

TARGET_PARAMS = 1_490_000
STAGE_MULTIPLIERS = (0.75, 0.875, 1.0, 1.125, 1.25)
NECK_MULTIPLIERS = (0.75, 1.0, 1.25)
HEAD_MULTIPLIERS = (0.6, 0.8, 1.0, 1.2)


def _round_to(value: float, multiple: int) -> int:
    return max(multiple, int(round(value / multiple)) * multiple)


@dataclass(frozen=True)
class Candidate:
    stage_top: int
    neck_widths: tuple[int, int, int]
    head_hidden: int
    params: int
    flops: int

    def gap(self, target: int) -> int:
        return abs(self.params - target)


@dataclass(frozen=True)
class TuningResult:
    target: int
    candidates: tuple[Candidate, ...]

    @property
    def best(self) -> Candidate:
        return min(self.candidates, key=lambda c: c.gap(self.target))

    def apply(self, cfg: ArchConfig) -> ArchConfig:
        best = self.best
        return cfg.replace(
            stages=(*cfg.stages[:2], best.stage_top),
            neck_widths=best.neck_widths,
            head_hidden=best.head_hidden,
        )


def tune_widths(
    base: ArchConfig,
    target: int = TARGET_PARAMS,
    stage_multipliers: Sequence[float] = STAGE_MULTIPLIERS,
    neck_multipliers: Sequence[float] = NECK_MULTIPLIERS,
    head_multipliers: Sequence[float] = HEAD_MULTIPLIERS,
) -> TuningResult:
    """Count every grid point and keep them all; ``best`` is the one nearest ``target``
    (earliest grid point on ties). FLOPs are taken at the config input size."""
    if target <= 0:
        raise ConfigError(f"parameter target must be positive, got {target}")
    candidates = []
    seen = set()
    for s, n, h in itertools.product(stage_multipliers, neck_multipliers, head_multipliers):
        # Multiples of 16 keep the wavelet (4) and group-norm (16) divisibility rules.
        stage_top = _round_to(base.stages[2] * s, 16)
        neck = tuple(_round_to(w * n, 16) for w in base.neck_widths)
        head = _round_to(base.head_hidden * h, 16)
        key = (stage_top, neck, head)
        if key in seen:
            continue
        seen.add(key)
        try:
            cfg = base.replace(stages=(*base.stages[:2], stage_top), neck_widths=neck, head_hidden=head)
        except ConfigError as err:
            logger.debug("skipping %s: %s", key, err)
            continue
        report = count_flops(build_model(cfg), cfg.input_size)
        candidate = Candidate(stage_top, neck, head, report.total_params, report.total_flops)
        logger.debug("stage_top=%d neck=%s head=%d -> %d params, %.3f GFLOPs",
                     stage_top, neck, head, candidate.params, candidate.flops / 1e9)
        candidates.append(candidate)
    if not candidates:
        raise ConfigError("width grid produced no valid configuration")
    result = TuningResult(target, tuple(candidates))
    logger.info("best of %d candidates: %d params (target %d)", len(candidates), result.best.params, target)
    return result
