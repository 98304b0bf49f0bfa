from __future__ import annotations

import os
from dataclasses import dataclass

_LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


def _first_env(*names: str) -> str:
    for name in names:
        value = os.getenv(name)
        if value:
            return value
    return ""


def _int_env(name: str, default: int, minimum: int = 0) -> int:
    raw = os.getenv(name)
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {raw!r}") from None
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name)
    if not raw:
        return default
    try:
        value = float(raw)
    except ValueError:
        raise ValueError(f"{name} must be a number, got {raw!r}") from None
    if value <= 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return value


@dataclass(frozen=True)
class Settings:
    seed: int
    log_level: str
    workers: int
    batch_size: int
    lr: float
    default_config: str

    @staticmethod
    def from_env() -> "Settings":
        log_level = (_first_env("RSNET_LOG_LEVEL", "LOG_LEVEL") or "INFO").upper()
        if log_level not in _LOG_LEVELS:
            raise ValueError(f"RSNET_LOG_LEVEL must be one of {', '.join(_LOG_LEVELS)}, got {log_level!r}")

        return Settings(
            seed=_int_env("RSNET_SEED", 0),
            log_level=log_level,
            workers=_int_env("RSNET_WORKERS", 1, minimum=1),
            batch_size=_int_env("RSNET_BATCH_SIZE", 8, minimum=1),
            lr=_float_env("RSNET_LR", 0.002),
            default_config=os.getenv("RSNET_CONFIG", "rsnet-desk"),
        )
