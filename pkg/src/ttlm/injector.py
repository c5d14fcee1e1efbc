"""Thinking-token injection and loss masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import THINK_ID
from .errors import ConfigError, InjectionError


@dataclass(frozen=True)
class ThinkingTokenConfig:
    n: int = 1
    thinking_id: int = THINK_ID

    def __post_init__(self):
        if self.n < 0:
            raise ConfigError(f"thinking token count must be >= 0, got {self.n}")


@dataclass
class LossMask:
    flags: np.ndarray

    @property
    def counted(self) -> int:
        return int(self.flags.sum())


def inject(stream, cfg: ThinkingTokenConfig) -> np.ndarray:
    """Insert ``cfg.n`` thinking ids after every token, ``<eos>`` included."""
    stream = np.asarray(stream, dtype=np.int64)
    if np.any(stream == cfg.thinking_id):
        raise InjectionError("stream already contains thinking tokens; refusing to inject twice")
    if cfg.n == 0:
        return stream.copy()
    out = np.full((len(stream), 1 + cfg.n), cfg.thinking_id, dtype=np.int64)
    out[:, 0] = stream
    return out.reshape(-1)


def strip(stream, thinking_id: int = THINK_ID) -> np.ndarray:
    stream = np.asarray(stream, dtype=np.int64)
    return stream[stream != thinking_id]


def derive_loss_mask(targets, thinking_id: int = THINK_ID) -> LossMask:
    return LossMask(np.asarray(targets) != thinking_id)
