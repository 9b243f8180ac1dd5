"""Temperature sampling over tasks and the heating schedule that raises it per epoch."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


def _as_weights(p) -> np.ndarray:
    w = np.asarray(p, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("task weights must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValueError("task weights must be finite and nonnegative")
    if not np.any(w > 0):
        raise ValueError("task weights must have at least one positive entry")
    return w


def rescale(p, temperature: float) -> np.ndarray:
    """Rescale a task distribution with temperature ``T``.

    Each entry becomes ``p_n ** (1/T)`` and the result is renormalised, so
    ``T=1`` returns ``p`` (normalised) and ``T -> inf`` approaches uniform.
    Zero entries stay zero.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    w = _as_weights(p)
    # Work in log space relative to the max entry; keeps tiny p at large 1/T from underflowing to 0/0.
    out = np.zeros_like(w)
    nz = w > 0
    logw = np.log(w[nz]) / temperature
    logw -= logw.max()
    out[nz] = np.exp(logw)
    return out / out.sum()


@dataclass(frozen=True)
class HeatingConfig:
    t_s: float
    k: float
    C: int

    def __post_init__(self):
        if not self.t_s > 0:
            raise ValueError(f"t_s must be positive, got {self.t_s}")
        if not self.k >= 0:
            raise ValueError(f"k must be nonnegative, got {self.k}")
        if int(self.C) != self.C or self.C < 1:
            raise ValueError(f"C must be a positive integer, got {self.C}")


def temperature_at(epoch: int, cfg: HeatingConfig) -> float:
    """Sampling temperature for 0-indexed ``epoch``.

    ``sqrt((1 + k * e / sqrt(C)) * t_s**2)``. Epoch 0 returns ``t_s`` exactly;
    epochs past ``C`` extrapolate with no cap.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    if epoch == 0:
        return float(cfg.t_s)
    return math.sqrt((1.0 + cfg.k * epoch / math.sqrt(cfg.C)) * cfg.t_s**2)


@dataclass(frozen=True)
class ScheduleState:
    epoch: int
    temperature: float

    @classmethod
    def at(cls, epoch: int, cfg: HeatingConfig) -> "ScheduleState":
        return cls(epoch, temperature_at(epoch, cfg))

    def advance(self, cfg: HeatingConfig) -> "ScheduleState":
        return ScheduleState.at(self.epoch + 1, cfg)


def schedule_table(cfg: HeatingConfig) -> list[tuple[int, float]]:
    return [(e, temperature_at(e, cfg)) for e in range(cfg.C)]


def kl_to_uniform(q) -> float:
    """KL(q || uniform) in nats; 0 log 0 = 0."""
    q = np.asarray(q, dtype=np.float64)
    nz = q > 0
    return float(np.sum(q[nz] * np.log(q[nz] * q.size)))
