"""Sparsity schedules over training iterations."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError

SCHEDULE_KINDS = ("cubic", "linear", "exponential")
EXP_RATE = 5.0


@dataclass(frozen=True)
class ScheduleState:
    s0: float = 0.0
    s_f: float = 0.5
    t0: int = 0
    T: int = 100
    prune_every_k: int = 50

    def __post_init__(self):
        if not 0.0 <= self.s0 <= self.s_f < 1.0:
            raise ConfigError(f"schedule needs 0 <= s0 <= s_f < 1, got s0={self.s0}, s_f={self.s_f}")
        if self.T <= self.t0:
            raise ConfigError(f"schedule needs t0 < T, got t0={self.t0}, T={self.T}")
        if self.t0 < 0:
            raise ConfigError(f"schedule start t0 must be >= 0, got {self.t0}")
        if self.prune_every_k < 1:
            raise ConfigError(f"prune_every_k must be >= 1, got {self.prune_every_k}")

    @classmethod
    def from_fraction(cls, s_f: float, T: int, t0_frac: float = 0.25, s0: float = 0.0, prune_every_k: int = 50):
        """Schedule starting after ``t0_frac`` of the ``T`` training iterations."""
        return cls(s0=s0, s_f=s_f, t0=int(round(t0_frac * T)), T=T, prune_every_k=prune_every_k)

    def progress(self, t: float) -> float:
        return min(max((t - self.t0) / (self.T - self.t0), 0.0), 1.0)


def cubic_sparsity(state: ScheduleState, t: float) -> float:
    """s_t = s_f + (s0 - s_f) * (1 - p)^3 with p the progress in [t0, T]."""
    if state.T <= state.t0:
        raise ConfigError("cubic schedule requires T > t0")
    if t <= state.t0:
        return state.s0
    if t >= state.T:
        return state.s_f
    p = (t - state.t0) / (state.T - state.t0)
    return state.s_f + (state.s0 - state.s_f) * (1.0 - p) ** 3


def alt_schedules(state: ScheduleState, t: float, kind: str) -> float:
    """Linear or endpoint-rescaled exponential ramp from s0 to s_f."""
    p = state.progress(t)
    if kind == "linear":
        return state.s_f if p == 1.0 else state.s0 + (state.s_f - state.s0) * p
    if kind == "exponential":
        if p == 1.0:
            return state.s_f
        frac = (1.0 - math.exp(-EXP_RATE * p)) / (1.0 - math.exp(-EXP_RATE))
        return state.s0 + (state.s_f - state.s0) * frac
    raise ConfigError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")


def sparsity_at(state: ScheduleState, t: float, kind: str = "cubic") -> float:
    if kind == "cubic":
        return cubic_sparsity(state, t)
    return alt_schedules(state, t, kind)


def pruning_iterations(state: ScheduleState) -> list[int]:
    """Mask-update iterations: every prune_every_k from t0, always ending at T."""
    its = list(range(state.t0, state.T, state.prune_every_k))
    its.append(state.T)
    return its
