"""Noise schedules and timestep ladders.

``alpha_bar[t]`` is the cumulative signal coefficient at base step ``t``;
index 0 is clean data (``alpha_bar[0] == 1``). Every other module reads
noise levels through this array. The sampling ladder ``timesteps`` holds
base-step indices in increasing order and always starts at 0, so the
reverse loop ends on clean data.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import InvalidArgument

KINDS = ("linear-beta", "cosine")

BETA_START = 1e-4
BETA_END = 0.02
COSINE_OFFSET = 0.008
MAX_BETA = 0.999


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    kind: str
    base_steps: int
    alpha_bar: np.ndarray
    timesteps: np.ndarray
    ddim_eta: float = 0.0

    @property
    def respace_factor(self) -> int:
        if len(self.timesteps) < 2:
            return self.base_steps
        return int(self.timesteps[1] - self.timesteps[0])

    def sigma(self, t: int, t_prev: int) -> float:
        """DDIM noise scale for the step ``t -> t_prev``; zero when ``ddim_eta == 0``."""
        if self.ddim_eta == 0.0:
            return 0.0
        ab, abp = self.alpha_bar[t], self.alpha_bar[t_prev]
        return float(self.ddim_eta * np.sqrt((1 - abp) / (1 - ab)) * np.sqrt(1 - ab / abp))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "base_steps": self.base_steps,
            "respace_factor": self.respace_factor,
            "ddim_eta": self.ddim_eta,
        }


def _linear_alpha_bar(base_steps: int) -> np.ndarray:
    betas = np.linspace(BETA_START, BETA_END, base_steps, dtype=np.float64)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def _cosine_alpha_bar(base_steps: int) -> np.ndarray:
    t = np.arange(base_steps + 1, dtype=np.float64) / base_steps
    f = np.cos((t + COSINE_OFFSET) / (1 + COSINE_OFFSET) * np.pi / 2) ** 2
    raw = f / f[0]
    betas = np.clip(1.0 - raw[1:] / raw[:-1], 0.0, MAX_BETA)
    return np.concatenate([[1.0], np.cumprod(1.0 - betas)])


def make_schedule(kind: str = "linear-beta", base_steps: int = 1000, ddim_eta: float = 0.0) -> NoiseSchedule:
    """Build a base schedule whose ladder visits every step ``0 .. base_steps-1``."""
    if kind not in KINDS:
        raise InvalidArgument(f"unknown schedule kind {kind!r}; expected one of {KINDS}")
    if int(base_steps) != base_steps or base_steps < 2:
        raise InvalidArgument(f"base_steps must be an integer >= 2, got {base_steps}")
    if not 0.0 <= ddim_eta <= 1.0:
        raise InvalidArgument(f"ddim_eta must lie in [0, 1], got {ddim_eta}")
    base_steps = int(base_steps)
    alpha_bar = _linear_alpha_bar(base_steps) if kind == "linear-beta" else _cosine_alpha_bar(base_steps)
    alpha_bar.setflags(write=False)
    timesteps = np.arange(base_steps, dtype=np.int64)
    timesteps.setflags(write=False)
    return NoiseSchedule(kind, base_steps, alpha_bar, timesteps, float(ddim_eta))


def respace(schedule: NoiseSchedule, factor: int) -> NoiseSchedule:
    """Keep every ``factor``-th entry of the current ladder, starting at 0."""
    if int(factor) != factor or not 1 <= factor <= schedule.base_steps:
        raise InvalidArgument(f"respace factor must be in [1, {schedule.base_steps}], got {factor}")
    timesteps = np.ascontiguousarray(schedule.timesteps[:: int(factor)])
    timesteps.setflags(write=False)
    return replace(schedule, timesteps=timesteps)


def schedule_from_dict(spec: dict) -> NoiseSchedule:
    sched = make_schedule(spec.get("kind", "linear-beta"), spec.get("base_steps", 1000), spec.get("ddim_eta", 0.0))
    return respace(sched, spec.get("respace_factor", 1))
