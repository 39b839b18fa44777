"""Discrete noise schedules, zero terminal-SNR rescaling and inference timestep grids.

Timesteps are 1-indexed throughout: ``t = 1`` is the least noisy step and
``t = T`` the terminal one. Arrays are stored 0-indexed, so ``alpha_bars[t - 1]``
holds the value for timestep ``t``.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

DEFAULT_T = 1000
DEFAULT_BETA_START = 0.00085
DEFAULT_BETA_END = 0.012


class ScheduleError(ValueError):
    """Invalid schedule arguments."""


class ScheduleStateError(RuntimeError):
    """Operation not permitted for the schedule's current state."""


class Strategy(str, Enum):
    LEADING = "leading"
    TRAILING = "trailing"


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    num_timesteps: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    sqrt_alpha_bars: np.ndarray
    rescaled: bool = False

    def __post_init__(self):
        for name in ("betas", "alpha_bars", "sqrt_alpha_bars"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != (self.num_timesteps,):
                raise ScheduleError(f"{name} must have length {self.num_timesteps}, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def T(self) -> int:
        return self.num_timesteps

    def _check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.num_timesteps:
            raise IndexError(f"timestep {t} outside [1, {self.num_timesteps}]")
        return t

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._check_t(t) - 1])

    def sqrt_alpha_bar(self, t: int) -> float:
        return float(self.sqrt_alpha_bars[self._check_t(t) - 1])

    def sqrt_one_minus_alpha_bar(self, t: int) -> float:
        return math.sqrt(max(0.0, 1.0 - self.alpha_bar(t)))

    def coefficients(self, t: int) -> tuple[float, float]:
        """``(sqrt(alpha_bar_t), sqrt(1 - alpha_bar_t))``; t = 0 maps to the clean endpoint (1, 0)."""
        if int(t) == 0:
            return 1.0, 0.0
        return self.sqrt_alpha_bar(t), self.sqrt_one_minus_alpha_bar(t)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(f"T={self.num_timesteps};rescaled={int(self.rescaled)};".encode())
        h.update(self.betas.astype("<f8").tobytes())
        h.update(self.sqrt_alpha_bars.astype("<f8").tobytes())
        return h.hexdigest()[:16]


@dataclass(frozen=True)
class TimestepGrid:
    steps: tuple[int, ...]
    strategy: Strategy

    def __len__(self):
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


def build_scaled_linear_schedule(T: int = DEFAULT_T,
                                 beta_start: float = DEFAULT_BETA_START,
                                 beta_end: float = DEFAULT_BETA_END) -> NoiseSchedule:
    """Betas linear in sqrt-space between ``beta_start`` and ``beta_end``, then squared.

    The defaults give the familiar latent-diffusion schedule with
    ``alpha_bar_T ~= 0.00466``.
    """
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if T == 1:
        if not 0 < beta_start < 1 or beta_start != beta_end:
            raise ScheduleError("single-step schedule needs beta_start == beta_end in (0, 1)")
    elif not 0 < beta_start < beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(math.sqrt(beta_start), math.sqrt(beta_end), int(T), dtype=np.float64) ** 2
    return schedule_from_betas(betas)


def schedule_from_betas(betas) -> NoiseSchedule:
    """Build a schedule from arbitrary betas in (0, 1]."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0:
        raise ScheduleError("betas must be a non-empty 1-d array")
    if np.any(~np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas > 1):
        raise ScheduleError("betas must lie in (0, 1]")
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(betas.size, betas, alpha_bars, np.sqrt(alpha_bars), rescaled=False)


def snr(schedule: NoiseSchedule, t: int) -> float:
    """Signal-to-noise ratio ``alpha_bar / (1 - alpha_bar)``; ``inf`` at alpha_bar == 1."""
    a = schedule.alpha_bar(t)
    if a == 0.0:
        return 0.0
    if a == 1.0:
        return math.inf
    return a / (1.0 - a)


def snr_curve(schedule: NoiseSchedule) -> np.ndarray:
    return np.array([snr(schedule, t) for t in range(1, schedule.T + 1)])


def rescale_zero_terminal_snr(schedule: NoiseSchedule) -> NoiseSchedule:
    """Shift and scale ``sqrt(alpha_bar)`` so the last step is pure noise.

    The first value is kept, the last is forced to exactly zero and everything
    in between is mapped by the same affine transform. Betas are recovered
    from ratios of consecutive alpha_bars; the terminal beta becomes 1.
    """
    if schedule.rescaled:
        raise ScheduleStateError("schedule is already rescaled")
    s = schedule.sqrt_alpha_bars
    s_first, s_last = float(s[0]), float(s[-1])
    if s_first == s_last:
        raise ScheduleError("cannot rescale a schedule with sqrt(alpha_bar_1) == sqrt(alpha_bar_T)")

    scaled = (s - s_last) * (s_first / (s_first - s_last))
    scaled[0] = s_first
    scaled[-1] = 0.0
    alpha_bars = scaled ** 2

    alphas = np.empty_like(alpha_bars)
    alphas[0] = alpha_bars[0]
    alphas[1:] = alpha_bars[1:] / alpha_bars[:-1]
    betas = 1.0 - alphas
    betas[-1] = 1.0
    return NoiseSchedule(schedule.T, betas, alpha_bars, scaled, rescaled=True)


def build_schedule(mode: str = "rescaled", T: int = DEFAULT_T) -> NoiseSchedule:
    """Default scaled-linear schedule, optionally rescaled (``mode`` in {original, rescaled})."""
    base = build_scaled_linear_schedule(T)
    if mode == "original":
        return base
    if mode == "rescaled":
        return rescale_zero_terminal_snr(base)
    raise ScheduleError(f"unknown scheduler mode {mode!r}")


def timestep_grid(T: int, S: int, strategy: Strategy | str = Strategy.TRAILING) -> TimestepGrid:
    """Descending inference timesteps.

    ``trailing`` always starts from ``T``; ``leading`` always ends at 1 and
    never reaches ``T`` when ``S < T``. Non-integer strides are rounded to the
    nearest timestep (ties downward), leading
    grids are capped at ``T - 1`` and duplicates dropped.
    """
    strategy = Strategy(strategy)
    if T < 1 or S < 1:
        raise ScheduleError("T and S must be positive")
    if S > T:
        raise ScheduleError(f"cannot take {S} inference steps from {T} timesteps")
    stride = T / S
    if strategy is Strategy.TRAILING:
        raw = [T - i * stride for i in range(S)]
    else:
        raw = [1 + (S - 1 - i) * stride for i in range(S)]
    top = T - 1 if strategy is Strategy.LEADING and S < T else T
    steps: list[int] = []
    for v in raw:
        k = min(top, max(1, int(math.ceil(v - 0.5))))
        if not steps or k < steps[-1]:
            steps.append(k)
    return TimestepGrid(tuple(steps), strategy)


def schedule_table(schedule: NoiseSchedule) -> list[dict]:
    return [
        {
            "t": t,
            "beta": float(schedule.betas[t - 1]),
            "alpha_bar": float(schedule.alpha_bars[t - 1]),
            "sqrt_alpha_bar": float(schedule.sqrt_alpha_bars[t - 1]),
            "snr": snr(schedule, t),
        }
        for t in range(1, schedule.T + 1)
    ]


def write_schedule_csv(schedule: NoiseSchedule, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["t", "beta", "alpha_bar", "sqrt_alpha_bar", "snr"])
        writer.writeheader()
        for row in schedule_table(schedule):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path
