"""Seasonal series with trend, level shifts and Gaussian noise."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .series import SeriesFrame


@dataclass(frozen=True)
class SyntheticRecipe:
    length: int = 8000
    channels: int = 3
    period: int = 48
    amplitude: float = 2.0
    slope: float = 2e-4
    noise: float = 0.5
    shifts: tuple[tuple[int, float], ...] = ((4000, 5.0),)
    seed: int = 0

    def __post_init__(self):
        if self.length < 1 or self.channels < 1 or self.period < 1:
            raise ValueError("length, channels and period must be positive")
        if self.noise < 0:
            raise ValueError("noise sigma must be nonnegative")
        sh = tuple((int(s), float(v)) for s, v in self.shifts)
        for start, _ in sh:
            if not 0 <= start < self.length:
                raise ValueError(f"shift start {start} outside [0, {self.length})")
        object.__setattr__(self, "shifts", sh)


def gen_synthetic(recipe: SyntheticRecipe) -> SeriesFrame:
    r = recipe
    t = np.arange(r.length, dtype=np.float64)[:, None]
    phase = 2.0 * np.pi * np.arange(r.channels)[None, :] / r.channels
    x = r.amplitude * np.sin(2.0 * np.pi * t / r.period + phase) + r.slope * t
    for start, level in r.shifts:
        x = x + level * (t >= start)
    if r.noise > 0:
        x = x + r.noise * np.random.default_rng(r.seed).standard_normal(x.shape)
    return SeriesFrame(x, tuple(f"ch{c}" for c in range(r.channels)), r.period)
