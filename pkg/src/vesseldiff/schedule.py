"""Noise schedules shared by the continuous and the categorical diffusion."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Per-step retention clip. The floor sits below 1e-3 so that even a
# single-step schedule ends with cumulative retention under 1e-3.
ALPHA_FLOOR = 5e-4
ALPHA_CEIL = 0.9999
COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step retention alpha[1..T] and cumulative products alpha_bar[0..T].

    alpha_bar[0] is 1 by definition; alpha_bar[t] is the product of
    alpha[1..t]. Index with .alpha(t) / .alpha_bar(t) using 1-based steps.
    """

    T: int
    alphas: np.ndarray          # shape (T,), alphas[t-1] = alpha^t
    alpha_bars: np.ndarray      # shape (T+1,), alpha_bars[t] = cumulative product
    family: str = "cosine"
    offset: float = COSINE_OFFSET
    clip: tuple = (ALPHA_FLOOR, ALPHA_CEIL)

    def alpha(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"step {t} outside [1, {self.T}]")
        return self.alphas[t - 1]

    def alpha_bar(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"step {t} outside [0, {self.T}]")
        return self.alpha_bars[t]

    def to_config(self) -> dict:
        return {"family": self.family, "T": self.T, "s": self.offset,
                "clip": list(self.clip)}

    @staticmethod
    def from_config(cfg: dict) -> "NoiseSchedule":
        if cfg.get("family") != "cosine":
            raise ValueError(f"unknown schedule family {cfg.get('family')!r}")
        return make_cosine_schedule(int(cfg["T"]))


def make_cosine_schedule(T: int) -> NoiseSchedule:
    """Squared-cosine cumulative-retention profile with per-step clipping.

    The raw profile is cos^2(((t/T + s) / (1 + s)) * pi/2), renormalized to
    start at 1. Per-step ratios are clipped to [ALPHA_FLOOR, ALPHA_CEIL] and
    the cumulative products are rebuilt from the clipped steps so the product
    identity holds exactly.
    """
    if T < 1:
        raise ValueError(f"schedule needs T >= 1, got {T}")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T + COSINE_OFFSET) / (1.0 + COSINE_OFFSET)) * np.pi / 2.0) ** 2
    raw_bar = f / f[0]
    alphas = np.clip(raw_bar[1:] / raw_bar[:-1], ALPHA_FLOOR, ALPHA_CEIL)
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(T=T, alphas=alphas, alpha_bars=alpha_bars)
