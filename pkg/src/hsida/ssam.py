"""Shift-sensitive adaptive monitor.

Measures the inter-domain spread of pooled invariant features once per
epoch, maps it through a shifted sigmoid to a provisional mask ratio, and
smooths the ratio with an EMA.  The smoothed ratio is converted into the
channel-suppression budget used by the next epoch's masks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field


import numpy as np


@dataclass
class ShiftState:
    """Mutable monitor state; single-writer (the epoch loop)."""

    k: float = 1.5        # sigmoid slope
    s: float = 2.5        # sigmoid offset
    m: float = 0.1        # EMA momentum
    r_max: float = 0.5    # cap on the effective ratio
    r_current: float = 0.0
    epoch: int = 0        # number of completed updates
    mu_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.k <= 0:
            raise ValueError("sigmoid slope k must be > 0")
        if not 0 <= self.m <= 1:
            raise ValueError("EMA momentum m must be in [0, 1]")
        if not 0 <= self.r_current <= 1:
            raise ValueError("mask ratio must be in [0, 1]")

    def update(self, mu: float) -> tuple[float, float]:
        """Advance the monitor with a new spread measurement.

        Returns (r_prime, r): the raw sigmoid output and the smoothed ratio.
        The first update seeds the EMA with the raw observation.
        """
        r_prime = shifted_sigmoid(mu, self.k, self.s)
        if self.epoch == 0:
            r = r_prime
        else:
            r = ema_step(self.r_current, r_prime, self.m)
        self.r_current = r
        self.epoch += 1
        self.mu_history.append(mu)
        return r_prime, r


def pooled_channel_variances(p_src: np.ndarray, p_tgt: np.ndarray) -> np.ndarray:
    """Per-channel pooled variance over the union of both domains' samples.

    Pooled mean over all n_s + n_t samples; sum of squared deviations
    divided by (n_s + n_t - 1).
    """
    p_src = np.asarray(p_src, dtype=np.float64)
    p_tgt = np.asarray(p_tgt, dtype=np.float64)
    if p_src.ndim != 2 or p_tgt.ndim != 2 or p_src.shape[1] != p_tgt.shape[1]:
        raise ValueError("pooled batches must be 2-D with equal widths")
    n = p_src.shape[0] + p_tgt.shape[0]
    if n < 2:
        raise ValueError("need at least two samples in total")
    mean = (p_src.sum(axis=0) + p_tgt.sum(axis=0)) / n
    ss = ((p_src - mean) ** 2).sum(axis=0) + ((p_tgt - mean) ** 2).sum(axis=0)
    return ss / (n - 1)


def pooled_channel_variance(p_src: np.ndarray, p_tgt: np.ndarray) -> float:
    """Mean of the per-channel pooled variances (the shift measurement)."""
    return float(pooled_channel_variances(p_src, p_tgt).mean())


def shifted_sigmoid(mu: float, k: float, s: float) -> float:
    """1 / (1 + exp(-k (mu - s))); strictly increasing in mu for k > 0."""
    if k <= 0:
        raise ValueError("slope k must be > 0")
    return 1.0 / (1.0 + math.exp(-k * (mu - s)))


def ema_step(r_prev: float, r_prime: float, m: float) -> float:
    """Exponential moving average: (1 - m) * r_prev + m * r_prime."""
    return (1.0 - m) * r_prev + m * r_prime


def mask_count(r: float, channels: int, r_max: float = 1.0) -> int:
    """Suppression budget K = round(channels * min(r, r_max)), half-up."""
    if not 0 <= r <= 1:
        raise ValueError("mask ratio must be in [0, 1]")
    return int(math.floor(channels * min(r, r_max) + 0.5))
