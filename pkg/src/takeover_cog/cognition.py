"""Perceptual noise with Kalman range fusion, looming appraisal, action delay.

These are the scalar building blocks. The fused simulation kernels in
:mod:`takeover_cog._kernels` inline the same arithmetic; the test-suite
checks the two against each other.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace

from .core import MAX_DELAY_STEPS, NEUTRAL, Action, CognitiveParams, round_delay

R_FAR = 150.0
PROCESS_VAR = 0.25  # m^2 per step, moving targets
RATE_SMOOTHING = 0.3
MIN_MEAS_VAR = 1e-9


def sigma_x(r: float, sigma0: float, sigma_max: float, r_far: float = R_FAR) -> float:
    """Range-dependent perceptual noise stddev with far-range saturation.

    Grows like sqrt(sigma0^2 + (k r)^2) and plateaus at ``sigma_max``; the
    slope ``k`` is chosen so the plateau is reached exactly at ``r_far``.
    """
    if sigma0 > sigma_max:
        raise ValueError(f"sigma0={sigma0} > sigma_max={sigma_max}")
    if r < 0:
        raise ValueError(f"range must be non-negative, got {r}")
    if r >= r_far:
        return sigma_max
    k = math.sqrt(sigma_max * sigma_max - sigma0 * sigma0) / r_far
    kr = k * r
    return min(math.sqrt(sigma0 * sigma0 + kr * kr), sigma_max)


def perturb_range(r_true: float, params: CognitiveParams, rng) -> float:
    """Noisy perceived range, clamped at zero."""
    sd = sigma_x(r_true, params.sigma0, params.sigma_max)
    return max(r_true + sd * float(rng.standard_normal()), 0.0)


@dataclass(frozen=True)
class RangeTrack:
    """Posterior over the range to one target.

    ``rate`` is a smoothed range-rate estimate used to predict motion between
    updates; negative means the target is closing.
    """

    target_id: int
    mean: float
    variance: float
    last_update: int = 0
    rate: float = 0.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"track variance must be positive, got {self.variance}")
        if not math.isfinite(self.mean):
            raise ValueError("track mean must be finite")


def kalman_update(track: RangeTrack, z: float, meas_var: float,
                  process_var: float = PROCESS_VAR,
                  predicted_motion: float = 0.0) -> RangeTrack:
    """One scalar predict/update cycle."""
    if not meas_var > 0:
        raise ValueError(f"measurement variance must be positive, got {meas_var}")
    if process_var < 0:
        raise ValueError(f"process variance must be non-negative, got {process_var}")
    mean = track.mean + predicted_motion
    var = track.variance + process_var
    gain = var / (var + meas_var)
    mean = mean + gain * (z - mean)
    var = var * (1.0 - gain)
    return replace(track, mean=mean, variance=var, last_update=track.last_update + 1)


def inverse_tau(range_m: float, closing_speed: float) -> float:
    """Closing speed over range (estimated inverse time-to-arrival)."""
    if not range_m > 0:
        raise ValueError(f"range must be positive, got {range_m}")
    return closing_speed / range_m if closing_speed > 0 else 0.0


def looming_reward(c: float, inv_tau: float, v: float) -> float:
    if v > 0:
        return -c * math.tanh(inv_tau)
    return 0.0


class DelayBuffer:
    """FIFO of decided actions; executes the one decided ``d`` steps ago.

    Keeps enough history for the largest admissible delay so ``d`` may change
    between calls (piecewise-constant parameters); neutral actions are
    returned until the queue is warm.
    """

    def __init__(self, d: float = 0.0):
        self.d = d
        self._queue: deque = deque(maxlen=MAX_DELAY_STEPS + 1)

    @property
    def d_int(self) -> int:
        return round_delay(self.d)

    def __len__(self):
        return len(self._queue)

    def reset(self):
        self._queue.clear()

    def copy(self) -> "DelayBuffer":
        other = DelayBuffer(self.d)
        other._queue.extend(self._queue)
        return other


def delay_apply(buffer: DelayBuffer, a: Action) -> Action:
    buffer._queue.append(a)
    lag = buffer.d_int
    if lag >= len(buffer._queue):
        return NEUTRAL
    return buffer._queue[-1 - lag]
