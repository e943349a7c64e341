"""
Signal preprocessing: FIR smoothing, 2x decimation, unit-variance scaling, windowing.
"""

from dataclasses import dataclass
from enum import Enum
from typing import List, Tuple

import numpy as np
from scipy.signal import lfilter

from errors import RecordingTooShort, TooFewWindows, ZeroVarianceChannel
from gait_data import Label, Recording, SubjectId


class Preprocessing(str, Enum):
    """Which preprocessing chain produced an artifact."""
    NORMALIZED_100HZ = "normalized_100hz"          # normalize only
    FILTERED_50HZ = "filtered_decimated_50hz"      # MA(2) -> decimate -> normalize


@dataclass(frozen=True, eq=False)
class Window:
    data: np.ndarray
    label: Label
    source: Tuple[SubjectId, int]
    offset: int

    @property
    def subject(self) -> SubjectId:
        return self.source[0]

    @property
    def ref(self) -> Tuple[SubjectId, int, int]:
        return (self.source[0], self.source[1], self.offset)


def moving_average(x: np.ndarray, order: int) -> np.ndarray:
    """Causal FIR mean of the last `order` samples, zero initial conditions."""
    if order < 1:
        raise ValueError(f"order must be positive, got {order}")
    taps = np.full(order, 1.0 / order)
    return lfilter(taps, [1.0], np.asarray(x, dtype=np.float64), axis=-1)


def decimate2(x: np.ndarray) -> np.ndarray:
    """Keep even-index samples; caller is expected to have low-pass filtered first."""
    return np.ascontiguousarray(np.asarray(x)[..., ::2])


def normalize_unit_variance(x: np.ndarray, zero_mean: bool = False) -> np.ndarray:
    """Divide every channel by its population std (mean kept unless `zero_mean`)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    std = x.std(axis=1)
    for c, s in enumerate(std):
        if not s > 0:
            raise ZeroVarianceChannel(c)
    centred = x - x.mean(axis=1, keepdims=True) if zero_mean else x
    return centred / std[:, None]


def preprocess(rec: Recording, variant: Preprocessing, zero_mean: bool = False) -> Recording:
    channels = rec.channels
    rate = rec.sample_rate_hz
    if variant is Preprocessing.FILTERED_50HZ:
        channels = decimate2(moving_average(channels, 2))
        rate = rate / 2.0
    return rec.with_channels(normalize_unit_variance(channels, zero_mean=zero_mean), sample_rate_hz=rate)


def window_count(length: int, window_len: int, stride: int) -> int:
    if length < window_len:
        return 0
    return (length - window_len) // stride + 1


def make_windows(rec: Recording, window_len: int, stride: int) -> List[Window]:
    if window_len < 1 or stride < 1:
        raise ValueError("window_len and stride must be positive")
    if rec.length < window_len:
        raise RecordingTooShort(rec.length, window_len)
    count = window_count(rec.length, window_len, stride)
    return [
        Window(rec.channels[:, i * stride:i * stride + window_len], rec.label, rec.key, i * stride)
        for i in range(count)
    ]


def stack_windows(windows: List[Window]) -> Tuple[np.ndarray, np.ndarray]:
    """Batch array (B, C, W) and 0/1 targets with PD as the positive class."""
    if not windows:
        raise TooFewWindows("No windows to stack")
    x = np.stack([w.data for w in windows]).astype(np.float32)
    y = np.array([w.label.target for w in windows], dtype=np.float32)
    return x, y
