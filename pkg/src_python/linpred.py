"""
Linear prediction fitted on control gait, and the prediction residual it leaves.

Sign convention: x_hat(n) = -sum_i a(i) x(n - i), so the residual is
e(n) = x(n) + sum_i a(i) x(n - i), i.e. the FIR filter [1, a(1), ..., a(p)].
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, toeplitz
from scipy.signal import lfilter

from errors import DataError, NoControlRecordings, OrderTooLarge, SingularSystem
from gait_data import N_CHANNELS, Label, Recording
from logger import logger

DEFAULT_ORDER = 11
RIDGE = 1e-8


@dataclass(frozen=True, eq=False)
class LprRecording(Recording):
    """A Recording whose channels hold prediction residuals e_c(n)."""


@dataclass(frozen=True, eq=False)
class LinearPredictor:
    coeffs: np.ndarray  # (channels, order)

    def __post_init__(self):
        if self.coeffs.ndim != 2 or self.coeffs.shape[0] != N_CHANNELS or self.coeffs.shape[1] < 1:
            raise ValueError(f"coefficients must have shape ({N_CHANNELS}, p), got {self.coeffs.shape}")
        if not np.all(np.isfinite(self.coeffs)):
            raise ValueError("coefficients must be finite")
        self.coeffs.setflags(write=False)

    @property
    def order_p(self) -> int:
        return int(self.coeffs.shape[1])

    @property
    def total_coefficients(self) -> int:
        return int(self.coeffs.size)

    def __eq__(self, other):
        if not isinstance(other, LinearPredictor):
            return NotImplemented
        return np.array_equal(self.coeffs, other.coeffs)

    __hash__ = None


def _sorted_controls(controls: Sequence[Recording]) -> List[Recording]:
    if not controls:
        raise NoControlRecordings()
    for rec in controls:
        if rec.label is not Label.CONTROL:
            raise DataError(f"LP fitting accepts control recordings only, got {rec.key_str} ({rec.label.value})")
    return sorted(controls, key=lambda r: r.key)


def build_fitting_signal(controls: Sequence[Recording], channel: int, p: int) -> np.ndarray:
    """Concatenate one channel of every control recording with p zeros between neighbours."""
    ordered = _sorted_controls(controls)
    if not 0 <= channel < N_CHANNELS:
        raise ValueError(f"channel must be in [0, {N_CHANNELS}), got {channel}")
    pad = np.zeros(p)
    pieces = []
    for i, rec in enumerate(ordered):
        if i:
            pieces.append(pad)
        pieces.append(np.asarray(rec.channels[channel], dtype=np.float64))
    return np.concatenate(pieces)


def autocorrelation(x: np.ndarray, max_lag: int) -> np.ndarray:
    """Lags 0..max_lag of the zero-extended signal."""
    m = len(x)
    return np.array([np.dot(x[:m - k], x[k:]) for k in range(max_lag + 1)])


def fit_lp(x: np.ndarray, p: int) -> np.ndarray:
    """Autocorrelation-method LP coefficients a(1..p) via Cholesky on the Toeplitz normal equations."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= p:
        raise OrderTooLarge(len(x), p)
    r = autocorrelation(x, p)
    R = toeplitz(r[:p])
    rhs = -r[1:]
    try:
        return cho_solve(cho_factor(R), rhs)
    except LinAlgError:
        pass
    ridge = RIDGE * r[0]
    if not ridge > 0:
        raise SingularSystem("Signal is identically zero")
    logger.debug(f"Normal equations not SPD, retrying with ridge {ridge:.3e}")
    try:
        return cho_solve(cho_factor(R + ridge * np.eye(p)), rhs)
    except LinAlgError:
        raise SingularSystem() from None


def _fit_channel(args):
    controls, channel, p = args
    try:
        return fit_lp(build_fitting_signal(controls, channel, p), p)
    except SingularSystem as e:
        raise SingularSystem(str(e), channel=channel) from None


def fit_all_channels(controls: Sequence[Recording], p: int = DEFAULT_ORDER, max_workers: int = 1) -> LinearPredictor:
    ordered = _sorted_controls(controls)
    jobs = [(ordered, c, p) for c in range(N_CHANNELS)]
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as executor:
            coeffs = list(executor.map(_fit_channel, jobs))
    else:
        coeffs = [_fit_channel(job) for job in jobs]
    return LinearPredictor(np.vstack(coeffs))


def residual_signal(coeffs: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Prediction error of one or more channels; `coeffs` is (p,) or (C, p) matching `x`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return lfilter(np.concatenate([[1.0], coeffs]), [1.0], x)
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        out[c] = lfilter(np.concatenate([[1.0], coeffs[c]]), [1.0], x[c])
    return out


def residual(lp: LinearPredictor, rec: Recording) -> LprRecording:
    if rec.channels.shape[0] != N_CHANNELS:
        raise ValueError(f"Recording must have {N_CHANNELS} channels")
    e = residual_signal(lp.coeffs, rec.channels)
    return LprRecording(rec.subject, rec.walk_index, rec.label, rec.sample_rate_hz, e, rec.timestamps.copy())


def residual_energy_ratios(lp: LinearPredictor, controls: Sequence[Recording]) -> np.ndarray:
    """Per channel: residual energy over signal energy on the fitting signal (<= 1 at the optimum)."""
    ratios = np.empty(N_CHANNELS)
    for c in range(N_CHANNELS):
        x = build_fitting_signal(controls, c, lp.order_p)
        e = lfilter(np.concatenate([[1.0], lp.coeffs[c]]), [1.0], np.concatenate([x, np.zeros(lp.order_p)]))
        ratios[c] = np.dot(e, e) / np.dot(x, x)
    return ratios


def mean_abs_residual_by_class(lprs: Sequence[Recording]) -> Dict[str, float]:
    """Average |e| per class; PD is expected to sit above control on real data."""
    out = {}
    for label in (Label.PD, Label.CONTROL):
        values = [float(np.mean(np.abs(r.channels))) for r in lprs if r.label is label]
        out[label.value] = float(np.mean(values)) if values else float("nan")
    return out
