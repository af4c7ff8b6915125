"""Streaming signal processing for the acceleration chain.

The acquisition chain is: 1000 Hz raw tri-axial acceleration -> 128-tap
Kaiser-window FIR low-pass (110 Hz) -> keep every 10th sample (100 Hz) ->
tilt from the gravity projection -> 1 Hz first-order low-pass on tilt.

Streams are passed around as blocks: a timestamp vector ``t`` of shape
``(n,)`` and an acceleration array ``acc`` of shape ``(n, 3)`` in g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import kaiser_beta, lfilter

RAW_RATE_HZ = 1000.0
OUTPUT_RATE_HZ = 100.0
DECIMATION = 10
NUM_TAPS = 128
CUTOFF_HZ = 110.0
STOPBAND_ATTEN_DB = 60.0
TILT_CUTOFF_HZ = 1.0


@dataclass(frozen=True)
class AccelFrame:
    """One tri-axial acceleration sample, in g."""

    t: float
    ax: float
    ay: float
    az: float


@dataclass(frozen=True)
class TiltSample:
    t: float
    pitch_deg: float
    roll_deg: float


@dataclass(frozen=True)
class NoiseStats:
    rmse: float
    count: int


@dataclass(frozen=True)
class FirSpec:
    num_taps: int
    cutoff_hz: float
    sample_rate_hz: float
    kaiser_beta: float
    coefficients: np.ndarray

    def to_text(self) -> str:
        """Coefficients as a plain-text column of decimals."""
        return "".join(f"{c:.17g}\n" for c in self.coefficients)


def design_kaiser_fir(
    num_taps: int = NUM_TAPS,
    cutoff_hz: float = CUTOFF_HZ,
    sample_rate_hz: float = RAW_RATE_HZ,
    stopband_atten_db: float = STOPBAND_ATTEN_DB,
) -> FirSpec:
    """Design a linear-phase low-pass FIR by the Kaiser window method.

    The ideal low-pass impulse response (a sinc centred on the middle tap)
    is multiplied by a Kaiser window whose beta follows from the requested
    stopband attenuation, then scaled so the taps sum to exactly one.
    """
    if num_taps < 1:
        raise ValueError("num_taps must be >= 1")
    nyquist = sample_rate_hz / 2.0
    if not 0.0 < cutoff_hz < nyquist:
        raise ValueError(f"cutoff_hz must lie in (0, {nyquist}), got {cutoff_hz}")

    beta = float(kaiser_beta(stopband_atten_db))
    fc = cutoff_hz / sample_rate_hz
    n = np.arange(num_taps) - (num_taps - 1) / 2.0
    h = 2.0 * fc * np.sinc(2.0 * fc * n) * np.kaiser(num_taps, beta)
    h = h / h.sum()
    # enforce exact symmetry against rounding in the window evaluation
    h = 0.5 * (h + h[::-1])
    h = h / h.sum()
    h.setflags(write=False)
    return FirSpec(num_taps, float(cutoff_hz), float(sample_rate_hz), beta, h)


class FirDecimator:
    """Stateful FIR filter followed by integer decimation.

    The delay line starts full of zeros. Of every ``factor`` consecutive
    input samples, the filtered value at the last one is emitted, so ``N``
    inputs always yield ``N // factor`` outputs regardless of how the
    stream is split into blocks.
    """

    def __init__(self, fir: FirSpec, factor: int = DECIMATION, channels: int = 3):
        if factor < 1:
            raise ValueError("decimation factor must be >= 1")
        self.fir = fir
        self.factor = int(factor)
        self._reversed = np.ascontiguousarray(fir.coefficients[::-1])
        self._history = np.zeros((fir.num_taps - 1, channels))
        self._count = 0

    def process(self, t: np.ndarray, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        t = np.asarray(t, dtype=float)
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        n = len(t)
        if n == 0:
            return t[:0], np.zeros((0, x.shape[1]))

        buf = np.concatenate([self._history, x], axis=0)
        taps = self.fir.num_taps
        first = (self.factor - 1 - self._count) % self.factor
        keep = np.arange(first, n, self.factor)
        out = np.empty((len(keep), x.shape[1]))
        for ch in range(x.shape[1]):
            windows = sliding_window_view(buf[:, ch], taps)
            out[:, ch] = windows[keep] @ self._reversed

        self._history = buf[len(buf) - (taps - 1):] if taps > 1 else buf[:0]
        self._count += n
        return t[keep], out


def stream_filter_decimate(
    t: np.ndarray, acc: np.ndarray, fir: FirSpec, factor: int = DECIMATION
) -> tuple[np.ndarray, np.ndarray]:
    """One-shot filter-and-decimate of a whole block with a fresh delay line."""
    acc = np.asarray(acc, dtype=float)
    channels = 1 if acc.ndim == 1 else acc.shape[1]
    return FirDecimator(fir, factor, channels).process(t, acc)


def _arctan_deg(num: np.ndarray, den: np.ndarray) -> np.ndarray:
    # den >= 0 always, so arctan2 gives +-90 deg for den == 0
    return np.degrees(np.arctan2(num, den))


def tilt_angles(acc: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised pitch and roll (degrees) from an ``(n, 3)`` gravity array."""
    acc = np.asarray(acc, dtype=float)
    ax, ay, az = acc[..., 0], acc[..., 1], acc[..., 2]
    if np.any((ax == 0) & (ay == 0) & (az == 0)):
        raise ValueError("orientation undefined for an all-zero acceleration vector")
    pitch = _arctan_deg(ax, np.hypot(ay, az))
    roll = _arctan_deg(ay, np.hypot(ax, az))
    return pitch, roll


def estimate_tilt(frame: AccelFrame) -> TiltSample:
    pitch, roll = tilt_angles(np.array([frame.ax, frame.ay, frame.az]))
    return TiltSample(frame.t, float(pitch), float(roll))


def gravity_vector(pitch_deg, roll_deg) -> np.ndarray:
    """Unit gravity vector whose tilt estimate is exactly (pitch, roll).

    Inverts the tilt equations: ``ax = sin(pitch)``, ``ay = sin(roll)`` and
    ``az`` completes the unit norm. Requires ``sin^2 pitch + sin^2 roll <= 1``.
    """
    ax = np.sin(np.radians(pitch_deg))
    ay = np.sin(np.radians(roll_deg))
    az = np.sqrt(np.clip(1.0 - ax * ax - ay * ay, 0.0, None))
    return np.stack(np.broadcast_arrays(ax, ay, az), axis=-1)


class TiltLowPass:
    """Causal first-order low-pass, applied independently per channel.

    ``y[n] = y[n-1] + alpha * (x[n] - y[n-1])`` with
    ``alpha = 1 - exp(-2 pi fc / fs)`` (impulse-invariant mapping of a
    single RC pole). The first sample seeds the state.
    """

    def __init__(self, cutoff_hz: float = TILT_CUTOFF_HZ, sample_rate_hz: float = OUTPUT_RATE_HZ):
        if cutoff_hz <= 0:
            raise ValueError("cutoff_hz must be positive")
        if cutoff_hz >= sample_rate_hz / 2:
            raise ValueError("cutoff_hz must be below the Nyquist frequency")
        self.alpha = 1.0 - math.exp(-2.0 * math.pi * cutoff_hz / sample_rate_hz)
        self._state: np.ndarray | None = None

    def process(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[:, None]
        if len(x) == 0:
            return x[:, 0] if squeeze else x
        prev = x[0] if self._state is None else self._state
        b = 1.0 - self.alpha
        out, zf = lfilter([self.alpha], [1.0, -b], x, axis=0, zi=(b * prev)[None, :])
        self._state = zf[0] / b
        return out[:, 0] if squeeze else out


def lowpass_tilt(
    samples: list[TiltSample], cutoff_hz: float = TILT_CUTOFF_HZ, sample_rate_hz: float = OUTPUT_RATE_HZ
) -> list[TiltSample]:
    lpf = TiltLowPass(cutoff_hz, sample_rate_hz)
    if not samples:
        return []
    arr = np.array([[s.pitch_deg, s.roll_deg] for s in samples])
    y = lpf.process(arr)
    return [TiltSample(s.t, float(p), float(r)) for s, (p, r) in zip(samples, y)]


def noise_rmse(samples) -> NoiseStats:
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise ValueError("noise_rmse needs at least 2 samples")
    return NoiseStats(float(np.sqrt(np.mean((x - x.mean()) ** 2))), int(x.size))


class AcquisitionChain:
    """Raw 1000 Hz acceleration in g -> 100 Hz rows.

    Each row is ``(t, ax_mg, ay_mg, az_mg, roll_deg, pitch_deg)``; tilt is
    computed from the decimated acceleration and then low-passed.
    """

    def __init__(self, fir: FirSpec | None = None, factor: int = DECIMATION, tilt_cutoff_hz: float = TILT_CUTOFF_HZ):
        self.fir = fir if fir is not None else default_fir()
        self.decimator = FirDecimator(self.fir, factor)
        out_rate = self.fir.sample_rate_hz / factor
        self.tilt_lpf = TiltLowPass(tilt_cutoff_hz, out_rate)

    def prime(self, t: np.ndarray, acc: np.ndarray) -> None:
        """Fill the FIR delay line; outputs are discarded and tilt is untouched."""
        self.decimator.process(t, acc)

    def process(self, t: np.ndarray, acc: np.ndarray) -> np.ndarray:
        td, ad = self.decimator.process(t, acc)
        rows = np.empty((len(td), 6))
        if len(td) == 0:
            return rows
        pitch, roll = tilt_angles(ad)
        tilt = self.tilt_lpf.process(np.column_stack([roll, pitch]))
        rows[:, 0] = td
        rows[:, 1:4] = ad * 1000.0
        rows[:, 4:6] = tilt
        return rows


_DEFAULT_FIR: FirSpec | None = None


def default_fir() -> FirSpec:
    global _DEFAULT_FIR
    if _DEFAULT_FIR is None:
        _DEFAULT_FIR = design_kaiser_fir()
    return _DEFAULT_FIR
