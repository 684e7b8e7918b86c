"""Deterministic signal processing for binaural localisation.

Framing of two-ear signals, the fixed gammatone kernel bank used as the
frequency-analysis layer, direct kernel convolution, GCC-PHAT features for the
baseline network and log-power spectra of convolution kernels.

All functions are pure: they only read their arguments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import fftconvolve

from waveloc.errors import EmptyInputError, InputError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
FRAME_LENGTH = 320  # 20 ms
FRAME_HOP = 160  # 10 ms

GAMMATONE_CHANNELS = 32
GAMMATONE_LOW_HZ = 70.0
GAMMATONE_HIGH_HZ = 7000.0
GAMMATONE_ORDER = 4
GAMMATONE_NFFT = 4096

GCC_NFFT = 1024
GCC_MAX_LAG = 18
GCC_PHAT_EPS = 1e-8
GCC_VARIANCE_FLOOR = 1e-12


@dataclass
class MonoWaveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InputError("mono waveform must be one-dimensional")
        _check_audio(self.samples, self.sample_rate)

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass
class BinauralWaveform:
    """Two-ear signal; row 0 is the left ear, row 1 the right ear."""

    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise InputError(
                f"binaural waveform must have shape (2, N), got {self.samples.shape}"
            )
        _check_audio(self.samples, self.sample_rate)

    @property
    def left(self) -> np.ndarray:
        return self.samples[0]

    @property
    def right(self) -> np.ndarray:
        return self.samples[1]

    def __len__(self) -> int:
        return self.samples.shape[1]


@dataclass
class BinauralFrame:
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data)
        if self.data.shape != (2, FRAME_LENGTH):
            raise InputError(
                f"binaural frame must be 2x{FRAME_LENGTH}, got {self.data.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise InputError("binaural frame contains non-finite samples")


@dataclass(frozen=True)
class GammatoneKernelSpec:
    amplitude: float
    order: int
    centre_frequency: float
    phase: float
    bandwidth: float
    length: int = FRAME_LENGTH

    def __post_init__(self) -> None:
        if self.order < 1:
            raise InputError("gammatone order must be >= 1")
        if not 0.0 < self.centre_frequency < SAMPLE_RATE / 2:
            raise InputError(
                f"centre frequency {self.centre_frequency} Hz outside (0, fs/2)"
            )
        if self.bandwidth <= 0:
            raise InputError("gammatone bandwidth must be positive")
        if self.length != FRAME_LENGTH:
            raise InputError(f"gammatone kernels are {FRAME_LENGTH} taps long")

    def impulse_response(self, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
        """Sample ``a t^(n-1) cos(2 pi f t + phi) exp(-2 pi b t)`` at t=(k+1)/fs."""
        t = np.arange(1, self.length + 1, dtype=np.float64) / sample_rate
        return (
            self.amplitude
            * t ** (self.order - 1)
            * np.cos(2 * np.pi * self.centre_frequency * t + self.phase)
            * np.exp(-2 * np.pi * self.bandwidth * t)
        )


@dataclass
class GammatoneKernelBank:
    """Time-reversed gammatone impulse responses, one row per channel."""

    kernels: np.ndarray
    specs: List[GammatoneKernelSpec] = field(default_factory=list)

    @property
    def centre_frequencies(self) -> np.ndarray:
        return np.array([s.centre_frequency for s in self.specs])

    def __len__(self) -> int:
        return self.kernels.shape[0]


@dataclass
class GccFeature:
    """Standardised GCC-PHAT values at lags -18..+18 (index 18 is lag 0)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (2 * GCC_MAX_LAG + 1,):
            raise InputError(
                f"GCC feature must have {2 * GCC_MAX_LAG + 1} values, "
                f"got {self.values.shape}"
            )


@dataclass
class SpectrumMatrix:
    """Log-power spectra in dB, one row per kernel, bins 0..nfft/2."""

    values: np.ndarray
    nfft: int
    sample_rate: int = SAMPLE_RATE

    @property
    def frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.nfft, d=1.0 / self.sample_rate)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape


def _check_audio(samples: np.ndarray, sample_rate: int) -> None:
    if sample_rate != SAMPLE_RATE:
        raise InputError(
            f"sample rate must be {SAMPLE_RATE} Hz (no resampling), got {sample_rate}"
        )
    if not np.all(np.isfinite(samples)):
        raise InputError("waveform contains non-finite samples")


def frame_count(num_samples: int) -> int:
    """Return the number of full 20 ms windows in ``num_samples`` samples."""
    if num_samples < FRAME_LENGTH:
        return 0
    return (num_samples - FRAME_LENGTH) // FRAME_HOP + 1


def frame_array(samples: np.ndarray) -> np.ndarray:
    """Frame a ``(2, N)`` array into ``(K, 2, 320)`` rectangular windows.

    Frame ``k`` covers samples ``[160 k, 160 k + 320)``; the trailing partial
    window is dropped.

    Raises:
        EmptyInputError: if the signal is shorter than one window.
    """
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != 2:
        raise InputError(f"expected a (2, N) array, got {samples.shape}")
    count = frame_count(samples.shape[1])
    if count == 0:
        raise EmptyInputError(
            f"signal of {samples.shape[1]} samples is shorter than one "
            f"{FRAME_LENGTH}-sample window"
        )
    windows = sliding_window_view(samples, FRAME_LENGTH, axis=1)[:, ::FRAME_HOP]
    return np.ascontiguousarray(windows[:, :count].transpose(1, 0, 2))


def frame_signal(wave: BinauralWaveform) -> List[BinauralFrame]:
    """Split a binaural waveform into 2x320 frames with a 160-sample hop."""
    return [BinauralFrame(frame) for frame in frame_array(wave.samples)]


def erb_bandwidth(frequency: np.ndarray | float) -> np.ndarray | float:
    """Equivalent rectangular bandwidth in Hz (Glasberg and Moore)."""
    return 24.7 * (4.37 * np.asarray(frequency) / 1000.0 + 1.0)


def erb_rate(frequency: np.ndarray | float) -> np.ndarray | float:
    """Number of ERBs below ``frequency``."""
    return 21.4 * np.log10(4.37e-3 * np.asarray(frequency) + 1.0)


def erb_rate_to_frequency(rate: np.ndarray | float) -> np.ndarray | float:
    return (10.0 ** (np.asarray(rate) / 21.4) - 1.0) / 4.37e-3


def erb_space(low: float, high: float, count: int) -> np.ndarray:
    """Return ``count`` frequencies equally spaced on the ERB-rate scale.

    Both endpoints are included exactly.
    """
    rates = np.linspace(erb_rate(low), erb_rate(high), count)
    freqs = erb_rate_to_frequency(rates)
    freqs[0], freqs[-1] = low, high
    return freqs


def design_gammatone_bank(
    channels: int = GAMMATONE_CHANNELS,
    low_hz: float = GAMMATONE_LOW_HZ,
    high_hz: float = GAMMATONE_HIGH_HZ,
    sample_rate: int = SAMPLE_RATE,
    length: int = FRAME_LENGTH,
) -> GammatoneKernelBank:
    """Design the fixed 4th-order gammatone bank used by the GTF network.

    Bandwidths follow ``b = 1.019 ERB(f)`` and the carrier phase is zero.
    Each impulse response is scaled so that the peak of its magnitude
    response (4096-point FFT) is exactly 1.0, then flipped in time so that a
    correlation-style convolution layer applies the original filter.
    """
    centres = erb_space(low_hz, high_hz, channels)
    specs: List[GammatoneKernelSpec] = []
    kernels = np.empty((channels, length), dtype=np.float64)
    for i, fc in enumerate(centres):
        unit = GammatoneKernelSpec(
            amplitude=1.0,
            order=GAMMATONE_ORDER,
            centre_frequency=float(fc),
            phase=0.0,
            bandwidth=float(1.019 * erb_bandwidth(fc)),
            length=length,
        )
        response = unit.impulse_response(sample_rate)
        peak = np.max(np.abs(np.fft.rfft(response, GAMMATONE_NFFT)))
        spec = GammatoneKernelSpec(
            amplitude=1.0 / peak,
            order=unit.order,
            centre_frequency=unit.centre_frequency,
            phase=unit.phase,
            bandwidth=unit.bandwidth,
            length=length,
        )
        specs.append(spec)
        kernels[i] = (response / peak)[::-1]
    logger.debug(
        "designed %d gammatone kernels %.1f-%.1f Hz", channels, centres[0], centres[-1]
    )
    return GammatoneKernelBank(kernels=kernels, specs=specs)


def convolve_kernel(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Convolve ``x`` with kernel ``w`` keeping the input length.

    Computes ``y[t] = sum_m x[m] w[t - m]`` with zero padding; output sample
    ``t`` is the full convolution at ``t + (M - 1) // 2`` so that it lines up
    with the kernel's temporal centre.
    """
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (FRAME_LENGTH,):
        raise InputError(f"kernel must have {FRAME_LENGTH} taps, got {w.shape}")
    return fftconvolve(x, w, mode="same")


def _phat_correlation(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """PHAT-weighted correlation values at lags -18..+18.

    Positive lag means the left channel leads.
    """
    spec = np.fft.rfft(left, GCC_NFFT, axis=-1) * np.conj(
        np.fft.rfft(right, GCC_NFFT, axis=-1)
    )
    spec = spec / (np.abs(spec) + GCC_PHAT_EPS)
    cc = np.fft.irfft(spec, GCC_NFFT, axis=-1)
    # cc[tau] peaks at tau = -d when the right channel lags by d samples
    lags = np.arange(-GCC_MAX_LAG, GCC_MAX_LAG + 1)
    return cc[..., (-lags) % GCC_NFFT]


def _standardise(values: np.ndarray) -> np.ndarray:
    mean = values.mean(axis=-1, keepdims=True)
    var = values.var(axis=-1, keepdims=True)
    return (values - mean) / np.sqrt(np.maximum(var, GCC_VARIANCE_FLOOR))


def gcc_phat_lag(frame: BinauralFrame) -> int:
    """Return the lag (in samples, left leading positive) of the GCC-PHAT peak."""
    cc = _phat_correlation(frame.data[0], frame.data[1])
    return int(np.argmax(cc)) - GCC_MAX_LAG


def gcc_phat(frame: BinauralFrame) -> GccFeature:
    """Standardised 37-lag GCC-PHAT feature of one binaural frame."""
    cc = _phat_correlation(
        np.asarray(frame.data[0], dtype=np.float64),
        np.asarray(frame.data[1], dtype=np.float64),
    )
    return GccFeature(_standardise(cc))


def gcc_phat_frames(frames: np.ndarray) -> np.ndarray:
    """Vectorised :func:`gcc_phat` over a ``(K, 2, 320)`` frame stack."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or frames.shape[1:] != (2, FRAME_LENGTH):
        raise InputError(f"expected (K, 2, {FRAME_LENGTH}) frames, got {frames.shape}")
    return _standardise(_phat_correlation(frames[:, 0], frames[:, 1]))


def kernel_log_power_spectra(kernels: np.ndarray, nfft: int) -> SpectrumMatrix:
    """Return ``20 log10(|FFT(kernel, nfft)| + 1e-12)`` for every row."""
    kernels = np.atleast_2d(np.asarray(kernels, dtype=np.float64))
    if nfft < kernels.shape[1] or nfft & (nfft - 1):
        raise InputError(
            f"nfft must be a power of two >= kernel length {kernels.shape[1]}, "
            f"got {nfft}"
        )
    magnitude = np.abs(np.fft.rfft(kernels, nfft, axis=1))
    return SpectrumMatrix(values=20.0 * np.log10(magnitude + 1e-12), nfft=nfft)
