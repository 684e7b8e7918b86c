"""Synthetic binaural rendering and dataset generation.

A rigid spherical head provides Woodworth interaural time differences and a
first-order head-shadow filter for level differences.  Rooms are rectangular
and rendered with the image-source method; every reflection passes through
the head model at its own arrival azimuth.  Two measurements, Schroeder
reverberation time and direct-to-reverberant ratio, describe the result.

Azimuth is in degrees, positive to the right of the listener, who faces +x.
"""

from __future__ import annotations

import asyncio
import functools
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy.signal import bilinear, fftconvolve, filtfilt

from waveloc.errors import (
    ConfigurationError,
    EmptyInputError,
    InputError,
    UnmeasurableError,
    WavelocError,
)
from waveloc.utils.audio_dsp import SAMPLE_RATE, BinauralWaveform, MonoWaveform
from waveloc.utils.paths import PathLike, atomic_write_text, resolve_output
from waveloc.utils.wav_io import read_binaural, read_wav, write_wav

logger = logging.getLogger(__name__)

HEAD_RADIUS = 0.0875
SPEED_OF_SOUND = 343.0
SINC_HALF = 32  # 64-tap windowed sinc
LEAD = SINC_HALF
ALPHA_MIN = 0.1
THETA_MIN = 150.0
DIRECT_WINDOW = 40  # 2.5 ms at 16 kHz
IMAGE_FLOOR_DB = -60.0
CALIBRATION_SPAN = 1.5  # response length, in target T60s
CALIBRATION_PASSES = 3
CALIBRATION_TOLERANCE = 0.02
ANECHOIC_ID = "anechoic"
MANIFEST_VERSION = 1
SPLITS = ("train", "valid", "test")
SOURCE_KINDS = ("white_noise_burst", "speech_shaped_noise", "wav_corpus")
EDGE_SECONDS = 0.05
GATE_FRAME = 320
GATE_DB = 30.0
OUTPUT_PEAK = 0.95


def grid() -> List[int]:
    return list(range(-90, 91, 5))


def _check_grid(azimuth: float) -> int:
    if azimuth not in grid():
        raise InputError(f"azimuth {azimuth} is not on the 5 degree grid")
    return int(azimuth)


@dataclass(frozen=True)
class RoomSpec:
    """Rectangular room; ``target_t60 == 0`` means anechoic."""

    id: str
    dimensions: Tuple[float, float, float] = (6.0, 5.0, 3.0)
    target_t60: float = 0.5
    head_position: Optional[Tuple[float, float, float]] = None
    source_distance: float = 1.5
    max_image_order: Optional[int] = None
    brir_dir: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "dimensions", tuple(float(d) for d in self.dimensions))
        if len(self.dimensions) != 3 or min(self.dimensions) <= 0:
            raise ConfigurationError(f"room {self.id}: dimensions must be 3 positives")
        if self.target_t60 != 0 and not 0.1 <= self.target_t60 <= 2.0:
            raise ConfigurationError(
                f"room {self.id}: target_t60 {self.target_t60} outside [0.1, 2.0]"
            )
        if self.source_distance <= 0:
            raise ConfigurationError(f"room {self.id}: source distance must be > 0")
        if self.head_position is None:
            centre = tuple(d / 2 for d in self.dimensions)
            object.__setattr__(self, "head_position", centre)
        else:
            object.__setattr__(
                self, "head_position", tuple(float(p) for p in self.head_position)
            )
        if self.max_image_order is not None and self.max_image_order < 0:
            raise ConfigurationError(f"room {self.id}: max_image_order must be >= 0")

    @property
    def anechoic(self) -> bool:
        return self.target_t60 == 0 and self.brir_dir is None

    @property
    def volume(self) -> float:
        return float(np.prod(self.dimensions))

    @property
    def surface(self) -> float:
        lx, ly, lz = self.dimensions
        return 2.0 * (lx * ly + ly * lz + lx * lz)

    def source_position(self, azimuth: float) -> np.ndarray:
        theta = math.radians(azimuth)
        head = np.asarray(self.head_position)
        return head + self.source_distance * np.array(
            [math.cos(theta), -math.sin(theta), 0.0]
        )

    def validate_geometry(self, azimuth: float) -> None:
        dims = np.asarray(self.dimensions)
        for label, point in (
            ("head", np.asarray(self.head_position)),
            ("source", self.source_position(azimuth)),
        ):
            if np.any(point <= 0) or np.any(point >= dims):
                raise InputError(
                    f"room {self.id}: {label} at {point.round(3).tolist()} "
                    "is outside the room"
                )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["dimensions"] = list(self.dimensions)
        data["head_position"] = list(self.head_position)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RoomSpec":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        if "id" not in known:
            raise ConfigurationError("room spec needs an id")
        return cls(**known)


@dataclass
class Brir:
    left: np.ndarray
    right: np.ndarray
    azimuth_deg: int
    room_id: str = ANECHOIC_ID
    measured_t60: Optional[float] = None
    measured_drr: Optional[float] = None

    def __post_init__(self) -> None:
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.shape != self.right.shape or self.left.ndim != 1:
            raise InputError("BRIR ears must be equal-length vectors")
        self.azimuth_deg = _check_grid(self.azimuth_deg)

    @property
    def samples(self) -> np.ndarray:
        return np.stack([self.left, self.right])

    def __len__(self) -> int:
        return self.left.shape[0]


# -- head model ---------------------------------------------------------------


def woodworth_itd(
    azimuth_deg: float, head_radius: float = HEAD_RADIUS, c: float = SPEED_OF_SOUND
) -> float:
    """Interaural time difference in seconds (left arrival minus right arrival).

    Positive for sources on the right, where the right ear leads.
    """
    if not -90.0 <= azimuth_deg <= 90.0:
        raise InputError(f"azimuth {azimuth_deg} outside [-90, 90]")
    theta = math.radians(azimuth_deg)
    return head_radius / c * (theta + math.sin(theta))


def fractional_delay(delay: float, length: int) -> np.ndarray:
    """Hann-windowed sinc impulse centred at ``delay`` samples (64 taps)."""
    u = np.arange(length) - delay
    window = np.where(
        np.abs(u) < SINC_HALF, 0.5 * (1.0 + np.cos(np.pi * u / SINC_HALF)), 0.0
    )
    return np.sinc(u) * window


def shadow_alpha(incidence_deg: float) -> float:
    """High-frequency gain of the head-shadow filter for an incidence angle.

    2.0 (+6 dB) facing the source, 0.1 at the shadowed side.
    """
    return (1.0 + ALPHA_MIN / 2.0) + (1.0 - ALPHA_MIN / 2.0) * math.cos(
        math.radians(incidence_deg / THETA_MIN * 180.0)
    )


def head_shadow(
    signal: np.ndarray,
    incidence_deg: float,
    head_radius: float = HEAD_RADIUS,
    c: float = SPEED_OF_SOUND,
    fs: int = SAMPLE_RATE,
) -> np.ndarray:
    """Apply the one-pole/one-zero shadow filter with zero phase.

    The filter uses ``sqrt(alpha)`` and runs forwards and backwards, so its
    magnitude reaches ``alpha`` at high frequency without shifting timing.
    """
    beta = math.sqrt(shadow_alpha(incidence_deg))
    corner = 2.0 * c / head_radius
    b, a = bilinear([beta / corner, 1.0], [1.0 / corner, 1.0], fs)
    return filtfilt(b, a, signal)


def _ear_incidences(azimuth: float) -> Tuple[float, float]:
    return abs(azimuth + 90.0), abs(azimuth - 90.0)


def _anechoic_length(distance: float, fs: int = SAMPLE_RATE) -> int:
    base = LEAD + distance / SPEED_OF_SOUND * fs
    return int(math.ceil(base + woodworth_itd(90.0) * fs / 2.0)) + SINC_HALF + 64


def _direct_path(
    azimuth: float, distance: float, length: int, fs: int = SAMPLE_RATE
) -> np.ndarray:
    base = LEAD + distance / SPEED_OF_SOUND * fs
    half_itd = woodworth_itd(azimuth) * fs / 2.0
    gain = 1.0 / distance
    out = np.empty((2, length))
    for ear, (sign, incidence) in enumerate(zip((1.0, -1.0), _ear_incidences(azimuth))):
        impulse = gain * fractional_delay(base + sign * half_itd, length)
        out[ear] = head_shadow(impulse, incidence, fs=fs)
    return out


def synth_anechoic_brir(azimuth: float, distance: float = 1.5) -> Brir:
    """Spherical-head anechoic BRIR for a grid azimuth at ``distance`` metres."""
    azimuth = _check_grid(azimuth)
    pair = _direct_path(azimuth, distance, _anechoic_length(distance))
    return Brir(pair[0], pair[1], azimuth, ANECHOIC_ID)


# -- image-source rooms ---------------------------------------------------------


def sabine_absorption(room: RoomSpec) -> float:
    """Uniform wall absorption giving ``target_t60`` by Sabine's formula."""
    if room.target_t60 == 0:
        return 1.0
    return min(1.0, 0.161 * room.volume / (room.surface * room.target_t60))


def _axis_images(
    length: float, source: float, count: int
) -> Tuple[np.ndarray, np.ndarray]:
    n = np.arange(-count, count + 1)
    coords = np.concatenate([2 * n * length + source, 2 * n * length - source])
    orders = np.concatenate([2 * np.abs(n), np.abs(n - 1) + np.abs(n)])
    return coords, orders


def _fold(azimuth: np.ndarray) -> np.ndarray:
    folded = np.where(azimuth > 90.0, 180.0 - azimuth, azimuth)
    return np.where(folded < -90.0, -180.0 - folded, folded)


def _order_limit(room: RoomSpec, loss: float) -> int:
    """Highest reflection order whose wall loss stays above the image floor."""
    per_reflection_db = 10.0 * loss / math.log(10.0)
    limit = int(math.floor(-IMAGE_FLOOR_DB / per_reflection_db))
    if room.max_image_order is not None:
        limit = min(limit, room.max_image_order)
    return limit


def _images(
    room: RoomSpec, azimuth: float, loss: float, max_dist: float
) -> Iterator[Tuple[float, np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(x, dist, gain, dy)`` for every slab of images sharing an x index.

    Each wall reflection keeps ``exp(-loss)`` of the energy.
    """
    beta = math.exp(-loss / 2.0)
    order_limit = _order_limit(room, loss)
    head = np.asarray(room.head_position)
    source = room.source_position(azimuth)
    axes = [
        _axis_images(dim, src, int(math.ceil(max_dist / (2 * dim))) + 1)
        for dim, src in zip(room.dimensions, source)
    ]
    (xc, xo), (yc, yo), (zc, zo) = axes
    ygrid, zgrid = np.meshgrid(yc - head[1], zc - head[2], indexing="ij")
    yo_grid, zo_grid = np.meshgrid(yo, zo, indexing="ij")
    dy, dz = ygrid.ravel(), zgrid.ravel()
    yz_order = (yo_grid + zo_grid).ravel()
    yz_sq = dy**2 + dz**2
    for x, ox in zip(xc - head[0], xo):
        order = yz_order + ox
        dist = np.sqrt(x * x + yz_sq)
        keep = (order >= 1) & (order <= order_limit) & (dist <= max_dist)
        if not np.any(keep):
            continue
        dist = dist[keep]
        yield x, dist, beta ** order[keep].astype(np.float64) / dist, dy[keep]


def _omni_energy(
    room: RoomSpec, azimuth: float, loss: float, length: int, fs: int
) -> np.ndarray:
    """Energy per sample of the direct path and all reflections, without a head."""
    energy = np.zeros(length)
    energy[int(round(room.source_distance / SPEED_OF_SOUND * fs))] = (
        room.source_distance**-2
    )
    max_dist = (length - 1) / fs * SPEED_OF_SOUND
    for _, dist, gain, _ in _images(room, azimuth, loss, max_dist):
        pos = np.rint(dist / SPEED_OF_SOUND * fs).astype(np.int64)
        energy += np.bincount(pos, gain**2, minlength=length)[:length]
    return energy


@functools.lru_cache(maxsize=256)
def reflection_loss(room: RoomSpec, azimuth: float, fs: int = SAMPLE_RATE) -> float:
    """Per-reflection energy loss (nepers) that reproduces ``target_t60``.

    Starts from the Sabine absorption.  The decay time of the image field is
    inversely proportional to the loss, which is rescaled by the
    measured-to-target ratio of the omnidirectional response until the two
    agree within 2%.  Rooms with ``max_image_order`` set keep the Sabine value.
    """
    loss = sabine_absorption(room)
    if room.target_t60 == 0 or room.max_image_order is not None:
        return loss
    length = int(math.ceil(CALIBRATION_SPAN * room.target_t60 * fs))
    for _ in range(CALIBRATION_PASSES):
        energy = _omni_energy(room, azimuth, loss, length, fs)
        try:
            ratio = schroeder_t60(np.sqrt(energy), fs) / room.target_t60
        except UnmeasurableError:
            logger.warning("room %s: image decay not measurable", room.id)
            break
        loss *= ratio
        if abs(ratio - 1.0) <= CALIBRATION_TOLERANCE:
            break
    logger.debug(
        "room %s az %+d: reflection loss %.4f (Sabine %.4f)",
        room.id,
        azimuth,
        loss,
        sabine_absorption(room),
    )
    return loss


def _reflection_trains(
    room: RoomSpec, azimuth: float, length: int, fs: int
) -> np.ndarray:
    """Per-azimuth-bin pulse trains (181 x length) of all reflections."""
    trains = np.zeros(181 * length)
    max_dist = (length - LEAD - 2 * SINC_HALF - 16) / fs * SPEED_OF_SOUND
    loss = reflection_loss(room, azimuth, fs)
    flats: List[np.ndarray] = []
    lower: List[np.ndarray] = []
    upper: List[np.ndarray] = []
    for x, dist, gain, ky in _images(room, azimuth, loss, max_dist):
        bins = np.rint(_fold(np.degrees(np.arctan2(-ky, x)))).astype(np.int64) + 90
        pos = dist / SPEED_OF_SOUND * fs
        start = np.floor(pos).astype(np.int64)
        frac = pos - start
        # linear interpolation between the two neighbouring samples
        flats.append(bins * length + start)
        lower.append(gain * (1.0 - frac))
        upper.append(gain * frac)
    if flats:
        flat = np.concatenate(flats)
        trains += np.bincount(flat, np.concatenate(lower), minlength=trains.size)
        trains += np.bincount(flat + 1, np.concatenate(upper), minlength=trains.size)
    return trains.reshape(181, length)


def _render_trains(trains: np.ndarray, length: int, fs: int) -> np.ndarray:
    out = np.zeros((2, length))
    kernel_len = 2 * SINC_HALF + int(math.ceil(woodworth_itd(90.0) * fs)) + 8
    for index in np.flatnonzero(np.any(trains != 0.0, axis=1)):
        az = float(index - 90)
        half_itd = woodworth_itd(az) * fs / 2.0
        for ear, (sign, incidence) in enumerate(zip((1.0, -1.0), _ear_incidences(az))):
            kernel = fractional_delay(LEAD + sign * half_itd, kernel_len)
            ear_signal = fftconvolve(trains[index], kernel)[:length]
            out[ear] += head_shadow(ear_signal, incidence, fs=fs)
    return out


def image_source_rir(
    room: RoomSpec, azimuth: float, fs: int = SAMPLE_RATE
) -> Brir:
    """Render a BRIR of ``room`` for a source at grid ``azimuth``.

    The per-reflection loss comes from :func:`reflection_loss`; images are
    kept up to ``max_image_order`` and while their wall losses stay above
    -60 dB.  The
    direct path is rendered exactly as :func:`synth_anechoic_brir`.
    """
    azimuth = _check_grid(azimuth)
    room.validate_geometry(azimuth)
    if room.target_t60 == 0 or room.max_image_order == 0:
        length = _anechoic_length(room.source_distance, fs)
        pair = _direct_path(azimuth, room.source_distance, length, fs)
        return Brir(pair[0], pair[1], azimuth, room.id)
    length = max(
        int(math.ceil(1.2 * room.target_t60 * fs)),
        _anechoic_length(room.source_distance, fs),
    )
    pair = _direct_path(azimuth, room.source_distance, length, fs)
    pair += _render_trains(_reflection_trains(room, azimuth, length, fs), length, fs)
    brir = Brir(pair[0], pair[1], azimuth, room.id)
    brir.measured_t60, brir.measured_drr = measure(brir)
    logger.debug(
        "room %s az %+d: T60 %.3f s DRR %.1f dB",
        room.id,
        azimuth,
        brir.measured_t60 or float("nan"),
        brir.measured_drr,
    )
    return brir


# -- measurements -------------------------------------------------------------


def _energy(rir: np.ndarray | Brir) -> np.ndarray:
    data = rir.samples if isinstance(rir, Brir) else np.asarray(rir, dtype=np.float64)
    if data.size == 0:
        raise InputError("impulse response is empty")
    energy = data**2
    return energy.sum(axis=0) if energy.ndim == 2 else energy


def schroeder_t60(rir: np.ndarray | Brir, fs: int = SAMPLE_RATE) -> float:
    """Reverberation time from the -5..-25 dB range of the energy decay curve.

    Two-channel input sums the ear energies.

    Raises:
        UnmeasurableError: if the decay curve never falls by 25 dB.
    """
    energy = _energy(rir)
    edc = np.cumsum(energy[::-1])[::-1]
    if edc[0] <= 0:
        raise UnmeasurableError("impulse response has no energy")
    with np.errstate(divide="ignore"):
        edc_db = 10.0 * np.log10(edc / edc[0])
    below5 = np.flatnonzero(edc_db <= -5.0)
    below25 = np.flatnonzero(edc_db <= -25.0)
    if below25.size == 0:
        raise UnmeasurableError("energy decay never reaches -25 dB")
    start, stop = below5[0], below25[0]
    if stop - start < 2:
        raise UnmeasurableError("decay range spans fewer than three samples")
    t = np.arange(start, stop + 1) / fs
    slope, _ = np.polyfit(t, edc_db[start : stop + 1], 1)
    if slope >= 0:
        raise UnmeasurableError("energy decay curve is not decreasing")
    return float(-60.0 / slope)


def drr(rir: np.ndarray | Brir) -> float:
    """Direct-to-reverberant ratio in dB; ``inf`` when there is no late energy.

    The direct part runs up to 2.5 ms after the energy peak.
    """
    energy = _energy(rir)
    split = int(np.argmax(energy)) + DIRECT_WINDOW
    direct, late = energy[:split].sum(), energy[split:].sum()
    if late <= 0:
        return float("inf")
    return float(10.0 * np.log10(direct / late))


def measure(brir: Brir) -> Tuple[Optional[float], float]:
    try:
        t60: Optional[float] = schroeder_t60(brir)
    except UnmeasurableError:
        t60 = None
    return t60, drr(brir)


# -- sources and rendering ------------------------------------------------------


def spatialize(source: MonoWaveform, brir: Brir) -> BinauralWaveform:
    """Convolve ``source`` with both ears and peak-normalise jointly to 0.95."""
    out = np.stack(
        [
            fftconvolve(source.samples, brir.left),
            fftconvolve(source.samples, brir.right),
        ]
    )
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= OUTPUT_PEAK / peak
    return BinauralWaveform(out, source.sample_rate)


def _raised_cosine_edges(signal: np.ndarray, fs: int) -> np.ndarray:
    edge = min(int(EDGE_SECONDS * fs), signal.size // 2)
    if edge == 0:
        return signal
    ramp = 0.5 * (1.0 - np.cos(np.pi * np.arange(edge) / edge))
    signal = signal.copy()
    signal[:edge] *= ramp
    signal[-edge:] *= ramp[::-1]
    return signal


def white_noise_burst(
    duration: float, seed: int, fs: int = SAMPLE_RATE
) -> MonoWaveform:
    rng = np.random.default_rng(seed)
    return MonoWaveform(0.1 * rng.standard_normal(int(round(duration * fs))), fs)


def speech_shaped_noise(
    duration: float, seed: int, fs: int = SAMPLE_RATE
) -> MonoWaveform:
    """Pink-weighted noise with 50 ms raised-cosine onset and offset."""
    rng = np.random.default_rng(seed)
    n = int(round(duration * fs))
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    weights = np.zeros_like(freqs)
    weights[1:] = 1.0 / np.sqrt(freqs[1:])
    noise = np.fft.irfft(spectrum * weights, n)
    noise *= 0.1 / max(np.sqrt(np.mean(noise**2)), 1e-12)
    return MonoWaveform(_raised_cosine_edges(noise, fs), fs)


def energy_gate(wave: MonoWaveform, threshold_db: float = GATE_DB) -> MonoWaveform:
    """Drop leading and trailing 20 ms frames more than 30 dB below the RMS."""
    samples = wave.samples
    count = samples.size // GATE_FRAME
    if count == 0:
        raise EmptyInputError("utterance shorter than one gate frame")
    frames = samples[: count * GATE_FRAME].reshape(count, GATE_FRAME)
    overall = np.sqrt(np.mean(samples**2))
    if overall == 0:
        raise EmptyInputError("utterance is silent")
    levels = np.sqrt(np.mean(frames**2, axis=1))
    active = np.flatnonzero(levels >= overall * 10 ** (-threshold_db / 20.0))
    if active.size == 0:
        raise EmptyInputError("no gate frame reaches the gate level")
    first, last = active[0], active[-1]
    end = samples.size if last == count - 1 else (last + 1) * GATE_FRAME
    return MonoWaveform(samples[first * GATE_FRAME : end], wave.sample_rate)


@dataclass(frozen=True)
class SceneSpec:
    source_kind: str
    duration: float
    seed: int
    azimuth: int
    room_id: str = ANECHOIC_ID
    corpus_file: Optional[str] = None

    def __post_init__(self) -> None:
        if self.source_kind not in SOURCE_KINDS:
            raise ConfigurationError(f"unknown source kind: {self.source_kind}")
        if self.source_kind == "wav_corpus":
            if not self.corpus_file:
                raise ConfigurationError("wav_corpus scenes need a corpus file")
        elif self.duration < 0.5:
            raise ConfigurationError("scene duration must be at least 0.5 s")
        _check_grid(self.azimuth)


def render_source(scene: SceneSpec) -> MonoWaveform:
    if scene.source_kind == "white_noise_burst":
        return white_noise_burst(scene.duration, scene.seed)
    if scene.source_kind == "speech_shaped_noise":
        return speech_shaped_noise(scene.duration, scene.seed)
    wave = read_wav(scene.corpus_file)
    if not isinstance(wave, MonoWaveform):
        raise InputError(f"corpus file {scene.corpus_file} is not mono")
    return energy_gate(wave)


def load_external_brirs(directory: PathLike, room_id: str) -> Dict[int, Brir]:
    """Read measured BRIRs stored as ``az{+ddd}.wav`` stereo files."""
    directory = Path(directory)
    brirs: Dict[int, Brir] = {}
    for azimuth in grid():
        path = directory / f"az{azimuth:+04d}.wav"
        if not path.exists():
            continue
        wave = read_binaural(path)
        brir = Brir(wave.left, wave.right, azimuth, room_id)
        brir.measured_t60, brir.measured_drr = measure(brir)
        brirs[azimuth] = brir
    if not brirs:
        raise InputError(f"no az{{+ddd}}.wav BRIRs found in {directory}")
    logger.info("loaded %d external BRIRs for room %s", len(brirs), room_id)
    return brirs


def default_rooms() -> Dict[str, RoomSpec]:
    """Anechoic plus four 6x5x3 m rooms with T60 0.32, 0.47, 0.68 and 0.89 s."""
    rooms = {ANECHOIC_ID: RoomSpec(ANECHOIC_ID, target_t60=0.0)}
    for room_id, t60 in zip("ABCD", (0.32, 0.47, 0.68, 0.89)):
        rooms[room_id] = RoomSpec(room_id, target_t60=t60)
    return rooms


# -- manifests ----------------------------------------------------------------


@dataclass
class ManifestEntry:
    split: str
    azimuth_deg: int
    room_id: str
    source_kind: str
    seed: int
    duration: float
    path: str
    corpus_file: Optional[str] = None

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ConfigurationError(f"unknown split: {self.split}")
        self.azimuth_deg = _check_grid(self.azimuth_deg)

    def scene(self) -> SceneSpec:
        return SceneSpec(
            self.source_kind,
            self.duration,
            self.seed,
            self.azimuth_deg,
            self.room_id,
            self.corpus_file,
        )


@dataclass
class DatasetManifest:
    """Dataset description: rooms, rendered entries and where they live.

    ``base_dir`` is the directory entry paths are relative to; for a manifest
    read from disk it is the manifest's own directory.
    """

    rooms: Dict[str, RoomSpec]
    entries: List[ManifestEntry]
    seed: int = 0
    output_dir: str = "data"
    sample_rate: int = SAMPLE_RATE
    version: int = MANIFEST_VERSION
    base_dir: Optional[Path] = None
    measurements: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.sample_rate != SAMPLE_RATE:
            raise ConfigurationError(f"sample_rate must be {SAMPLE_RATE}")
        if self.version != MANIFEST_VERSION:
            raise ConfigurationError(f"unsupported manifest version {self.version}")
        missing = {e.room_id for e in self.entries} - set(self.rooms)
        if missing:
            raise ConfigurationError(
                f"entries reference unknown rooms: {sorted(missing)}"
            )

    def counts(self) -> Dict[str, Dict[str, Dict[int, int]]]:
        """``{room: {split: {azimuth: count}}}``."""
        result: Dict[str, Dict[str, Dict[int, int]]] = {}
        for entry in self.entries:
            per_split = result.setdefault(entry.room_id, {}).setdefault(entry.split, {})
            per_split[entry.azimuth_deg] = per_split.get(entry.azimuth_deg, 0) + 1
        return result

    def select(
        self, split: str, rooms: Optional[Iterable[str]] = None
    ) -> List[ManifestEntry]:
        wanted = None if rooms is None else set(rooms)
        return [
            e
            for e in self.entries
            if e.split == split and (wanted is None or e.room_id in wanted)
        ]

    def resolve_path(self, entry: ManifestEntry) -> Path:
        base = self.base_dir if self.base_dir is not None else Path(".")
        return base / entry.path

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": self.version,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "output_dir": self.output_dir,
            "rooms": {rid: spec.to_dict() for rid, spec in self.rooms.items()},
            "measurements": self.measurements,
            "counts": self.counts(),
            "entries": [asdict(e) for e in self.entries],
        }


def entry_seed(base: int, split: str, azimuth: int, index: int) -> int:
    """Source seed shared by every room rendering of the same utterance."""
    seq = np.random.SeedSequence(
        [base, SPLITS.index(split), azimuth + 90, index]
    )
    return int(seq.generate_state(1)[0])


def _entry_duration(duration: Any, seed: int) -> float:
    if isinstance(duration, (list, tuple)):
        low, high = float(duration[0]), float(duration[1])
        return float(np.random.default_rng(seed).uniform(low, high))
    return float(duration)


def expand_entries(
    room_ids: Sequence[str],
    counts: Dict[str, int],
    seed: int,
    source_kind: str = "speech_shaped_noise",
    duration: Any = 1.0,
    azimuths: Optional[Sequence[int]] = None,
    corpus_files: Optional[Sequence[str]] = None,
) -> List[ManifestEntry]:
    """Generate one entry per (room, split, azimuth, index)."""
    azimuths = list(azimuths) if azimuths is not None else grid()
    entries: List[ManifestEntry] = []
    for room_id in room_ids:
        for split in SPLITS:
            for azimuth in azimuths:
                for index in range(int(counts.get(split, 0))):
                    s = entry_seed(seed, split, azimuth, index)
                    corpus = None
                    if source_kind == "wav_corpus":
                        if not corpus_files:
                            raise ConfigurationError("wav_corpus needs corpus files")
                        corpus = str(corpus_files[s % len(corpus_files)])
                    entries.append(
                        ManifestEntry(
                            split=split,
                            azimuth_deg=azimuth,
                            room_id=room_id,
                            source_kind=source_kind,
                            seed=s,
                            duration=_entry_duration(duration, s),
                            path=f"{room_id}/{split}/az{azimuth:+04d}_{index:03d}.wav",
                            corpus_file=corpus,
                        )
                    )
    return entries


def default_manifest(
    room_ids: Sequence[str] = (ANECHOIC_ID, "A", "B", "C", "D"),
    counts: Optional[Dict[str, int]] = None,
    seed: int = 0,
    duration: Any = 1.0,
    source_kind: str = "speech_shaped_noise",
    azimuths: Optional[Sequence[int]] = None,
) -> DatasetManifest:
    """37 azimuths with 24/6/15 train/valid/test utterances per room."""
    rooms = default_rooms()
    unknown = set(room_ids) - set(rooms)
    if unknown:
        raise ConfigurationError(f"no default room named {sorted(unknown)}")
    counts = counts or {"train": 24, "valid": 6, "test": 15}
    entries = expand_entries(room_ids, counts, seed, source_kind, duration, azimuths)
    return DatasetManifest(
        rooms={rid: rooms[rid] for rid in room_ids}, entries=entries, seed=seed
    )


def _resolve_against(base_dir: Optional[Path], value: PathLike) -> str:
    """Absolute form of ``value``; relative paths are taken from ``base_dir``."""
    path = Path(value)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return str(path.resolve()) if base_dir is not None else str(path)


def _entry_from_dict(data: Any) -> ManifestEntry:
    if not isinstance(data, dict):
        raise ConfigurationError(f"manifest entry must be a mapping, got {data!r}")
    unknown = sorted(set(data) - set(ManifestEntry.__dataclass_fields__))
    if unknown:
        raise ConfigurationError(f"unknown manifest entry keys: {unknown}")
    try:
        return ManifestEntry(**data)
    except TypeError as exc:
        raise ConfigurationError(f"bad manifest entry {data!r}: {exc}") from exc


def manifest_from_dict(
    data: Dict[str, Any], base_dir: Optional[Path] = None
) -> DatasetManifest:
    """Build a manifest from its YAML form.

    Either ``entries`` are listed explicitly (a resolved manifest) or they are
    generated from ``rooms``, ``counts``, ``source`` and ``azimuths``.  Rooms
    may be default room names, full specs, or external BRIR directories.
    """
    if not isinstance(data, dict):
        raise ConfigurationError("manifest must be a mapping")
    defaults = default_rooms()
    rooms: Dict[str, RoomSpec] = {}
    raw_rooms = data.get("rooms", [ANECHOIC_ID])
    items = raw_rooms.items() if isinstance(raw_rooms, dict) else (
        (r, r) if isinstance(r, str) else (r.get("id"), r) for r in raw_rooms
    )
    for room_id, spec in items:
        if isinstance(spec, str) or spec is None:
            if room_id not in defaults:
                raise ConfigurationError(f"unknown room {room_id}")
            rooms[room_id] = defaults[room_id]
        else:
            spec = dict(spec, id=room_id)
            if spec.get("brir_dir"):
                spec["brir_dir"] = _resolve_against(base_dir, spec["brir_dir"])
            rooms[room_id] = RoomSpec.from_dict(spec)
    seed = int(data.get("seed", 0))
    if "entries" in data:
        entries = [_entry_from_dict(e) for e in data["entries"]]
    else:
        source = data.get("source", {}) or {}
        corpus = source.get("files")
        if corpus:
            corpus = [_resolve_against(base_dir, f) for f in corpus]
        entries = expand_entries(
            list(rooms),
            data.get("counts", {"train": 24, "valid": 6, "test": 15}),
            seed,
            source.get("kind", "speech_shaped_noise"),
            source.get("duration", 1.0),
            data.get("azimuths"),
            corpus,
        )
    return DatasetManifest(
        rooms=rooms,
        entries=entries,
        seed=seed,
        output_dir=str(data.get("output_dir", "data")),
        sample_rate=int(data.get("sample_rate", SAMPLE_RATE)),
        version=int(data.get("version", MANIFEST_VERSION)),
        base_dir=base_dir,
        measurements=dict(data.get("measurements", {}) or {}),
    )


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read manifest {path}: {exc}") from exc
    return manifest_from_dict(data, base_dir=path.parent)


# -- dataset generation ---------------------------------------------------------


@dataclass
class EntryError:
    path: str
    message: str


@dataclass
class DatasetReport:
    manifest_path: Path
    written: int
    errors: List[EntryError] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


class BrirCache:
    """Computes each (room, azimuth) BRIR once."""

    def __init__(self, rooms: Dict[str, RoomSpec]) -> None:
        self._rooms = rooms
        self._brirs: Dict[Tuple[str, int], Brir] = {}
        self._external: Dict[str, Dict[int, Brir]] = {}

    def get(self, room_id: str, azimuth: int) -> Brir:
        key = (room_id, azimuth)
        if key not in self._brirs:
            room = self._rooms[room_id]
            if room.brir_dir:
                if room_id not in self._external:
                    self._external[room_id] = load_external_brirs(
                        room.brir_dir, room_id
                    )
                try:
                    self._brirs[key] = self._external[room_id][azimuth]
                except KeyError:
                    raise InputError(
                        f"room {room_id} has no BRIR for azimuth {azimuth:+d}"
                    ) from None
            else:
                self._brirs[key] = image_source_rir(room, azimuth)
        return self._brirs[key]

    def summary(self) -> Dict[str, Dict[str, Any]]:
        """Mean measured T60 and DRR per room over the BRIRs computed so far."""
        result: Dict[str, Dict[str, Any]] = {}
        for room_id in self._rooms:
            brirs = [b for (rid, _), b in self._brirs.items() if rid == room_id]
            t60s = [b.measured_t60 for b in brirs if b.measured_t60 is not None]
            drrs = [b.measured_drr for b in brirs if b.measured_drr is not None]
            result[room_id] = {
                "target_t60": self._rooms[room_id].target_t60,
                "measured_t60": float(np.mean(t60s)) if t60s else None,
                "measured_drr": float(np.mean(drrs)) if drrs else None,
            }
        return result


async def _gather_limited(jobs: int, calls: Sequence[Any]) -> List[Any]:
    semaphore = asyncio.Semaphore(max(1, jobs))

    async def run(call):
        async with semaphore:
            return await asyncio.to_thread(call)

    return await asyncio.gather(*(run(c) for c in calls))


def run_parallel(jobs: int, calls: Sequence[Any]) -> List[Any]:
    """Run zero-argument callables on worker threads, results in input order."""
    return asyncio.run(_gather_limited(jobs, calls))


def make_dataset(
    manifest: DatasetManifest, out_dir: PathLike, jobs: int = 1
) -> DatasetReport:
    """Render every manifest entry to WAV and write the resolved manifest.

    Files land under ``out_dir / manifest.output_dir``.  Failures of single
    entries (unreadable corpus file, unwritable path) are collected in the
    report and do not stop the run.
    """
    root = resolve_output(out_dir, manifest.output_dir)
    cache = BrirCache(manifest.rooms)
    pairs = sorted({(e.room_id, e.azimuth_deg) for e in manifest.entries})
    logger.info("computing %d BRIRs with %d jobs", len(pairs), jobs)

    def brir_call(room_id: str, azimuth: int):
        def call():
            try:
                return cache.get(room_id, azimuth)
            except WavelocError as exc:
                return exc

        return call

    failed_pairs: Dict[Tuple[str, int], str] = {}
    for pair, result in zip(pairs, run_parallel(jobs, [brir_call(*p) for p in pairs])):
        if isinstance(result, Exception):
            failed_pairs[pair] = str(result)
            logger.error("BRIR %s az %+d failed: %s", pair[0], pair[1], result)

    def render_call(entry: ManifestEntry):
        def call() -> Optional[EntryError]:
            key = (entry.room_id, entry.azimuth_deg)
            if key in failed_pairs:
                return EntryError(entry.path, failed_pairs[key])
            try:
                dest = resolve_output(root, entry.path)
                wave = spatialize(render_source(entry.scene()), cache.get(*key))
                write_wav(dest, wave)
            except (WavelocError, OSError) as exc:
                logger.warning("entry %s failed: %s", entry.path, exc)
                return EntryError(entry.path, str(exc))
            return None

        return call

    results = run_parallel(jobs, [render_call(e) for e in manifest.entries])
    errors = [r for r in results if r is not None]

    manifest.measurements = cache.summary()
    resolved = manifest.to_dict()
    resolved["output_dir"] = "."
    manifest_path = root / "manifest.yaml"
    atomic_write_text(manifest_path, yaml.safe_dump(resolved, sort_keys=False))
    written = len(manifest.entries) - len(errors)
    logger.info(
        "wrote %d files, %d errors, manifest %s", written, len(errors), manifest_path
    )
    return DatasetReport(manifest_path, written, errors)
