"""WAV reading and writing for mono and binaural 16 kHz signals."""

from __future__ import annotations

import io
import logging
from pathlib import Path
from typing import Union

import numpy as np
import soundfile as sf

from waveloc.errors import InputError
from waveloc.utils.audio_dsp import SAMPLE_RATE, BinauralWaveform, MonoWaveform
from waveloc.utils.paths import PathLike, atomic_write_bytes

logger = logging.getLogger(__name__)

Waveform = Union[MonoWaveform, BinauralWaveform]


def read_wav(path: PathLike) -> Waveform:
    """Read a 16 kHz PCM or float WAV as a mono or binaural waveform.

    Integer PCM is scaled to [-1, 1). Files at other sample rates or with more
    than two channels are rejected.
    """
    path = Path(path)
    try:
        data, rate = sf.read(str(path), dtype="float64", always_2d=True)
    except (RuntimeError, OSError) as exc:
        raise InputError(f"cannot read WAV {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE}")
    channels = data.shape[1]
    if channels == 1:
        return MonoWaveform(data[:, 0], rate)
    if channels == 2:
        return BinauralWaveform(data.T, rate)
    raise InputError(f"{path}: {channels} channels, expected 1 or 2")


def read_binaural(path: PathLike) -> BinauralWaveform:
    wave = read_wav(path)
    if not isinstance(wave, BinauralWaveform):
        raise InputError(f"{path}: expected a two-channel file")
    return wave


def write_wav(path: PathLike, wave: Waveform, subtype: str = "FLOAT") -> Path:
    """Write ``wave`` atomically; binaural rows become left/right channels."""
    data = wave.samples if isinstance(wave, MonoWaveform) else wave.samples.T
    buf = io.BytesIO()
    sf.write(buf, np.asarray(data), wave.sample_rate, subtype=subtype, format="WAV")
    logger.debug("writing %s (%d samples)", path, len(wave))
    return atomic_write_bytes(path, buf.getvalue())
