from pathlib import Path
from typing import Dict, Sequence

import numpy as np

from waveloc.utils import binaural_sim as sim
from waveloc.utils.audio_dsp import BinauralWaveform, MonoWaveform
from waveloc.utils.wav_io import write_wav


def white_noise(n: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal(n)


def write_binaural(path: Path, samples: np.ndarray) -> Path:
    return write_wav(path, BinauralWaveform(samples))


def write_mono(path: Path, samples: np.ndarray) -> Path:
    return write_wav(path, MonoWaveform(samples))


def tiny_manifest(
    out_dir: Path,
    azimuths: Sequence[int] = (-45, 0, 45),
    counts: Dict[str, int] = None,
    rooms: Sequence[str] = (sim.ANECHOIC_ID,),
    duration: float = 0.6,
    seed: int = 0,
) -> sim.DatasetManifest:
    """Render a small noise-burst dataset and return its resolved manifest."""
    manifest = sim.default_manifest(
        room_ids=rooms,
        counts=counts or {"train": 2, "valid": 1, "test": 1},
        seed=seed,
        duration=duration,
        source_kind="white_noise_burst",
        azimuths=azimuths,
    )
    report = sim.make_dataset(manifest, out_dir)
    assert report.ok, report.errors
    return sim.load_manifest(report.manifest_path)
