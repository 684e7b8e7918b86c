"""Experiment orchestration: training, chunk evaluation, result matrices.

Training pools 20 ms frames (or their GCC-PHAT features for the baseline)
from every training entry, runs Adam with the plateau schedule on
frame-level validation cross-entropy, and restores the best weights.
Evaluation averages frame posteriors over 250 ms chunks and reports the
azimuth RMSE in degrees.
"""

from __future__ import annotations

import enum
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from numpy.lib.stride_tricks import sliding_window_view

from waveloc.core.models import (
    ModelConfig,
    ModelKind,
    azimuth_to_class,
    build_model,
    class_to_azimuth,
    load_checkpoint,
    model_kind,
    predict_batch,
    save_checkpoint,
)
from waveloc.errors import (
    ConfigurationError,
    InputError,
    TrainingError,
    WavelocError,
)
from waveloc.utils import tensor_nn as nn
from waveloc.utils.audio_dsp import (
    FRAME_HOP,
    FRAME_LENGTH,
    SpectrumMatrix,
    frame_array,
    frame_count,
    gcc_phat_frames,
    kernel_log_power_spectra,
)
from waveloc.utils.binaural_sim import (
    ANECHOIC_ID,
    DatasetManifest,
    ManifestEntry,
    run_parallel,
)
from waveloc.utils.optim import (
    OptimizerState,
    TrainingSchedule,
    adam_step,
    schedule_step,
)
from waveloc.utils.paths import PathLike, atomic_write_text, resolve_output
from waveloc.utils.wav_io import read_binaural

logger = logging.getLogger(__name__)

CHUNK_FRAMES = 25
REPORT_SCHEMA_VERSION = 1
SYSTEMS = {
    "baseline": ModelKind.GCC_BASELINE,
    "gtf": ModelKind.WAVELOC_GTF,
    "conv": ModelKind.WAVELOC_CONV,
}
CONDITIONS = (ANECHOIC_ID, "A", "B", "C", "D")

# Published RMSE (degrees) for anechoic-trained and multi-conditionally
# trained systems, shown under measured rows for comparison.
REFERENCE_ROWS: Dict[Tuple[str, str], Dict[str, float]] = {
    ("baseline", "anechoic"): {
        ANECHOIC_ID: 0.1, "A": 2.6, "B": 9.3, "C": 2.6, "D": 10.1
    },
    ("gtf", "anechoic"): {ANECHOIC_ID: 0.0, "A": 9.1, "B": 10.7, "C": 1.6, "D": 10.5},
    ("conv", "anechoic"): {
        ANECHOIC_ID: 0.0, "A": 37.7, "B": 41.8, "C": 37.3, "D": 44.4
    },
    ("baseline", "mct"): {"A": 2.7, "B": 3.3, "C": 3.1, "D": 5.2},
    ("gtf", "mct"): {"A": 1.5, "B": 3.0, "C": 1.7, "D": 3.5},
    ("conv", "mct"): {"A": 1.7, "B": 2.3, "C": 1.4, "D": 2.4},
}


class TrainingMode(str, enum.Enum):
    ANECHOIC = "anechoic"
    MCT = "mct"

    @classmethod
    def parse(cls, value: Any) -> "TrainingMode":
        try:
            return cls(value)
        except ValueError as exc:
            choices = [m.value for m in cls]
            raise ConfigurationError(
                f"unknown training mode {value!r}; expected one of {choices}"
            ) from exc


class EventLog:
    """Append-only JSON-lines event log."""

    def __init__(self, path: Optional[Path]) -> None:
        self.path = path
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)

    def log_event(self, message: str, log_type: str = "info", **fields: Any) -> None:
        if self.path is None:
            return
        entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "type": log_type,
            "message": message,
            **fields,
        }
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")


@dataclass
class ExperimentSpec:
    model: ModelConfig
    manifest: DatasetManifest
    mode: TrainingMode = TrainingMode.ANECHOIC
    test_room: Optional[str] = None
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    seed: int = 0
    jobs: int = 1
    name: Optional[str] = None

    def __post_init__(self) -> None:
        self.mode = TrainingMode.parse(self.mode)
        if ANECHOIC_ID not in self.manifest.rooms:
            raise ConfigurationError("the manifest has no anechoic condition")
        if self.mode is TrainingMode.MCT:
            if not self.test_room or self.test_room == ANECHOIC_ID:
                raise ConfigurationError("mct training needs a reverberant --test-room")
        if self.test_room is not None and self.test_room not in self.manifest.rooms:
            raise ConfigurationError(f"test room {self.test_room} not in manifest")
        if self.name is None:
            suffix = f"-{self.test_room}" if self.mode is TrainingMode.MCT else ""
            self.name = f"{self.model.kind.value}-{self.mode.value}{suffix}"

    def training_rooms(self) -> List[str]:
        """Anechoic data, plus every other room except the test room under MCT."""
        if self.mode is TrainingMode.ANECHOIC:
            return [ANECHOIC_ID]
        rooms = [ANECHOIC_ID] + [
            r for r in self.manifest.rooms if r not in (ANECHOIC_ID, self.test_room)
        ]
        assert self.test_room not in rooms
        return rooms

    def evaluation_rooms(self) -> List[str]:
        if self.mode is TrainingMode.MCT:
            return [self.test_room]
        if self.test_room is not None:
            return [self.test_room]
        return list(self.manifest.rooms)

    def echo(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "model": self.model.to_dict(),
            "mode": self.mode.value,
            "test_room": self.test_room,
            "training_rooms": self.training_rooms(),
            "schedule": asdict(self.schedule),
            "seed": self.seed,
        }


@dataclass
class ChunkResult:
    file: str
    chunk_index: int
    true_azimuth: int
    estimated_azimuth: int
    mean_posterior: np.ndarray


@dataclass
class EvaluationResult:
    chunks: List[ChunkResult]
    rmse: float
    skipped: int = 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "file": c.file,
                    "chunk": c.chunk_index,
                    "true_azimuth": c.true_azimuth,
                    "estimated_azimuth": c.estimated_azimuth,
                    "max_posterior": float(np.max(c.mean_posterior)),
                }
                for c in self.chunks
            ],
            columns=[
                "file",
                "chunk",
                "true_azimuth",
                "estimated_azimuth",
                "max_posterior",
            ],
        )


@dataclass
class ExperimentReport:
    name: str
    config: Dict[str, Any]
    history: List[Dict[str, float]] = field(default_factory=list)
    rmse: Dict[str, float] = field(default_factory=dict)
    skipped: Dict[str, int] = field(default_factory=dict)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    wall_clock: float = 0.0
    checkpoint: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["schema_version"] = REPORT_SCHEMA_VERSION
        return data


@dataclass
class TrainingResult:
    model: nn.ModelGraph
    report: ExperimentReport
    checkpoint: Optional[Path] = None


# -- frame pools ----------------------------------------------------------------


class FramePool:
    """All frames of a set of binaural files, addressed by global frame index.

    Audio is kept once per file; frames are gathered on demand.  For the GCC
    baseline the 37-value features of every frame are computed up front.
    """

    def __init__(
        self, signals: Sequence[np.ndarray], azimuths: Sequence[int], gcc: bool
    ) -> None:
        starts: List[np.ndarray] = []
        labels: List[np.ndarray] = []
        kept: List[np.ndarray] = []
        offset = 0
        for signal, azimuth in zip(signals, azimuths):
            count = frame_count(signal.shape[1])
            if count == 0:
                continue
            kept.append(signal.astype(np.float32))
            starts.append(offset + FRAME_HOP * np.arange(count))
            labels.append(np.full(count, azimuth_to_class(azimuth)))
            offset += signal.shape[1]
        if not kept:
            raise ConfigurationError("no frames available in this split")
        self._audio = np.concatenate(kept, axis=1)
        self._windows = sliding_window_view(self._audio, FRAME_LENGTH, axis=1)
        self.starts = np.concatenate(starts)
        self.labels = np.concatenate(labels).astype(np.int64)
        self.gcc = gcc
        self._features: Optional[np.ndarray] = None
        if gcc:
            parts = [
                gcc_phat_frames(self.frames(np.arange(i, min(i + 4096, len(self)))))
                for i in range(0, len(self), 4096)
            ]
            self._features = np.concatenate(parts).astype(np.float32)

    def __len__(self) -> int:
        return self.starts.shape[0]

    def frames(self, index: np.ndarray) -> np.ndarray:
        return self._windows[:, self.starts[index]].transpose(1, 0, 2)

    def inputs(self, index: np.ndarray) -> np.ndarray:
        if self._features is not None:
            return self._features[index]
        return self.frames(index)

    def batch(self, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return self.inputs(index), self.labels[index]

    @classmethod
    def from_entries(
        cls,
        manifest: DatasetManifest,
        entries: Sequence[ManifestEntry],
        gcc: bool,
        jobs: int = 1,
    ) -> "FramePool":
        if not entries:
            raise ConfigurationError("empty split: no manifest entries")
        paths = [manifest.resolve_path(e) for e in entries]
        waves = run_parallel(jobs, [lambda p=p: read_binaural(p) for p in paths])
        return cls([w.samples for w in waves], [e.azimuth_deg for e in entries], gcc)


def _expects_gcc(config_or_model: Any) -> bool:
    if isinstance(config_or_model, ModelConfig):
        return config_or_model.kind is ModelKind.GCC_BASELINE
    return model_kind(config_or_model) is ModelKind.GCC_BASELINE


def mean_loss(model: nn.ModelGraph, pool: FramePool, batch_size: int = 512) -> float:
    """Frame-level cross-entropy over the whole pool in inference mode."""
    total = 0.0
    for start in range(0, len(pool), batch_size):
        index = np.arange(start, min(start + batch_size, len(pool)))
        x, y = pool.batch(index)
        total += nn.cross_entropy(predict_batch(model, x, batch_size), y) * len(index)
    return total / len(pool)


# -- training -------------------------------------------------------------------


def train(
    spec: ExperimentSpec,
    out_dir: Optional[PathLike] = None,
    evaluate: bool = True,
) -> TrainingResult:
    """Train one system as described by ``spec``.

    Writes ``checkpoints/<name>.wloc``, ``reports/<name>.yaml`` and appends
    per-epoch events to ``log/train.jsonl`` under ``out_dir`` when given.

    Raises:
        ConfigurationError: if the training or validation split is empty.
        TrainingError: if the loss becomes non-finite.
    """
    started = time.perf_counter()
    rooms = spec.training_rooms()
    gcc = _expects_gcc(spec.model)
    train_entries = spec.manifest.select("train", rooms)
    valid_entries = spec.manifest.select("valid", rooms)
    if not train_entries or not valid_entries:
        raise ConfigurationError(
            f"empty split for rooms {rooms}: {len(train_entries)} train, "
            f"{len(valid_entries)} valid entries"
        )
    train_pool = FramePool.from_entries(spec.manifest, train_entries, gcc, spec.jobs)
    valid_pool = FramePool.from_entries(spec.manifest, valid_entries, gcc, spec.jobs)
    logger.info(
        "%s: %d training frames, %d validation frames from rooms %s",
        spec.name,
        len(train_pool),
        len(valid_pool),
        ", ".join(rooms),
    )

    events = EventLog(
        resolve_output(out_dir, "log/train.jsonl") if out_dir is not None else None
    )
    schedule = spec.schedule
    model = build_model(spec.model)
    model.reseed(spec.seed)
    rng = np.random.default_rng(spec.seed)
    params = model.trainable_parameters()
    state = OptimizerState(learning_rate=schedule.base_lr)
    report = ExperimentReport(name=spec.name, config=spec.echo())
    history: List[float] = []
    best: Dict[str, np.ndarray] = {k: v.copy() for k, v in params.items()}

    for epoch in range(1, schedule.max_epochs + 1):
        order = rng.permutation(len(train_pool))
        total = 0.0
        for start in range(0, len(order), schedule.batch_size):
            index = order[start : start + schedule.batch_size]
            x, y = train_pool.batch(index)
            try:
                grads, loss = nn.backward(model, x, y, mode="train")
            except InputError as exc:
                grads, loss = {}, float("nan")
                logger.error("%s: %s", spec.name, exc)
            if not np.isfinite(loss) or not all(
                np.all(np.isfinite(g)) for g in grads.values()
            ):
                events.log_event(
                    "non-finite loss", "error", run=spec.name, epoch=epoch
                )
                raise TrainingError(
                    f"{spec.name}: non-finite loss at epoch {epoch}, batch "
                    f"{start // schedule.batch_size}"
                )
            adam_step(state, params, grads)
            total += loss * len(index)
        train_loss = total / len(train_pool)
        val_loss = mean_loss(model, valid_pool)
        if not np.isfinite(val_loss):
            raise TrainingError(f"{spec.name}: non-finite validation loss")
        if not history or val_loss < min(history):
            best = {k: v.copy() for k, v in params.items()}
        history.append(val_loss)
        decision = schedule_step(schedule, history, state.learning_rate)
        record = {
            "epoch": epoch,
            "train_loss": float(train_loss),
            "val_loss": float(val_loss),
            "lr": float(state.learning_rate),
        }
        report.history.append(record)
        events.log_event("epoch", run=spec.name, **record)
        logger.info(
            "%s epoch %d: train %.4f valid %.4f lr %.1e",
            spec.name,
            epoch,
            train_loss,
            val_loss,
            state.learning_rate,
        )
        state.learning_rate = decision.learning_rate
        if decision.stop:
            break

    for name, value in best.items():
        params[name][...] = value
    report.best_epoch = int(np.argmin(history)) + 1
    report.best_val_loss = float(min(history))
    model.info["metadata"] = {
        "epochs_run": len(history),
        "best_epoch": report.best_epoch,
        "best_val_loss": report.best_val_loss,
        "training_rooms": rooms,
        "seed": spec.seed,
    }
    events.log_event(
        "restored best weights",
        run=spec.name,
        best_epoch=report.best_epoch,
        best_val_loss=report.best_val_loss,
    )

    if evaluate:
        for room in spec.evaluation_rooms():
            entries = spec.manifest.select("test", [room])
            if not entries:
                logger.warning("%s: no test entries for room %s", spec.name, room)
                continue
            result = evaluate_chunks(model, spec.manifest, entries, spec.jobs)
            report.rmse[room] = result.rmse
            report.skipped[room] = result.skipped
    report.wall_clock = time.perf_counter() - started

    checkpoint = None
    if out_dir is not None:
        checkpoint = save_checkpoint(
            model, resolve_output(out_dir, f"checkpoints/{spec.name}.wloc")
        )
        report.checkpoint = str(checkpoint)
        atomic_write_text(
            resolve_output(out_dir, f"reports/{spec.name}.yaml"),
            yaml.safe_dump(report.to_dict(), sort_keys=False),
        )
    return TrainingResult(model, report, checkpoint)


# -- evaluation -----------------------------------------------------------------


def chunk_posteriors(
    posteriors: np.ndarray, chunk: int = CHUNK_FRAMES
) -> Tuple[np.ndarray, np.ndarray]:
    """Average consecutive non-overlapping chunks of frame posteriors.

    Returns ``(mean posteriors (C, classes), argmax class per chunk)``; a
    trailing partial chunk is dropped.
    """
    count = posteriors.shape[0] // chunk
    means = (
        posteriors[: count * chunk]
        .astype(np.float64)
        .reshape(count, chunk, posteriors.shape[1])
        .mean(axis=1)
    )
    return means, np.argmax(means, axis=1)


def rmse(estimated: Sequence[float], true: Sequence[float]) -> float:
    estimated = np.asarray(estimated, dtype=np.float64)
    true = np.asarray(true, dtype=np.float64)
    if estimated.size == 0:
        return float("nan")
    return float(np.sqrt(np.mean((estimated - true) ** 2)))


def _evaluate_file(
    model: nn.ModelGraph, path: Path, label: str, azimuth: int, gcc: bool
) -> Optional[List[ChunkResult]]:
    wave = read_binaural(path)
    if frame_count(len(wave)) < CHUNK_FRAMES:
        return None
    frames = frame_array(wave.samples).astype(np.float32)
    inputs = gcc_phat_frames(frames).astype(np.float32) if gcc else frames
    means, classes = chunk_posteriors(predict_batch(model, inputs))
    return [
        ChunkResult(label, i, azimuth, class_to_azimuth(int(c)), means[i])
        for i, c in enumerate(classes)
    ]


def evaluate_chunks(
    model: nn.ModelGraph,
    manifest: DatasetManifest,
    entries: Optional[Sequence[ManifestEntry]] = None,
    jobs: int = 1,
) -> EvaluationResult:
    """Chunk-level azimuth estimates and RMSE over test files.

    Files shorter than one 25-frame chunk are skipped with a warning and
    counted in ``skipped``.
    """
    entries = list(entries) if entries is not None else manifest.select("test")
    gcc = _expects_gcc(model)
    calls = [
        (
            lambda e=e: _evaluate_file(
                model, manifest.resolve_path(e), e.path, e.azimuth_deg, gcc
            )
        )
        for e in entries
    ]
    chunks: List[ChunkResult] = []
    skipped = 0
    for entry, result in zip(entries, run_parallel(jobs, calls)):
        if result is None:
            logger.warning("%s is shorter than one chunk, skipped", entry.path)
            skipped += 1
            continue
        chunks.extend(result)
    value = rmse(
        [c.estimated_azimuth for c in chunks], [c.true_azimuth for c in chunks]
    )
    logger.info(
        "evaluated %d chunks, RMSE %.2f deg, %d skipped", len(chunks), value, skipped
    )
    return EvaluationResult(chunks, value, skipped)


def write_chunk_table(result: EvaluationResult, path: PathLike) -> Path:
    return atomic_write_text(path, result.to_frame().to_csv(index=False))


# -- result matrix --------------------------------------------------------------


@dataclass
class MatrixConfig:
    """Systems x training modes x test rooms, sharing one dataset manifest."""

    manifest: DatasetManifest
    systems: List[str] = field(default_factory=lambda: list(SYSTEMS))
    modes: List[str] = field(default_factory=lambda: ["anechoic", "mct"])
    rooms: List[str] = field(default_factory=lambda: list(CONDITIONS))
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    seed: int = 0
    jobs: int = 1
    gtf_band_kernels_2d: int = 6
    gtf_band_kernels_1d: int = 6
    max_parallel_cells: int = 2

    def __post_init__(self) -> None:
        unknown = set(self.systems) - set(SYSTEMS)
        if unknown:
            raise ConfigurationError(f"unknown systems: {sorted(unknown)}")
        for mode in self.modes:
            TrainingMode.parse(mode)
        if self.max_parallel_cells < 1:
            raise ConfigurationError("max_parallel_cells must be >= 1")
        missing = set(self.rooms) - set(self.manifest.rooms)
        if missing:
            raise ConfigurationError(f"rooms missing from manifest: {sorted(missing)}")

    def model_config(self, system: str) -> ModelConfig:
        return ModelConfig(
            SYSTEMS[system],
            gtf_band_kernels_2d=self.gtf_band_kernels_2d,
            gtf_band_kernels_1d=self.gtf_band_kernels_1d,
            seed=self.seed,
        )

    def cells(self) -> List[ExperimentSpec]:
        """One training run per anechoic system and per (system, MCT test room)."""
        specs: List[ExperimentSpec] = []
        for system in self.systems:
            for mode in self.modes:
                if mode == TrainingMode.ANECHOIC.value:
                    specs.append(
                        ExperimentSpec(
                            self.model_config(system),
                            self.manifest,
                            TrainingMode.ANECHOIC,
                            schedule=self.schedule,
                            seed=self.seed,
                            name=f"{system}-anechoic",
                        )
                    )
                    continue
                for room in self.rooms:
                    if room == ANECHOIC_ID:
                        continue
                    specs.append(
                        ExperimentSpec(
                            self.model_config(system),
                            self.manifest,
                            TrainingMode.MCT,
                            test_room=room,
                            schedule=self.schedule,
                            seed=self.seed,
                            name=f"{system}-mct-{room}",
                        )
                    )
        return specs


@dataclass
class MatrixReport:
    rows: List[Dict[str, Any]]
    failures: List[Dict[str, str]]
    rooms: List[str]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "rooms": self.rooms,
            "rows": self.rows,
            "failures": self.failures,
            "reference": [
                {"system": s, "mode": m, "rmse": dict(v)}
                for (s, m), v in REFERENCE_ROWS.items()
            ],
        }

    def table(self) -> pd.DataFrame:
        records = []
        for row in self.rows:
            records.append(
                {"system": row["system"], "trained": row["mode"], **row["rmse"]}
            )
        for row in self.rows:
            reference = REFERENCE_ROWS.get((row["system"], row["mode"]))
            if reference is not None:
                records.append(
                    {
                        "system": f"{row['system']} (published)",
                        "trained": row["mode"],
                        **{r: reference.get(r) for r in self.rooms},
                    }
                )
        frame = pd.DataFrame(records, columns=["system", "trained", *self.rooms])
        return frame

    def render(self) -> str:
        return self.table().to_string(
            index=False, na_rep="-", float_format=lambda v: f"{v:.1f}"
        )


def run_matrix(config: MatrixConfig, out_dir: PathLike) -> MatrixReport:
    """Train and evaluate every cell; a failing cell is recorded, not fatal.

    At most ``min(jobs, max_parallel_cells)`` cells train at once; every
    running cell holds its own training and validation frame pools in memory.
    Writes ``matrix/report.yaml`` and ``matrix/table.txt`` under ``out_dir``.
    """
    specs = config.cells()
    workers = max(1, min(config.jobs, config.max_parallel_cells))
    logger.info("running %d training cells, %d at a time", len(specs), workers)

    def cell(spec: ExperimentSpec):
        def call():
            try:
                return train(spec, out_dir)
            except (WavelocError, OSError) as exc:
                logger.error("cell %s failed: %s", spec.name, exc)
                return exc

        return call

    results = run_parallel(workers, [cell(s) for s in specs])
    rows: Dict[Tuple[str, str], Dict[str, Any]] = {}
    failures: List[Dict[str, str]] = []
    for spec, result in zip(specs, results):
        system = next(k for k, v in SYSTEMS.items() if v is spec.model.kind)
        key = (system, spec.mode.value)
        row = rows.setdefault(
            key, {"system": system, "mode": spec.mode.value, "rmse": {}}
        )
        if isinstance(result, Exception):
            failures.append({"cell": spec.name, "error": str(result)})
            continue
        for room, value in result.report.rmse.items():
            if room in config.rooms:
                row["rmse"][room] = None if np.isnan(value) else float(value)
    report = MatrixReport(list(rows.values()), failures, list(config.rooms))
    atomic_write_text(
        resolve_output(out_dir, "matrix/report.yaml"),
        yaml.safe_dump(report.to_dict(), sort_keys=False),
    )
    atomic_write_text(
        resolve_output(out_dir, "matrix/table.txt"), report.render() + "\n"
    )
    return report


# -- kernel spectra -------------------------------------------------------------


def first_layer_kernels(model: nn.ModelGraph) -> np.ndarray:
    if model_kind(model) is not ModelKind.WAVELOC_CONV:
        raise InputError(
            f"kernel spectra need a waveloc_conv model, got {model_kind(model).value}"
        )
    weight = model.nodes[0].params["weight"]
    return weight.reshape(weight.shape[0], -1).astype(np.float64)


def sorted_spectra(kernels: np.ndarray, nfft: int) -> SpectrumMatrix:
    """Log-power spectra with rows ordered by dominant frequency bin."""
    spectra = kernel_log_power_spectra(kernels, nfft)
    order = np.argsort(np.argmax(spectra.values, axis=1), kind="stable")
    return SpectrumMatrix(spectra.values[order], spectra.nfft, spectra.sample_rate)


def export_kernel_spectra(
    checkpoint: PathLike, out_path: PathLike, nfft: int = 1024
) -> SpectrumMatrix:
    """Write first-layer kernel spectra of a conv checkpoint as CSV.

    The header row holds bin frequencies in Hz, one data row per kernel.
    """
    model = load_checkpoint(checkpoint)
    spectra = sorted_spectra(first_layer_kernels(model), nfft)
    frame = pd.DataFrame(
        spectra.values, columns=[f"{f:.2f}" for f in spectra.frequencies]
    )
    atomic_write_text(out_path, frame.to_csv(index=False, float_format="%.6f"))
    logger.info("wrote %dx%d kernel spectra to %s", *spectra.shape, out_path)
    return spectra


def band_pass_concentration(
    spectra: SpectrumMatrix, half_width: int = 10, share: float = 0.5
) -> float:
    """Fraction of kernels with at least ``share`` of power near their peak."""
    power = 10.0 ** (spectra.values / 10.0)
    peaks = np.argmax(power, axis=1)
    bins = np.arange(power.shape[1])
    near = np.abs(bins[None, :] - peaks[:, None]) <= half_width
    fraction = (power * near).sum(axis=1) / power.sum(axis=1)
    return float(np.mean(fraction >= share))


def frequency_band_usage(
    spectra: SpectrumMatrix, split_hz: float = 1600.0
) -> Dict[str, float]:
    """Share of kernels whose dominant frequency lies below/above ``split_hz``."""
    dominant = spectra.frequencies[np.argmax(spectra.values, axis=1)]
    below = float(np.mean(dominant < split_hz))
    return {"below": below, "above": 1.0 - below}
