#!/usr/bin/env python3
"""Command-line entry point: ``waveloc <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from waveloc import __version__
from waveloc.core import harness
from waveloc.core.models import ModelConfig, load_checkpoint
from waveloc.errors import UsageError, WavelocError
from waveloc.utils import binaural_sim as sim
from waveloc.utils.audio_dsp import GCC_MAX_LAG, frame_array, gcc_phat_frames
from waveloc.utils.gradcheck import gradcheck
from waveloc.utils.optim import TrainingSchedule
from waveloc.utils.paths import atomic_write_text, resolve_output
from waveloc.utils.wav_io import read_binaural

logger = logging.getLogger(__name__)

APP_NAME = "waveloc"
DATA_DIR = Path.home() / ".waveloc"
CONFIG_PATH = DATA_DIR / "config"
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


@dataclass
class Settings:
    seed: int = 0
    jobs: int = max(1, os.cpu_count() or 1)
    out_dir: str = "out"
    max_log_files: int = 100
    batch_size: int = 128
    max_epochs: int = 50
    verbose: bool = False


def load_settings(path: Optional[Path] = None) -> Settings:
    """Read ``key=value`` lines; unknown keys and bad values are ignored."""
    if path is None:
        path = Path(os.environ.get("WAVELOC_CONFIG", CONFIG_PATH))
    settings = Settings()
    try:
        with Path(path).open(encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#") or "=" not in line:
                    continue
                key, value = map(str.strip, line.split("=", 1))
                value = value.strip("\"'")
                if not hasattr(settings, key):
                    continue
                attr = getattr(settings, key)
                if isinstance(attr, bool):
                    lowered = value.lower()
                    if lowered in {"1", "true", "yes", "on"}:
                        value = True
                    elif lowered in {"0", "false", "no", "off"}:
                        value = False
                    else:
                        continue
                elif isinstance(attr, int):
                    try:
                        value = int(value)
                    except ValueError:
                        continue
                setattr(settings, key, value)
    except FileNotFoundError:
        pass
    return settings


class ArgumentParser(argparse.ArgumentParser):
    """Parser whose errors surface as :class:`UsageError`."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# -- session logging ----------------------------------------------------------


class Session:
    """Per-run log files under ``OUT/log``."""

    def __init__(self, out_dir: Path, max_log_files: int, verbose: bool) -> None:
        self.log_dir = resolve_output(out_dir, "log")
        self.log_dir.mkdir(parents=True, exist_ok=True)
        self.session_id = datetime.now(timezone.utc).strftime("%Y%m%d-%H%M%S-%f")
        self.log_path = self.log_dir / f"{self.session_id}.log"
        self.error_path = self.log_dir / "errors.log"
        self._prune(max_log_files)
        level = logging.DEBUG if verbose else logging.INFO
        logging.basicConfig(level=level, format=LOG_FORMAT)
        self._root = logging.getLogger()
        self._previous_level = self._root.level
        self._root.setLevel(level)
        self._handler = logging.FileHandler(self.log_path, encoding="utf-8")
        self._handler.setFormatter(logging.Formatter(LOG_FORMAT))
        self._root.addHandler(self._handler)

    def _prune(self, max_files: int) -> None:
        if max_files <= 0:
            return
        logs = sorted(
            (p for p in self.log_dir.glob("*.log") if p.name != "errors.log"),
            key=lambda p: p.stat().st_mtime,
            reverse=True,
        )
        for old in logs[max_files - 1 :]:
            try:
                old.unlink()
            except OSError:
                pass

    def log_error(self, message: str) -> None:
        with self.error_path.open("a", encoding="utf-8") as fh:
            fh.write(f"{datetime.now(timezone.utc).isoformat()} {message}\n")

    def close(self) -> None:
        self._root.removeHandler(self._handler)
        self._handler.close()
        self._root.setLevel(self._previous_level)


# -- helpers --------------------------------------------------------------------


def _print_config(command: str, config: Dict[str, Any]) -> None:
    print(yaml.safe_dump({"command": command, **config}, sort_keys=False).rstrip())
    sys.stdout.flush()


def _read_yaml(path: str) -> Dict[str, Any]:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"{path} must contain a mapping")
    return data


def _load_manifest(path: str, seed: Optional[int]) -> sim.DatasetManifest:
    data = _read_yaml(path)
    if seed is not None and "entries" not in data:
        data["seed"] = seed
    return sim.manifest_from_dict(data, base_dir=Path(path).parent)


def _schedule(args: argparse.Namespace, settings: Settings) -> TrainingSchedule:
    return TrainingSchedule(
        max_epochs=args.epochs or settings.max_epochs,
        batch_size=args.batch_size or settings.batch_size,
    )


# -- commands ---------------------------------------------------------------------


def cmd_simulate(args, settings: Settings, out_dir: Path) -> int:
    manifest = _load_manifest(args.manifest, args.seed)
    _print_config(
        "simulate",
        {
            "manifest": args.manifest,
            "out_dir": str(out_dir),
            "output_dir": manifest.output_dir,
            "seed": manifest.seed,
            "jobs": args.jobs,
            "rooms": {rid: room.to_dict() for rid, room in manifest.rooms.items()},
            "entries": len(manifest.entries),
        },
    )
    report = sim.make_dataset(manifest, out_dir, jobs=args.jobs)
    print(f"wrote {report.written} files, manifest {report.manifest_path}")
    for error in report.errors:
        print(f"error: {error.path}: {error.message}", file=sys.stderr)
    return 0 if report.ok else 2


def cmd_train(args, settings: Settings, out_dir: Path) -> int:
    if args.mode == "mct" and not args.test_room:
        raise UsageError("train: --mode mct requires --test-room")
    manifest = sim.load_manifest(args.manifest)
    config = ModelConfig(
        harness.SYSTEMS[args.model],
        gtf_band_kernels_2d=args.band_kernels_2d,
        gtf_band_kernels_1d=args.band_kernels_1d,
        seed=args.seed,
    )
    spec = harness.ExperimentSpec(
        config,
        manifest,
        harness.TrainingMode.parse(args.mode),
        test_room=args.test_room,
        schedule=_schedule(args, settings),
        seed=args.seed,
        jobs=args.jobs,
    )
    _print_config(
        "train", {"manifest": args.manifest, "out_dir": str(out_dir), **spec.echo()}
    )
    result = harness.train(spec, out_dir)
    for room, value in result.report.rmse.items():
        print(f"{room}: RMSE {value:.2f} deg")
    print(f"checkpoint: {result.checkpoint}")
    return 0


def cmd_eval(args, settings: Settings, out_dir: Path) -> int:
    manifest = sim.load_manifest(args.manifest)
    rooms = [args.room] if args.room else list(manifest.rooms)
    _print_config(
        "eval",
        {
            "checkpoint": args.checkpoint,
            "manifest": args.manifest,
            "rooms": rooms,
            "out_dir": str(out_dir),
            "jobs": args.jobs,
        },
    )
    model = load_checkpoint(args.checkpoint)
    stem = Path(args.checkpoint).stem
    rows = []
    for room in rooms:
        entries = manifest.select("test", [room])
        if not entries:
            continue
        result = harness.evaluate_chunks(model, manifest, entries, args.jobs)
        harness.write_chunk_table(
            result, resolve_output(out_dir, f"eval/{stem}-{room}.csv")
        )
        rows.append(
            {
                "room": room,
                "chunks": len(result.chunks),
                "skipped": result.skipped,
                "rmse_deg": result.rmse,
            }
        )
    table = pd.DataFrame(rows, columns=["room", "chunks", "skipped", "rmse_deg"])
    print(table.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    return 0


def cmd_matrix(args, settings: Settings, out_dir: Path) -> int:
    data = _read_yaml(args.config)
    if "manifest" not in data:
        raise UsageError(f"{args.config}: missing 'manifest'")
    manifest = sim.load_manifest(Path(args.config).parent / data["manifest"])
    schedule_data = dict(data.get("schedule", {}) or {})
    if args.epochs:
        schedule_data["max_epochs"] = args.epochs
    try:
        schedule = TrainingSchedule(**schedule_data)
    except TypeError as exc:
        raise UsageError(f"{args.config}: bad schedule: {exc}") from exc
    config = harness.MatrixConfig(
        manifest=manifest,
        systems=list(data.get("systems", harness.SYSTEMS)),
        modes=list(data.get("modes", ["anechoic", "mct"])),
        rooms=list(data.get("rooms", manifest.rooms)),
        schedule=schedule,
        seed=args.seed if args.seed_given else int(data.get("seed", args.seed)),
        jobs=args.jobs if args.jobs_given else int(data.get("jobs", args.jobs)),
        gtf_band_kernels_2d=int(data.get("gtf_band_kernels_2d", 6)),
        gtf_band_kernels_1d=int(data.get("gtf_band_kernels_1d", 6)),
        max_parallel_cells=int(data.get("max_parallel_cells", 2)),
    )
    _print_config(
        "matrix",
        {
            "config": args.config,
            "out_dir": str(out_dir),
            "systems": config.systems,
            "modes": config.modes,
            "rooms": config.rooms,
            "schedule": asdict(config.schedule),
            "seed": config.seed,
            "jobs": config.jobs,
        },
    )
    report = harness.run_matrix(config, out_dir)
    print(report.render())
    for failure in report.failures:
        print(f"failed: {failure['cell']}: {failure['error']}", file=sys.stderr)
    return 0


def cmd_gradcheck(args, settings: Settings, out_dir: Path) -> int:
    _print_config(
        "gradcheck",
        {"trials": args.trials, "tolerance": args.tolerance, "seed": args.seed},
    )
    report = gradcheck(trials=args.trials, tolerance=args.tolerance, seed=args.seed)
    print(report.render())
    return 0 if report.passed else 2


def cmd_inspect_kernels(args, settings: Settings, out_dir: Path) -> int:
    dest = resolve_output(
        out_dir, f"spectra/{Path(args.checkpoint).stem}-nfft{args.nfft}.csv"
    )
    _print_config(
        "inspect-kernels",
        {"checkpoint": args.checkpoint, "nfft": args.nfft, "output": str(dest)},
    )
    spectra = harness.export_kernel_spectra(args.checkpoint, dest, args.nfft)
    usage = harness.frequency_band_usage(spectra)
    print(f"wrote {spectra.shape[0]}x{spectra.shape[1]} spectra to {dest}")
    print(f"band-pass kernels: {harness.band_pass_concentration(spectra):.2%}")
    print(f"dominant below 1600 Hz: {usage['below']:.2%}, above: {usage['above']:.2%}")
    return 0


def cmd_gcc_features(args, settings: Settings, out_dir: Path) -> int:
    dest = resolve_output(out_dir, f"features/{Path(args.wav).stem}-gcc.csv")
    _print_config("gcc-features", {"wav": args.wav, "output": str(dest)})
    features = gcc_phat_frames(frame_array(read_binaural(args.wav).samples))
    lags = np.arange(-GCC_MAX_LAG, GCC_MAX_LAG + 1)
    frame = pd.DataFrame(features, columns=[f"lag{lag:+d}" for lag in lags])
    frame.insert(0, "frame", np.arange(len(frame)))
    atomic_write_text(dest, frame.to_csv(index=False, float_format="%.6f"))
    print(f"wrote {len(frame)} frames to {dest}")
    return 0


Command = Callable[[argparse.Namespace, Settings, Path], int]

COMMANDS: Dict[str, Command] = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "eval": cmd_eval,
    "matrix": cmd_matrix,
    "gradcheck": cmd_gradcheck,
    "inspect-kernels": cmd_inspect_kernels,
    "gcc-features": cmd_gcc_features,
}


def build_parser(settings: Settings) -> ArgumentParser:
    parser = ArgumentParser(prog=APP_NAME, description="Binaural azimuth estimation.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--seed", type=int, default=None, help="run seed")
    parser.add_argument("--out-dir", default=None, help="root of every written file")
    parser.add_argument("--verbose", action="store_true", default=None)
    parser.add_argument("--jobs", type=int, default=None, help="worker count")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    p = sub.add_parser("simulate", help="render a binaural dataset")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train", help="train one system")
    p.add_argument("--model", required=True, choices=sorted(harness.SYSTEMS))
    p.add_argument("--mode", default="anechoic", choices=["anechoic", "mct"])
    p.add_argument("--test-room", default=None)
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--band-kernels-2d", type=int, default=6)
    p.add_argument("--band-kernels-1d", type=int, default=6)

    p = sub.add_parser("eval", help="chunk-level RMSE of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--room", default=None)

    p = sub.add_parser("matrix", help="systems x conditions result table")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=None)

    p = sub.add_parser("gradcheck", help="verify analytic gradients")
    p.add_argument("--trials", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = sub.add_parser("inspect-kernels", help="export first-layer kernel spectra")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--nfft", type=int, default=1024)

    p = sub.add_parser("gcc-features", help="per-frame GCC-PHAT features of a WAV")
    p.add_argument("--wav", required=True)
    return parser


def _resolve_globals(args: argparse.Namespace, settings: Settings) -> None:
    args.seed_given = args.seed is not None or "WAVELOC_SEED" in os.environ
    args.jobs_given = args.jobs is not None
    if args.seed is None:
        env_seed = os.environ.get("WAVELOC_SEED")
        try:
            args.seed = int(env_seed) if env_seed is not None else settings.seed
        except ValueError:
            raise UsageError(f"WAVELOC_SEED must be an integer, got {env_seed!r}")
    if args.jobs is None:
        args.jobs = settings.jobs
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if args.verbose is None:
        args.verbose = settings.verbose
    if args.out_dir is None:
        args.out_dir = settings.out_dir


def dispatch(argv: List[str], settings: Optional[Settings] = None) -> int:
    """Run one command; return 0 on success, 1 on usage errors, 2 on failures."""
    settings = settings or load_settings()
    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
        _resolve_globals(args, settings)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)

    out_dir = Path(args.out_dir)
    try:
        session = Session(out_dir, settings.max_log_files, args.verbose)
    except (OSError, WavelocError) as exc:
        print(f"error: cannot prepare {out_dir}: {exc}", file=sys.stderr)
        return 2
    try:
        logger.info("session %s: %s", session.session_id, " ".join(argv))
        return COMMANDS[args.command](args, settings, out_dir)
    except UsageError as exc:
        print(f"{parser.format_usage()}{APP_NAME}: error: {exc}", file=sys.stderr)
        return 1
    except (WavelocError, OSError) as exc:
        message = f"{args.command}: {type(exc).__name__}: {exc}"
        logger.error(message)
        session.log_error(message)
        print(f"error: {message}", file=sys.stderr)
        return 2
    finally:
        session.close()


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
