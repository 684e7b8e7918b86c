import math

import numpy as np
import pandas as pd
import pytest
import yaml

from tests.utils import tiny_manifest, white_noise, write_binaural
from waveloc.core import harness, models
from waveloc.core.models import ModelConfig, ModelKind
from waveloc.errors import ConfigurationError, InputError, TrainingError
from waveloc.utils import binaural_sim as sim
from waveloc.utils.audio_dsp import SpectrumMatrix
from waveloc.utils.optim import TrainingSchedule

QUICK = TrainingSchedule(max_epochs=3, batch_size=64)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return tiny_manifest(tmp_path_factory.mktemp("data"), rooms=("anechoic", "A"))


def _baseline_spec(manifest, **kwargs):
    kwargs.setdefault("schedule", QUICK)
    config = ModelConfig(ModelKind.GCC_BASELINE)
    return harness.ExperimentSpec(config, manifest, **kwargs)


def test_chunk_majority_by_mean_posterior():
    posteriors = np.zeros((60, 37))
    posteriors[:13, 10] = 1.0
    posteriors[13:25, 20] = 1.0
    posteriors[25:, 36] = 1.0
    means, classes = harness.chunk_posteriors(posteriors)
    assert means.shape == (2, 37)
    assert classes.tolist() == [10, 36]
    assert models.class_to_azimuth(int(classes[0])) == -40


def test_rmse():
    assert harness.rmse([0, 10, -90], [0, 10, -90]) == 0.0
    assert harness.rmse([5, -5], [0, 0]) == 5.0
    assert math.isnan(harness.rmse([], []))


def test_mct_excludes_the_test_room():
    manifest = sim.default_manifest(
        room_ids=("anechoic", "A", "B"), counts={"train": 1}, azimuths=[0]
    )
    spec = _baseline_spec(manifest, mode="mct", test_room="B")
    assert spec.training_rooms() == ["anechoic", "A"]
    assert spec.evaluation_rooms() == ["B"]
    assert spec.name == "gcc_baseline-mct-B"
    with pytest.raises(ConfigurationError):
        _baseline_spec(manifest, mode="mct")
    with pytest.raises(ConfigurationError):
        _baseline_spec(manifest, mode="mct", test_room="anechoic")
    with pytest.raises(ConfigurationError):
        _baseline_spec(manifest, mode="sometimes")


def test_empty_split_is_rejected():
    manifest = sim.default_manifest(
        room_ids=("anechoic",), counts={"train": 1, "valid": 0}, azimuths=[0]
    )
    with pytest.raises(ConfigurationError):
        harness.train(_baseline_spec(manifest))


def test_baseline_training_learns(dataset, tmp_path):
    result = harness.train(_baseline_spec(dataset), tmp_path)
    report = result.report
    assert 1 <= len(report.history) <= 3
    assert report.best_val_loss < math.log(37)
    assert set(report.rmse) == {"anechoic", "A"}
    assert all(np.isfinite(v) for v in report.rmse.values())
    name = "gcc_baseline-anechoic"
    assert (tmp_path / "checkpoints" / f"{name}.wloc").exists()
    saved = yaml.safe_load((tmp_path / "reports" / f"{name}.yaml").read_text())
    assert saved["schema_version"] == 1
    assert saved["config"]["training_rooms"] == ["anechoic"]
    events = (tmp_path / "log" / "train.jsonl").read_text().splitlines()
    assert len(events) == len(report.history) + 1
    loaded = models.load_checkpoint(result.checkpoint)
    assert loaded.info["metadata"]["best_epoch"] == report.best_epoch


def test_training_is_deterministic(dataset):
    first = harness.train(_baseline_spec(dataset, seed=3), evaluate=False)
    second = harness.train(_baseline_spec(dataset, seed=3), evaluate=False)
    assert first.report.history == second.report.history
    for name, value in first.model.trainable_parameters().items():
        assert np.array_equal(value, second.model.trainable_parameters()[name])


def test_training_runs_max_epochs_while_improving(dataset, monkeypatch):
    losses = iter([1.0, 0.9, 0.8, 0.7, 0.6])
    monkeypatch.setattr(harness, "mean_loss", lambda model, pool: next(losses))
    schedule = TrainingSchedule(max_epochs=4, batch_size=256)
    result = harness.train(_baseline_spec(dataset, schedule=schedule), evaluate=False)
    assert len(result.report.history) == 4
    assert result.report.best_epoch == 4


def test_non_finite_loss_stops_training(dataset, monkeypatch):
    monkeypatch.setattr(harness.nn, "backward", lambda *a, **k: ({}, float("nan")))
    with pytest.raises(TrainingError):
        harness.train(_baseline_spec(dataset), evaluate=False)


def test_short_files_are_skipped(tmp_path):
    write_binaural(tmp_path / "short.wav", 0.1 * np.stack([white_noise(3200)] * 2))
    write_binaural(tmp_path / "long.wav", 0.1 * np.stack([white_noise(16000)] * 2))
    entries = [
        sim.ManifestEntry("test", az, "anechoic", "white_noise_burst", seed, 1.0, name)
        for az, seed, name in ((0, 1, "short.wav"), (30, 2, "long.wav"))
    ]
    manifest = sim.DatasetManifest(
        rooms={"anechoic": sim.default_rooms()["anechoic"]},
        entries=entries,
        base_dir=tmp_path,
    )
    model = models.build_model(ModelConfig(ModelKind.GCC_BASELINE))
    result = harness.evaluate_chunks(model, manifest)
    assert result.skipped == 1
    assert len(result.chunks) == 3
    assert all(c.true_azimuth == 30 for c in result.chunks)
    table = harness.write_chunk_table(result, tmp_path / "chunks.csv")
    frame = pd.read_csv(table)
    assert list(frame.columns) == [
        "file",
        "chunk",
        "true_azimuth",
        "estimated_azimuth",
        "max_posterior",
    ]
    assert len(frame) == 3


def test_export_kernel_spectra(tmp_path):
    conv = models.build_model(ModelConfig(ModelKind.WAVELOC_CONV, seed=2))
    path = models.save_checkpoint(conv, tmp_path / "conv.wloc")
    spectra = harness.export_kernel_spectra(path, tmp_path / "spectra.csv", 1024)
    assert spectra.shape == (64, 513)
    assert np.all(np.diff(np.argmax(spectra.values, axis=1)) >= 0)
    frame = pd.read_csv(tmp_path / "spectra.csv")
    assert frame.shape == (64, 513)
    assert frame.columns[0] == "0.00"
    assert frame.columns[-1] == "8000.00"


def test_kernel_spectra_need_a_conv_model(tmp_path):
    baseline = models.build_model(ModelConfig(ModelKind.GCC_BASELINE))
    path = models.save_checkpoint(baseline, tmp_path / "baseline.wloc")
    with pytest.raises(InputError):
        harness.export_kernel_spectra(path, tmp_path / "spectra.csv")


def test_band_pass_measures():
    t = np.arange(256) / 16000
    tones = np.stack([np.cos(2 * np.pi * f * t) for f in (1000.0, 3000.0)])
    spectra = harness.sorted_spectra(tones, 1024)
    assert harness.band_pass_concentration(spectra) == 1.0
    assert harness.frequency_band_usage(spectra) == {"below": 0.5, "above": 0.5}
    impulses = np.zeros((3, 256))
    impulses[:, 0] = 1.0
    flat = harness.sorted_spectra(impulses, 1024)
    assert harness.band_pass_concentration(flat) == 0.0
    assert isinstance(flat, SpectrumMatrix)


def test_matrix_cells():
    manifest = sim.default_manifest(counts={"train": 1}, azimuths=[0])
    config = harness.MatrixConfig(manifest, systems=["baseline", "gtf"])
    names = [spec.name for spec in config.cells()]
    assert names == [
        "baseline-anechoic",
        "baseline-mct-A",
        "baseline-mct-B",
        "baseline-mct-C",
        "baseline-mct-D",
        "gtf-anechoic",
        "gtf-mct-A",
        "gtf-mct-B",
        "gtf-mct-C",
        "gtf-mct-D",
    ]
    with pytest.raises(ConfigurationError):
        harness.MatrixConfig(manifest, systems=["svm"])


def test_run_matrix(dataset, tmp_path, monkeypatch):
    real_train = harness.train

    def train(spec, out_dir=None, evaluate=True):
        if spec.name == "baseline-mct-A":
            raise TrainingError("boom")
        return real_train(spec, out_dir, evaluate)

    monkeypatch.setattr(harness, "train", train)
    config = harness.MatrixConfig(
        dataset,
        systems=["baseline"],
        rooms=["anechoic", "A"],
        schedule=TrainingSchedule(max_epochs=1, batch_size=128),
    )
    report = harness.run_matrix(config, tmp_path)
    assert report.failures == [{"cell": "baseline-mct-A", "error": "boom"}]
    anechoic = next(r for r in report.rows if r["mode"] == "anechoic")
    assert set(anechoic["rmse"]) == {"anechoic", "A"}
    saved = yaml.safe_load((tmp_path / "matrix" / "report.yaml").read_text())
    assert saved["schema_version"] == 1
    table = (tmp_path / "matrix" / "table.txt").read_text()
    assert "baseline (published)" in table


def test_unknown_training_mode_names_the_choices():
    with pytest.raises(ConfigurationError, match="reverb"):
        harness.TrainingMode.parse("reverb")
    manifest = sim.default_manifest(counts={"train": 1}, azimuths=[0])
    with pytest.raises(ConfigurationError):
        harness.MatrixConfig(manifest, modes=["anechoic", "reverb"])
    assert harness.TrainingMode.parse("mct") is harness.TrainingMode.MCT


def test_matrix_caps_cells_in_flight(dataset, tmp_path, monkeypatch):
    seen = []
    real_run_parallel = harness.run_parallel

    def run_parallel(jobs, calls):
        seen.append(jobs)
        return real_run_parallel(jobs, calls)

    def train(spec, out_dir=None, evaluate=True):
        raise TrainingError(f"{spec.name} skipped")

    monkeypatch.setattr(harness, "run_parallel", run_parallel)
    monkeypatch.setattr(harness, "train", train)
    config = harness.MatrixConfig(
        dataset, systems=["baseline"], rooms=["anechoic", "A"], jobs=8
    )
    report = harness.run_matrix(config, tmp_path)
    assert seen == [2]
    assert len(report.failures) == 2
    with pytest.raises(ConfigurationError):
        harness.MatrixConfig(dataset, max_parallel_cells=0)


def _front_end(model):
    return model.nodes[0].params["weight"]


def test_gtf_training_keeps_the_gammatone_bank(dataset):
    config = ModelConfig(ModelKind.WAVELOC_GTF, seed=1)
    spec = harness.ExperimentSpec(
        config, dataset, schedule=TrainingSchedule(max_epochs=2, batch_size=64)
    )
    result = harness.train(spec, evaluate=False)
    assert result.report.best_val_loss < math.log(37)
    assert not result.model.nodes[0].trainable
    fresh = models.build_model(config)
    assert np.array_equal(_front_end(result.model), _front_end(fresh))
    trained = result.model.trainable_parameters()
    assert not any(name.startswith("00.") for name in trained)
    assert any(
        not np.array_equal(value, fresh.trainable_parameters()[name])
        for name, value in trained.items()
    )


@pytest.fixture(scope="module")
def conv_runs(dataset, tmp_path_factory):
    """Anechoic-only and multi-condition WaveLoc-CONV runs on the tiny set."""
    out_dir = tmp_path_factory.mktemp("conv")
    schedule = TrainingSchedule(max_epochs=3, batch_size=64)
    config = ModelConfig(ModelKind.WAVELOC_CONV, seed=1)
    clean = harness.train(
        harness.ExperimentSpec(config, dataset, schedule=schedule), out_dir
    )
    mct = harness.train(
        harness.ExperimentSpec(
            config, dataset, "mct", test_room="A", schedule=schedule
        ),
        out_dir,
    )
    return clean, mct


def test_conv_training_learns(conv_runs):
    clean, mct = conv_runs
    for result in (clean, mct):
        assert result.report.best_val_loss < math.log(37)
        assert result.model.nodes[0].trainable
    assert set(clean.report.rmse) == {"anechoic", "A"}
    assert set(mct.report.rmse) == {"A"}
    assert mct.report.config["training_rooms"] == ["anechoic", "A"]


def test_multi_condition_training_helps_in_the_reverberant_room(dataset, conv_runs):
    clean, mct = conv_runs
    pool = harness.FramePool.from_entries(
        dataset, dataset.select("valid", ["A"]), False, 1
    )
    assert harness.mean_loss(mct.model, pool) < harness.mean_loss(clean.model, pool)
    assert np.isfinite(mct.report.rmse["A"])
    assert np.isfinite(clean.report.rmse["A"])


def test_trained_conv_kernel_spectra(conv_runs, tmp_path):
    clean, _ = conv_runs
    initial = models.build_model(ModelConfig(ModelKind.WAVELOC_CONV, seed=1))
    assert not np.array_equal(_front_end(clean.model), _front_end(initial))
    spectra = harness.export_kernel_spectra(
        clean.checkpoint, tmp_path / "spectra.csv", 1024
    )
    assert spectra.shape == (64, 513)
    assert np.all(np.isfinite(spectra.values))
    power = 10.0 ** (spectra.values / 10.0)
    peaks = np.argmax(power, axis=1)
    shares = [
        row[max(0, p - 10) : p + 11].sum() / row.sum() for row, p in zip(power, peaks)
    ]
    expected = np.mean(np.asarray(shares) >= 0.5)
    assert harness.band_pass_concentration(spectra) == pytest.approx(expected)
    usage = harness.frequency_band_usage(spectra)
    assert usage["below"] + usage["above"] == pytest.approx(1.0)
