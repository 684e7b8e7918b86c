import math
from pathlib import Path

import numpy as np
import pytest
from scipy.signal import correlate

from tests.utils import tiny_manifest, white_noise, write_binaural, write_mono
from waveloc.errors import (
    ConfigurationError,
    EmptyInputError,
    InputError,
    UnmeasurableError,
)
from waveloc.utils import binaural_sim as sim
from waveloc.utils.audio_dsp import MonoWaveform, frame_signal, gcc_phat_lag


def test_woodworth_itd_values():
    assert sim.woodworth_itd(0) == 0.0
    expected = 0.0875 / 343.0 * (math.pi / 2 + 1)
    assert sim.woodworth_itd(90) == pytest.approx(expected)
    assert sim.woodworth_itd(90) * 16000 == pytest.approx(10.49, abs=0.01)
    for az in (5, 30, 60, 85):
        assert sim.woodworth_itd(-az) == pytest.approx(-sim.woodworth_itd(az))
    itds = [sim.woodworth_itd(az) for az in sim.grid()]
    assert np.all(np.diff(itds) > 0)
    with pytest.raises(InputError):
        sim.woodworth_itd(95)


def test_frontal_brir_is_symmetric():
    brir = sim.synth_anechoic_brir(0)
    assert np.allclose(brir.left, brir.right)


def test_lateral_source_is_louder_at_the_near_ear():
    brir = sim.synth_anechoic_brir(60)
    freqs = np.fft.rfftfreq(4096, 1.0 / 16000)
    band = (freqs >= 2000) & (freqs <= 7000)
    left = np.sum(np.abs(np.fft.rfft(brir.left, 4096))[band] ** 2)
    right = np.sum(np.abs(np.fft.rfft(brir.right, 4096))[band] ** 2)
    assert 10 * np.log10(right / left) > 3.0


def test_interaural_lag_at_ninety_degrees():
    brir = sim.synth_anechoic_brir(90)
    xc = correlate(brir.left, brir.right, mode="full")
    lag = int(np.argmax(xc)) - (len(brir) - 1)
    assert abs(lag) in (10, 11)
    assert lag > 0


def test_off_grid_azimuth_is_rejected():
    with pytest.raises(InputError):
        sim.synth_anechoic_brir(7)


def test_zero_t60_room_reduces_to_anechoic():
    room = sim.RoomSpec("dry", target_t60=0.0)
    for az in (-45, 0, 30):
        brir = sim.image_source_rir(room, az)
        reference = sim.synth_anechoic_brir(az)
        assert len(brir) == len(reference)
        assert np.allclose(brir.samples, reference.samples, atol=1e-6)


def test_room_geometry_checks():
    with pytest.raises(ConfigurationError):
        sim.RoomSpec("slow", target_t60=5.0)
    with pytest.raises(ConfigurationError):
        sim.RoomSpec("flat", dimensions=(4.0, 0.0, 3.0))
    small = sim.RoomSpec("small", dimensions=(2.0, 2.0, 2.0), target_t60=0.3)
    with pytest.raises(InputError):
        sim.image_source_rir(small, 0)


def test_half_second_room():
    room = sim.RoomSpec("mid", target_t60=0.5)
    brir = sim.image_source_rir(room, 30)
    assert 0.4 <= sim.schroeder_t60(brir) <= 0.6
    assert brir.measured_t60 == pytest.approx(sim.schroeder_t60(brir))
    assert np.isfinite(brir.measured_drr)


@pytest.mark.parametrize("room_id", ["A", "B", "C", "D"])
def test_default_rooms_hit_their_reverberation_time(room_id):
    room = sim.default_rooms()[room_id]
    brir = sim.image_source_rir(room, -30)
    measured = sim.schroeder_t60(brir)
    assert abs(measured - room.target_t60) <= 0.2 * room.target_t60


def test_max_image_order_limits_reflections():
    room = sim.RoomSpec("first", target_t60=0.5, max_image_order=1)
    first_order = sim.image_source_rir(room, 0)
    full = sim.image_source_rir(sim.RoomSpec("full", target_t60=0.5), 0)
    assert np.sum(first_order.samples**2) < np.sum(full.samples**2)


def test_schroeder_on_exponential_decay():
    fs = 16000
    t = np.arange(fs) / fs
    rir = np.exp(-3 * math.log(10) * t / 0.5)
    assert sim.schroeder_t60(rir) == pytest.approx(0.5, rel=0.02)


def test_schroeder_unmeasurable():
    with pytest.raises(UnmeasurableError):
        sim.schroeder_t60(np.zeros(100))
    impulse = np.zeros(100)
    impulse[0] = 1.0
    with pytest.raises(UnmeasurableError):
        sim.schroeder_t60(impulse)


def test_drr_values():
    impulse = np.zeros(400)
    impulse[0] = 1.0
    assert sim.drr(impulse) == float("inf")
    impulse[100] = 1.0
    assert sim.drr(impulse) == pytest.approx(0.0)


def test_spatialize_impulse_returns_the_brir():
    brir = sim.synth_anechoic_brir(-20)
    source = np.zeros(50)
    source[0] = 1.0
    out = sim.spatialize(MonoWaveform(source), brir)
    assert out.samples.shape == (2, 50 + len(brir) - 1)
    assert np.max(np.abs(out.samples)) == pytest.approx(0.95)
    scale = 0.95 / np.max(np.abs(brir.samples))
    assert np.allclose(out.samples[:, : len(brir)], scale * brir.samples)


def test_spatialize_silence():
    out = sim.spatialize(MonoWaveform(np.zeros(100)), sim.synth_anechoic_brir(0))
    assert np.all(out.samples == 0.0)


@pytest.mark.parametrize("azimuth, expected", [(0, 0), (45, -6), (-45, 6)])
def test_modal_gcc_lag_follows_the_source(azimuth, expected):
    wave = sim.spatialize(
        sim.white_noise_burst(1.0, seed=3), sim.synth_anechoic_brir(azimuth)
    )
    lags = [gcc_phat_lag(frame) for frame in frame_signal(wave)]
    values, counts = np.unique(lags, return_counts=True)
    assert values[np.argmax(counts)] == expected
    assert expected == -round(sim.woodworth_itd(azimuth) * 16000)


def test_speech_shaped_noise_has_soft_edges():
    wave = sim.speech_shaped_noise(1.0, seed=1)
    assert len(wave) == 16000
    assert wave.samples[0] == 0.0
    assert abs(wave.samples[-1]) < 1e-3
    rms = np.sqrt(np.mean(wave.samples[2000:14000] ** 2))
    assert 0.05 < rms < 0.2


def test_energy_gate_trims_silence():
    samples = np.concatenate([np.zeros(1600), 0.1 * white_noise(8000), np.zeros(1600)])
    gated = sim.energy_gate(MonoWaveform(samples))
    assert len(gated) == 8000
    assert np.array_equal(gated.samples, samples[1600:9600])


def test_energy_gate_rejects_silence():
    with pytest.raises(InputError):
        sim.energy_gate(MonoWaveform(np.zeros(3200)))


def test_default_manifest_counts():
    manifest = sim.default_manifest()
    counts = manifest.counts()
    assert set(counts) == {"anechoic", "A", "B", "C", "D"}
    for per_room in counts.values():
        assert sum(per_room["train"].values()) == 888
        assert set(per_room["valid"].values()) == {6}
        assert set(per_room["test"].values()) == {15}
        assert sorted(per_room["test"]) == sim.grid()


def test_rooms_share_source_seeds():
    manifest = sim.default_manifest(counts={"train": 2, "valid": 0, "test": 1})
    by_room = {}
    for entry in manifest.entries:
        by_room.setdefault(entry.room_id, []).append(entry.seed)
    assert by_room["anechoic"] == by_room["A"] == by_room["D"]
    assert len(set(by_room["A"])) == len(by_room["A"])


def test_make_dataset_is_deterministic(tmp_path):
    first = tiny_manifest(tmp_path / "one")
    second = tiny_manifest(tmp_path / "two")
    assert len(first.entries) == 3 * 4
    for a, b in zip(first.entries, second.entries):
        assert a.seed == b.seed
        assert first.resolve_path(a).read_bytes() == second.resolve_path(b).read_bytes()
    text_one = (tmp_path / "one" / "data" / "manifest.yaml").read_text()
    text_two = (tmp_path / "two" / "data" / "manifest.yaml").read_text()
    assert text_one == text_two


def test_seed_changes_the_audio(tmp_path):
    first = tiny_manifest(tmp_path / "one", seed=0)
    second = tiny_manifest(tmp_path / "two", seed=1)
    path_one = first.resolve_path(first.entries[0])
    path_two = second.resolve_path(second.entries[0])
    assert path_one.read_bytes() != path_two.read_bytes()


def test_corpus_failures_are_reported(tmp_path):
    good = write_mono(tmp_path / "good.wav", 0.1 * white_noise(16000))
    rooms = {"anechoic": sim.default_rooms()["anechoic"]}
    entries = sim.expand_entries(
        ["anechoic"],
        {"train": 2},
        seed=0,
        source_kind="wav_corpus",
        azimuths=[0],
        corpus_files=[str(good)],
    )
    entries[1].corpus_file = str(tmp_path / "missing.wav")
    manifest = sim.DatasetManifest(rooms=rooms, entries=entries)
    report = sim.make_dataset(manifest, tmp_path / "out")
    assert report.written == 1
    assert [e.path for e in report.errors] == [entries[1].path]
    assert report.manifest_path.exists()


def test_external_brirs(tmp_path):
    brir_dir = tmp_path / "brirs"
    for az in (0, 30):
        samples = sim.synth_anechoic_brir(az).samples
        write_binaural(brir_dir / f"az{az:+04d}.wav", samples)
    brirs = sim.load_external_brirs(brir_dir, "measured")
    assert sorted(brirs) == [0, 30]
    cache = sim.BrirCache(
        {"measured": sim.RoomSpec("measured", target_t60=0.0, brir_dir=str(brir_dir))}
    )
    assert len(cache.get("measured", 30)) == len(brirs[30])
    with pytest.raises(InputError):
        cache.get("measured", 45)
    with pytest.raises(InputError):
        sim.load_external_brirs(tmp_path, "empty")


def test_manifest_from_dict_generates_entries(tmp_path):
    data = {
        "seed": 7,
        "rooms": ["anechoic", "B"],
        "counts": {"train": 1, "test": 2},
        "azimuths": [-90, 90],
        "source": {"kind": "white_noise_burst", "duration": [0.5, 0.8]},
    }
    manifest = sim.manifest_from_dict(data, base_dir=tmp_path)
    assert len(manifest.entries) == 2 * 2 * 3
    assert all(0.5 <= e.duration <= 0.8 for e in manifest.entries)
    with pytest.raises(ConfigurationError):
        sim.manifest_from_dict({"rooms": ["Z"]})


def test_run_parallel_keeps_order():
    calls = [lambda i=i: i * i for i in range(10)]
    assert sim.run_parallel(4, calls) == [i * i for i in range(10)]


def test_reflection_loss_is_calibrated_above_sabine():
    room = sim.default_rooms()["B"]
    assert sim.reflection_loss(room, 0) > sim.sabine_absorption(room)
    capped = sim.RoomSpec("capped", target_t60=0.47, max_image_order=3)
    assert sim.reflection_loss(capped, 0) == sim.sabine_absorption(capped)
    assert sim.reflection_loss(sim.default_rooms()["anechoic"], 0) == 1.0


def _late_click(length=330):
    samples = np.zeros(length)
    samples[325] = 0.5
    return samples


def test_gate_rejects_energy_outside_whole_frames():
    with pytest.raises(EmptyInputError):
        sim.energy_gate(MonoWaveform(_late_click()))


def test_corpus_file_without_gated_frames_is_reported(tmp_path):
    good = write_mono(tmp_path / "good.wav", 0.1 * white_noise(16000))
    click = write_mono(tmp_path / "click.wav", _late_click())
    rooms = {"anechoic": sim.default_rooms()["anechoic"]}
    entries = sim.expand_entries(
        ["anechoic"],
        {"train": 2},
        seed=0,
        source_kind="wav_corpus",
        azimuths=[0],
        corpus_files=[str(good)],
    )
    entries[1].corpus_file = str(click)
    report = sim.make_dataset(
        sim.DatasetManifest(rooms=rooms, entries=entries), tmp_path / "out"
    )
    assert report.written == 1
    assert [e.path for e in report.errors] == [entries[1].path]
    assert "gate" in report.errors[0].message


def test_relative_brir_dir_survives_reload(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    brir_dir = tmp_path / "cfg" / "brirs"
    write_binaural(brir_dir / "az+000.wav", sim.synth_anechoic_brir(0).samples)
    manifest = sim.manifest_from_dict(
        {
            "rooms": {"measured": {"target_t60": 0.0, "brir_dir": "brirs"}},
            "counts": {"train": 1},
            "azimuths": [0],
        },
        base_dir=Path("cfg"),
    )
    expected = str(brir_dir.resolve())
    assert manifest.rooms["measured"].brir_dir == expected
    report = sim.make_dataset(manifest, Path("out"))
    assert report.errors == []
    reloaded = sim.load_manifest(report.manifest_path)
    assert reloaded.rooms["measured"].brir_dir == expected
    assert len(sim.BrirCache(reloaded.rooms).get("measured", 0)) > 0


def test_unknown_entry_keys_are_configuration_errors():
    entry = {
        "split": "train",
        "azimuth": 0,
        "room_id": "anechoic",
        "source_kind": "white_noise_burst",
        "seed": 0,
        "duration": 1.0,
        "path": "x.wav",
    }
    with pytest.raises(ConfigurationError, match="azimuth"):
        sim.manifest_from_dict({"entries": [entry]})
    with pytest.raises(ConfigurationError):
        sim.manifest_from_dict({"entries": ["train/x.wav"]})
