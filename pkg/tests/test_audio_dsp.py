import numpy as np
import pytest

from tests.utils import white_noise
from waveloc.errors import EmptyInputError, InputError
from waveloc.utils import audio_dsp as dsp


@pytest.mark.parametrize("n", [320, 321, 479, 480, 16000, 16319])
def test_frame_count_matches_formula(n):
    samples = np.zeros((2, n))
    frames = dsp.frame_array(samples)
    assert frames.shape == ((n - 320) // 160 + 1, 2, 320)
    assert dsp.frame_count(n) == frames.shape[0]


def test_frames_are_windows_of_the_signal():
    samples = np.stack([np.arange(1000.0), -np.arange(1000.0)])
    frames = dsp.frame_array(samples)
    for k in range(frames.shape[0]):
        assert np.array_equal(frames[k], samples[:, 160 * k : 160 * k + 320])


def test_frame_signal_wraps_frames():
    wave = dsp.BinauralWaveform(np.ones((2, 640)))
    frames = dsp.frame_signal(wave)
    assert len(frames) == 3
    assert all(f.data.shape == (2, 320) for f in frames)


def test_short_signal_raises():
    with pytest.raises(EmptyInputError):
        dsp.frame_array(np.zeros((2, 319)))


def test_waveform_rejects_other_rates():
    with pytest.raises(InputError):
        dsp.BinauralWaveform(np.zeros((2, 400)), sample_rate=44100)


def test_frame_rejects_non_finite():
    data = np.zeros((2, 320))
    data[1, 5] = np.nan
    with pytest.raises(InputError):
        dsp.BinauralFrame(data)


def test_erb_space_endpoints_and_order():
    freqs = dsp.erb_space(70.0, 7000.0, 32)
    assert freqs[0] == 70.0
    assert freqs[-1] == 7000.0
    assert np.all(np.diff(freqs) > 0)
    rates = dsp.erb_rate(freqs)
    assert np.allclose(np.diff(rates), np.diff(rates)[0])


def test_gammatone_bank_layout():
    bank = dsp.design_gammatone_bank()
    assert bank.kernels.shape == (32, 320)
    assert np.all(np.diff(bank.centre_frequencies) > 0)
    for kernel, spec in zip(bank.kernels, bank.specs):
        assert spec.order == 4
        assert spec.phase == 0.0
        expected = 1.019 * dsp.erb_bandwidth(spec.centre_frequency)
        assert np.isclose(spec.bandwidth, expected)
        assert np.allclose(kernel[::-1], spec.impulse_response())


def test_gammatone_peak_gain_is_unity():
    bank = dsp.design_gammatone_bank()
    magnitude = np.abs(np.fft.rfft(bank.kernels, 4096, axis=1))
    peak_db = 20 * np.log10(magnitude.max(axis=1))
    assert np.all(np.abs(peak_db) <= 0.1)


def test_gammatone_peak_frequency():
    bank = dsp.design_gammatone_bank()
    freqs = np.fft.rfftfreq(4096, 1.0 / 16000)
    bin_width = 16000 / 4096
    magnitude = np.abs(np.fft.rfft(bank.kernels, 4096, axis=1))
    for row, fc in zip(magnitude, bank.centre_frequencies):
        peak = freqs[np.argmax(row)]
        if fc < 150:
            # 320 taps truncate these responses well before they decay
            assert peak <= 2 * fc
        else:
            assert abs(peak - fc) <= max(0.02 * fc, bin_width), fc


def test_convolve_matches_direct_sum():
    rng = np.random.default_rng(1)
    x = rng.standard_normal(400)
    w = rng.standard_normal(320)
    offset = (320 - 1) // 2
    expected = np.zeros(400)
    for t in range(400):
        full_index = t + offset
        for m in range(400):
            j = full_index - m
            if 0 <= j < 320:
                expected[t] += x[m] * w[j]
    assert np.allclose(dsp.convolve_kernel(x, w), expected)


def test_convolve_is_linear():
    rng = np.random.default_rng(2)
    x, z = rng.standard_normal((2, 500))
    w = rng.standard_normal(320)
    combined = dsp.convolve_kernel(2.0 * x - 3.0 * z, w)
    separate = 2.0 * dsp.convolve_kernel(x, w) - 3.0 * dsp.convolve_kernel(z, w)
    assert np.allclose(combined, separate)


def test_convolve_rejects_wrong_kernel_length():
    with pytest.raises(InputError):
        dsp.convolve_kernel(np.zeros(400), np.zeros(100))


def test_gcc_recovers_integer_delay():
    rng = np.random.default_rng(3)
    for trial in range(100):
        d = int(rng.integers(-8, 9))
        x = white_noise(400, seed=trial)
        left = x[40:360]
        right = x[40 - d : 360 - d]
        frame = dsp.BinauralFrame(np.stack([left, right]))
        assert dsp.gcc_phat_lag(frame) == d
        feature = dsp.gcc_phat(frame)
        assert int(np.argmax(feature.values)) == d + 18


def test_gcc_feature_is_standardised():
    frame = dsp.BinauralFrame(np.stack([white_noise(320, 1), white_noise(320, 2)]))
    values = dsp.gcc_phat(frame).values
    assert values.shape == (37,)
    assert abs(values.mean()) < 1e-9
    assert np.isclose(values.std(), 1.0)


def test_gcc_silent_frame_is_zero():
    values = dsp.gcc_phat(dsp.BinauralFrame(np.zeros((2, 320)))).values
    assert np.all(np.isfinite(values))
    assert np.all(values == 0.0)


def test_gcc_frames_matches_single_frame():
    frames = np.stack(
        [np.stack([white_noise(320, i), white_noise(320, i + 50)]) for i in range(4)]
    )
    batch = dsp.gcc_phat_frames(frames)
    for k in range(4):
        assert np.allclose(batch[k], dsp.gcc_phat(dsp.BinauralFrame(frames[k])).values)


def test_spectrum_of_impulse_is_flat():
    kernel = np.zeros((1, 256))
    kernel[0, 0] = 1.0
    spectra = dsp.kernel_log_power_spectra(kernel, 1024)
    assert spectra.shape == (1, 513)
    assert np.allclose(spectra.values, 0.0, atol=1e-9)
    assert spectra.frequencies[-1] == 8000.0


def test_spectrum_of_cosine_peaks_at_its_bin():
    k = 64
    t = np.arange(256)
    kernels = np.stack([np.cos(2 * np.pi * k * t / 256), np.zeros(256)])
    spectra = dsp.kernel_log_power_spectra(kernels, 256)
    assert int(np.argmax(spectra.values[0])) == k
    assert np.allclose(spectra.values[1], 20 * np.log10(1e-12))


@pytest.mark.parametrize("nfft", [128, 1000])
def test_spectrum_rejects_bad_nfft(nfft):
    with pytest.raises(InputError):
        dsp.kernel_log_power_spectra(np.zeros((2, 256)), nfft)
