import math
import wave as wavelib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avslowfast.audio import (HOP, LOG_EPS, SAMPLE_RATE, WINDOW, Waveform, dft, fft, hann, log_mel,
                              mel_centers, mel_filterbank, quantize_pcm16, read_wav, resample_linear, stft,
                              wav_bytes, wav_from_bytes, write_wav)
from avslowfast.rng import stream


def tone(freq, seconds, phase=0.0, amp=0.5):
    t = np.arange(int(round(seconds * SAMPLE_RATE))) / SAMPLE_RATE
    return Waveform(amp * np.sin(2 * np.pi * freq * t + phase))


def reference_mel_centres(n, lo, hi):
    mel = lambda f: 2595.0 * math.log10(1.0 + f / 700.0)   # noqa: E731
    inv = lambda m: 700.0 * (10 ** (m / 2595.0) - 1.0)      # noqa: E731
    step = (mel(hi) - mel(lo)) / (n + 1)
    return [inv(mel(lo) + step * (i + 1)) for i in range(n)]


# ---------------------------------------------------------------- transforms

@pytest.mark.parametrize("n", [1, 2, 8, 64, 512])
def test_fft_matches_direct_dft(n):
    x = stream(n, "fft").standard_normal((3, n)) + 1j * stream(n, "fft-im").standard_normal((3, n))
    assert np.max(np.abs(fft(x) - dft(x))) < 1e-9 * max(1, n)


def test_fft_rejects_non_power_of_two():
    with pytest.raises(ValueError):
        fft(np.zeros(12))


def test_hann_is_periodic():
    w = hann(8)
    assert w[0] == 0.0 and w[4] == pytest.approx(1.0)
    assert np.allclose(w[1:4], w[7:4:-1])


def test_stft_shape_and_frame_count():
    n = 16000
    mag = stft(Waveform(np.zeros(n)))
    pad = WINDOW // 2
    assert mag.shape == (WINDOW // 2 + 1, (n + 2 * pad - WINDOW) // HOP + 1)


def test_stft_zero_input_zero_output():
    assert np.all(stft(Waveform(np.zeros(4000))) == 0.0)


def test_stft_rejects_bad_arguments():
    with pytest.raises(ValueError):
        stft(Waveform(np.zeros(1000)), 500)
    with pytest.raises(ValueError):
        stft(Waveform(np.zeros(1000)), 512, 128)
    with pytest.raises(ValueError, match="shorter than one window"):
        stft(Waveform(np.zeros(0)))


@pytest.mark.parametrize("k", [3, 10, 57, 128, 200])
@pytest.mark.parametrize("phase", [0.0, 1.1, 2.5])
def test_bin_centre_tone_peaks_at_k(k, phase):
    mag = stft(tone(k * SAMPLE_RATE / WINDOW, 0.5, phase))
    assert np.all(mag.argmax(axis=0) == k)


def test_parseval_per_frame():
    x = stream(0, "parseval").standard_normal(SAMPLE_RATE)
    mag = stft(Waveform(x))
    padded = np.pad(x, (WINDOW // 2, WINDOW // 2))
    for j in range(mag.shape[1]):
        seg = padded[j * HOP:j * HOP + WINDOW] * hann(WINDOW)
        time_energy = np.sum(seg ** 2)
        m2 = mag[:, j] ** 2
        freq_energy = (m2[0] + m2[-1] + 2 * m2[1:-1].sum()) / WINDOW
        assert abs(freq_energy - time_energy) <= 1e-9 * time_energy


def test_time_shift_covariance():
    x = stream(1, "shift").standard_normal(8000)
    a = stft(Waveform(x))
    b = stft(Waveform(x[HOP:]))
    # interior columns only: away from both padded edges
    cols = range(2, b.shape[1] - 3)
    assert max(np.max(np.abs(a[:, j + 1] - b[:, j])) for j in cols) < 1e-9


# ---------------------------------------------------------------- mel filterbank

def test_single_mel_filter_spans_range():
    bank = mel_filterbank(1, 0.0, 8000.0, 257).data
    freqs = np.linspace(0, 8000, 257)
    nonzero = freqs[bank[0] > 0]
    assert nonzero.min() > 0 and nonzero.max() < 8000
    centre = reference_mel_centres(1, 0, 8000)[0]
    assert abs(freqs[bank[0].argmax()] - centre) <= 8000 / 256


def test_mel_centres_monotone_and_match_table():
    centres = mel_centers(80)
    assert np.all(np.diff(centres) > 0)
    assert np.allclose(centres, reference_mel_centres(80, 0, 8000), rtol=1e-12)


def test_filter_peaks_match_reference_table():
    bank = mel_filterbank(80, 0.0, 8000.0, 257).data
    bin_hz = 8000 / 256
    peaks = bank.argmax(axis=1) * bin_hz
    assert np.all(np.abs(peaks - np.array(reference_mel_centres(80, 0, 8000))) <= bin_hz)


def test_filterbank_coverage_and_positive_sums():
    bank = mel_filterbank(80, 0.0, 8000.0, 257).data
    assert np.all(bank[:, 1:-1].sum(axis=0) > 0)
    assert np.all(bank.sum(axis=1) > 0)


def test_filterbank_rejects_empty_filters_and_bad_range():
    with pytest.raises(ValueError, match="empty"):
        mel_filterbank(400, 0.0, 8000.0, 257)
    with pytest.raises(ValueError):
        mel_filterbank(10, 5000.0, 4000.0, 257)
    with pytest.raises(ValueError):
        mel_filterbank(10, 0.0, 9000.0, 257)


# ---------------------------------------------------------------- log-mel

def test_two_seconds_give_80_by_128():
    spec = log_mel(tone(440, 2.0), 128, 80, expected_seconds=2.0)
    assert spec.shape == (80, 128)
    assert spec.hop_seconds == 0.016 and spec.window_seconds == 0.032


def test_silence_is_log_eps():
    spec = log_mel(Waveform(np.zeros(SAMPLE_RATE)), 62)
    assert np.all(spec.bins.data == math.log(LOG_EPS))


def test_440_tone_peaks_at_nearest_mel_centre():
    spec = log_mel(tone(440, 1.0), 62, 80)
    nearest = int(np.argmin(np.abs(np.array(reference_mel_centres(80, 0, 8000)) - 440)))
    assert np.all(spec.bins.data.argmax(axis=0) == nearest)


def test_duration_mismatch_rejected_with_both_durations():
    with pytest.raises(ValueError, match=r"1\.000000 s.*1\.500000 s"):
        log_mel(tone(440, 1.0), 64, expected_seconds=1.5)
    log_mel(tone(440, 1.0), 64, expected_seconds=1.0 + 0.9 * HOP / SAMPLE_RATE)


def test_non_16k_rejected():
    with pytest.raises(ValueError, match="16000"):
        log_mel(Waveform(np.zeros(8000), 8000), 10)


@given(st.floats(0.1, 10.0))
def test_scaling_adds_two_log_c(c):
    wave = tone(1000, 0.5, amp=0.3)
    base = log_mel(wave, 31, 40)
    scaled = log_mel(Waveform(wave.samples * c), 31, 40)
    energy = np.exp(base.bins.data)
    loud = energy > 1e2
    assert loud.any()
    assert np.max(np.abs(scaled.bins.data[loud] - base.bins.data[loud] - 2 * math.log(c))) < 1e-6


def test_pad_then_trim_exact_frame_count():
    for frames in (1, 10, 125, 126, 128, 140):
        assert log_mel(tone(300, 2.0), frames, 16).shape == (16, frames)


def test_log_mel_deterministic():
    a = log_mel(tone(700, 1.0), 64).bins.data
    b = log_mel(tone(700, 1.0), 64).bins.data
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- WAV I/O

def test_wav_round_trip_exact_after_quantization(tmp_path):
    samples = quantize_pcm16(stream(2, "wav").uniform(-0.9, 0.9, 4000))
    path = tmp_path / "a.wav"
    write_wav(path, Waveform(samples))
    back = read_wav(path)
    assert back.sample_rate == SAMPLE_RATE
    assert np.array_equal(back.samples, samples)
    assert np.array_equal(wav_from_bytes(wav_bytes(Waveform(samples))).samples, samples)


def test_wav_header_is_pcm16_mono(tmp_path):
    path = tmp_path / "b.wav"
    write_wav(path, Waveform(np.zeros(100)))
    with wavelib.open(str(path)) as f:
        assert (f.getnchannels(), f.getsampwidth(), f.getframerate()) == (1, 2, 16000)


def test_other_rate_needs_resample_flag(tmp_path):
    path = tmp_path / "c.wav"
    write_wav(path, Waveform(np.zeros(800), 8000))
    with pytest.raises(ValueError, match="resample"):
        read_wav(path)
    wave = read_wav(path, resample=True)
    assert wave.sample_rate == SAMPLE_RATE and len(wave.samples) == 1600


def test_stereo_rejected(tmp_path):
    path = tmp_path / "d.wav"
    with wavelib.open(str(path), "wb") as f:
        f.setnchannels(2)
        f.setsampwidth(2)
        f.setframerate(16000)
        f.writeframes(b"\x00" * 40)
    with pytest.raises(ValueError, match="mono"):
        read_wav(path)


def test_linear_resampling_of_a_ramp():
    wave = Waveform(np.arange(100) / 8000.0, 8000)
    up = resample_linear(wave, 16000)
    t = np.arange(len(up.samples)) / 16000
    inside = t <= 99 / 8000
    assert np.allclose(up.samples[inside], t[inside])
