"""Waveform to log-mel spectrogram, matched in length to the sampled frames."""
from __future__ import annotations

import io
import wave as _wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Tensor

SAMPLE_RATE = 16000
WINDOW = 512          # 32 ms at 16 kHz
HOP = 256             # 16 ms
N_MELS = 80
LOG_EPS = 1e-6


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", arr)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    bins: Tensor
    mel_low_hz: float
    mel_high_hz: float
    hop_seconds: float
    window_seconds: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 FFT along the last axis (length must be a power of two)."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    if n < 1 or n & (n - 1):
        raise ValueError(f"FFT length must be a power of two, got {n}")
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    y = x[..., rev].copy()
    size = 2
    while size <= n:
        half = size // 2
        twiddle = np.exp(-2j * np.pi * np.arange(half) / size)
        y = y.reshape(*x.shape[:-1], n // size, size)
        even = y[..., :half].copy()
        odd = y[..., half:] * twiddle
        y[..., :half] = even + odd
        y[..., half:] = even - odd
        y = y.reshape(*x.shape[:-1], n)
        size *= 2
    return y


def dft(x: np.ndarray) -> np.ndarray:
    """Direct O(n^2) transform; reference for :func:`fft`."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    return x @ np.exp(-2j * np.pi * np.outer(k, k) / n)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _frames(samples: np.ndarray, window_len: int, hop: int) -> np.ndarray:
    # zero centre padding: mirroring a sinusoid inverts its phase at the edge
    # and splits the spectral peak of the first and last frames
    pad = window_len // 2
    padded = np.pad(samples, (pad, pad))
    if len(samples) == 0 or len(padded) < window_len:
        raise ValueError(f"waveform of {len(samples)} samples is shorter than one window after padding")
    count = (len(padded) - window_len) // hop + 1
    return np.lib.stride_tricks.sliding_window_view(padded, window_len)[::hop][:count]


def stft(wave: Waveform, window_len: int = WINDOW, hop: int | None = None) -> np.ndarray:
    """Magnitudes [window_len/2 + 1, frames] of the Hann-windowed, centre-padded signal."""
    if window_len < 2 or window_len & (window_len - 1):
        raise ValueError(f"window_len must be a power of two, got {window_len}")
    hop = window_len // 2 if hop is None else hop
    if hop != window_len // 2:
        raise ValueError(f"hop must be window_len/2 = {window_len // 2}, got {hop}")
    frames = _frames(wave.samples, window_len, hop) * hann(window_len)
    spectrum = fft(frames)[:, : window_len // 2 + 1]
    return np.abs(spectrum).T


def mel_filterbank(n_mels: int, f_low_hz: float, f_high_hz: float, n_fft_bins: int,
                   sample_rate: int = SAMPLE_RATE) -> Tensor:
    """Triangular filters [n_mels, n_fft_bins] with peaks at mel-uniform centres."""
    if not 0 <= f_low_hz < f_high_hz <= sample_rate / 2:
        raise ValueError(f"need 0 <= f_low < f_high <= {sample_rate / 2}, got {f_low_hz}, {f_high_hz}")
    if n_mels < 1:
        raise ValueError("n_mels must be positive")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_low_hz), hz_to_mel(f_high_hz), n_mels + 2))
    edges[0], edges[-1] = f_low_hz, f_high_hz      # exact outer edges despite the mel round trip
    freqs = np.linspace(0.0, sample_rate / 2, n_fft_bins)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise ValueError(
            f"{n_mels} mel filters are too many for {n_fft_bins} FFT bins: filter {int(empty[0])} is empty"
        )
    return Tensor(weights)


def mel_centers(n_mels: int, f_low_hz: float = 0.0, f_high_hz: float = SAMPLE_RATE / 2) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_low_hz), hz_to_mel(f_high_hz), n_mels + 2))[1:-1]


def log_mel(wave: Waveform, target_frames: int, n_mels: int = N_MELS, *,
            expected_seconds: float | None = None, f_low_hz: float = 0.0,
            f_high_hz: float | None = None) -> Spectrogram:
    """Log-mel spectrogram with exactly ``target_frames`` columns.

    The centre-padded STFT yields ``len // hop + 1`` frames; surplus columns
    are dropped and missing ones repeat the last column, so the result spans
    exactly ``target_frames`` hops.
    """
    if wave.sample_rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {wave.sample_rate} Hz (resample first)")
    if target_frames < 1:
        raise ValueError("target_frames must be positive")
    hop_s = HOP / SAMPLE_RATE
    if expected_seconds is not None and abs(wave.duration - expected_seconds) > hop_s + 1e-12:
        raise ValueError(
            f"audio lasts {wave.duration:.6f} s but the frames span {expected_seconds:.6f} s "
            f"(tolerance one hop, {hop_s} s)"
        )
    f_high_hz = SAMPLE_RATE / 2 if f_high_hz is None else f_high_hz
    power = stft(wave, WINDOW, HOP)[:, :target_frames] ** 2
    if power.shape[1] < target_frames:
        power = np.pad(power, ((0, 0), (0, target_frames - power.shape[1])), mode="edge")
    bank = mel_filterbank(n_mels, f_low_hz, f_high_hz, WINDOW // 2 + 1).data
    bins = np.log(bank @ power + LOG_EPS)
    return Spectrogram(Tensor(bins), f_low_hz, f_high_hz, hop_s, WINDOW / SAMPLE_RATE)


# WAV input/output -------------------------------------------------------------

def read_wav(path: str | Path, *, resample: bool = False) -> Waveform:
    """Mono PCM16 little-endian WAV; other rates need ``resample=True``."""
    with _wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, got {8 * f.getsampwidth()}-bit")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if rate != SAMPLE_RATE:
        if not resample:
            raise ValueError(f"{path}: sample rate {rate} Hz differs from {SAMPLE_RATE} Hz; pass --resample")
        return resample_linear(Waveform(samples, rate), SAMPLE_RATE)
    return Waveform(samples, rate)


def wav_bytes(wave: Waveform) -> bytes:
    pcm = np.clip(np.round(wave.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with _wave.open(buf, "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(wave.sample_rate))
        f.writeframes(pcm.tobytes())
    return buf.getvalue()


def wav_from_bytes(data: bytes) -> Waveform:
    with _wave.open(io.BytesIO(data), "rb") as f:
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    return Waveform(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, rate)


def write_wav(path: str | Path, wave: Waveform) -> None:
    Path(path).write_bytes(wav_bytes(wave))


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Snap samples onto the PCM16 grid so a WAV round trip is exact."""
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767) / 32768.0


def resample_linear(wave: Waveform, rate: int) -> Waveform:
    n_out = int(round(len(wave.samples) * rate / wave.sample_rate))
    t_out = np.arange(n_out) / rate
    t_in = np.arange(len(wave.samples)) / wave.sample_rate
    return Waveform(np.interp(t_out, t_in, wave.samples), rate)
