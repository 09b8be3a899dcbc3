"""
Log-Mel filterbank frontend.

Waveform (mono, 16 kHz) -> 25 ms periodic-Hamming frames every 10 ms -> power
spectrum (FFT size = next power of two >= window) -> HTK-mel triangular
filterbank (0 Hz .. Nyquist, not area-normalised) -> natural log with a 1e-10
floor -> pad/trim to the task's frame count -> corpus normalisation to
mean 0 / std 0.5.
"""

import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import BinaryIO, Iterable, Tuple, Union

import numpy as np
import soundfile as sf
from scipy.signal import get_window

from app.core.errors import InputError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
N_MELS = 128
LOG_FLOOR = 1e-10
STD_GUARD = 1e-8


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def seconds(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrogram:
    """frames x n_mels log energies."""
    values: np.ndarray
    frame_shift_ms: float = 10.0
    normalized: bool = False

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_mels(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

def read_wav(path: Union[str, Path, BinaryIO], expected_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a mono PCM16 WAV (path or binary file object). Multi-channel audio and other sample rates are rejected."""
    source = str(path) if isinstance(path, (str, Path)) else path
    name = source if isinstance(source, str) else "upload"
    try:
        with sf.SoundFile(source) as f:
            if f.channels != 1:
                raise InputError(f"{name}: expected mono audio, got {f.channels} channels")
            if f.samplerate != expected_rate:
                raise InputError(
                    f"{name}: expected {expected_rate} Hz, got {f.samplerate} Hz (resampling is not supported)"
                )
            samples = f.read(dtype="float32", always_2d=False)
            rate = f.samplerate
    except RuntimeError as e:
        raise InputError(f"{name}: unreadable audio ({e})") from e
    return Waveform(samples=samples, sample_rate=rate)


def write_wav(path: Union[str, Path], wave: Waveform) -> None:
    sf.write(str(path), np.clip(wave.samples, -1.0, 1.0), wave.sample_rate, subtype="PCM_16", format="WAV")


# ---------------------------------------------------------------------------
# Framing
# ---------------------------------------------------------------------------

def _window_lengths(sample_rate: int, win_ms: float, hop_ms: float) -> Tuple[int, int]:
    return int(round(sample_rate * win_ms / 1000.0)), int(round(sample_rate * hop_ms / 1000.0))


def frame_and_window(w: Waveform, win_ms: float = 25.0, hop_ms: float = 10.0) -> np.ndarray:
    """
    Slice the waveform into overlapping frames and apply a periodic Hamming window.

    frames = floor((len - win) / hop) + 1; inputs shorter than one window are
    zero-padded to exactly one window.
    """
    if win_ms < hop_ms:
        raise InputError(f"window ({win_ms} ms) must not be shorter than hop ({hop_ms} ms)")
    samples = np.asarray(w.samples, dtype=np.float64)
    if samples.size == 0:
        raise InputError("empty waveform")
    win, hop = _window_lengths(w.sample_rate, win_ms, hop_ms)
    if samples.size < win:
        samples = np.pad(samples, (0, win - samples.size))
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop]
    return frames * get_window("hamming", win, fftbins=True)


# ---------------------------------------------------------------------------
# Mel filterbank
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


@lru_cache(maxsize=16)
def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters, shape [n_mels x (n_fft/2 + 1)], peak weight 1."""
    points = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, center, upper = points[:-2, None], points[1:-1, None], points[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    fb.setflags(write=False)
    return fb


def mel_centers(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))[1:-1]


def log_mel(w: Waveform, n_mels: int = N_MELS, win_ms: float = 25.0, hop_ms: float = 10.0) -> Spectrogram:
    frames = frame_and_window(w, win_ms, hop_ms)
    n_fft = next_pow2(frames.shape[1])
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft, w.sample_rate).T
    values = np.log(np.maximum(energies, LOG_FLOOR)).astype(np.float32)
    return Spectrogram(values=values, frame_shift_ms=hop_ms)


# ---------------------------------------------------------------------------
# Length and level
# ---------------------------------------------------------------------------

def pad_or_trim(s: Spectrogram, target_frames: int) -> Spectrogram:
    """Zero-pad at the end or truncate to exactly target_frames rows."""
    if target_frames <= 0:
        raise InputError(f"target_frames must be positive, got {target_frames}")
    n = s.n_frames
    if n == target_frames:
        return s
    if n > target_frames:
        values = s.values[:target_frames]
    else:
        values = np.pad(s.values, ((0, target_frames - n), (0, 0)))
    return replace(s, values=np.ascontiguousarray(values))


def corpus_stats(values: Iterable[np.ndarray]) -> Tuple[float, float]:
    """Mean and (guarded) population std over every cell of a corpus."""
    total, total_sq, count = 0.0, 0.0, 0
    for v in values:
        v = np.asarray(v, dtype=np.float64)
        total += v.sum()
        total_sq += (v * v).sum()
        count += v.size
    if count == 0:
        raise InputError("cannot compute statistics of an empty corpus")
    m = total / count
    var = max(total_sq / count - m * m, 0.0)
    return float(m), float(max(np.sqrt(var), STD_GUARD))


def normalize(s: Spectrogram, corpus_mean: float, corpus_std: float) -> Spectrogram:
    """value <- (value - mean) / (2 std): the corpus ends up with mean 0 and std 0.5."""
    if not corpus_std > 0:
        raise InputError(f"corpus std must be positive, got {corpus_std}")
    values = ((s.values - corpus_mean) / (2.0 * corpus_std)).astype(np.float32)
    return replace(s, values=values, normalized=True)


def denormalize(s: Spectrogram, corpus_mean: float, corpus_std: float) -> Spectrogram:
    values = (s.values.astype(np.float64) * (2.0 * corpus_std) + corpus_mean).astype(np.float32)
    return replace(s, values=values, normalized=False)


def featurize_wave(w: Waveform, target_frames: int, n_mels: int = N_MELS) -> Spectrogram:
    """log_mel followed by pad_or_trim; normalisation happens once corpus stats are known."""
    return pad_or_trim(log_mel(w, n_mels=n_mels), target_frames)
