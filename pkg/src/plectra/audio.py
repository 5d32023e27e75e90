"""Audio I/O and the log-mel front end.

All timing in the toolkit hangs off one grid: 44.1 kHz audio, a 2048-point
Hann window and a 512-sample hop, so frame ``t`` is centred on sample
``t * 512``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import get_window

SAMPLE_RATE = 44100
N_FFT = 2048
HOP = 512
N_BINS = N_FFT // 2 + 1
N_MELS = 229
F_MIN = 30.0
F_MAX = 8000.0
LOG_FLOOR = 1e-5
HOP_SECONDS = HOP / SAMPLE_RATE

FEATURE_MAGIC = b"PLML"
FEATURE_VERSION = 1


class AudioError(ValueError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise AudioError("audio must be mono")
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"sample rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        if samples.size == 0:
            raise AudioError("empty audio")
        if not np.all(np.isfinite(samples)):
            raise AudioError("non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class LogMelSegment:
    values: np.ndarray  # (T, 229)
    hop_seconds: float = HOP_SECONDS

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_break_points(n_mels: int = N_MELS, f_min: float = F_MIN, f_max: float = F_MAX) -> np.ndarray:
    """Edge/centre frequencies (Hz) of the filterbank, ``n_mels + 2`` of them."""
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))


@lru_cache(maxsize=None)
def _filterbank() -> np.ndarray:
    points = mel_break_points() * N_FFT / SAMPLE_RATE  # fractional FFT bins
    bins = np.arange(N_BINS, dtype=np.float64)
    fb = np.zeros((N_MELS, N_BINS))
    for m in range(N_MELS):
        lo, centre, hi = points[m], points[m + 1], points[m + 2]
        # Below ~1.3 kHz neighbouring centres are closer than one FFT bin, so
        # each slope spans at least one bin to keep every row non-empty.
        left = max(centre - lo, 1.0)
        right = max(hi - centre, 1.0)
        up = (bins - (centre - left)) / left
        down = ((centre + right) - bins) / right
        row = np.maximum(0.0, np.minimum(up, down))
        fb[m] = row / row.max()
    fb.setflags(write=False)
    return fb


def build_mel_filterbank() -> np.ndarray:
    """229 x 1025 peak-normalised triangular mel filters over 30-8000 Hz."""
    return _filterbank().copy()


def frame_count(n_samples: int) -> int:
    return -(-n_samples // HOP)


def stft_magnitude(samples: np.ndarray) -> np.ndarray:
    """Centred, reflect-padded magnitude STFT, shape (ceil(N/512), 1025)."""
    x = np.asarray(samples, dtype=np.float64)
    if x.size == 0:
        raise AudioError("empty audio")
    n_frames = frame_count(x.size)
    half = N_FFT // 2
    if x.size > 1:
        padded = np.pad(x, (half, half), mode="reflect")
    else:
        padded = np.pad(x, (half, half), mode="constant")
    frames = np.lib.stride_tricks.sliding_window_view(padded, N_FFT)[::HOP][:n_frames]
    window = get_window("hann", N_FFT, fftbins=True)
    return np.abs(np.fft.rfft(frames * window, axis=1))


def compute_log_mel(clip: AudioClip) -> LogMelSegment:
    mag = stft_magnitude(clip.samples)
    mel = mag @ _filterbank().T
    values = np.log(np.maximum(mel, LOG_FLOOR)).astype(np.float32)
    return LogMelSegment(values)


def frame_of(seconds: float) -> int:
    # the epsilon absorbs round-trip error of frame -> seconds -> frame
    return int(math.floor(seconds * SAMPLE_RATE / HOP + 1e-6))


def frame_time(frame: int) -> float:
    return frame * HOP / SAMPLE_RATE


# --- WAV and feature files -------------------------------------------------


def read_wav_channels(path) -> np.ndarray:
    """Return float32 samples shaped (channels, N)."""
    rate, data = wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise AudioError(f"{path}: sample rate {rate} unsupported (need {SAMPLE_RATE})")
    if data.dtype == np.int16:
        data = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32:
        data = data.astype(np.float32) / 2147483648.0
    elif data.dtype in (np.float32, np.float64):
        data = data.astype(np.float32)
    else:
        raise AudioError(f"{path}: unsupported sample format {data.dtype}")
    if data.ndim == 1:
        data = data[None, :]
    else:
        data = data.T
    return np.ascontiguousarray(data)


def read_wav(path) -> AudioClip:
    """Read a WAV file; multi-channel files are mixed down by summation."""
    channels = read_wav_channels(path)
    return AudioClip(channels.sum(axis=0))


def write_wav(path, samples: np.ndarray) -> None:
    data = np.asarray(samples, dtype=np.float32)
    if data.ndim == 2:
        data = data.T  # (N, channels)
    wavfile.write(str(path), SAMPLE_RATE, data)


def write_features(path, segment: LogMelSegment) -> None:
    values = np.ascontiguousarray(segment.values, dtype="<f4")
    header = FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, values.shape[0], values.shape[1])
    Path(path).write_bytes(header + values.tobytes())


def read_features(path) -> LogMelSegment:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise AudioError(f"{path}: not a feature file")
    version, n_frames, n_mels = struct.unpack("<III", raw[4:16])
    if version != FEATURE_VERSION:
        raise AudioError(f"{path}: unsupported feature version {version}")
    values = np.frombuffer(raw[16:], dtype="<f4").reshape(n_frames, n_mels)
    return LogMelSegment(values.astype(np.float32))
