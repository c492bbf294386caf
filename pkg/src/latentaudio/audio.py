"""Stereo waveform type, WAV I/O, chunk sampling, M/S transform, silence trimming.

Everything in the pipeline is stereo float at 44.1kHz. WAV support is
deliberately narrow: PCM16 and float32 in, float32 out (lossless round
trip). Mono files are upmixed by duplicating the channel; anything else
is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .errors import DataError

DEFAULT_SAMPLE_RATE = 44100


@dataclass
class Waveform:
    """Channels-by-frames float sample matrix plus its sample rate."""

    samples: np.ndarray  # (2, n_frames) float32/float64, nominally in [-1, 1]
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples))
        if self.samples.ndim != 2 or self.samples.shape[0] != 2:
            raise DataError(f"expected (2, n_frames) samples, got shape {self.samples.shape}")
        if self.samples.shape[1] < 1:
            raise DataError("waveform must contain at least one frame")
        if not np.isfinite(self.samples).all():
            raise DataError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise DataError(f"invalid sample rate {self.sample_rate}")

    @property
    def n_frames(self) -> int:
        return self.samples.shape[1]

    @property
    def seconds(self) -> float:
        return self.n_frames / self.sample_rate


@dataclass
class ChunkPolicy:
    """How training chunks are drawn from a recording."""

    chunk_seconds: float = 5.0
    max_chunks_per_recording: int = 3
    hifi_double_sample: bool = False
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.chunk_seconds <= 0:
            raise DataError("chunk_seconds must be > 0")
        if self.max_chunks_per_recording < 1:
            raise DataError("max_chunks_per_recording must be >= 1")

    @property
    def chunk_frames(self) -> int:
        return int(round(self.chunk_seconds * self.sample_rate))


def load_wav(path) -> Waveform:
    """Load a PCM16 or float32 WAV as a stereo Waveform.

    Mono is upmixed by channel duplication. PCM16 is scaled by 1/32768 so
    full-scale positive is 32767/32768 and full-scale negative is -1.0.
    """
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as e:
        raise DataError(f"{path}: unreadable WAV file: {e}") from e
    if data.size == 0:
        raise DataError(f"{path}: zero-length audio")
    if data.ndim == 1:
        data = data[:, None]
    if data.shape[1] > 2:
        raise DataError(f"{path}: {data.shape[1]} channels; only mono and stereo are supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        samples = data.copy()
    else:
        raise DataError(f"{path}: unsupported WAV encoding {data.dtype}; need PCM16 or float32")
    samples = samples.T  # -> (channels, frames)
    if samples.shape[0] == 1:
        samples = np.repeat(samples, 2, axis=0)
    return Waveform(samples=samples, sample_rate=int(rate))


def save_wav(w: Waveform, path) -> None:
    """Write a Waveform as 32-bit float WAV; round-trips bit-exactly."""
    data = np.asarray(w.samples, dtype=np.float32).T  # (frames, channels)
    try:
        wavfile.write(path, w.sample_rate, data)
    except OSError as e:
        raise DataError(f"{path}: cannot write WAV: {e}") from e


def sample_chunks(
    recording_length_frames: int, policy: ChunkPolicy, rng_seed: int
) -> list[tuple[int, int]]:
    """Draw random fixed-length chunk windows from a recording.

    Each chunk is exactly ``policy.chunk_frames`` long. Recordings shorter
    than one chunk yield a single (0, chunk_frames) window whose tail the
    caller zero-pads. The number of chunks is capped by the policy (so
    long recordings are not oversampled) and doubled for the high-fidelity
    subset, which is sampled twice.
    """
    if recording_length_frames < 1:
        raise DataError("recording_length_frames must be >= 1")
    frames = policy.chunk_frames
    if recording_length_frames <= frames:
        n = 1
    else:
        n = min(policy.max_chunks_per_recording, recording_length_frames // frames)
    if policy.hifi_double_sample:
        n *= 2
    rng = np.random.default_rng(rng_seed)
    max_start = max(0, recording_length_frames - frames)
    starts = rng.integers(0, max_start + 1, size=n)
    return [(int(s), int(s) + frames) for s in starts]


def trim_trailing_silence(
    w: Waveform, threshold_db: float = -60.0, window_ms: float = 10.0
) -> Waveform:
    """Drop the longest all-quiet suffix, keeping at least one window.

    Quiet means windowed RMS (over both channels) below ``threshold_db``
    dBFS. The cut lands on a window boundary, so results are stable under
    re-trimming.
    """
    win = max(1, int(round(w.sample_rate * window_ms / 1000.0)))
    x = w.samples
    n = w.n_frames
    threshold = 10.0 ** (threshold_db / 20.0)
    n_windows = (n + win - 1) // win
    last_loud = -1
    for i in range(n_windows - 1, -1, -1):
        seg = x[:, i * win : min((i + 1) * win, n)]
        rms = float(np.sqrt(np.mean(seg.astype(np.float64) ** 2)))
        if rms >= threshold:
            last_loud = i
            break
    if last_loud < 0:
        end = min(win, n)
    else:
        end = min((last_loud + 1) * win, n)
    return Waveform(samples=x[:, :end].copy(), sample_rate=w.sample_rate)


def ms_lr_split(w: Waveform) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Return (mid, side, left, right); mid=(L+R)/2, side=(L-R)/2."""
    left = w.samples[0]
    right = w.samples[1]
    mid = (left + right) / 2.0
    side = (left - right) / 2.0
    return mid, side, left, right


def pad_to_multiple(w: Waveform, multiple: int) -> Waveform:
    """Zero-pad the tail so the frame count divides ``multiple``."""
    rem = w.n_frames % multiple
    if rem == 0:
        return w
    pad = multiple - rem
    samples = np.pad(w.samples, ((0, 0), (0, pad)))
    return Waveform(samples=samples, sample_rate=w.sample_rate)
