"""Audio quality metrics and prompt filters.

Reconstruction metrics (STFT distance, MEL distance, SI-SDR) follow the
auraloss conventions with its default resolutions, evaluated at 44.1kHz.
Generation metrics operate on embeddings and probabilities supplied by the
caller: Fréchet distance between Gaussian fits, mean KL over probability
pairs, and mean text/audio cosine similarity. Prompt filters remove
connector- and speech-related captions by whole-word match.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .audio import Waveform
from .errors import DataError

_EPS = 1e-8
KL_SMOOTHING = 1e-10
EIG_FLOOR = 1e-10
SI_SDR_CAP_DB = 100.0

# auraloss multi-resolution defaults: (fft, hop, window)
RESOLUTIONS = ((1024, 120, 600), (2048, 240, 1200), (512, 50, 240))
MEL_BANDS = 128


def _hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _stft_mag(x: np.ndarray, n_fft: int, hop: int, win: int) -> np.ndarray:
    """Magnitude STFT with centered zero-padded frames, periodic Hann."""
    x = np.asarray(x, dtype=np.float64)
    pad = n_fft // 2
    xp = np.pad(x, (pad, pad))
    n_frames = 1 + (len(xp) - win) // hop
    window = _hann(win)
    frames = np.stack([xp[i * hop : i * hop + win] * window for i in range(n_frames)])
    return np.abs(np.fft.rfft(frames, n=n_fft, axis=1)).T  # (freq, frames)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, sample_rate: int, n_mels: int = MEL_BANDS,
                   f_min: float = 0.0, f_max: float | None = None) -> np.ndarray:
    """HTK-style triangular filterbank, (n_mels, n_fft // 2 + 1)."""
    f_max = f_max if f_max is not None else sample_rate / 2.0
    mel_pts = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    fb = np.zeros((n_mels, len(bins)))
    for m in range(n_mels):
        lo, center, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bins - lo) / max(center - lo, 1e-12)
        down = (hi - bins) / max(hi - center, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


_mel_cache: dict[tuple[int, int], np.ndarray] = {}


def _mel_matrix(n_fft: int, sample_rate: int) -> np.ndarray:
    key = (n_fft, sample_rate)
    if key not in _mel_cache:
        _mel_cache[key] = mel_filterbank(n_fft, sample_rate)
    return _mel_cache[key]


def _check_pair(ref: Waveform, est: Waveform):
    if ref.n_frames != est.n_frames:
        raise DataError(f"length mismatch: {ref.n_frames} vs {est.n_frames} frames")
    if ref.sample_rate != est.sample_rate:
        raise DataError(f"sample rate mismatch: {ref.sample_rate} vs {est.sample_rate}")


def _spectral_terms(S_r: np.ndarray, S_e: np.ndarray) -> float:
    sc = np.linalg.norm(S_r - S_e) / (np.linalg.norm(S_r) + _EPS)
    log_mag = np.mean(np.abs(np.log(S_r + _EPS) - np.log(S_e + _EPS)))
    return float(sc + log_mag)


def stft_distance(ref: Waveform, est: Waveform) -> float:
    """Multi-resolution spectral convergence + log-magnitude distance."""
    _check_pair(ref, est)
    total = 0.0
    for n_fft, hop, win in RESOLUTIONS:
        for ch in range(2):
            S_r = _stft_mag(ref.samples[ch], n_fft, hop, win)
            S_e = _stft_mag(est.samples[ch], n_fft, hop, win)
            total += _spectral_terms(S_r, S_e)
    return total / (len(RESOLUTIONS) * 2)


def mel_distance(ref: Waveform, est: Waveform) -> float:
    """Same construction with magnitudes projected through a mel filterbank."""
    _check_pair(ref, est)
    total = 0.0
    for n_fft, hop, win in RESOLUTIONS:
        fb = _mel_matrix(n_fft, ref.sample_rate)
        for ch in range(2):
            S_r = fb @ _stft_mag(ref.samples[ch], n_fft, hop, win)
            S_e = fb @ _stft_mag(est.samples[ch], n_fft, hop, win)
            total += _spectral_terms(S_r, S_e)
    return total / (len(RESOLUTIONS) * 2)


def si_sdr(ref: Waveform, est: Waveform) -> float:
    """Scale-invariant SDR in dB, per channel then averaged, capped at +100."""
    _check_pair(ref, est)
    scores = []
    for ch in range(2):
        r = np.asarray(ref.samples[ch], dtype=np.float64)
        e = np.asarray(est.samples[ch], dtype=np.float64)
        r_energy = float(np.dot(r, r))
        if r_energy == 0.0:
            raise DataError("reference channel is all zeros; SI-SDR undefined")
        s = (np.dot(e, r) / r_energy) * r
        err = e - s
        s_energy = float(np.dot(s, s))
        e_energy = float(np.dot(err, err))
        if e_energy <= s_energy * 10 ** (-SI_SDR_CAP_DB / 10.0):
            scores.append(SI_SDR_CAP_DB)
        else:
            scores.append(min(10.0 * np.log10(s_energy / e_energy), SI_SDR_CAP_DB))
    return float(np.mean(scores))


@dataclass
class EmbeddingStats:
    """Gaussian summary (mean, covariance, count) of an embedding set."""

    mean: np.ndarray
    covariance: np.ndarray
    count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise DataError(f"covariance shape {self.covariance.shape} does not match dim {d}")
        if np.abs(self.covariance - self.covariance.T).max() > 1e-8:
            raise DataError("covariance must be symmetric within 1e-8")
        if self.count < 2:
            raise DataError("need at least 2 embeddings for covariance")

    @classmethod
    def from_embeddings(cls, vectors: np.ndarray) -> "EmbeddingStats":
        v = np.asarray(vectors, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 2:
            raise DataError("need a (n >= 2, d) embedding matrix")
        cov = np.cov(v, rowvar=False)
        cov = np.atleast_2d((cov + cov.T) / 2.0)
        return cls(mean=v.mean(axis=0), covariance=cov, count=v.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    scale = max(float(vals.max()), 1.0)
    if vals.min() < -1e-6 * scale:
        raise DataError(f"matrix is not PSD after regularization (min eig {vals.min():.3e})")
    vals = np.clip(vals, EIG_FLOOR, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: EmbeddingStats, b: EmbeddingStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The cross square root is computed via symmetric eigendecompositions
    with a small eigenvalue floor; tiny negative residue is clamped to 0.
    """
    if a.mean.shape != b.mean.shape:
        raise DataError(f"dimension mismatch: {a.mean.shape} vs {b.mean.shape}")
    diff = a.mean - b.mean
    sqrt_a = _psd_sqrt(a.covariance)
    cross = _psd_sqrt(sqrt_a @ b.covariance @ sqrt_a)
    value = float(diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.trace(cross))
    if value < -1e-6:
        raise DataError(f"Fréchet distance strongly negative ({value:.3e}); bad inputs")
    return max(value, 0.0)


def mean_kl(prob_pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean KL(p || q) with epsilon-smoothed, renormalized q."""
    if not prob_pairs:
        raise DataError("no probability pairs given")
    total = 0.0
    for p, q in prob_pairs:
        p = np.asarray(p, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        if p.shape != q.shape:
            raise DataError(f"probability shape mismatch: {p.shape} vs {q.shape}")
        for name, vec in (("p", p), ("q", q)):
            if vec.min() < 0:
                raise DataError(f"{name} has negative entries")
            if abs(vec.sum() - 1.0) > 1e-5:
                raise DataError(f"{name} does not sum to 1 (got {vec.sum():.6f})")
        q_s = q + KL_SMOOTHING
        q_s = q_s / q_s.sum()
        mask = p > 0
        total += float(np.sum(p[mask] * np.log(p[mask] / q_s[mask])))
    return total / len(prob_pairs)


def clap_score(pairs: list[tuple[np.ndarray, np.ndarray]]) -> float:
    """Mean cosine similarity between text and audio embeddings."""
    if not pairs:
        raise DataError("no embedding pairs given")
    sims = []
    for text_vec, audio_vec in pairs:
        t = np.asarray(text_vec, dtype=np.float64)
        a = np.asarray(audio_vec, dtype=np.float64)
        if t.shape != a.shape:
            raise DataError(f"pair dimension mismatch: {t.shape} vs {a.shape}")
        denom = np.linalg.norm(t) * np.linalg.norm(a)
        if denom == 0:
            raise DataError("zero vector in text/audio pair")
        sims.append(float(np.dot(t, a) / denom))
    return float(np.mean(sims))


@dataclass
class PromptFilterList:
    connector_words: set[str]
    speech_words: set[str]

    def __post_init__(self):
        if not self.connector_words or not self.speech_words:
            raise DataError("filter word lists must be nonempty")


def _load_wordlist(name: str) -> set[str]:
    text = resources.files("latentaudio.wordlists").joinpath(name).read_text()
    return {line.strip().lower() for line in text.splitlines() if line.strip()}


def default_filter_list() -> PromptFilterList:
    """The connector and speech word lists shipped with the package."""
    return PromptFilterList(
        connector_words=_load_wordlist("connectors.txt"),
        speech_words=_load_wordlist("speech.txt"),
    )


def _contains_any(prompt: str, words: set[str]) -> bool:
    lower = prompt.lower()
    return any(re.search(rf"\b{re.escape(w)}\b", lower) for w in words)


def filter_prompts(prompts: list[str], lists: PromptFilterList, mode: str) -> list[str]:
    """Remove prompts containing listed words (case-insensitive whole words).

    Modes: ``no_speech`` drops speech-related prompts, ``no_connectors``
    drops connector prompts, ``neither`` drops both.
    """
    if mode == "no_speech":
        banned = [lists.speech_words]
    elif mode == "no_connectors":
        banned = [lists.connector_words]
    elif mode == "neither":
        banned = [lists.speech_words, lists.connector_words]
    else:
        raise DataError(f"unknown filter mode {mode!r}")
    return [p for p in prompts if not any(_contains_any(p, w) for w in banned)]
