"""Autoencoder training objectives.

Reconstruction is a perceptually weighted multi-resolution STFT loss over
the mid/side representation plus a 0.5-weighted left/right term. The
adversarial part uses five weight-normalized STFT discriminators at
different resolutions with hinge losses and feature matching, and the
variational bottleneck is regularized by a KL term down-weighted by 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.signal import firwin2
from torch.nn.utils.parametrizations import weight_norm

from .audio import Waveform
from .autoencoder import GaussianLatentParams
from .errors import DataError

_EPS = 1e-8
KL_WEIGHT = 1e-4


@dataclass
class MrstftConfig:
    fft_sizes: list[int] = field(default_factory=lambda: [2048, 1024, 512, 256, 128, 64])
    hop_sizes: list[int] = field(default_factory=lambda: [512, 256, 128, 64, 32, 16])
    window_sizes: list[int] = field(default_factory=lambda: [2048, 1024, 512, 256, 128, 64])
    lr_weight: float = 0.5
    perceptual_weighting: bool = True
    sample_rate: int = 44100

    def __post_init__(self):
        if not (len(self.fft_sizes) == len(self.hop_sizes) == len(self.window_sizes)):
            raise DataError("fft/hop/window lists must have equal lengths")
        for n_fft, hop, win in zip(self.fft_sizes, self.hop_sizes, self.window_sizes):
            if not (hop <= win <= n_fft):
                raise DataError(f"need hop <= window <= fft, got ({n_fft}, {hop}, {win})")


def _a_curve(f2: np.ndarray) -> np.ndarray:
    num = (12194.0**2) * f2**2
    den = (f2 + 20.6**2) * np.sqrt((f2 + 107.7**2) * (f2 + 737.9**2)) * (f2 + 12194.0**2)
    return num / np.maximum(den, 1e-30)


def a_weighting_gain(freqs_hz: np.ndarray) -> np.ndarray:
    """Linear-magnitude A-curve, normalized to 1.0 at 1 kHz."""
    gain = _a_curve(np.asarray(freqs_hz, dtype=np.float64) ** 2)
    return gain / _a_curve(np.array([1000.0**2]))[0]


def a_weighting_fir(sample_rate: int, numtaps: int = 101) -> np.ndarray:
    """Linear-phase FIR approximating A-weighting, for pre-filtering audio."""
    grid = np.linspace(0.0, sample_rate / 2.0, 256)
    gains = a_weighting_gain(grid)
    gains[0] = 0.0
    return firwin2(numtaps, grid / (sample_rate / 2.0), gains)


class AWeighting(nn.Module):
    """Applies the A-weighting FIR along the last axis, same-length output."""

    def __init__(self, sample_rate: int, numtaps: int = 101):
        super().__init__()
        taps = torch.tensor(a_weighting_fir(sample_rate, numtaps), dtype=torch.float64)
        self.register_buffer("taps", taps.reshape(1, 1, -1))
        self.pad = numtaps // 2

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shape = x.shape
        flat = x.reshape(-1, 1, shape[-1])
        y = F.conv1d(flat, self.taps.to(x.dtype), padding=self.pad)
        return y.reshape(shape)


_aw_cache: dict[int, AWeighting] = {}


def _a_weight(x: torch.Tensor, sample_rate: int) -> torch.Tensor:
    filt = _aw_cache.get(sample_rate)
    if filt is None:
        filt = AWeighting(sample_rate)
        _aw_cache[sample_rate] = filt
    return filt(x)


def _stft_mag(x: torch.Tensor, n_fft: int, hop: int, win: int) -> torch.Tensor:
    window = torch.hann_window(win, dtype=x.dtype, device=x.device)
    spec = torch.stft(
        x, n_fft, hop_length=hop, win_length=win, window=window,
        center=True, pad_mode="constant", return_complex=True,
    )
    return spec.abs()


def _stft_pair_loss(ref: torch.Tensor, est: torch.Tensor, cfg: MrstftConfig) -> torch.Tensor:
    """Mean over resolutions of spectral convergence + log-magnitude L1.

    ``ref``/``est`` are (..., samples); leading dims are folded into a batch.
    """
    r = ref.reshape(-1, ref.shape[-1])
    e = est.reshape(-1, est.shape[-1])
    total = ref.new_zeros(())
    for n_fft, hop, win in zip(cfg.fft_sizes, cfg.hop_sizes, cfg.window_sizes):
        S_r = _stft_mag(r, n_fft, hop, win)
        S_e = _stft_mag(e, n_fft, hop, win)
        sc = torch.linalg.norm(S_r - S_e, dim=(-2, -1)) / (
            torch.linalg.norm(S_r, dim=(-2, -1)) + _EPS
        )
        log_mag = (torch.log(S_r + _EPS) - torch.log(S_e + _EPS)).abs().mean()
        total = total + sc.mean() + log_mag
    return total / len(cfg.fft_sizes)


def _as_samples(w) -> torch.Tensor:
    if isinstance(w, Waveform):
        return torch.as_tensor(w.samples, dtype=torch.float32)
    return w


def mrstft_loss(ref, est, cfg: MrstftConfig | None = None) -> torch.Tensor:
    """Stereo reconstruction loss: MRSTFT(M, S) + lr_weight * MRSTFT(L, R).

    Accepts Waveforms or (..., 2, samples) tensors. Differentiable in
    ``est`` (and ``ref``).
    """
    cfg = cfg or MrstftConfig()
    x = _as_samples(ref)
    y = _as_samples(est)
    if x.shape != y.shape:
        raise DataError(f"length/shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if cfg.perceptual_weighting:
        x = _a_weight(x, cfg.sample_rate)
        y = _a_weight(y, cfg.sample_rate)
    left_r, right_r = x[..., 0, :], x[..., 1, :]
    left_e, right_e = y[..., 0, :], y[..., 1, :]
    ms_r = torch.stack([(left_r + right_r) / 2, (left_r - right_r) / 2], dim=-2)
    ms_e = torch.stack([(left_e + right_e) / 2, (left_e - right_e) / 2], dim=-2)
    loss = _stft_pair_loss(ms_r, ms_e, cfg)
    loss = loss + cfg.lr_weight * _stft_pair_loss(x, y, cfg)
    return loss


def kl_regularizer(p: GaussianLatentParams, weight: float = KL_WEIGHT) -> torch.Tensor:
    """Down-weighted KL(q || N(0, I)), averaged over latent elements."""
    kl = -0.5 * (1 + p.log_variance - p.mean**2 - torch.exp(p.log_variance))
    return weight * kl.mean()


class StftDiscriminator(nn.Module):
    """One scale: complex STFT of both channels -> strided Conv2d stack.

    Returns (logits, intermediate features) for the hinge and feature
    matching losses.
    """

    def __init__(self, n_fft: int, channels: int = 16):
        super().__init__()
        self.n_fft = n_fft
        self.hop = n_fft // 4
        c = channels
        self.convs = nn.ModuleList([
            weight_norm(nn.Conv2d(4, c, (3, 9), padding=(1, 4))),
            weight_norm(nn.Conv2d(c, 2 * c, (3, 9), stride=(2, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(2 * c, 4 * c, (3, 9), stride=(2, 2), padding=(1, 4))),
            weight_norm(nn.Conv2d(4 * c, 4 * c, (3, 3), padding=(1, 1))),
        ])
        self.head = weight_norm(nn.Conv2d(4 * c, 1, (3, 3), padding=(1, 1)))

    def forward(self, audio: torch.Tensor):
        # audio: (B, 2, T) -> (B, 4, F, frames) stacking re/im of each channel
        B = audio.shape[0]
        window = torch.hann_window(self.n_fft, dtype=audio.dtype, device=audio.device)
        spec = torch.stft(
            audio.reshape(B * 2, -1), self.n_fft, hop_length=self.hop, window=window,
            center=True, pad_mode="constant", return_complex=True,
        )
        spec = spec.reshape(B, 2, *spec.shape[-2:])
        x = torch.cat([spec.real, spec.imag], dim=1)
        features = []
        for conv in self.convs:
            x = F.leaky_relu(conv(x), 0.2)
            features.append(x)
        return self.head(x), features


class DiscriminatorBank(nn.Module):
    """Five STFT discriminators at different resolutions."""

    def __init__(self, n_ffts: tuple[int, ...] = (2048, 1024, 512, 256, 128), channels: int = 16):
        super().__init__()
        if len(n_ffts) != 5:
            raise DataError(f"expected 5 discriminator scales, got {len(n_ffts)}")
        self.discriminators = nn.ModuleList(
            [StftDiscriminator(n, channels) for n in n_ffts]
        )

    def forward(self, audio: torch.Tensor):
        return [d(audio) for d in self.discriminators]


def adversarial_step(real, fake, bank: DiscriminatorBank):
    """Hinge discriminator/generator losses plus feature matching.

    Returns (d_loss, g_loss, fm_loss), each averaged over the bank's
    scales. Detaching ``fake`` is the caller's choice depending on which
    side is being optimized.
    """
    x = _as_samples(real)
    y = _as_samples(fake)
    if x.shape != y.shape:
        raise DataError(f"length mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    if x.dim() == 2:
        x = x.unsqueeze(0)
        y = y.unsqueeze(0)
    d_terms, g_terms, fm_terms = [], [], []
    for disc in bank.discriminators:
        logits_r, feats_r = disc(x)
        logits_f, feats_f = disc(y)
        d_terms.append(F.relu(1 - logits_r).mean() + F.relu(1 + logits_f).mean())
        g_terms.append(F.relu(1 - logits_f).mean())
        fm = torch.stack([(fr - ff).abs().mean() for fr, ff in zip(feats_r, feats_f)])
        fm_terms.append(fm.mean())
    return (
        torch.stack(d_terms).mean(),
        torch.stack(g_terms).mean(),
        torch.stack(fm_terms).mean(),
    )
