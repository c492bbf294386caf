"""Variational audio autoencoder: stereo waveforms <-> 64-channel latents.

The encoder stacks five strided convolutional blocks (total stride 2048,
so 44.1kHz audio maps to a ~21.5Hz latent sequence), each preceded by
dilated residual units with Snake activations. The decoder mirrors it
with transposed convolutions and no output nonlinearity. All convolutions
are weight-normalized.

Decoding can be done in overlapping latent chunks to bound memory; as long
as the overlap covers the decoder's receptive field the result is
identical to a full decode. The receptive field is computed analytically
from the layer geometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
from torch.nn.utils.parametrizations import weight_norm

from .audio import Waveform
from .errors import DataError

SNAKE_BETA_EPS = 1e-9


def snake(x: torch.Tensor, beta: torch.Tensor | float) -> torch.Tensor:
    """Snake activation: x + sin^2(beta * x) / beta, elementwise."""
    beta = torch.as_tensor(beta, dtype=x.dtype, device=x.device).clamp(min=SNAKE_BETA_EPS)
    return x + torch.sin(beta * x) ** 2 / beta


class Snake(nn.Module):
    """Per-channel learnable Snake for (batch, channels, time) tensors."""

    def __init__(self, channels: int):
        super().__init__()
        self.beta = nn.Parameter(torch.ones(channels))

    def forward(self, x):
        return snake(x, self.beta[:, None])


@dataclass
class AutoencoderConfig:
    """Structural hyperparameters; total stride is pinned to 2048."""

    block_strides: list[int] = field(default_factory=lambda: [2, 4, 4, 8, 8])
    block_channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256, 512])
    resnet_layers_per_block: int = 2
    dilation_schedule: list[int] = field(default_factory=lambda: [1, 3, 9])
    latent_channels: int = 64
    stem_kernel: int = 7
    res_kernel: int = 3
    bottleneck_kernel: int = 3
    sample_rate: int = 44100

    def __post_init__(self):
        if len(self.block_strides) != 5:
            raise DataError(f"expected 5 block strides, got {len(self.block_strides)}")
        if math.prod(self.block_strides) != 2048:
            raise DataError(
                f"block strides must multiply to 2048, got {math.prod(self.block_strides)}"
            )
        if len(self.block_channels) != 5:
            raise DataError(f"expected 5 block channel widths, got {len(self.block_channels)}")
        if any(s % 2 != 0 for s in self.block_strides):
            raise DataError("block strides must be even (symmetric same-padding)")
        if self.res_kernel % 2 == 0 or self.stem_kernel % 2 == 0 or self.bottleneck_kernel % 2 == 0:
            raise DataError("stem/res/bottleneck kernels must be odd")

    @property
    def total_stride(self) -> int:
        return math.prod(self.block_strides)

    @property
    def latent_rate(self) -> float:
        return self.sample_rate / self.total_stride

    def res_dilations(self) -> list[int]:
        sched = self.dilation_schedule
        return [sched[i % len(sched)] for i in range(self.resnet_layers_per_block)]


@dataclass
class GaussianLatentParams:
    """Posterior mean and log-variance over the latent sequence."""

    mean: torch.Tensor  # (C, T) or (B, C, T)
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise DataError(
                f"mean/log_variance shape mismatch: {tuple(self.mean.shape)} vs "
                f"{tuple(self.log_variance.shape)}"
            )
        if not torch.isfinite(self.log_variance).all() or not torch.isfinite(self.mean).all():
            raise DataError("latent parameters must be finite")


@dataclass
class LatentSeq:
    """Continuous latent sequence (channels, T) at ``latent_rate`` Hz."""

    values: torch.Tensor
    latent_rate: float = 44100 / 2048

    def __post_init__(self):
        if self.values.dim() not in (2, 3):
            raise DataError(f"latent values must be (C, T) or (B, C, T), got {self.values.dim()}-D")
        if not torch.isfinite(self.values).all():
            raise DataError("latent values must be finite")


def reparameterize(p: GaussianLatentParams, rng_seed: int, latent_rate: float = 44100 / 2048) -> LatentSeq:
    """Sample z = mean + exp(0.5 * log_var) * eps with seeded standard noise."""
    gen = torch.Generator().manual_seed(rng_seed)
    eps = torch.randn(p.mean.shape, generator=gen, dtype=p.mean.dtype)
    z = p.mean + torch.exp(0.5 * p.log_variance) * eps
    return LatentSeq(values=z, latent_rate=latent_rate)


class ResidualUnit(nn.Module):
    def __init__(self, channels: int, kernel: int, dilation: int):
        super().__init__()
        pad = dilation * (kernel - 1) // 2
        self.act1 = Snake(channels)
        self.conv1 = weight_norm(nn.Conv1d(channels, channels, kernel, dilation=dilation, padding=pad))
        self.act2 = Snake(channels)
        self.conv2 = weight_norm(nn.Conv1d(channels, channels, 1))

    def forward(self, x):
        return x + self.conv2(self.act2(self.conv1(self.act1(x))))


class EncoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, cfg: AutoencoderConfig):
        super().__init__()
        self.res = nn.Sequential(
            *[ResidualUnit(c_in, cfg.res_kernel, d) for d in cfg.res_dilations()]
        )
        self.act = Snake(c_in)
        self.down = weight_norm(
            nn.Conv1d(c_in, c_out, 2 * stride, stride=stride, padding=stride // 2)
        )

    def forward(self, x):
        return self.down(self.act(self.res(x)))


class DecoderBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, cfg: AutoencoderConfig):
        super().__init__()
        self.act = Snake(c_in)
        self.up = weight_norm(
            nn.ConvTranspose1d(c_in, c_out, 2 * stride, stride=stride, padding=stride // 2)
        )
        self.res = nn.Sequential(
            *[ResidualUnit(c_out, cfg.res_kernel, d) for d in cfg.res_dilations()]
        )

    def forward(self, x):
        return self.res(self.up(self.act(x)))


class Encoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        ch = cfg.block_channels
        self.stem = weight_norm(nn.Conv1d(2, ch[0], cfg.stem_kernel, padding=cfg.stem_kernel // 2))
        blocks = []
        for i, stride in enumerate(cfg.block_strides):
            c_in = ch[i]
            c_out = ch[min(i + 1, len(ch) - 1)]
            blocks.append(EncoderBlock(c_in, c_out, stride, cfg))
        self.blocks = nn.Sequential(*blocks)
        self.act = Snake(ch[-1])
        self.head = weight_norm(
            nn.Conv1d(ch[-1], 2 * cfg.latent_channels, cfg.bottleneck_kernel,
                      padding=cfg.bottleneck_kernel // 2)
        )

    def forward(self, x):
        h = self.head(self.act(self.blocks(self.stem(x))))
        mean, log_var = h.chunk(2, dim=-2)
        return mean, log_var


class Decoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        ch = cfg.block_channels
        self.stem = weight_norm(
            nn.Conv1d(cfg.latent_channels, ch[-1], cfg.bottleneck_kernel,
                      padding=cfg.bottleneck_kernel // 2)
        )
        blocks = []
        for i in reversed(range(len(cfg.block_strides))):
            c_in = ch[min(i + 1, len(ch) - 1)]
            c_out = ch[i]
            blocks.append(DecoderBlock(c_in, c_out, cfg.block_strides[i], cfg))
        self.blocks = nn.Sequential(*blocks)
        self.act = Snake(ch[0])
        # No saturating nonlinearity at the output: it causes harmonic distortion.
        self.head = weight_norm(nn.Conv1d(ch[0], 2, cfg.stem_kernel, padding=cfg.stem_kernel // 2))

    def forward(self, z):
        return self.head(self.act(self.blocks(self.stem(z))))


class AudioAutoencoder(nn.Module):
    """Encoder + decoder pair sharing one config."""

    def __init__(self, cfg: AutoencoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or AutoencoderConfig()
        self.encoder = Encoder(self.cfg)
        self.decoder = Decoder(self.cfg)

    def encode(self, w: Waveform | torch.Tensor) -> GaussianLatentParams:
        """Encode a stereo waveform whose length divides the total stride."""
        x = self._as_batch(w)
        if x.shape[-1] % self.cfg.total_stride != 0:
            raise DataError(
                f"frame count {x.shape[-1]} not divisible by total stride "
                f"{self.cfg.total_stride}; pad first"
            )
        mean, log_var = self.encoder(x)
        return GaussianLatentParams(mean=mean.squeeze(0), log_variance=log_var.squeeze(0))

    def decode(self, z: LatentSeq | torch.Tensor) -> torch.Tensor:
        """Decode latents to a (2, T * total_stride) sample tensor (unbounded)."""
        v = z.values if isinstance(z, LatentSeq) else z
        batched = v.dim() == 3
        if not batched:
            v = v.unsqueeze(0)
        if v.shape[-2] != self.cfg.latent_channels:
            raise DataError(
                f"latent has {v.shape[-2]} channels, config says {self.cfg.latent_channels}"
            )
        y = self.decoder(v)
        return y if batched else y.squeeze(0)

    def decode_waveform(self, z: LatentSeq) -> Waveform:
        return Waveform(samples=self.decode(z).detach().cpu().numpy(), sample_rate=self.cfg.sample_rate)

    def chunked_decode(self, z: LatentSeq | torch.Tensor, chunk_len: int, overlap: int = 16) -> torch.Tensor:
        """Decode in overlapping latent chunks and reassemble.

        Identical to ``decode`` whenever ``overlap`` covers the decoder's
        receptive field in latent frames.
        """
        if chunk_len <= 2 * overlap:
            raise DataError(f"chunk_len ({chunk_len}) must exceed 2 * overlap ({2 * overlap})")
        v = z.values if isinstance(z, LatentSeq) else z
        batched = v.dim() == 3
        if not batched:
            v = v.unsqueeze(0)
        T = v.shape[-1]
        stride = self.cfg.total_stride
        pieces = []
        for start in range(0, T, chunk_len):
            stop = min(start + chunk_len, T)
            lo = max(0, start - overlap)
            hi = min(T, stop + overlap)
            y = self.decoder(v[..., lo:hi])
            cut = (start - lo) * stride
            pieces.append(y[..., cut : cut + (stop - start) * stride])
        out = torch.cat(pieces, dim=-1)
        return out if batched else out.squeeze(0)

    def _as_batch(self, w) -> torch.Tensor:
        if isinstance(w, Waveform):
            x = torch.as_tensor(w.samples, dtype=torch.float32)
        else:
            x = w
        if x.dim() == 2:
            x = x.unsqueeze(0)
        if x.shape[-2] != 2:
            raise DataError(f"expected stereo input, got {x.shape[-2]} channels")
        return x


@dataclass(frozen=True)
class LayerGeometry:
    """Geometry of one convolution for receptive-field bookkeeping."""

    kernel: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0
    transposed: bool = False

    def input_interval(self, lo: int, hi: int) -> tuple[int, int]:
        """Input index range this layer reads to produce outputs [lo, hi]."""
        if self.transposed:
            # pre-trim output j = o + padding; j = i*stride + tap, tap in [0, kernel)
            j_lo, j_hi = lo + self.padding, hi + self.padding
            return (
                math.ceil((j_lo - self.kernel + 1) / self.stride),
                math.floor(j_hi / self.stride),
            )
        span = self.dilation * (self.kernel - 1)
        return lo * self.stride - self.padding, hi * self.stride - self.padding + span


def decoder_layer_geometry(cfg: AutoencoderConfig) -> list[LayerGeometry]:
    """The decoder's convolutions in forward order (latent -> audio)."""
    layers = [LayerGeometry(cfg.bottleneck_kernel, padding=cfg.bottleneck_kernel // 2)]
    for stride in reversed(cfg.block_strides):
        layers.append(LayerGeometry(2 * stride, stride=stride, padding=stride // 2, transposed=True))
        for d in cfg.res_dilations():
            layers.append(LayerGeometry(cfg.res_kernel, dilation=d, padding=d * (cfg.res_kernel - 1) // 2))
            layers.append(LayerGeometry(1))
    layers.append(LayerGeometry(cfg.stem_kernel, padding=cfg.stem_kernel // 2))
    return layers


def one_sided_receptive_field(layers: list[LayerGeometry], total_upsampling: int) -> int:
    """Max latent frames on either side of frame 0 that any output sample
    produced from frame 0's span can depend on."""
    rf = 0
    for t in range(total_upsampling):
        lo, hi = t, t
        for g in reversed(layers):
            lo, hi = g.input_interval(lo, hi)
        rf = max(rf, hi, -lo)
    return rf


def receptive_field_latents(cfg: AutoencoderConfig) -> int:
    """One-sided decoder receptive field in latent frames."""
    return one_sided_receptive_field(decoder_layer_geometry(cfg), cfg.total_stride)
