import numpy as np
import pytest
import torch

from latentaudio.autoencoder import AutoencoderConfig


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def mini_ae_config():
    """Small-width config with the pinned total stride of 2048."""
    return AutoencoderConfig(
        block_channels=[4, 6, 8, 12, 16], latent_channels=8, resnet_layers_per_block=1
    )


def synth_corpus(n: int, frames: int, seed: int) -> list[np.ndarray]:
    """Stereo sines, chirps and noise bursts at 44.1kHz."""
    rng = np.random.default_rng(seed)
    t = np.arange(frames) / 44100.0
    out = []
    for i in range(n):
        kind = i % 3
        if kind == 0:
            f = rng.uniform(80, 4000)
            x = 0.5 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
        elif kind == 1:
            f0, f1 = sorted(rng.uniform(80, 6000, size=2))
            x = 0.4 * np.sin(2 * np.pi * (f0 * t + (f1 - f0) * t**2 / (2 * t[-1])))
        else:
            x = 0.3 * rng.normal(size=frames)
            center = rng.uniform(0.2, 1.0) * t[-1]
            x = x * np.exp(-((t - center) ** 2) / (2 * (0.1 * t[-1]) ** 2))
        pan = rng.uniform(0.3, 0.7)
        out.append(np.stack([x * pan, x * (1 - pan)]).astype(np.float32))
    return out


def bandlimited_latents(n: int, channels: int, T: int, seed: int, k_max: int = 4) -> np.ndarray:
    """Latents built from a shared low-frequency Fourier basis, unit variance."""
    rng = np.random.default_rng(seed)
    t = np.arange(T) / T
    out = np.zeros((n, channels, T), dtype=np.float32)
    for k in range(1, k_max + 1):
        a = rng.normal(0, 1, size=(n, channels, 1))
        b = rng.normal(0, 1, size=(n, channels, 1))
        out += a * np.sin(2 * np.pi * k * t)[None, None, :]
        out += b * np.cos(2 * np.pi * k * t)[None, None, :]
    return out / out.std()
