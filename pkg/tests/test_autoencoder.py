import math

import numpy as np
import pytest
import torch

from latentaudio.autoencoder import (
    AudioAutoencoder,
    AutoencoderConfig,
    GaussianLatentParams,
    LatentSeq,
    LayerGeometry,
    decoder_layer_geometry,
    one_sided_receptive_field,
    receptive_field_latents,
    reparameterize,
    snake,
)
from latentaudio.errors import DataError


# ---------------------------------------------------------------- snake


def test_snake_zero_is_zero():
    x = torch.zeros(5)
    for beta in (0.1, 1.0, 7.3):
        assert torch.all(snake(x, beta) == 0)


def test_snake_closed_form_point():
    y = snake(torch.tensor([math.pi / 2]), 1.0)
    assert math.isclose(float(y), math.pi / 2 + 1.0, rel_tol=1e-6)


def test_snake_matches_finite_differences():
    # central-difference oracle in float64
    x = torch.tensor([-2.3, -0.7, 0.11, 1.9, 3.4], dtype=torch.float64, requires_grad=True)
    beta = 1.7
    snake(x, beta).sum().backward()
    h = 1e-6
    for i in range(len(x)):
        xp = x.detach().clone(); xp[i] += h
        xm = x.detach().clone(); xm[i] -= h
        fd = float((snake(xp, beta).sum() - snake(xm, beta).sum()) / (2 * h))
        assert abs(fd - float(x.grad[i])) / max(abs(fd), 1e-12) < 1e-4


# ---------------------------------------------------------------- config


def test_config_requires_total_stride_2048():
    with pytest.raises(DataError):
        AutoencoderConfig(block_strides=[2, 4, 4, 8, 4])
    with pytest.raises(DataError):
        AutoencoderConfig(block_strides=[2, 4, 4, 8])
    assert AutoencoderConfig().total_stride == 2048
    assert abs(AutoencoderConfig().latent_rate - 21.533) < 1e-2


def test_default_config_is_64_channel():
    cfg = AutoencoderConfig()
    assert cfg.latent_channels == 64
    assert cfg.block_channels == [32, 64, 128, 256, 512]


# ---------------------------------------------------------------- encode/decode


def test_encode_shape_contract(mini_ae_config):
    torch.manual_seed(0)
    ae = AudioAutoencoder(mini_ae_config)
    p = ae.encode(torch.randn(2, 65536))
    assert p.mean.shape == (8, 32)
    assert p.log_variance.shape == (8, 32)


def test_encode_rejects_non_divisible(mini_ae_config):
    ae = AudioAutoencoder(mini_ae_config)
    with pytest.raises(DataError, match="divisible"):
        ae.encode(torch.randn(2, 65537))


def test_encode_deterministic(mini_ae_config):
    torch.manual_seed(0)
    ae = AudioAutoencoder(mini_ae_config)
    x = torch.randn(2, 4096)
    a = ae.encode(x)
    b = ae.encode(x)
    assert torch.equal(a.mean, b.mean)


def test_encode_translation_covariant(mini_ae_config):
    torch.manual_seed(3)
    ae = AudioAutoencoder(mini_ae_config)
    stride = mini_ae_config.total_stride
    x = torch.randn(2, 32 * stride)
    shifted = torch.roll(x, shifts=stride, dims=-1)
    with torch.no_grad():
        a = ae.encode(x).mean
        b = ae.encode(shifted).mean
    # interior latent frames shift by one, away from boundary effects
    margin = 8
    assert torch.allclose(a[:, margin:-margin - 1], b[:, margin + 1 : -margin], atol=1e-4)


def test_decode_shape_and_unbounded(mini_ae_config):
    torch.manual_seed(1)
    ae = AudioAutoencoder(mini_ae_config)
    z = LatentSeq(values=torch.randn(8, 32))
    y = ae.decode(z)
    assert y.shape == (2, 65536)
    loud = ae.decode(LatentSeq(values=1e3 * torch.randn(8, 32)))
    assert loud.abs().max() > 1.0  # no saturating output nonlinearity


def test_roundtrip_preserves_padded_length(mini_ae_config):
    torch.manual_seed(2)
    ae = AudioAutoencoder(mini_ae_config)
    for frames in (2048, 10240, 65536):
        x = torch.randn(2, frames)
        with torch.no_grad():
            y = ae.decode(LatentSeq(values=ae.encode(x).mean))
        assert y.shape == x.shape


# ---------------------------------------------------------------- reparameterize


def test_reparameterize_zero_variance_limit():
    mean = torch.randn(4, 7)
    p = GaussianLatentParams(mean=mean, log_variance=torch.full((4, 7), -80.0))
    z = reparameterize(p, rng_seed=0)
    assert torch.allclose(z.values, mean, atol=1e-6)


def test_reparameterize_deterministic():
    p = GaussianLatentParams(mean=torch.zeros(4, 7), log_variance=torch.zeros(4, 7))
    a = reparameterize(p, rng_seed=9).values
    b = reparameterize(p, rng_seed=9).values
    c = reparameterize(p, rng_seed=10).values
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_reparameterize_monte_carlo_mean():
    # sample mean over 10k draws approaches the parameter mean at 3 sigma / sqrt(n)
    mean = torch.tensor([[0.5, -1.0], [2.0, 0.0]])
    log_var = torch.zeros(2, 2)
    p = GaussianLatentParams(mean=mean, log_variance=log_var)
    n = 10_000
    acc = torch.zeros_like(mean)
    for seed in range(n):
        acc += reparameterize(p, rng_seed=seed).values
    tol = 3.0 / math.sqrt(n)
    assert torch.all((acc / n - mean).abs() < tol)


# ---------------------------------------------------------------- weight norm


def test_weight_norm_reparameterization_matches_raw(mini_ae_config):
    torch.manual_seed(4)
    ae = AudioAutoencoder(mini_ae_config)
    conv = ae.encoder.stem
    par = conv.parametrizations.weight
    g, v = par.original0, par.original1
    norm = v.norm(dim=(1, 2), keepdim=True)
    effective = g * v / norm
    assert torch.allclose(effective, conv.weight, atol=1e-6)
    # a plain conv carrying the effective kernel computes the same map
    plain = torch.nn.Conv1d(2, conv.out_channels, conv.kernel_size[0], padding=conv.padding[0])
    with torch.no_grad():
        plain.weight.copy_(effective)
        plain.bias.copy_(conv.bias)
    x = torch.randn(1, 2, 4096)
    assert torch.allclose(conv(x), plain(x), atol=1e-6)


def test_every_conv_is_weight_normalized(mini_ae_config):
    ae = AudioAutoencoder(mini_ae_config)
    convs = [
        m for m in ae.modules()
        if isinstance(m, (torch.nn.Conv1d, torch.nn.ConvTranspose1d))
    ]
    assert len(convs) > 10
    for conv in convs:
        assert hasattr(conv, "parametrizations"), conv


# ---------------------------------------------------------------- chunked decode


def test_chunked_decode_matches_full(mini_ae_config):
    torch.manual_seed(5)
    ae = AudioAutoencoder(mini_ae_config)
    rf = receptive_field_latents(mini_ae_config)
    z = LatentSeq(values=torch.randn(8, 128))
    with torch.no_grad():
        full = ae.decode(z)
        assert torch.allclose(ae.chunked_decode(z, chunk_len=64, overlap=16), full, atol=1e-6)
        assert torch.allclose(ae.chunked_decode(z, chunk_len=40, overlap=rf), full, atol=1e-6)
        # negative control: one latent frame short of the receptive field
        diff = (ae.chunked_decode(z, chunk_len=40, overlap=rf - 1) - full).abs().max()
    assert diff > 1e-6


def test_chunked_decode_single_chunk_is_exact(mini_ae_config):
    torch.manual_seed(6)
    ae = AudioAutoencoder(mini_ae_config)
    z = LatentSeq(values=torch.randn(8, 48))
    with torch.no_grad():
        assert torch.equal(ae.chunked_decode(z, chunk_len=48, overlap=0), ae.decode(z))
        assert torch.equal(ae.chunked_decode(z, chunk_len=100, overlap=16), ae.decode(z))


def test_chunked_decode_rejects_small_chunks(mini_ae_config):
    ae = AudioAutoencoder(mini_ae_config)
    with pytest.raises(DataError):
        ae.chunked_decode(LatentSeq(values=torch.randn(8, 64)), chunk_len=32, overlap=16)


# ---------------------------------------------------------------- receptive field


def test_receptive_field_pointwise_network_is_zero():
    layers = [LayerGeometry(kernel=1) for _ in range(4)]
    assert one_sided_receptive_field(layers, total_upsampling=1) == 0


def test_receptive_field_single_transposed_conv():
    # hand-traced: kernel 4, stride 2, padding 1 reaches one frame each side
    layers = [LayerGeometry(kernel=4, stride=2, padding=1, transposed=True)]
    assert one_sided_receptive_field(layers, total_upsampling=2) == 1


def test_receptive_field_matches_impulse_probe(mini_ae_config):
    torch.manual_seed(7)
    ae = AudioAutoencoder(mini_ae_config)
    rf = receptive_field_latents(mini_ae_config)
    stride = mini_ae_config.total_stride
    T, j = 64, 32
    base = torch.zeros(8, T)
    bumped = base.clone()
    bumped[:, j] = 1.0
    with torch.no_grad():
        diff = (ae.decode(LatentSeq(values=bumped)) - ae.decode(LatentSeq(values=base))).abs()
    hit = torch.nonzero(diff.sum(dim=0) > 0).squeeze(-1)
    first, last = int(hit[0]), int(hit[-1])
    left_extent = j - first // stride
    right_extent = last // stride - j
    assert max(left_extent, right_extent) == rf
    assert receptive_field_latents(AutoencoderConfig()) <= 16


def test_decoder_geometry_covers_all_convs(mini_ae_config):
    ae = AudioAutoencoder(mini_ae_config)
    n_convs = sum(
        1 for m in ae.decoder.modules()
        if isinstance(m, (torch.nn.Conv1d, torch.nn.ConvTranspose1d))
    )
    assert len(decoder_layer_geometry(mini_ae_config)) == n_convs


# ---------------------------------------------------------------- gradients


def test_full_graph_gradient_matches_finite_differences():
    # miniature double-precision config: tiny widths, full stride
    cfg = AutoencoderConfig(block_channels=[2, 2, 2, 2, 2], latent_channels=2,
                            resnet_layers_per_block=1, stem_kernel=3)
    torch.manual_seed(8)
    ae = AudioAutoencoder(cfg).double()
    x = torch.randn(2, 2048, dtype=torch.float64)

    def loss_fn():
        p = ae.encode(x)
        y = ae.decode(LatentSeq(values=p.mean))
        return ((y - x) ** 2).mean() + p.log_variance.mean() ** 2

    loss = loss_fn()
    ae.zero_grad()
    loss.backward()
    params = [p for p in ae.parameters() if p.grad is not None and p.grad.abs().max() > 0]
    rng = np.random.default_rng(0)
    checked = 0
    for p in params[:: max(1, len(params) // 6)]:
        flat = p.detach().view(-1)
        idx = int(rng.integers(0, flat.numel()))
        h = 1e-5
        with torch.no_grad():
            flat[idx] += h
            up = float(loss_fn())
            flat[idx] -= 2 * h
            down = float(loss_fn())
            flat[idx] += h
        fd = (up - down) / (2 * h)
        grad = float(p.grad.view(-1)[idx])
        if abs(fd) < 1e-9 and abs(grad) < 1e-9:
            continue
        assert abs(fd - grad) / max(abs(fd), abs(grad)) < 1e-3, (fd, grad)
        checked += 1
    assert checked >= 3
