import numpy as np
import pytest
import torch

from latentaudio.conditioning import ConditioningBundle
from latentaudio.dit import DiffusionTransformer, DitConfig, collate_bundles, rope_half
from latentaudio.errors import DataError

MINI = DitConfig(depth=2, embed_dim=32, heads=4, latent_channels=8)


def _bundle(embed_dim=32, K=5, P=3, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ConditioningBundle(
        crossattn_tokens=torch.randn(K, embed_dim, generator=g),
        prepend_tokens=torch.randn(P, embed_dim, generator=g),
    )


# ---------------------------------------------------------------- rope


def test_rope_identity_at_position_zero():
    q = torch.randn(4, 1, 8)
    out = rope_half(q, torch.zeros(1), fraction=0.5)
    assert torch.allclose(out, q, atol=1e-7)


def test_rope_preserves_norms():
    q = torch.randn(2, 16, 8, dtype=torch.float64)
    out = rope_half(q, torch.arange(16), fraction=0.5)
    assert torch.allclose(out.norm(dim=-1), q.norm(dim=-1), atol=1e-10)
    # untouched dims pass through exactly
    assert torch.equal(out[..., 4:], q[..., 4:])


def test_rope_relative_position_property():
    # dot(q at a, k at b) depends only on a - b
    torch.manual_seed(0)
    q = torch.randn(8, dtype=torch.float64)
    k = torch.randn(8, dtype=torch.float64)
    def dot_at(a, b):
        qr = rope_half(q[None, :], torch.tensor([a], dtype=torch.float64), 0.5)[0]
        kr = rope_half(k[None, :], torch.tensor([b], dtype=torch.float64), 0.5)[0]
        return float(qr @ kr)
    pairs = [(0, 1), (5, 6), (10, 11)]
    values = [dot_at(a, b) for a, b in pairs]
    assert abs(values[0] - values[1]) < 1e-5
    assert abs(values[1] - values[2]) < 1e-5


def test_rope_rejects_odd_rotated_width():
    with pytest.raises(DataError):
        rope_half(torch.randn(1, 1, 6), torch.zeros(1), fraction=0.5)


# ---------------------------------------------------------------- forward


def test_forward_strips_prepend_tokens():
    torch.manual_seed(1)
    model = DiffusionTransformer(MINI)
    x = torch.randn(8, 40)
    for P in (1, 3, 7):
        out = model(x, _bundle(P=P))
        assert out.shape == (8, 40)


def test_zero_depth_reduces_to_projections():
    torch.manual_seed(2)
    model = DiffusionTransformer(DitConfig(depth=0, embed_dim=32, heads=4, latent_channels=8))
    x = torch.randn(8, 12)
    out = model(x, _bundle())
    expected = model.output_proj(model.input_proj(x.T)).T
    assert torch.allclose(out, expected, atol=1e-6)


def test_zeroed_blocks_reduce_to_projections():
    torch.manual_seed(3)
    model = DiffusionTransformer(MINI)
    with torch.no_grad():
        for block in model.blocks:
            for p in block.parameters():
                p.zero_()
        # give the zero-initialized output projection real values
        torch.nn.init.normal_(model.output_proj.weight, std=0.2)
        torch.nn.init.normal_(model.output_proj.bias, std=0.2)
    x = torch.randn(8, 17)
    out = model(x, _bundle())
    expected = model.output_proj(model.input_proj(x.T)).T
    assert torch.allclose(out, expected, atol=1e-5)


def test_cross_attention_order_invariance():
    torch.manual_seed(4)
    model = DiffusionTransformer(MINI)
    x = torch.randn(8, 20)
    bundle = _bundle(K=6)
    perm = torch.randperm(6)
    shuffled = ConditioningBundle(
        crossattn_tokens=bundle.crossattn_tokens[perm],
        prepend_tokens=bundle.prepend_tokens,
    )
    with torch.no_grad():
        assert torch.allclose(model(x, bundle), model(x, shuffled), atol=1e-5)


def test_forward_deterministic_and_batched_consistent():
    torch.manual_seed(5)
    model = DiffusionTransformer(MINI)
    with torch.no_grad():
        torch.nn.init.normal_(model.output_proj.weight, std=0.2)
    x = torch.randn(8, 11)
    b = _bundle()
    with torch.no_grad():
        single = model(x, b)
        again = model(x, b)
        batched = model(
            x.unsqueeze(0).repeat(3, 1, 1),
            ConditioningBundle(
                crossattn_tokens=b.crossattn_tokens.unsqueeze(0).repeat(3, 1, 1),
                prepend_tokens=b.prepend_tokens.unsqueeze(0).repeat(3, 1, 1),
            ),
        )
    assert torch.equal(single, again)
    for i in range(3):
        assert torch.allclose(batched[i], single, atol=1e-5)


def test_channel_mismatch_rejected():
    model = DiffusionTransformer(MINI)
    with pytest.raises(DataError):
        model(torch.randn(9, 10), _bundle())


# ---------------------------------------------------------------- structure


def test_layernorms_have_no_bias_and_normalize():
    model = DiffusionTransformer(MINI)
    norms = [m for m in model.modules() if isinstance(m, torch.nn.LayerNorm)]
    assert len(norms) == MINI.depth * 3
    for norm in norms:
        assert norm.bias is None
        with torch.no_grad():
            norm.weight.fill_(1.0)
            x = torch.randn(4, 9, MINI.embed_dim)
            y = norm(x)
        assert float(y.mean(dim=-1).abs().max()) < 1e-5
        assert float((y.var(dim=-1, unbiased=False) - 1).abs().max()) < 1e-4


def test_gated_mlp_zero_gate_silences_output():
    torch.manual_seed(6)
    model = DiffusionTransformer(MINI)
    mlp = model.blocks[0].mlp
    with torch.no_grad():
        mlp.gate.weight.zero_()
    assert torch.all(mlp(torch.randn(2, 5, MINI.embed_dim)) == 0)


def test_untrained_model_predicts_zero():
    torch.manual_seed(7)
    model = DiffusionTransformer(MINI)
    assert torch.all(model(torch.randn(8, 16), _bundle()) == 0)


# ---------------------------------------------------------------- collate


def test_collate_ragged_bundles_masking():
    torch.manual_seed(8)
    model = DiffusionTransformer(MINI)
    with torch.no_grad():
        torch.nn.init.normal_(model.output_proj.weight, std=0.2)
    bundles = [_bundle(K=3, seed=1), _bundle(K=6, seed=2)]
    batch = collate_bundles(bundles)
    assert batch.crossattn_tokens.shape == (2, 6, 32)
    assert batch.crossattn_mask.tolist() == [[True] * 3 + [False] * 3, [True] * 6]
    x = torch.randn(2, 8, 10)
    with torch.no_grad():
        out = model(x, batch)
        for i, b in enumerate(bundles):
            assert torch.allclose(out[i], model(x[i], b), atol=1e-5), i


def test_collate_rejects_mismatched_prepend():
    with pytest.raises(DataError):
        collate_bundles([_bundle(P=3), _bundle(P=2)])
    with pytest.raises(DataError):
        collate_bundles([])


# ---------------------------------------------------------------- gradients


def test_dit_gradient_matches_finite_differences():
    cfg = DitConfig(depth=2, embed_dim=16, heads=2, latent_channels=4)
    torch.manual_seed(9)
    model = DiffusionTransformer(cfg).double()
    with torch.no_grad():
        torch.nn.init.normal_(model.output_proj.weight, std=0.2)
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 6, dtype=torch.float64)
    bundle = ConditioningBundle(
        crossattn_tokens=torch.randn(3, 16, generator=g, dtype=torch.float64),
        prepend_tokens=torch.randn(3, 16, generator=g, dtype=torch.float64),
    )
    target = torch.randn(4, 6, dtype=torch.float64)

    def loss_fn():
        return ((model(x, bundle) - target) ** 2).mean()

    model.zero_grad()
    loss_fn().backward()
    rng = np.random.default_rng(2)
    params = [p for p in model.parameters() if p.grad is not None and p.grad.abs().max() > 0]
    checked = 0
    for p in params[:: max(1, len(params) // 8)]:
        flat = p.detach().view(-1)
        idx = int(rng.integers(0, flat.numel()))
        h = 1e-6
        with torch.no_grad():
            flat[idx] += h
            up = float(loss_fn())
            flat[idx] -= 2 * h
            down = float(loss_fn())
            flat[idx] += h
        fd = (up - down) / (2 * h)
        grad = float(p.grad.view(-1)[idx])
        if abs(fd) < 1e-10 and abs(grad) < 1e-10:
            continue
        assert abs(fd - grad) / max(abs(fd), abs(grad)) < 1e-3, (fd, grad)
        checked += 1
    assert checked >= 4
