"""Diffusion transformer over latent sequences.

Stacked pre-norm blocks: self-attention with rotary embeddings on half of
each head's query/key dimensions, a cross-attention layer for
conditioning, and a gated MLP, each wrapped in a skip connection. Layer
norms carry no bias. Prepend conditioning tokens are concatenated before
the latent tokens and stripped from the output; linear maps translate
between the latent channel count and the embedding width.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .conditioning import ConditioningBundle
from .errors import DataError

ROPE_BASE = 10000.0


@dataclass
class DitConfig:
    depth: int = 8
    embed_dim: int = 256
    heads: int = 8
    mlp_expansion: float = 4.0
    latent_channels: int = 64
    rope_fraction: float = 0.5

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise DataError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        head_dim = self.embed_dim // self.heads
        rotated = int(head_dim * self.rope_fraction)
        if rotated % 2 != 0:
            raise DataError(f"rotated width {rotated} must be even")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def rope_half(qk: torch.Tensor, positions: torch.Tensor, fraction: float = 0.5) -> torch.Tensor:
    """Rotate the first ``fraction`` of head dims by position-dependent angles.

    ``qk`` is (..., T, head_dim); ``positions`` is (T,). The rotated width
    is split in half and the two halves form rotation pairs; remaining
    dims pass through untouched.
    """
    head_dim = qk.shape[-1]
    rotated = int(head_dim * fraction)
    if rotated % 2 != 0:
        raise DataError(f"rotated width {rotated} must be even")
    if rotated == 0:
        return qk
    half = rotated // 2
    freqs = ROPE_BASE ** (
        -torch.arange(half, dtype=qk.dtype, device=qk.device) / half
    )
    angles = positions.to(qk.dtype)[:, None] * freqs[None, :]  # (T, half)
    cos, sin = torch.cos(angles), torch.sin(angles)
    a = qk[..., :half]
    b = qk[..., half:rotated]
    rot = torch.cat([a * cos - b * sin, a * sin + b * cos], dim=-1)
    return torch.cat([rot, qk[..., rotated:]], dim=-1)


class SelfAttention(nn.Module):
    def __init__(self, cfg: DitConfig):
        super().__init__()
        self.cfg = cfg
        self.qkv = nn.Linear(cfg.embed_dim, 3 * cfg.embed_dim, bias=False)
        self.out = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)

    def forward(self, x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
        B, T, D = x.shape
        H, hd = self.cfg.heads, self.cfg.head_dim
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        q = q.view(B, T, H, hd).transpose(1, 2)
        k = k.view(B, T, H, hd).transpose(1, 2)
        v = v.view(B, T, H, hd).transpose(1, 2)
        q = rope_half(q, positions, self.cfg.rope_fraction)
        k = rope_half(k, positions, self.cfg.rope_fraction)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(B, T, D))


class CrossAttention(nn.Module):
    """Queries from the sequence, keys/values from conditioning tokens.

    Conditioning tokens carry no positional encoding, so attention over
    them is order-invariant.
    """

    def __init__(self, cfg: DitConfig):
        super().__init__()
        self.cfg = cfg
        self.q = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)
        self.kv = nn.Linear(cfg.embed_dim, 2 * cfg.embed_dim, bias=False)
        self.out = nn.Linear(cfg.embed_dim, cfg.embed_dim, bias=False)

    def forward(self, x: torch.Tensor, cond: torch.Tensor, cond_mask: torch.Tensor | None) -> torch.Tensor:
        B, T, D = x.shape
        K = cond.shape[-2]
        H, hd = self.cfg.heads, self.cfg.head_dim
        q = self.q(x).view(B, T, H, hd).transpose(1, 2)
        k, v = self.kv(cond).chunk(2, dim=-1)
        k = k.view(B, K, H, hd).transpose(1, 2)
        v = v.view(B, K, H, hd).transpose(1, 2)
        attn_mask = None
        if cond_mask is not None:
            attn_mask = cond_mask[:, None, None, :].to(torch.bool)
        y = F.scaled_dot_product_attention(q, k, v, attn_mask=attn_mask)
        return self.out(y.transpose(1, 2).reshape(B, T, D))


class GatedMlp(nn.Module):
    """down(up(x) * silu(gate(x))); zero gate weights silence the block."""

    def __init__(self, cfg: DitConfig):
        super().__init__()
        hidden = int(cfg.embed_dim * cfg.mlp_expansion)
        self.up = nn.Linear(cfg.embed_dim, hidden, bias=False)
        self.gate = nn.Linear(cfg.embed_dim, hidden, bias=False)
        self.down = nn.Linear(hidden, cfg.embed_dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down(self.up(x) * F.silu(self.gate(x)))


class DitBlock(nn.Module):
    def __init__(self, cfg: DitConfig):
        super().__init__()
        self.norm_attn = nn.LayerNorm(cfg.embed_dim, bias=False)
        self.attn = SelfAttention(cfg)
        self.norm_cross = nn.LayerNorm(cfg.embed_dim, bias=False)
        self.cross = CrossAttention(cfg)
        self.norm_mlp = nn.LayerNorm(cfg.embed_dim, bias=False)
        self.mlp = GatedMlp(cfg)

    def forward(self, x, positions, cond, cond_mask):
        x = x + self.attn(self.norm_attn(x), positions)
        x = x + self.cross(self.norm_cross(x), cond, cond_mask)
        x = x + self.mlp(self.norm_mlp(x))
        return x


class DiffusionTransformer(nn.Module):
    """Predicts the v-target for a noised latent sequence.

    Input/output shape is (latent_channels, T) or batched (B, C, T); the
    prepend tokens are consumed internally and never appear in the output.
    The output projection is zero-initialized so an untrained model
    predicts zero.
    """

    def __init__(self, cfg: DitConfig | None = None):
        super().__init__()
        self.cfg = cfg or DitConfig()
        self.input_proj = nn.Linear(self.cfg.latent_channels, self.cfg.embed_dim)
        self.blocks = nn.ModuleList([DitBlock(self.cfg) for _ in range(self.cfg.depth)])
        self.output_proj = nn.Linear(self.cfg.embed_dim, self.cfg.latent_channels)
        nn.init.zeros_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, latents: torch.Tensor, cond: ConditioningBundle) -> torch.Tensor:
        batched = latents.dim() == 3
        x = latents if batched else latents.unsqueeze(0)
        if x.shape[-2] != self.cfg.latent_channels:
            raise DataError(
                f"latent has {x.shape[-2]} channels, config says {self.cfg.latent_channels}"
            )
        B, C, T = x.shape
        tokens = self.input_proj(x.transpose(1, 2))  # (B, T, D)
        prepend = cond.prepend_tokens
        cross = cond.crossattn_tokens
        if prepend.dim() == 2:
            prepend = prepend.unsqueeze(0).expand(B, -1, -1)
        if cross.dim() == 2:
            cross = cross.unsqueeze(0).expand(B, -1, -1)
        cross_mask = cond.crossattn_mask
        if cross_mask is not None and cross_mask.dim() == 1:
            cross_mask = cross_mask.unsqueeze(0).expand(B, -1)
        P = prepend.shape[-2]
        seq = torch.cat([prepend.to(tokens.dtype), tokens], dim=1)
        positions = torch.arange(P + T, device=seq.device)
        for block in self.blocks:
            seq = block(seq, positions, cross.to(seq.dtype), cross_mask)
        out = self.output_proj(seq[:, P:])  # prepend region stripped
        out = out.transpose(1, 2)
        return out if batched else out.squeeze(0)


def collate_bundles(bundles: list[ConditioningBundle]) -> ConditioningBundle:
    """Stack per-item bundles into one batched bundle, padding cross tokens.

    Prepend token counts must match across items; cross-attention tokens
    are zero-padded to the largest K with a validity mask.
    """
    if not bundles:
        raise DataError("cannot collate an empty bundle list")
    P = bundles[0].prepend_tokens.shape[-2]
    if any(b.prepend_tokens.shape[-2] != P for b in bundles):
        raise DataError("prepend token counts differ across batch items")
    K = max(b.crossattn_tokens.shape[-2] for b in bundles)
    D = bundles[0].crossattn_tokens.shape[-1]
    B = len(bundles)
    cross = torch.zeros(B, K, D)
    mask = torch.zeros(B, K, dtype=torch.bool)
    prepend = torch.stack([b.prepend_tokens for b in bundles])
    for i, b in enumerate(bundles):
        k = b.crossattn_tokens.shape[-2]
        cross[i, :k] = b.crossattn_tokens
        mask[i, :k] = True
    return ConditioningBundle(crossattn_tokens=cross, prepend_tokens=prepend, crossattn_mask=mask)
