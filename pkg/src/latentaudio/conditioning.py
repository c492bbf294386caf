"""Text, timing and timestep conditioning.

The text side is a pluggable embedder interface: a deterministic toy
embedder (hash-seeded unit vectors per whitespace token) for self-contained
runs, plus a file importer so embeddings computed elsewhere by a real
language model can be dropped in. Timing and timestep conditioning use a
sinusoidal frequency ladder followed by learned projections.
"""

from __future__ import annotations

import hashlib
import json
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import tensorstore
from .errors import DataError

log = logging.getLogger(__name__)

MAX_WINDOW_SECONDS = 47.0
TIMESTEP_SCALE = 1000.0  # maps t in [0,1] onto the ladder's useful range


@dataclass(frozen=True)
class TimingCondition:
    """Start offset and total duration (seconds) of the audio being modeled."""

    seconds_start: float
    seconds_total: float

    def __post_init__(self):
        if self.seconds_start < 0:
            raise DataError(f"seconds_start must be >= 0, got {self.seconds_start}")
        if not (0 < self.seconds_total <= MAX_WINDOW_SECONDS):
            raise DataError(
                f"seconds_total must be in (0, {MAX_WINDOW_SECONDS}], got {self.seconds_total}"
            )


@dataclass
class ConditioningBundle:
    """Conditioning split into cross-attention and prepend branches.

    ``crossattn_tokens`` is (K, dim) with K = text tokens + 2 timing tokens;
    ``prepend_tokens`` is (P, dim) with P = 2 timing tokens + 1 timestep
    token, in that fixed order. Batched bundles carry a leading batch dim
    and may set ``crossattn_mask`` (True = valid token) when items were
    padded to a common K.
    """

    crossattn_tokens: torch.Tensor
    prepend_tokens: torch.Tensor
    crossattn_mask: torch.Tensor | None = None

    def __post_init__(self):
        if self.crossattn_tokens.shape[-2] < 1 or self.prepend_tokens.shape[-2] < 1:
            raise DataError("conditioning bundles need at least one token per branch")
        if not (torch.isfinite(self.crossattn_tokens).all() and torch.isfinite(self.prepend_tokens).all()):
            raise DataError("conditioning tokens must be finite")


def sinusoid_features(x: float | torch.Tensor, dim: int, base: float = 10000.0) -> torch.Tensor:
    """Geometric-frequency sin/cos ladder; layout [sin | cos], each dim/2 wide."""
    if dim % 2 != 0:
        raise DataError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    x = torch.as_tensor(x, dtype=torch.float32)
    freqs = base ** (-torch.arange(half, dtype=torch.float32) / half)
    angles = x[..., None] * freqs if x.ndim else x * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


def timestep_embed(t: float | torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of a diffusion time in [0, 1]."""
    t = torch.as_tensor(t, dtype=torch.float32)
    return sinusoid_features(t * TIMESTEP_SCALE, dim)


def timing_features(tc: TimingCondition, dim: int) -> torch.Tensor:
    """Pre-projection sinusoidal features for (start, total); shape (2, dim)."""
    vals = torch.tensor([tc.seconds_start, tc.seconds_total], dtype=torch.float32)
    return sinusoid_features(vals, dim)


def _token_seed(token: str) -> int:
    digest = hashlib.sha256(token.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def toy_text_embed(prompt: str, dim: int, max_tokens: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic stand-in text embedding.

    Whitespace tokens map to fixed pseudo-random unit vectors seeded from a
    hash of the token, so the same prompt embeds identically across runs
    and platforms. Returns (tokens, mask); an empty prompt yields a single
    all-zero null token with mask False.
    """
    tokens = prompt.split()[:max_tokens]
    if not tokens:
        return np.zeros((1, dim), dtype=np.float32), np.zeros(1, dtype=bool)
    rows = []
    for tok in tokens:
        rng = np.random.default_rng(_token_seed(tok))
        v = rng.standard_normal(dim)
        rows.append(v / np.linalg.norm(v))
    return np.stack(rows).astype(np.float32), np.ones(len(tokens), dtype=bool)


class TextEmbedder(ABC):
    """Prompt -> (token matrix, validity mask). Must be deterministic."""

    dim: int

    @abstractmethod
    def embed(self, prompt: str) -> tuple[np.ndarray, np.ndarray]:
        ...


class ToyTextEmbedder(TextEmbedder):
    def __init__(self, dim: int, max_tokens: int = 128):
        self.dim = dim
        self.max_tokens = max_tokens

    def embed(self, prompt: str) -> tuple[np.ndarray, np.ndarray]:
        return toy_text_embed(prompt, self.dim, self.max_tokens)


def _prompt_key(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def write_text_embeddings(path: str | Path, embeddings: dict[str, np.ndarray]) -> None:
    """Write an embedding import file plus its prompt-index sidecar."""
    dims = {m.shape[1] for m in embeddings.values()}
    if len(dims) > 1:
        raise DataError(f"inconsistent embedding dims: {sorted(dims)}")
    tensors = {_prompt_key(p): np.asarray(m, dtype=np.float32) for p, m in embeddings.items()}
    dim = dims.pop() if dims else 0
    tensorstore.save_tensors(path, tensors, manifest={"kind": "text-embeddings", "dim": dim})
    index = {"prompts": {_prompt_key(p): p for p in embeddings}}
    Path(str(path) + ".prompts.json").write_text(json.dumps(index, ensure_ascii=False, indent=1))


def import_text_embeddings(path: str | Path, expected_dim: int | None = None) -> dict[str, np.ndarray]:
    """Load a prompt -> token-matrix table from an embedding import file."""
    tensors, manifest = tensorstore.load_tensors(path)
    sidecar = Path(str(path) + ".prompts.json")
    if not sidecar.exists():
        raise DataError(f"{path}: missing prompt index sidecar {sidecar.name}")
    index = json.loads(sidecar.read_text())["prompts"]
    table: dict[str, np.ndarray] = {}
    for key, matrix in tensors.items():
        prompt = index.get(key)
        if prompt is None:
            raise DataError(f"{path}: tensor key {key} not present in prompt index")
        if matrix.ndim != 2:
            raise DataError(f"{path}: embedding for prompt {prompt!r} is not a 2-D token matrix")
        if expected_dim is not None and matrix.shape[1] != expected_dim:
            raise DataError(
                f"{path}: prompt {prompt!r} has embedding dim {matrix.shape[1]}, expected {expected_dim}"
            )
        table[prompt] = matrix
    if not table:
        log.warning("%s: embedding import file is empty", path)
    return table


class ImportedTextEmbedder(TextEmbedder):
    """Looks prompts up in an import file; unknown prompts either fall back
    to the toy embedder or raise, depending on ``strict``."""

    def __init__(self, path: str | Path, dim: int, strict: bool = False, max_tokens: int = 128):
        self.dim = dim
        self.strict = strict
        self.table = import_text_embeddings(path, expected_dim=dim)
        self._fallback = ToyTextEmbedder(dim, max_tokens)

    def embed(self, prompt: str) -> tuple[np.ndarray, np.ndarray]:
        hit = self.table.get(prompt)
        if hit is not None:
            return hit.astype(np.float32), np.ones(hit.shape[0], dtype=bool)
        if self.strict:
            raise DataError(f"prompt not present in embedding file: {prompt!r}")
        return self._fallback.embed(prompt)


class Conditioner(nn.Module):
    """Builds ConditioningBundles from text embeddings, timing and timestep.

    Timing is projected separately for the cross-attention and prepend
    branches; the timestep token gets its own projection of the sinusoidal
    embedding.
    """

    def __init__(self, text_dim: int, embed_dim: int):
        super().__init__()
        self.text_dim = text_dim
        self.embed_dim = embed_dim
        self.text_proj = nn.Linear(text_dim, embed_dim, bias=False)
        self.timing_cross_proj = nn.Linear(embed_dim, embed_dim, bias=False)
        self.timing_prepend_proj = nn.Linear(embed_dim, embed_dim, bias=False)
        self.timestep_proj = nn.Linear(embed_dim, embed_dim, bias=False)

    def timing_embed(self, tc: TimingCondition) -> tuple[torch.Tensor, torch.Tensor]:
        """Projected (cross-attention, prepend) timing token pairs, (2, dim) each."""
        feats = timing_features(tc, self.embed_dim)
        return self.timing_cross_proj(feats), self.timing_prepend_proj(feats)

    def build_prepend(self, timing_prepend: torch.Tensor, t: float | torch.Tensor) -> torch.Tensor:
        """Prepend tokens: [timing start, timing total, timestep]; shape (3, dim)."""
        ts = self.timestep_proj(timestep_embed(t, self.embed_dim))
        return torch.cat([timing_prepend, ts[None, :]], dim=0)

    def build_crossattn(
        self, text_tokens: torch.Tensor | None, text_mask: torch.Tensor | None, timing_cross: torch.Tensor
    ) -> torch.Tensor:
        """Cross-attention tokens: [projected text ; timing]. Fully masked or
        absent text yields the timing-only null set (K = 2)."""
        if text_tokens is None or text_tokens.shape[0] == 0:
            return timing_cross
        if text_mask is not None:
            text_tokens = text_tokens[text_mask.bool()]
            if text_tokens.shape[0] == 0:
                return timing_cross
        return torch.cat([self.text_proj(text_tokens), timing_cross], dim=0)

    def bundle(
        self,
        text_tokens: np.ndarray | torch.Tensor | None,
        text_mask: np.ndarray | torch.Tensor | None,
        tc: TimingCondition,
        t: float | torch.Tensor,
    ) -> ConditioningBundle:
        if text_tokens is not None and not torch.is_tensor(text_tokens):
            text_tokens = torch.as_tensor(text_tokens, dtype=torch.float32)
        if text_mask is not None and not torch.is_tensor(text_mask):
            text_mask = torch.as_tensor(text_mask)
        timing_cross, timing_prepend = self.timing_embed(tc)
        return ConditioningBundle(
            crossattn_tokens=self.build_crossattn(text_tokens, text_mask, timing_cross),
            prepend_tokens=self.build_prepend(timing_prepend, t),
        )

    def null_bundle(self, tc: TimingCondition, t: float | torch.Tensor) -> ConditioningBundle:
        """Unconditional branch for classifier-free guidance: no text tokens."""
        return self.bundle(None, None, tc, t)
