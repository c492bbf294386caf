"""Metadata-to-prompt construction, music-detection thresholding,
embedding-space deduplication and memorization-candidate ranking.

Prompts are built by concatenating a random subset of the metadata,
shuffling field order and list values, and randomly transforming case.
For half of the FMA prompts the metadata type is included ("year: 2021,
artist: ..."), for the other half values are joined bare. All similarity
scans are exact O(n^2) over unit-normalized embedding rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

LIST_FIELDS = ("tags", "genres")
FIELD_ORDER = ("title", "description", "tags", "year", "genres", "album", "artist")
CASES = ("as-is", "lower", "upper")


@dataclass
class RecordingMetadata:
    source: str  # "freesound" or "fma"
    title: str | None = None
    description: str | None = None
    tags: list[str] = field(default_factory=list)
    year: str | None = None
    genres: list[str] = field(default_factory=list)
    album: str | None = None
    artist: str | None = None

    def __post_init__(self):
        if self.source not in ("freesound", "fma"):
            raise DataError(f"unknown metadata source {self.source!r}")
        if not self.present_fields():
            raise DataError("metadata must contain at least one non-empty field")

    def present_fields(self) -> list[str]:
        out = []
        for name in FIELD_ORDER:
            value = getattr(self, name)
            if value is None:
                continue
            if name in LIST_FIELDS:
                if len(value) > 0:
                    out.append(name)
            elif str(value).strip():
                out.append(name)
        return out


def build_prompt(
    md: RecordingMetadata,
    rng_seed: int,
    keyed: bool | None = None,
    field_order: list[str] | None = None,
    case: str | None = None,
) -> str:
    """Render a random prompt string from recording metadata.

    Randomness (all seeded): which fields are kept (each with probability
    0.5, resampled until nonempty), field order, the order of list-valued
    fields, the keyed/bare rendering for FMA, and a whole-string case
    transform. The keyword arguments pin individual choices, which is
    useful for reproducing a fixed format; pinned choices skip their draw.
    """
    rng = np.random.default_rng(rng_seed)
    present = md.present_fields()
    if field_order is not None:
        unknown = [f for f in field_order if f not in present]
        if unknown:
            raise DataError(f"field_order names absent fields: {unknown}")
        chosen = list(field_order)
    else:
        chosen = []
        while not chosen:
            mask = rng.random(len(present)) < 0.5
            chosen = [f for f, m in zip(present, mask) if m]
        order = rng.permutation(len(chosen))
        chosen = [chosen[i] for i in order]

    rendered: list[tuple[str, str]] = []
    for name in chosen:
        value = getattr(md, name)
        if name in LIST_FIELDS:
            idx = rng.permutation(len(value))
            text = ", ".join(str(value[i]) for i in idx)
        else:
            text = str(value)
        rendered.append((name, text))

    if md.source == "fma":
        use_keys = keyed if keyed is not None else bool(rng.random() < 0.5)
    else:
        use_keys = False
    if use_keys:
        prompt = ", ".join(f"{name}: {text}" for name, text in rendered)
    else:
        prompt = ", ".join(text for _, text in rendered)

    chosen_case = case if case is not None else CASES[rng.integers(0, len(CASES))]
    if chosen_case == "lower":
        prompt = prompt.lower()
    elif chosen_case == "upper":
        prompt = prompt.upper()
    elif chosen_case != "as-is":
        raise DataError(f"unknown case transform {chosen_case!r}")
    return prompt


def detect_music(
    tag_probs: np.ndarray,
    tags: list[str],
    music_tags: set[str],
    hop_seconds: float,
    threshold: float = 0.15,
    min_seconds: float = 30.0,
) -> bool:
    """True iff music-related tags stay activated long enough.

    ``tag_probs`` is (hops, n_tags) with probabilities in [0, 1]; a hop is
    active when the max over the music-related tag columns reaches the
    threshold, and the recording counts as music when active hops cover at
    least ``min_seconds``.
    """
    probs = np.asarray(tag_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise DataError("tag_probs must be a nonempty (hops, tags) array")
    if probs.shape[1] != len(tags):
        raise DataError(f"{probs.shape[1]} probability columns vs {len(tags)} tag names")
    if probs.min() < 0 or probs.max() > 1:
        raise DataError("tag probabilities must lie in [0, 1]")
    if hop_seconds <= 0:
        raise DataError("hop_seconds must be positive")
    cols = [i for i, t in enumerate(tags) if t in music_tags]
    if not cols:
        return False
    active = probs[:, cols].max(axis=1) >= threshold
    return float(active.sum() * hop_seconds) >= min_seconds


@dataclass
class EmbeddingIndex:
    """Unit-normalized embedding rows with unique string ids."""

    ids: list[str]
    vectors: np.ndarray  # (n, d)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.ids):
            raise DataError(
                f"vectors shape {self.vectors.shape} does not match {len(self.ids)} ids"
            )
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids must be unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        if self.vectors.shape[0] and np.abs(norms - 1.0).max() > 1e-5:
            raise DataError("embedding rows must be unit-normalized (within 1e-5)")

    @classmethod
    def from_raw(cls, ids: list[str], vectors: np.ndarray) -> "EmbeddingIndex":
        """Normalize arbitrary row vectors into an index."""
        v = np.asarray(vectors, dtype=np.float64)
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("cannot normalize zero embedding rows")
        return cls(ids=list(ids), vectors=v / norms)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def dedup_scan(idx: EmbeddingIndex, sim_threshold: float) -> list[list[str]]:
    """Connected components of the cosine-similarity graph, singletons excluded.

    Exact all-pairs scan; components are returned as id lists, each sorted,
    the list of groups sorted by first member.
    """
    n = len(idx.ids)
    if n == 0:
        return []
    sims = idx.vectors @ idx.vectors.T
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for i in range(n):
        for j in range(i + 1, n):
            if sims[i, j] >= sim_threshold:
                ra, rb = find(i), find(j)
                if ra != rb:
                    parent[rb] = ra
    groups: dict[int, list[str]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(idx.ids[i])
    out = [sorted(g) for g in groups.values() if len(g) > 1]
    return sorted(out, key=lambda g: g[0])


def memorization_candidates(
    gen: EmbeddingIndex, train: EmbeddingIndex, k: int = 50
) -> list[tuple[str, str, float]]:
    """Rank generations by closeness to their nearest training embedding.

    For each generation the single nearest training vector is found, then
    the best ``k`` (generation, training, cosine) pairs are returned in
    nonincreasing cosine order; ties break by id order.
    """
    if gen.dim != train.dim:
        raise DataError(f"embedding dim mismatch: {gen.dim} vs {train.dim}")
    if len(gen.ids) == 0 or len(train.ids) == 0:
        return []
    sims = gen.vectors @ train.vectors.T  # (n_gen, n_train)
    pairs = []
    for i, gid in enumerate(gen.ids):
        row = sims[i]
        best_cos = row.max()
        tied = np.flatnonzero(row == best_cos)
        best = min(tied, key=lambda j: train.ids[j])
        pairs.append((gid, train.ids[best], float(best_cos)))
    pairs.sort(key=lambda p: (-p[2], p[0], p[1]))
    return pairs[: min(k, len(pairs))]
