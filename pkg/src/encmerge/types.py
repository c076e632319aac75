"""Core value types shared across the token merging pipeline.

Every type here is an immutable value object: pipelines produce new values
instead of mutating, so instances are safe to share across threads.
Embedding payloads are float32 with read-only buffers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, NamedTuple

import numpy as np

# Attention rows must sum to 1 within this tolerance (post-softmax).
ROW_SUM_TOL = 1e-6

SIMILARITY_SOURCES = ("attention_keys", "hidden_states")


class InvariantError(ValueError):
    """A value object violated one of its structural invariants."""


class InfeasibleScheduleError(ValueError):
    """No integer schedule can satisfy the per-layer merge caps."""


class ConfigError(ValueError):
    """A run configuration failed validation."""


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


def _as_float32(value, *, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float32)
    if arr is value and arr.flags.writeable:
        arr = arr.copy()
    arr.setflags(write=False)
    if not np.all(np.isfinite(arr)):
        raise InvariantError(f"{name} must be finite")
    return arr


@dataclass(frozen=True)
class Token:
    """One (possibly merged) visual token.

    ``size`` counts how many original tokens were folded into this one and
    always equals ``len(origin_ids)``. ``protected`` marks the token as
    unmergeable for the current layer only; it carries no meaning across
    layers.
    """

    embedding: np.ndarray
    size: int
    origin_ids: frozenset[int]
    protected: bool = False

    def __post_init__(self):
        arr = _as_float32(self.embedding, name="token embedding")
        if arr.ndim != 1:
            raise InvariantError(f"token embedding must be 1-D, got shape {arr.shape}")
        object.__setattr__(self, "embedding", arr)
        object.__setattr__(self, "origin_ids", frozenset(int(i) for i in self.origin_ids))
        object.__setattr__(self, "size", int(self.size))
        if self.size < 1:
            raise InvariantError(f"token size must be >= 1, got {self.size}")
        if self.size != len(self.origin_ids):
            raise InvariantError(
                f"token size {self.size} != |origin_ids| {len(self.origin_ids)}"
            )


@dataclass(frozen=True)
class TokenSet:
    """Ordered collection of tokens sharing one embedding dimension.

    Invariants: origin ids are pairwise disjoint across tokens, their union
    is exactly ``{0 .. N0-1}``, and the sizes sum to ``N0`` (the original
    token count). Both hold for freshly built sets and are conserved by
    every merge step.
    """

    tokens: tuple[Token, ...]
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "dim", int(self.dim))
        object.__setattr__(self, "_matrix", None)
        seen: set[int] = set()
        total = 0
        for pos, tok in enumerate(self.tokens):
            if tok.embedding.shape[0] != self.dim:
                raise InvariantError(
                    f"token {pos} has dim {tok.embedding.shape[0]}, expected {self.dim}"
                )
            if seen & tok.origin_ids:
                raise InvariantError(f"token {pos} repeats origin ids already claimed")
            seen |= tok.origin_ids
            total += tok.size
        if seen != set(range(total)):
            raise InvariantError("origin ids must partition {0..N0-1}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def original_count(self) -> int:
        """N0: how many tokens existed before any merging."""
        return sum(t.size for t in self.tokens)

    @property
    def embeddings(self) -> np.ndarray:
        """Stacked (N, dim) float32 view of all token embeddings (read-only)."""
        cached = getattr(self, "_matrix")
        if cached is None:
            if self.tokens:
                cached = np.stack([t.embedding for t in self.tokens])
            else:
                cached = np.zeros((0, self.dim), dtype=np.float32)
            _freeze(cached)
            object.__setattr__(self, "_matrix", cached)
        return cached

    @property
    def sizes(self) -> np.ndarray:
        return np.array([t.size for t in self.tokens], dtype=np.int64)

    @classmethod
    def from_embeddings(cls, matrix) -> "TokenSet":
        """Build a fresh set of size-1 tokens from an (N, dim) matrix."""
        mat = _as_float32(matrix, name="embedding matrix")
        if mat.ndim != 2:
            raise InvariantError(f"embedding matrix must be 2-D, got shape {mat.shape}")
        toks = tuple(
            Token(mat[i], 1, frozenset((i,))) for i in range(mat.shape[0])
        )
        return cls(toks, mat.shape[1])

    def with_embeddings(self, matrix) -> "TokenSet":
        """Same token metadata, new embedding vectors (one per token, in order)."""
        mat = _as_float32(matrix, name="embedding matrix")
        if mat.shape != (len(self.tokens), self.dim):
            raise InvariantError(
                f"replacement matrix shape {mat.shape} != ({len(self.tokens)}, {self.dim})"
            )
        toks = tuple(
            Token(mat[i], t.size, t.origin_ids, t.protected)
            for i, t in enumerate(self.tokens)
        )
        return TokenSet(toks, self.dim)

    def mark_protected(self, positions: Iterable[int]) -> "TokenSet":
        marked = set(positions)
        toks = tuple(
            Token(t.embedding, t.size, t.origin_ids, i in marked or t.protected)
            for i, t in enumerate(self.tokens)
        )
        return TokenSet(toks, self.dim)

    def clear_protected(self) -> "TokenSet":
        toks = tuple(
            Token(t.embedding, t.size, t.origin_ids, False) for t in self.tokens
        )
        return TokenSet(toks, self.dim)


@dataclass(frozen=True)
class PruneSchedule:
    """Per-layer merge counts r_1..r_L summing exactly to the total budget."""

    per_layer: tuple[int, ...]
    total: int

    def __post_init__(self):
        object.__setattr__(self, "per_layer", tuple(int(r) for r in self.per_layer))
        object.__setattr__(self, "total", int(self.total))
        if any(r < 0 for r in self.per_layer):
            raise InvariantError("per-layer merge counts must be >= 0")
        if sum(self.per_layer) != self.total:
            raise InvariantError(
                f"schedule sums to {sum(self.per_layer)}, expected {self.total}"
            )

    @property
    def layer_count(self) -> int:
        return len(self.per_layer)

    def simulate(self, initial_tokens: int) -> list[tuple[int, int]]:
        """Token counts (before, after) per layer; raises if a cap is violated.

        With T tokens entering a layer the merge count is capped at
        min(floor(T/2), T-1): one bipartite pass can merge at most half the
        tokens, and at least one token must survive.
        """
        t = int(initial_tokens)
        if t < 1:
            raise InfeasibleScheduleError("need at least one initial token")
        counts: list[tuple[int, int]] = []
        for layer, r in enumerate(self.per_layer, start=1):
            cap = min(t // 2, t - 1)
            if r > cap:
                raise InfeasibleScheduleError(
                    f"layer {layer}: merge count {r} exceeds cap {cap} "
                    f"({t} tokens remaining)"
                )
            counts.append((t, t - r))
            t -= r
        return counts

    def is_feasible(self, initial_tokens: int) -> bool:
        try:
            self.simulate(initial_tokens)
        except InfeasibleScheduleError:
            return False
        return True


@dataclass(frozen=True)
class AttentionMaps:
    """Per-head post-softmax attention matrices for one layer.

    ``heads`` has shape (H, N, N) with every row summing to 1 within
    ROW_SUM_TOL. ``mean_keys`` optionally carries the per-head-averaged key
    vectors (N, head_dim) so similarity scoring can reuse them.
    """

    heads: np.ndarray
    mean_keys: np.ndarray | None = None

    def __post_init__(self):
        arr = np.asarray(self.heads)
        if arr is self.heads and arr.flags.writeable:
            arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "heads", arr)
        if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
            raise InvariantError(f"attention maps must be (H, N, N), got {arr.shape}")
        if arr.shape[0] < 1 or arr.shape[1] < 1:
            raise InvariantError("attention maps need at least one head and one token")
        if not np.all(np.isfinite(arr)) or np.any(arr < 0):
            raise InvariantError("attention weights must be finite and non-negative")
        sums = arr.sum(axis=2, dtype=np.float64)
        if not np.allclose(sums, 1.0, rtol=0.0, atol=ROW_SUM_TOL):
            worst = float(np.abs(sums - 1.0).max())
            raise InvariantError(
                f"attention rows must sum to 1 (worst deviation {worst:.3e})"
            )
        if self.mean_keys is not None:
            keys = np.asarray(self.mean_keys)
            if keys.ndim != 2 or keys.shape[0] != arr.shape[1]:
                raise InvariantError(
                    f"mean_keys must be (N, k), got {keys.shape} for N={arr.shape[1]}"
                )
            if keys is self.mean_keys and keys.flags.writeable:
                keys = keys.copy()
            keys.setflags(write=False)
            object.__setattr__(self, "mean_keys", keys)

    @property
    def head_count(self) -> int:
        return self.heads.shape[0]

    @property
    def token_count(self) -> int:
        return self.heads.shape[1]


@dataclass(frozen=True)
class ScoreMatrix:
    """Composite merge-benefit scores over the bipartite split.

    ``values[i, j]`` scores merging the token at position ``a_indices[i]``
    into the token at position ``b_indices[j]``. Pairs touching a protected
    position hold -inf, assigned directly as a mask (never computed as an
    arithmetic product). Finite entries are a similarity term in [0, 1]
    times a diversity weight in (0, 1], so they lie in [0, 1].
    """

    values: np.ndarray
    a_indices: tuple[int, ...]
    b_indices: tuple[int, ...]
    protected: frozenset[int] = frozenset()
    degenerate_norms: tuple[int, ...] = ()

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals is self.values and vals.flags.writeable:
            vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "a_indices", tuple(int(i) for i in self.a_indices))
        object.__setattr__(self, "b_indices", tuple(int(i) for i in self.b_indices))
        object.__setattr__(self, "protected", frozenset(int(i) for i in self.protected))
        object.__setattr__(
            self, "degenerate_norms", tuple(int(i) for i in self.degenerate_norms)
        )
        if vals.shape != (len(self.a_indices), len(self.b_indices)):
            raise InvariantError(
                f"score shape {vals.shape} != ({len(self.a_indices)}, {len(self.b_indices)})"
            )
        a_prot = np.array([i in self.protected for i in self.a_indices], dtype=bool)
        b_prot = np.array([j in self.protected for j in self.b_indices], dtype=bool)
        expect_mask = a_prot[:, None] | b_prot[None, :]
        is_masked = np.isneginf(vals)
        if not np.array_equal(is_masked, expect_mask):
            raise InvariantError("-inf entries must appear exactly on protected pairs")
        finite = vals[~is_masked]
        if finite.size and (finite.min() < -1e-12 or finite.max() > 1.0 + 1e-12):
            raise InvariantError("finite scores must lie in [0, 1]")


class MergePair(NamedTuple):
    """One selected merge: source position, destination position, score."""

    source: int
    dest: int
    score: float


@dataclass(frozen=True)
class LayerRecord:
    """What one layer's merge step did, for the run trace."""

    layer: int
    count_before: int
    count_after: int
    merge_budget: int
    pairs: tuple[MergePair, ...]
    protected: tuple[int, ...]
    shortfall: int
    bandwidth_used: float | None = None
    degenerate_norms: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(
            self, "pairs", tuple(MergePair(int(s), int(d), float(v)) for s, d, v in self.pairs)
        )
        object.__setattr__(self, "protected", tuple(int(i) for i in self.protected))
        object.__setattr__(
            self, "degenerate_norms", tuple(int(i) for i in self.degenerate_norms)
        )
        if self.count_after != self.count_before - len(self.pairs):
            raise InvariantError(
                f"layer {self.layer}: count {self.count_before}->{self.count_after} "
                f"inconsistent with {len(self.pairs)} merges"
            )
        if self.shortfall != self.merge_budget - len(self.pairs):
            raise InvariantError(
                f"layer {self.layer}: shortfall {self.shortfall} != "
                f"budget {self.merge_budget} - {len(self.pairs)} merges"
            )

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "count_before": self.count_before,
            "count_after": self.count_after,
            "merge_budget": self.merge_budget,
            "pairs": [[p.source, p.dest, p.score] for p in self.pairs],
            "protected": list(self.protected),
            "shortfall": self.shortfall,
            "bandwidth_used": self.bandwidth_used,
            "degenerate_norms": list(self.degenerate_norms),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LayerRecord":
        return cls(
            layer=int(data["layer"]),
            count_before=int(data["count_before"]),
            count_after=int(data["count_after"]),
            merge_budget=int(data["merge_budget"]),
            pairs=tuple(MergePair(int(s), int(d), float(v)) for s, d, v in data["pairs"]),
            protected=tuple(data["protected"]),
            shortfall=int(data["shortfall"]),
            bandwidth_used=(
                None if data.get("bandwidth_used") is None else float(data["bandwidth_used"])
            ),
            degenerate_norms=tuple(data.get("degenerate_norms", ())),
        )


@dataclass(frozen=True)
class RunConfig:
    """Everything a pruned-encoder run needs besides the input tokens.

    ``budget`` is the total number of tokens merged away across the whole
    encoder. ``ctr`` (critical token ratio) is the fraction of current
    tokens shielded from merging by attention importance. ``bandwidth``
    is the Gaussian kernel width for density estimation; "auto" resolves
    to the mean pairwise distance of the layer's embeddings.
    """

    num_tokens: int
    dim: int
    num_layers: int
    num_heads: int
    budget: int
    strategy: str = "skip"
    ctr: float = 0.25
    diversity_coeff: float = 1.0
    knn_k: int = 5
    bandwidth: float | str = "auto"
    similarity_source: str = "attention_keys"
    seed: int = 0
    always_protect: frozenset[int] = frozenset()

    def __post_init__(self):
        object.__setattr__(
            self, "always_protect", frozenset(int(i) for i in self.always_protect)
        )


def validate_config(cfg: RunConfig) -> list[str]:
    """Return all violated constraints (empty list means the config is ok)."""
    errors: list[str] = []
    for name in ("num_tokens", "dim", "num_layers", "num_heads"):
        if getattr(cfg, name) < 1:
            errors.append(f"{name} must be >= 1")
    if cfg.num_heads >= 1 and cfg.dim >= 1 and cfg.dim % cfg.num_heads != 0:
        errors.append(f"dim must be divisible by num_heads ({cfg.dim} % {cfg.num_heads})")
    if cfg.budget < 0:
        errors.append("budget must be >= 0")
    if cfg.budget >= cfg.num_tokens:
        errors.append(f"budget must be < num_tokens ({cfg.budget} >= {cfg.num_tokens})")
    if not 0.0 <= cfg.ctr <= 1.0:
        errors.append(f"ctr out of [0, 1]: {cfg.ctr}")
    if not cfg.diversity_coeff > 0:
        errors.append(f"diversity_coeff must be > 0: {cfg.diversity_coeff}")
    if cfg.knn_k < 1:
        errors.append(f"knn_k must be >= 1: {cfg.knn_k}")
    if isinstance(cfg.bandwidth, str):
        if cfg.bandwidth != "auto":
            errors.append(f"bandwidth must be a positive number or 'auto': {cfg.bandwidth!r}")
    elif not (math.isfinite(cfg.bandwidth) and cfg.bandwidth > 0):
        errors.append(f"bandwidth must be > 0: {cfg.bandwidth}")
    if cfg.similarity_source not in SIMILARITY_SOURCES:
        errors.append(
            f"similarity_source must be one of {SIMILARITY_SOURCES}: {cfg.similarity_source!r}"
        )
    from .budget import parse_strategy  # local import to avoid a cycle

    try:
        strat = parse_strategy(cfg.strategy)
        if strat.window is not None and strat.window > cfg.num_layers:
            errors.append(
                f"strategy window {strat.window} exceeds num_layers {cfg.num_layers}"
            )
        if strat.alpha is not None and not strat.alpha > 0:
            errors.append(f"strategy exponent must be > 0: {strat.alpha}")
    except ValueError as exc:
        errors.append(f"strategy: {exc}")
    bad = [i for i in cfg.always_protect if not 0 <= i < cfg.num_tokens]
    if bad:
        errors.append(f"always_protect indices out of range [0, num_tokens): {sorted(bad)}")
    return errors


@dataclass(frozen=True)
class TraceMeta:
    """Run metadata attached to a merge trace."""

    strategy: str
    budget: int
    ctr: float
    diversity_coeff: float
    knn_k: int
    bandwidth: float | str
    seed: int
    similarity_source: str
    num_tokens: int
    dim: int
    num_layers: int
    num_heads: int

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "TraceMeta":
        return cls(
            strategy=cfg.strategy,
            budget=cfg.budget,
            ctr=cfg.ctr,
            diversity_coeff=cfg.diversity_coeff,
            knn_k=cfg.knn_k,
            bandwidth=cfg.bandwidth,
            seed=cfg.seed,
            similarity_source=cfg.similarity_source,
            num_tokens=cfg.num_tokens,
            dim=cfg.dim,
            num_layers=cfg.num_layers,
            num_heads=cfg.num_heads,
        )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TraceMeta":
        return cls(**{f.name: data[f.name] for f in fields(cls)})


@dataclass(frozen=True)
class MergeTrace:
    """Per-layer merge records plus run metadata; serializes to JSON lines."""

    meta: TraceMeta
    records: tuple[LayerRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    @property
    def total_merged(self) -> int:
        return sum(len(r.pairs) for r in self.records)

    @property
    def total_shortfall(self) -> int:
        return self.meta.budget - self.total_merged

    @property
    def final_count(self) -> int:
        return self.records[-1].count_after if self.records else self.meta.num_tokens

    def to_json_lines(self) -> str:
        lines = [json.dumps({"meta": self.meta.to_dict()}, sort_keys=True)]
        lines += [json.dumps(r.to_dict(), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_json_lines(cls, text: str) -> "MergeTrace":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty trace")
        head = json.loads(lines[0])
        if "meta" not in head:
            raise ValueError("trace must start with a meta line")
        meta = TraceMeta.from_dict(head["meta"])
        records = tuple(LayerRecord.from_dict(json.loads(ln)) for ln in lines[1:])
        return cls(meta, records)


def config_replace(cfg: RunConfig, **changes) -> RunConfig:
    """Functional update helper for RunConfig."""
    return replace(cfg, **changes)
