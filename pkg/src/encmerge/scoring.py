"""Merge-benefit scoring.

A candidate pair's score is the product of a cosine attraction term, a
diversity penalty from KNN local density, and an attention-preservation
mask that removes protected tokens from consideration entirely.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import AttentionMaps, InvariantError, RunConfig, ScoreMatrix, TokenSet

SIMILARITY_MODES = ("affine", "sigmoid")


@dataclass(frozen=True)
class ImportanceVector:
    """Per-token attention importance: mean attention each token receives."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals is self.values and vals.flags.writeable:
            vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if vals.ndim != 1 or vals.size == 0:
            raise InvariantError("importance must be a non-empty vector")
        if np.any(vals < 0):
            raise InvariantError("importance values must be non-negative")
        # Total attention mass is conserved, so the mean is 1/N.
        if abs(float(vals.mean()) - 1.0 / vals.size) > 1e-6:
            raise InvariantError("importance mean must equal 1/N")

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class DensityVector:
    """KNN local density per token, each value in [0, 1)."""

    values: np.ndarray
    neighbor_count: int
    bandwidth: float

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals is self.values and vals.flags.writeable:
            vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if np.any(vals < 0) or np.any(vals >= 1.0):
            raise InvariantError("density values must lie in [0, 1)")

    def __len__(self) -> int:
        return self.values.size


def _squared_distances(points: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances via the Gram matrix.

    Row norms are taken from the Gram diagonal so identical points get an
    exactly zero distance.
    """
    gram = points @ points.T
    norms = np.diagonal(gram)
    sq = norms[:, None] + norms[None, :] - 2.0 * gram
    np.maximum(sq, 0.0, out=sq)
    return sq


def similarity(a_features, b_features, mode: str = "affine") -> np.ndarray:
    """Cross-group cosine similarity mapped into [0, 1].

    Raw cosine spans [-1, 1]; "affine" maps it through (c + 1) / 2 and
    "sigmoid" through the logistic function. A zero-norm vector is treated
    as cosine 0 against everything (0.5 after either mapping).
    """
    if mode not in SIMILARITY_MODES:
        raise ValueError(f"mode must be one of {SIMILARITY_MODES}, got {mode!r}")
    a = np.asarray(a_features, dtype=np.float64)
    b = np.asarray(b_features, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"feature shapes incompatible: {a.shape} vs {b.shape}")
    a_norm = np.linalg.norm(a, axis=1)
    b_norm = np.linalg.norm(b, axis=1)
    a_zero = a_norm == 0.0
    b_zero = b_norm == 0.0
    cos = (a / np.where(a_zero, 1.0, a_norm)[:, None]) @ (
        b / np.where(b_zero, 1.0, b_norm)[:, None]
    ).T
    cos[a_zero, :] = 0.0
    cos[:, b_zero] = 0.0
    np.clip(cos, -1.0, 1.0, out=cos)
    if mode == "affine":
        return (cos + 1.0) / 2.0
    return 1.0 / (1.0 + np.exp(-cos))


def zero_norm_rows(features) -> tuple[int, ...]:
    """Row indices whose feature vector has zero norm (degenerate for cosine)."""
    arr = np.asarray(features, dtype=np.float64)
    return tuple(int(i) for i in np.nonzero(np.linalg.norm(arr, axis=1) == 0.0)[0])


def resolve_bandwidth(embeddings) -> float:
    """Mean pairwise Euclidean distance; 1.0 when all points coincide."""
    points = np.asarray(embeddings, dtype=np.float64)
    n = points.shape[0]
    if n < 2:
        return 1.0
    dist = np.sqrt(_squared_distances(points))
    mean = float((dist.sum() - np.trace(dist)) / (n * (n - 1)))
    return mean if mean > 0.0 else 1.0


def local_density(embeddings, neighbor_count: int, bandwidth: float) -> DensityVector:
    """KNN density d_i = 1 - mean_k exp(-||v_i - v_k||^2 / bandwidth^2).

    Neighbors are the effective-K nearest by squared Euclidean distance,
    excluding the point itself; distance ties break toward the lower
    index. High density means the token sits in a crowded region.
    """
    points = np.asarray(embeddings, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {points.shape}")
    n = points.shape[0]
    if n < 2:
        raise ValueError("density undefined for a single token")
    if not (isinstance(bandwidth, (int, float)) and math.isfinite(bandwidth) and bandwidth > 0):
        raise ValueError(f"bandwidth must be a positive number, got {bandwidth!r}")
    if neighbor_count < 1:
        raise ValueError(f"neighbor_count must be >= 1, got {neighbor_count}")
    k = min(int(neighbor_count), n - 1)
    sq = _squared_distances(points)
    np.fill_diagonal(sq, np.inf)
    # Stable sort keeps equal distances in index order.
    order = np.argsort(sq, axis=1, kind="stable")[:, :k]
    nearest = np.take_along_axis(sq, order, axis=1)
    dens = 1.0 - np.exp(-nearest / (bandwidth * bandwidth)).mean(axis=1)
    return DensityVector(dens, k, float(bandwidth))


def diversity_weight(density_i: float, density_j: float, coeff: float) -> float:
    """exp(-coeff * (d_i + d_j)): 1 only when both densities are zero."""
    if not coeff > 0:
        raise ValueError(f"diversity coefficient must be > 0, got {coeff}")
    return float(np.exp(-coeff * (density_i + density_j)))


def attention_importance(maps: AttentionMaps) -> ImportanceVector:
    """Mean attention received per token, averaged over heads and queries.

    Averaging each row of a row-stochastic map is identically 1/N and
    cannot rank tokens, so importance is the column mean: how much
    attention token i receives from all queries.
    """
    received = np.asarray(maps.heads, dtype=np.float64).mean(axis=(0, 1))
    return ImportanceVector(received)


def protected_set(
    importance: ImportanceVector,
    ctr: float,
    token_count: int,
    merge_count: int,
    always_protect: frozenset[int] = frozenset(),
) -> frozenset[int]:
    """Positions shielded from merging this layer.

    The count of importance-protected tokens is
    max(0, min(floor(ctr * T), T - 2r)), which backs off as the token set
    shrinks. Ties in importance break toward the lower position. Members
    of ``always_protect`` come on top of that count.
    """
    if not 0.0 <= ctr <= 1.0:
        raise ValueError(f"ctr out of [0, 1]: {ctr}")
    if merge_count < 0 or merge_count > token_count // 2:
        raise ValueError(
            f"merge_count {merge_count} out of [0, floor(T/2)] for T={token_count}"
        )
    if len(importance) != token_count:
        raise ValueError(
            f"importance length {len(importance)} != token count {token_count}"
        )
    n_protect = max(0, min(math.floor(ctr * token_count), token_count - 2 * merge_count))
    always = frozenset(int(i) for i in always_protect if 0 <= int(i) < token_count)
    vals = importance.values
    order = np.lexsort((np.arange(token_count), -vals))
    ranked = [int(i) for i in order if int(i) not in always]
    return always | frozenset(ranked[:n_protect])


def composite_scores(
    token_set: TokenSet,
    maps: AttentionMaps,
    cfg: RunConfig,
    merge_count: int,
    *,
    key_features=None,
    bandwidth: float | None = None,
) -> ScoreMatrix:
    """Score every even-position -> odd-position merge candidate.

    Finite entries are similarity * diversity weight; pairs touching the
    protected set are masked to -inf directly (never formed as a product,
    which would be 0 * -inf). Similarity features follow
    ``cfg.similarity_source``; density always uses the current token
    embeddings.
    """
    count = len(token_set)
    if maps.token_count != count:
        raise ValueError(
            f"attention maps cover {maps.token_count} tokens, set has {count}"
        )
    if count < 2:
        raise ValueError("scoring needs at least two tokens")
    a_idx = tuple(range(0, count, 2))
    b_idx = tuple(range(1, count, 2))

    if cfg.similarity_source == "attention_keys":
        feats = key_features if key_features is not None else maps.mean_keys
        if feats is None:
            raise ValueError(
                "similarity_source='attention_keys' requires key features "
                "(maps.mean_keys or the key_features argument)"
            )
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[0] != count:
            raise ValueError(f"key features cover {feats.shape[0]} tokens, set has {count}")
    else:
        feats = np.asarray(token_set.embeddings, dtype=np.float64)

    importance = attention_importance(maps)
    always = frozenset(
        pos
        for pos, tok in enumerate(token_set.tokens)
        if tok.protected or (tok.origin_ids & cfg.always_protect)
    )
    shielded = protected_set(importance, cfg.ctr, count, merge_count, always)

    if bandwidth is None:
        bandwidth = (
            resolve_bandwidth(token_set.embeddings)
            if cfg.bandwidth == "auto"
            else float(cfg.bandwidth)
        )
    density = local_density(token_set.embeddings, cfg.knn_k, bandwidth)

    sim = similarity(feats[list(a_idx)], feats[list(b_idx)])
    d = density.values
    div = np.exp(-cfg.diversity_coeff * (d[list(a_idx)][:, None] + d[list(b_idx)][None, :]))
    values = sim * div

    a_mask = np.array([i in shielded for i in a_idx], dtype=bool)
    b_mask = np.array([j in shielded for j in b_idx], dtype=bool)
    values[a_mask, :] = -np.inf
    values[:, b_mask] = -np.inf

    return ScoreMatrix(
        values=values,
        a_indices=a_idx,
        b_indices=b_idx,
        protected=shielded,
        degenerate_norms=zero_norm_rows(feats),
    )
