"""Score-guided bipartite token merging for one encoder layer.

Tokens split by position parity into a source group (even positions) and
a destination group (odd positions). Each source row nominates its best
destination, the top-r nominations by score are applied, and survivors
keep their relative order.
"""

from __future__ import annotations

import math

import numpy as np

from .scoring import composite_scores, resolve_bandwidth
from .types import (
    AttentionMaps,
    LayerRecord,
    MergePair,
    RunConfig,
    ScoreMatrix,
    Token,
    TokenSet,
)


def bipartite_split(token_set: TokenSet) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Even current positions vs odd current positions (0-based).

    The split is recomputed from the current ordering at every merge
    layer, so it depends on which tokens survived earlier layers.
    """
    if len(token_set) == 0:
        raise ValueError("cannot split an empty token set")
    count = len(token_set)
    return tuple(range(0, count, 2)), tuple(range(1, count, 2))


def select_pairs(scores: ScoreMatrix, merge_count: int) -> list[MergePair]:
    """Pick up to ``merge_count`` merges from the score matrix.

    Each source row with at least one finite entry nominates its argmax
    destination (ties toward the lower destination index); nominations are
    ranked by score descending (ties toward the lower source index) and
    the top ``merge_count`` survive. Fewer finite nominations than the
    budget is a shortfall, not an error: all of them are returned.
    """
    if merge_count < 0:
        raise ValueError(f"merge_count must be >= 0, got {merge_count}")
    vals = scores.values
    if merge_count == 0 or vals.size == 0:
        return []
    best = vals.max(axis=1)
    cols = vals.argmax(axis=1)  # first occurrence wins: lowest destination index
    rows = np.nonzero(np.isfinite(best))[0]
    if rows.size == 0:
        return []
    order = np.lexsort((rows, -best[rows]))
    chosen = rows[order[:merge_count]]
    return [
        MergePair(
            scores.a_indices[int(i)],
            scores.b_indices[int(cols[i])],
            float(vals[i, cols[i]]),
        )
        for i in chosen
    ]


def apply_merges(token_set: TokenSet, pairs) -> TokenSet:
    """Fold each source token into its destination.

    A destination becomes the size-weighted average of itself and all
    sources merged into it; sizes add and origin ids union. Sums
    accumulate in float64 over the destination then sources in ascending
    position order, and the result is cast back to float32. Surviving
    tokens keep their relative order.
    """
    pairs = [MergePair(int(s), int(d), float(v)) for s, d, v in pairs]
    count = len(token_set)
    sources: set[int] = set()
    by_dest: dict[int, list[int]] = {}
    for pair in pairs:
        if not (0 <= pair.source < count and 0 <= pair.dest < count):
            raise ValueError(f"merge pair {pair} out of range for {count} tokens")
        if pair.source == pair.dest:
            raise ValueError(f"token {pair.source} cannot merge into itself")
        if pair.source in sources:
            raise ValueError(f"source {pair.source} merged twice")
        tok = token_set.tokens[pair.source]
        dst = token_set.tokens[pair.dest]
        if tok.protected or dst.protected:
            raise ValueError(f"merge pair {pair} touches a protected token")
        sources.add(pair.source)
        by_dest.setdefault(pair.dest, []).append(pair.source)
    if sources & set(by_dest):
        raise ValueError("a position cannot be both source and destination")

    merged: list[Token] = []
    for pos, tok in enumerate(token_set.tokens):
        if pos in sources:
            continue
        group = by_dest.get(pos)
        if not group:
            merged.append(tok)
            continue
        acc = tok.embedding.astype(np.float64) * tok.size
        total = tok.size
        origins = tok.origin_ids
        for src in sorted(group):
            src_tok = token_set.tokens[src]
            acc += src_tok.embedding.astype(np.float64) * src_tok.size
            total += src_tok.size
            origins |= src_tok.origin_ids
        merged.append(
            Token((acc / total).astype(np.float32), total, origins, tok.protected)
        )
    return TokenSet(tuple(merged), token_set.dim)


def merge_layer(
    token_set: TokenSet,
    maps: AttentionMaps,
    cfg: RunConfig,
    merge_count: int,
    layer_index: int = 1,
) -> tuple[TokenSet, LayerRecord]:
    """Run one full merge step and report what happened.

    With a zero budget the input passes through untouched and only a count
    record is produced. Otherwise: score, protect, select, apply. The
    returned set has all protection flags cleared; they are recomputed
    fresh at every layer.
    """
    count = len(token_set)
    if merge_count < 0 or merge_count > count // 2:
        raise ValueError(
            f"merge_count {merge_count} out of [0, floor(T/2)] for T={count}"
        )
    if merge_count == 0:
        record = LayerRecord(layer_index, count, count, 0, (), (), 0)
        return token_set, record

    bandwidth = (
        resolve_bandwidth(token_set.embeddings)
        if cfg.bandwidth == "auto"
        else float(cfg.bandwidth)
    )
    scores = composite_scores(token_set, maps, cfg, merge_count, bandwidth=bandwidth)
    marked = token_set.mark_protected(scores.protected)
    pairs = select_pairs(scores, merge_count)
    reduced = apply_merges(marked, pairs).clear_protected()
    record = LayerRecord(
        layer=layer_index,
        count_before=count,
        count_after=len(reduced),
        merge_budget=merge_count,
        pairs=tuple(pairs),
        protected=tuple(sorted(scores.protected)),
        shortfall=merge_count - len(pairs),
        bandwidth_used=bandwidth,
        degenerate_norms=scores.degenerate_norms,
    )
    return reduced, record
