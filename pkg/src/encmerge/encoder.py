"""Minimal multi-head self-attention encoder hosting the merge hook.

Forward-only, float32 throughout, pre-norm blocks with GELU. The merge
hook sits between attention and the MLP; with an all-zero schedule the
hooked forward is bit-identical to the plain encoder.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .merging import merge_layer
from .types import (
    AttentionMaps,
    LayerRecord,
    MergeTrace,
    PruneSchedule,
    RunConfig,
    TokenSet,
    TraceMeta,
)

LN_EPS = np.float32(1e-5)
WEIGHT_MAGIC = b"ENCW"
_SQRT2 = np.float32(1.4142135623730951)

# Per-layer arrays in serialization order: name -> shape builder.
_LAYER_FIELDS = (
    "attn_norm_scale",
    "attn_norm_shift",
    "wq",
    "wk",
    "wv",
    "wo",
    "mlp_norm_scale",
    "mlp_norm_shift",
    "w_up",
    "w_down",
)


def _layer_shapes(dim: int) -> dict[str, tuple[int, ...]]:
    return {
        "attn_norm_scale": (dim,),
        "attn_norm_shift": (dim,),
        "wq": (dim, dim),
        "wk": (dim, dim),
        "wv": (dim, dim),
        "wo": (dim, dim),
        "mlp_norm_scale": (dim,),
        "mlp_norm_shift": (dim,),
        "w_up": (dim, 4 * dim),
        "w_down": (4 * dim, dim),
    }


@dataclass(frozen=True)
class LayerWeights:
    """One block's parameters: QKV/output projections, MLP, and norm affines."""

    attn_norm_scale: np.ndarray
    attn_norm_shift: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm_scale: np.ndarray
    mlp_norm_shift: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    heads: int

    def __post_init__(self):
        dim = self.wq.shape[0]
        shapes = _layer_shapes(dim)
        for name in _LAYER_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float32)
            if arr.shape != shapes[name]:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} must be finite")
            if arr is getattr(self, name) and arr.flags.writeable:
                arr = arr.copy()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.heads < 1 or dim % self.heads != 0:
            raise ValueError(f"dim {dim} must be divisible by heads {self.heads}")

    @property
    def dim(self) -> int:
        return self.wq.shape[0]


@dataclass(frozen=True)
class EncoderWeights:
    layers: tuple[LayerWeights, ...]
    dim: int
    heads: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        for i, layer in enumerate(self.layers):
            if layer.dim != self.dim or layer.heads != self.heads:
                raise ValueError(f"layer {i} does not match encoder dims")

    @property
    def layer_count(self) -> int:
        return len(self.layers)


def init_weights(seed: int, dim: int, heads: int, layer_count: int) -> EncoderWeights:
    """Deterministic random weights: same seed gives bit-identical arrays.

    Projection and MLP matrices are drawn uniform in [-0.02, 0.02] from
    numpy's default PCG64 generator (drawn as float64, cast to float32, in
    serialization order). Normalization affines start at identity
    (scale 1, shift 0).
    """
    if dim < 1 or heads < 1 or dim % heads != 0:
        raise ValueError(f"dim {dim} must be divisible by heads {heads}")
    if layer_count < 1:
        raise ValueError(f"layer_count must be >= 1, got {layer_count}")
    rng = np.random.default_rng(seed)
    shapes = _layer_shapes(dim)
    layers = []
    for _ in range(layer_count):
        arrays = {}
        for name in _LAYER_FIELDS:
            if name.endswith("_scale"):
                arrays[name] = np.ones(shapes[name], dtype=np.float32)
            elif name.endswith("_shift"):
                arrays[name] = np.zeros(shapes[name], dtype=np.float32)
            else:
                arrays[name] = rng.uniform(-0.02, 0.02, shapes[name]).astype(np.float32)
        layers.append(LayerWeights(heads=heads, **arrays))
    return EncoderWeights(tuple(layers), dim, heads)


def save_weights(weights: EncoderWeights, path) -> None:
    """Write the little-endian binary weight file.

    Layout: magic b"ENCW", then three uint32 (dim, heads, layer_count),
    then per layer the arrays attn_norm_scale, attn_norm_shift, wq, wk,
    wv, wo, mlp_norm_scale, mlp_norm_shift, w_up, w_down as row-major
    float32.
    """
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<III", weights.dim, weights.heads, weights.layer_count))
        for layer in weights.layers:
            for name in _LAYER_FIELDS:
                fh.write(np.ascontiguousarray(getattr(layer, name), dtype="<f4").tobytes())


def load_weights(path) -> EncoderWeights:
    """Read a weight file written by save_weights."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != WEIGHT_MAGIC:
            raise ValueError(f"bad weight file magic {magic!r}")
        dim, heads, layer_count = struct.unpack("<III", fh.read(12))
        shapes = _layer_shapes(dim)
        layers = []
        for _ in range(layer_count):
            arrays = {}
            for name in _LAYER_FIELDS:
                shape = shapes[name]
                n = int(np.prod(shape))
                buf = fh.read(4 * n)
                if len(buf) != 4 * n:
                    raise ValueError("weight file truncated")
                arrays[name] = np.frombuffer(buf, dtype="<f4").reshape(shape).copy()
            layers.append(LayerWeights(heads=heads, **arrays))
        if fh.read(1):
            raise ValueError("trailing bytes after declared layers")
    return EncoderWeights(tuple(layers), dim, heads)


def _layernorm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    return centered / np.sqrt(var + LN_EPS) * scale + shift


def _gelu(x: np.ndarray) -> np.ndarray:
    return x * np.float32(0.5) * (np.float32(1.0) + erf(x / _SQRT2))


def attention_block(
    token_set: TokenSet, layer: LayerWeights
) -> tuple[TokenSet, AttentionMaps]:
    """Pre-norm multi-head self-attention with a residual connection.

    Returns the updated tokens plus the post-softmax per-head maps; the
    maps also carry the per-head-averaged key vectors for similarity
    scoring downstream.
    """
    x = token_set.embeddings
    if x.shape[1] != layer.dim:
        raise ValueError(f"tokens have dim {x.shape[1]}, weights expect {layer.dim}")
    n = x.shape[0]
    h = layer.heads
    head_dim = layer.dim // h
    normed = _layernorm(x, layer.attn_norm_scale, layer.attn_norm_shift)
    q = (normed @ layer.wq).reshape(n, h, head_dim).transpose(1, 0, 2)
    k = (normed @ layer.wk).reshape(n, h, head_dim).transpose(1, 0, 2)
    v = (normed @ layer.wv).reshape(n, h, head_dim).transpose(1, 0, 2)
    logits = q @ k.transpose(0, 2, 1) * np.float32(1.0 / np.sqrt(head_dim))
    logits -= logits.max(axis=2, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=2, keepdims=True)
    context = (weights @ v).transpose(1, 0, 2).reshape(n, layer.dim)
    out = x + context @ layer.wo
    maps = AttentionMaps(weights, mean_keys=k.mean(axis=0))
    return token_set.with_embeddings(out), maps


def mlp_block(token_set: TokenSet, layer: LayerWeights) -> TokenSet:
    """Pre-norm two-layer MLP with GELU and a residual connection."""
    x = token_set.embeddings
    if x.shape[1] != layer.dim:
        raise ValueError(f"tokens have dim {x.shape[1]}, weights expect {layer.dim}")
    normed = _layernorm(x, layer.mlp_norm_scale, layer.mlp_norm_shift)
    hidden = _gelu(normed @ layer.w_up)
    return token_set.with_embeddings(x + hidden @ layer.w_down)


def encode_plain(token_set: TokenSet, weights: EncoderWeights) -> TokenSet:
    """The unhooked encoder: attention then MLP, no pruning code path."""
    current = token_set
    for layer in weights.layers:
        current, _ = attention_block(current, layer)
        current = mlp_block(current, layer)
    return current


def forward(
    token_set: TokenSet,
    weights: EncoderWeights,
    schedule: PruneSchedule,
    cfg: RunConfig,
    timer=None,
) -> tuple[TokenSet, MergeTrace]:
    """Full encoder pass with the merge hook between attention and MLP.

    Merge budgets a layer cannot spend (cap clamping or too few finite
    candidates) carry forward to the next layer with a scheduled budget;
    whatever remains at the end shows up as the trace's total shortfall.
    """
    if schedule.layer_count != weights.layer_count:
        raise ValueError(
            f"schedule covers {schedule.layer_count} layers, "
            f"encoder has {weights.layer_count}"
        )
    if token_set.dim != weights.dim:
        raise ValueError(f"tokens have dim {token_set.dim}, weights expect {weights.dim}")
    records: list[LayerRecord] = []
    current = token_set
    carry = 0
    for idx, scheduled in enumerate(schedule.per_layer, start=1):
        layer = weights.layers[idx - 1]
        t0 = time.perf_counter()
        current, maps = attention_block(current, layer)
        if timer is not None:
            timer.add("encoder", time.perf_counter() - t0)
        desired = scheduled + carry if scheduled > 0 else 0
        if desired > 0:
            count = len(current)
            effective = min(desired, count // 2)
            t0 = time.perf_counter()
            current, record = merge_layer(current, maps, cfg, effective, layer_index=idx)
            if timer is not None:
                timer.add("prune", time.perf_counter() - t0)
            carry = desired - len(record.pairs)
            records.append(record)
        else:
            records.append(
                LayerRecord(idx, len(current), len(current), 0, (), (), 0)
            )
        t0 = time.perf_counter()
        current = mlp_block(current, layer)
        if timer is not None:
            timer.add("encoder", time.perf_counter() - t0)
    return current, MergeTrace(TraceMeta.from_config(cfg), tuple(records))
