"""Run harness: config files, token sources, FLOP accounting, reports.

Config files are plain ``key = value`` text (``#`` comments) or JSON when
the path ends in ``.json``. Recognized keys are the RunConfig fields
(num_tokens, dim, num_layers, num_heads, budget, strategy, ctr,
diversity_coeff, knn_k, bandwidth, similarity_source, seed,
always_protect) plus harness options (source, timing_reps,
time_baseline).

Trace files are JSON lines: one meta object, then one record per layer.
Embedding files are binary: two little-endian uint32 (count, dim)
followed by row-major float32 data; ``.csv`` matrices are also accepted
as an input source.
"""

from __future__ import annotations

import json
import math
import statistics
import struct
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .budget import allocate, parse_strategy
from .encoder import encode_plain, forward, init_weights
from .types import (
    ConfigError,
    InfeasibleScheduleError,
    MergeTrace,
    RunConfig,
    TokenSet,
    validate_config,
)

TOKEN_SOURCES = ("gaussian", "clustered", "file")
_CLUSTER_CENTER_SCALE = 4.0
_CLUSTER_NOISE_SCALE = 0.25


@dataclass(frozen=True)
class HarnessOptions:
    """Run options that do not affect the merge pipeline itself."""

    source: str = "gaussian"
    timing_reps: int = 5
    time_baseline: bool = False


class StageTimer:
    """Accumulates wall-clock seconds per pipeline stage."""

    def __init__(self):
        self.seconds: dict[str, float] = {}

    def add(self, stage: str, dt: float) -> None:
        self.seconds[stage] = self.seconds.get(stage, 0.0) + dt

    def get(self, stage: str) -> float:
        return self.seconds.get(stage, 0.0)


@dataclass(frozen=True)
class StageStats:
    """Median/min/max over timing repetitions, in seconds."""

    median: float
    minimum: float
    maximum: float

    @classmethod
    def from_samples(cls, samples) -> "StageStats":
        vals = list(samples)
        return cls(statistics.median(vals), min(vals), max(vals))

    def to_dict(self) -> dict:
        return {"median_s": self.median, "min_s": self.minimum, "max_s": self.maximum}


@dataclass(frozen=True)
class FlopModel:
    """Analytic per-layer operation counts driven by trace token counts.

    Attention costs 4*T*d^2 + 2*T^2*d with T the tokens entering the
    layer; the MLP costs 8*T*d^2 with T the tokens after that layer's
    merge. The head count does not change these totals. The final token
    count proxies downstream language-model prefill cost.
    """

    attention_per_layer: tuple[int, ...]
    mlp_per_layer: tuple[int, ...]
    downstream_llm_tokens: int

    @property
    def attention_total(self) -> int:
        return sum(self.attention_per_layer)

    @property
    def mlp_total(self) -> int:
        return sum(self.mlp_per_layer)

    @property
    def total(self) -> int:
        return self.attention_total + self.mlp_total

    def to_dict(self) -> dict:
        return {
            "attention_per_layer": list(self.attention_per_layer),
            "mlp_per_layer": list(self.mlp_per_layer),
            "attention_total": self.attention_total,
            "mlp_total": self.mlp_total,
            "total": self.total,
            "downstream_llm_tokens": self.downstream_llm_tokens,
        }


def attention_flops(tokens: int, dim: int) -> int:
    return 4 * tokens * dim * dim + 2 * tokens * tokens * dim


def mlp_flops(tokens: int, dim: int) -> int:
    return 8 * tokens * dim * dim


def flop_report(trace: MergeTrace, dim: int, heads: int) -> FlopModel:
    """Apply the analytic model to a complete trace."""
    if heads < 1:
        raise ValueError(f"heads must be >= 1, got {heads}")
    expected = list(range(1, trace.meta.num_layers + 1))
    if [r.layer for r in trace.records] != expected:
        raise ValueError(
            f"incomplete trace: found layers {[r.layer for r in trace.records]}, "
            f"expected 1..{trace.meta.num_layers}"
        )
    attn = tuple(attention_flops(r.count_before, dim) for r in trace.records)
    mlp = tuple(mlp_flops(r.count_after, dim) for r in trace.records)
    return FlopModel(attn, mlp, trace.final_count)


def unpruned_flop_total(num_tokens: int, dim: int, num_layers: int) -> int:
    """Total encoder cost with no merging at all."""
    return num_layers * (attention_flops(num_tokens, dim) + mlp_flops(num_tokens, dim))


def write_embeddings(path, matrix) -> None:
    """Binary embedding file: uint32 count, uint32 dim, row-major float32."""
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    if mat.ndim != 2:
        raise ValueError(f"embedding matrix must be 2-D, got shape {mat.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        fh.write(mat.tobytes())


def read_embeddings(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(8)
        if len(head) != 8:
            raise ValueError(f"embedding file {path} too short for its header")
        count, dim = struct.unpack("<II", head)
        data = fh.read()
    expected = 4 * count * dim
    if len(data) != expected:
        raise ValueError(
            f"embedding file {path} holds {len(data)} payload bytes, "
            f"expected {expected} for {count}x{dim}"
        )
    return np.frombuffer(data, dtype="<f4").reshape(count, dim).copy()


def cluster_sizes(count: int, clusters: int) -> list[int]:
    """Cluster cardinalities: as even as possible, extras to earlier clusters."""
    base, extra = divmod(count, clusters)
    return [base + (1 if i < extra else 0) for i in range(clusters)]


def cluster_labels(count: int, clusters: int) -> np.ndarray:
    """Original-token cluster assignment matching the clustered source layout."""
    labels = np.empty(count, dtype=np.int64)
    start = 0
    for label, size in enumerate(cluster_sizes(count, clusters)):
        labels[start : start + size] = label
        start += size
    return labels


def gen_tokens(source: str, count: int, dim: int, seed: int) -> np.ndarray:
    """Token embeddings from a named source, deterministic per seed.

    gaussian: iid standard normal. clustered:K: K tight Gaussian blobs
    around well-separated centers, laid out as contiguous blocks.
    file:PATH: binary embedding file, or a CSV matrix if the path ends in
    .csv; the file's shape must match (count, dim).
    """
    name, _, param = source.partition(":")
    if name == "gaussian":
        rng = np.random.default_rng(seed)
        return rng.standard_normal((count, dim)).astype(np.float32)
    if name == "clustered":
        clusters = int(param) if param else 2
        if not 1 <= clusters <= count:
            raise ValueError(f"cluster count must be in [1, {count}], got {clusters}")
        rng = np.random.default_rng(seed)
        centers = rng.normal(0.0, _CLUSTER_CENTER_SCALE, (clusters, dim))
        out = np.empty((count, dim), dtype=np.float64)
        start = 0
        for label, size in enumerate(cluster_sizes(count, clusters)):
            out[start : start + size] = centers[label] + rng.normal(
                0.0, _CLUSTER_NOISE_SCALE, (size, dim)
            )
            start += size
        return out.astype(np.float32)
    if name == "file":
        if not param:
            raise ValueError("file source needs a path, e.g. file:tokens.bin")
        if param.endswith(".csv"):
            mat = np.loadtxt(param, delimiter=",", dtype=np.float64, ndmin=2)
            mat = mat.astype(np.float32)
        else:
            mat = read_embeddings(param)
        if mat.shape != (count, dim):
            raise ValueError(
                f"embedding file {param} has shape {mat.shape}, expected ({count}, {dim})"
            )
        return mat
    raise ValueError(f"unknown token source {source!r}, expected one of {TOKEN_SOURCES}")


_CONFIG_KEYS = {f.name for f in fields(RunConfig)}
_OPTION_KEYS = {f.name for f in fields(HarnessOptions)}
_INT_KEYS = {"num_tokens", "dim", "num_layers", "num_heads", "budget", "knn_k", "seed"}
_FLOAT_KEYS = {"ctr", "diversity_coeff"}


def _coerce(key: str, raw):
    if key in _INT_KEYS or key == "timing_reps":
        return int(raw)
    if key in _FLOAT_KEYS:
        return float(raw)
    if key == "bandwidth":
        if isinstance(raw, str) and raw.strip() == "auto":
            return "auto"
        return float(raw)
    if key == "always_protect":
        if isinstance(raw, str):
            parts = [p for p in raw.replace(",", " ").split() if p]
            return frozenset(int(p) for p in parts)
        return frozenset(int(i) for i in raw)
    if key == "time_baseline":
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("true", "yes", "1", "on"):
            return True
        if text in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean for {key}, got {raw!r}")
    return str(raw).strip() if isinstance(raw, str) else raw


def parse_config_text(text: str, *, json_format: bool = False):
    """Parse config file content into (RunConfig, HarnessOptions)."""
    raw: dict[str, object] = {}
    if json_format:
        data = json.loads(text)
        if not isinstance(data, dict):
            raise ConfigError("JSON config must be an object")
        raw.update(data)
    else:
        for lineno, line in enumerate(text.splitlines(), start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
            key, value = (part.strip() for part in stripped.split("=", 1))
            raw[key] = value
    cfg_kwargs: dict[str, object] = {}
    opt_kwargs: dict[str, object] = {}
    for key, value in raw.items():
        try:
            coerced = _coerce(key, value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        if key in _CONFIG_KEYS:
            cfg_kwargs[key] = coerced
        elif key in _OPTION_KEYS:
            opt_kwargs[key] = coerced
        else:
            raise ConfigError(f"unknown config key {key!r}")
    missing = {"num_tokens", "dim", "num_layers", "num_heads", "budget"} - set(cfg_kwargs)
    if missing:
        raise ConfigError(f"missing required config keys: {sorted(missing)}")
    return RunConfig(**cfg_kwargs), HarnessOptions(**opt_kwargs)


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, json_format=path.suffix == ".json")


@dataclass(frozen=True)
class RunReport:
    """Everything one run produced. Deterministic per (config, seed)
    except the timing block."""

    config: RunConfig
    options: HarnessOptions
    schedule: tuple[int, ...]
    final_count: int
    shortfall: int
    flops: FlopModel
    unpruned_flops: int
    timing: dict[str, StageStats]
    trace_path: str | None = None

    @property
    def retention_ratio(self) -> float:
        return self.final_count / self.config.num_tokens

    @property
    def reduction_percent(self) -> float:
        return 100.0 * (1.0 - self.retention_ratio)

    def to_dict(self) -> dict:
        cfg = {
            f.name: (
                sorted(getattr(self.config, f.name))
                if f.name == "always_protect"
                else getattr(self.config, f.name)
            )
            for f in fields(RunConfig)
        }
        return {
            "config": cfg,
            "options": {f.name: getattr(self.options, f.name) for f in fields(HarnessOptions)},
            "schedule": list(self.schedule),
            "final_count": self.final_count,
            "retention_ratio": self.retention_ratio,
            "reduction_percent": self.reduction_percent,
            "shortfall": self.shortfall,
            "flops": self.flops.to_dict(),
            "unpruned_flops": self.unpruned_flops,
            "timing": {stage: stats.to_dict() for stage, stats in self.timing.items()},
            "trace_path": self.trace_path,
        }


def _run_label(cfg: RunConfig) -> str:
    strategy = cfg.strategy.replace(":", "")
    return f"{strategy}-R{cfg.budget}-seed{cfg.seed}"


def run_config(
    cfg: RunConfig, options: HarnessOptions | None = None, out_dir=None
) -> RunReport:
    """Execute one configured run; optionally write report + trace files.

    Timing is the median of ``timing_reps`` repetitions after one warm-up,
    reported with min and max. The trace and all non-timing report fields
    are identical across repetitions.
    """
    options = options or HarnessOptions()
    errors = validate_config(cfg)
    if errors:
        raise ConfigError("; ".join(errors))
    if options.timing_reps < 1:
        raise ConfigError(f"timing_reps must be >= 1, got {options.timing_reps}")
    embeddings = gen_tokens(options.source, cfg.num_tokens, cfg.dim, cfg.seed)
    tokens = TokenSet.from_embeddings(embeddings)
    weights = init_weights(cfg.seed, cfg.dim, cfg.num_heads, cfg.num_layers)
    schedule = allocate(cfg.strategy, cfg.num_layers, cfg.budget, cfg.num_tokens)

    forward(tokens, weights, schedule, cfg)  # warm-up
    encoder_s, prune_s, total_s = [], [], []
    trace: MergeTrace | None = None
    for _ in range(options.timing_reps):
        timer = StageTimer()
        t0 = time.perf_counter()
        _, trace = forward(tokens, weights, schedule, cfg, timer=timer)
        total_s.append(time.perf_counter() - t0)
        encoder_s.append(timer.get("encoder"))
        prune_s.append(timer.get("prune"))
    assert trace is not None
    timing = {
        "encoder": StageStats.from_samples(encoder_s),
        "prune_overhead": StageStats.from_samples(prune_s),
        "total": StageStats.from_samples(total_s),
    }
    if options.time_baseline:
        encode_plain(tokens, weights)  # warm-up
        baseline = []
        for _ in range(options.timing_reps):
            t0 = time.perf_counter()
            encode_plain(tokens, weights)
            baseline.append(time.perf_counter() - t0)
        timing["baseline_encoder"] = StageStats.from_samples(baseline)

    trace_path: str | None = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        label = _run_label(cfg)
        trace_file = out / f"{label}.trace.jsonl"
        trace_file.write_text(trace.to_json_lines())
        trace_path = str(trace_file)
    report = RunReport(
        config=cfg,
        options=options,
        schedule=schedule.per_layer,
        final_count=trace.final_count,
        shortfall=trace.total_shortfall,
        flops=flop_report(trace, cfg.dim, cfg.num_heads),
        unpruned_flops=unpruned_flop_total(cfg.num_tokens, cfg.dim, cfg.num_layers),
        timing=timing,
        trace_path=trace_path,
    )
    if out_dir is not None:
        report_file = Path(out_dir) / f"{_run_label(cfg)}.report.json"
        report_file.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    return report


def run(config_path, out_dir=None) -> RunReport:
    """Load a config file and execute it."""
    cfg, options = load_config(config_path)
    return run_config(cfg, options, out_dir)


def sweep(
    strategies,
    retained_budgets,
    cfg: RunConfig,
    options: HarnessOptions | None = None,
    out_dir=None,
) -> list[RunReport]:
    """One run per (strategy, retained-token count) cell.

    Budgets are retained token targets, so each cell merges away
    ``num_tokens - retained``. Infeasible cells are reported and skipped.
    """
    reports: list[RunReport] = []
    for strategy in strategies:
        parse_strategy(strategy)
        for retained in retained_budgets:
            if not 0 < retained <= cfg.num_tokens:
                raise ValueError(
                    f"retained budget {retained} out of (0, {cfg.num_tokens}]"
                )
            cell = replace(cfg, strategy=str(strategy), budget=cfg.num_tokens - int(retained))
            try:
                reports.append(run_config(cell, options, out_dir))
            except InfeasibleScheduleError as exc:
                print(f"skip {strategy} retained={retained}: {exc}")
    return reports


def summary_table(reports) -> str:
    """Human-readable sweep/run summary, one row per report."""
    header = (
        f"{'strategy':<12} {'budget':>7} {'final':>6} {'retain%':>8} "
        f"{'shortfall':>9} {'flops':>15} {'encoder_ms':>11}"
    )
    rows = [header, "-" * len(header)]
    for rep in reports:
        rows.append(
            f"{rep.config.strategy:<12} {rep.config.budget:>7} {rep.final_count:>6} "
            f"{100 * rep.retention_ratio:>7.1f}% {rep.shortfall:>9} "
            f"{rep.flops.total:>15} {1000 * rep.timing['total'].median:>11.2f}"
        )
    return "\n".join(rows)


def read_trace(path) -> MergeTrace:
    return MergeTrace.from_json_lines(Path(path).read_text())


def format_trace(trace: MergeTrace) -> str:
    """Human-readable per-layer trace dump."""
    meta = trace.meta
    lines = [
        f"run: strategy={meta.strategy} budget={meta.budget} ctr={meta.ctr} "
        f"seed={meta.seed} tokens={meta.num_tokens} dim={meta.dim} "
        f"layers={meta.num_layers} heads={meta.num_heads}",
        f"{'layer':>5} {'before':>7} {'after':>6} {'merges':>7} "
        f"{'protected':>9} {'shortfall':>9}",
    ]
    for rec in trace.records:
        lines.append(
            f"{rec.layer:>5} {rec.count_before:>7} {rec.count_after:>6} "
            f"{len(rec.pairs):>7} {len(rec.protected):>9} {rec.shortfall:>9}"
        )
    lines.append(
        f"total merged {trace.total_merged} of {meta.budget} "
        f"(shortfall {trace.total_shortfall}), final count {trace.final_count}"
    )
    return "\n".join(lines)
