"""Layer-wise budget allocation.

Turns a total merge budget and a named strategy into a feasible per-layer
schedule. Strategies are written ``mean | skip | first:N | last:N |
inc:ALPHA | dec:ALPHA``. Layers are 1-indexed; ``skip`` merges on layers
1, 3, 5, ... so pruning starts as early as possible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .types import InfeasibleScheduleError, PruneSchedule

STRATEGY_KINDS = ("mean", "skip", "first", "last", "inc", "dec")


@dataclass(frozen=True)
class Strategy:
    """Parsed strategy: a kind plus its window (first/last) or exponent (inc/dec)."""

    kind: str
    window: int | None = None
    alpha: float | None = None

    def __str__(self) -> str:
        if self.window is not None:
            return f"{self.kind}:{self.window}"
        if self.alpha is not None:
            return f"{self.kind}:{self.alpha:g}"
        return self.kind


def parse_strategy(text: str | Strategy) -> Strategy:
    """Parse ``mean | skip | first:N | last:N | inc:ALPHA | dec:ALPHA``."""
    if isinstance(text, Strategy):
        return text
    parts = str(text).strip().split(":")
    kind = parts[0]
    if kind not in STRATEGY_KINDS:
        raise ValueError(f"unknown strategy {text!r}, expected one of {STRATEGY_KINDS}")
    if kind in ("mean", "skip"):
        if len(parts) != 1:
            raise ValueError(f"strategy {kind!r} takes no parameter: {text!r}")
        return Strategy(kind)
    if len(parts) != 2 or not parts[1]:
        raise ValueError(f"strategy {kind!r} needs a parameter, e.g. {kind}:1: {text!r}")
    if kind in ("first", "last"):
        try:
            window = int(parts[1])
        except ValueError:
            raise ValueError(f"strategy window must be an integer: {text!r}") from None
        if window < 1:
            raise ValueError(f"strategy window must be >= 1: {text!r}")
        return Strategy(kind, window=window)
    try:
        alpha = float(parts[1])
    except ValueError:
        raise ValueError(f"strategy exponent must be a number: {text!r}") from None
    if not math.isfinite(alpha) or alpha < 0:
        raise ValueError(f"strategy exponent must be >= 0: {text!r}")
    return Strategy(kind, alpha=alpha)


def strategy_weights(strategy: str | Strategy, layer_count: int) -> np.ndarray:
    """Per-layer weight fractions summing to 1.

    mean: uniform over all layers. skip: uniform over layers 1, 3, 5, ...
    first:N / last:N: uniform over the first/last N layers. inc:a / dec:a:
    proportional to l**a, respectively (L-l+1)**a, over 1-indexed layers.
    """
    strat = parse_strategy(strategy)
    if layer_count < 1:
        raise ValueError(f"layer_count must be >= 1, got {layer_count}")
    w = np.zeros(layer_count, dtype=np.float64)
    if strat.kind == "mean":
        w[:] = 1.0 / layer_count
    elif strat.kind == "skip":
        active = math.ceil(layer_count / 2)
        w[0::2] = 1.0 / active
    elif strat.kind in ("first", "last"):
        n = strat.window
        if n > layer_count:
            raise ValueError(
                f"strategy window {n} exceeds layer count {layer_count}"
            )
        if strat.kind == "first":
            w[:n] = 1.0 / n
        else:
            w[layer_count - n :] = 1.0 / n
    else:
        depth = np.arange(1, layer_count + 1, dtype=np.float64)
        raw = depth**strat.alpha if strat.kind == "inc" else (layer_count - depth + 1) ** strat.alpha
        w = raw / raw.sum()
    return w


def _largest_remainder(weights: np.ndarray, total: int) -> list[int]:
    """Round total*weights to integers summing to total; ties favor earlier layers."""
    quotas = total * weights
    base = np.floor(quotas).astype(np.int64)
    leftover = total - int(base.sum())
    if leftover:
        remainders = quotas - base
        # Primary key: remainder descending; secondary: layer index ascending.
        order = np.lexsort((np.arange(len(weights)), -remainders))
        for idx in order[:leftover]:
            base[idx] += 1
    return [int(r) for r in base]


def round_to_integers(weights, total: int, caps) -> list[int]:
    """Integerize fractional layer budgets under per-layer caps.

    Largest-remainder rounding of ``total * weights`` (ties toward earlier
    layers), then a forward pass that clamps each layer to its cap and
    spills the overflow to the next layer with remaining capacity.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty 1-D sequence")
    if np.any(w < 0) or not math.isclose(float(w.sum()), 1.0, abs_tol=1e-9):
        raise ValueError("weights must be non-negative and sum to 1")
    if total < 0:
        raise ValueError(f"total must be >= 0, got {total}")
    cap_list = [math.inf if c is None or c == math.inf else int(c) for c in caps]
    if len(cap_list) != w.size:
        raise ValueError("caps must match the number of layers")
    sched = _largest_remainder(w, total)
    carry = 0
    out: list[int] = []
    for want, cap in zip(sched, cap_list):
        want += carry
        give = int(min(want, cap))
        out.append(give)
        carry = want - give
    if carry > 0:
        raise InfeasibleScheduleError(
            f"total capacity {total - carry} is below the requested budget {total}"
        )
    return out


def allocate(
    strategy: str | Strategy, layer_count: int, total: int, initial_tokens: int
) -> PruneSchedule:
    """Build a feasible per-layer schedule for the given strategy and budget.

    Caps come from forward simulation: with T tokens entering a layer at
    most min(floor(T/2), T-1) can merge there. Overflow spills to the next
    strategy-eligible layer; if it cannot be placed the budget is
    infeasible for this strategy.
    """
    strat = parse_strategy(strategy)
    if layer_count < 1:
        raise ValueError(f"layer_count must be >= 1, got {layer_count}")
    if initial_tokens < 1:
        raise ValueError(f"initial_tokens must be >= 1, got {initial_tokens}")
    if total < 0:
        raise ValueError(f"total budget must be >= 0, got {total}")
    if total >= initial_tokens:
        raise ValueError(
            f"total budget must be < initial tokens ({total} >= {initial_tokens})"
        )
    if strat.alpha is not None and strat.alpha == 0:
        raise ValueError("strategy exponent must be > 0 for allocation")
    weights = strategy_weights(strat, layer_count)
    tentative = _largest_remainder(weights, total)
    out = [0] * layer_count
    t = initial_tokens
    carry = 0
    for idx in range(layer_count):
        if weights[idx] == 0.0 and tentative[idx] == 0:
            continue  # ineligible layer: any carry rides forward
        cap = min(t // 2, t - 1)
        want = tentative[idx] + carry
        give = min(want, cap)
        out[idx] = give
        carry = want - give
        t -= give
    if carry > 0:
        raise InfeasibleScheduleError(
            f"strategy {strat}: cannot place {carry} of {total} merges "
            f"starting from {initial_tokens} tokens over {layer_count} layers"
        )
    schedule = PruneSchedule(tuple(out), total)
    schedule.simulate(initial_tokens)  # defensive: must hold by construction
    return schedule
