"""Measurement machinery: token coverage, L1 attention error, compression
ratio, spike statistics, and policy comparison tables.

Coverage and L1 error consume origin-indexed attention distributions only,
so they are invariant to how the cache physically orders its rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class StepMetrics:
    step: int
    coverage: float
    l1_error: float
    fp_count: int
    q_count: int
    compression_ratio: float


@dataclass
class MetricsReport:
    """Per-step measurements plus aggregates for one replayed stream."""

    trace_id: str
    policy: str
    mode: str
    bits: int
    budget: int
    seed: int | None = None
    per_step: list[StepMetrics] = field(default_factory=list)
    aggregate: dict[str, float] = field(default_factory=dict)

    def finalize(self) -> "MetricsReport":
        if self.per_step:
            cov = [s.coverage for s in self.per_step]
            l1 = [s.l1_error for s in self.per_step]
            last = self.per_step[-1]
            self.aggregate = {
                "mean_coverage": float(np.mean(cov)),
                "max_coverage": float(np.max(cov)),
                "mean_l1_error": float(np.mean(l1)),
                "max_l1_error": float(np.max(l1)),
                "final_fp_count": float(last.fp_count),
                "final_q_count": float(last.q_count),
                "final_compression_ratio": float(last.compression_ratio),
            }
        return self


@dataclass(frozen=True)
class SpikeStats:
    """High-attention positions of a step window, binned by log2 distance
    from the most recent position."""

    per_position_max: np.ndarray
    threshold: float
    spike_positions: tuple[int, ...]
    histogram: dict[int, int]

    @property
    def spike_count(self) -> int:
        return len(self.spike_positions)


def token_coverage(dist_by_origin, kept, budget: int, exclude_first: int = 2) -> float:
    """Attention mass captured by the kept set, normalized by the budget.

    The first ``exclude_first`` positions are removed from the distribution
    (they carry outsized calibration mass) and the remainder renormalized to
    sum 1 before the kept mass is summed.  Result lies in [0, 1/budget].
    """
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    kept = set(kept)
    if not kept:
        raise ValueError("empty kept set")
    dist = np.asarray(dist_by_origin, dtype=np.float64)
    if exclude_first > 0:
        dist = dist[exclude_first:]
        total = dist.sum()
        if total <= 0.0:
            return 0.0
        dist = dist / total
    idx = [p - exclude_first for p in kept if p >= exclude_first]
    idx = [i for i in idx if i < dist.shape[0]]
    if not idx:
        return 0.0
    return float(dist[np.asarray(idx, dtype=np.intp)].sum() / budget)


def attention_l1_error(dist_compressed_by_origin, dist_oracle) -> float:
    """Sum of absolute differences between two origin-indexed distributions."""
    a = np.asarray(dist_compressed_by_origin, dtype=np.float64)
    b = np.asarray(dist_oracle, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())


def compression_ratio(length: int, reserved: int, bits: int, fp_bits: int = 16) -> float:
    """Original bytes over compressed bytes for a sequence of ``length``
    tokens with ``reserved`` kept at full precision and the rest stored at
    ``bits`` per element.

    ``bits=0`` models eviction (released tokens cost nothing).  Per-group
    scale/zero-point overhead is ignored here; see
    compression_ratio_with_overhead.
    """
    if reserved < 0 or length < 0:
        raise ValueError("length and reserved must be non-negative")
    if reserved > length:
        raise ValueError(f"reserved {reserved} exceeds sequence length {length}")
    if bits < 0 or fp_bits <= 0:
        raise ValueError("bit widths must be positive")
    if length == 0:
        return 1.0
    denom = bits * (length - reserved) + fp_bits * reserved
    if denom == 0:
        return math.inf
    return fp_bits * length / denom


def compression_ratio_with_overhead(length: int, reserved: int, bits: int,
                                    head_dim: int, group_size: int,
                                    fp_bits: int = 16) -> float:
    """Compression ratio including float32 scale/zero-point per group.

    Assumes the idealized contiguous grouping over the released region: keys
    grouped per channel (head_dim groups per G released tokens), values per
    token (ceil(head_dim/G) groups per released token), K and V both counted.
    """
    if reserved > length:
        raise ValueError(f"reserved {reserved} exceeds sequence length {length}")
    if length == 0:
        return 1.0
    released = length - reserved
    elems = 2 * head_dim  # K and V per token
    original_bits = fp_bits * elems * length
    groups_k = head_dim * -(-released // group_size) if released else 0
    groups_v = released * -(-head_dim // group_size)
    compressed_bits = (bits * elems * released + fp_bits * elems * reserved
                       + 64 * (groups_k + groups_v))
    if compressed_bits == 0:
        return math.inf
    return original_bits / compressed_bits


def spike_histogram(attn_steps, threshold: float | None = None,
                    percentile: float = 95.0) -> SpikeStats:
    """Spike positions of a window of per-step attention distributions.

    Each position's score is its maximum over the steps (steps may have
    different lengths as the cache grows; shorter steps simply do not cover
    late positions).  Positions at or above the threshold are spikes, binned
    by floor(log2(distance_from_most_recent + 1)).  Default threshold is the
    given percentile of all scores in the window.
    """
    steps = [np.asarray(s, dtype=np.float64).ravel() for s in attn_steps]
    if not steps:
        raise ValueError("need at least one attention step")
    n = max(s.shape[0] for s in steps)
    per_max = np.zeros(n, dtype=np.float64)
    for s in steps:
        per_max[:s.shape[0]] = np.maximum(per_max[:s.shape[0]], s)
    if threshold is None:
        threshold = float(np.percentile(np.concatenate(steps), percentile))
    spikes = np.nonzero(per_max >= threshold)[0]
    hist: dict[int, int] = {}
    for p in spikes:
        distance = (n - 1) - int(p)
        b = int(math.floor(math.log2(distance + 1)))
        hist[b] = hist.get(b, 0) + 1
    return SpikeStats(per_position_max=per_max, threshold=threshold,
                      spike_positions=tuple(int(p) for p in spikes), histogram=hist)


def aggregate_heads(dists, how: str = "mean") -> np.ndarray:
    """Combine same-length attention distributions across heads."""
    arr = np.asarray(dists, dtype=np.float64)
    if how == "mean":
        return arr.mean(axis=0)
    if how == "max":
        return arr.max(axis=0)
    raise ValueError(f"unknown aggregation {how!r}")


def coverage_comparison(trace, kinds, budget: int, exclude_first: int = 2,
                        scale: float | None = None):
    """Mean oracle-attention coverage per policy over one trace's decode steps.

    All policies run with the same full-precision budget.  Returns rows of
    dicts: one per (policy, step) plus one aggregate row per policy with
    step=-1.  Coverage only needs the kept set, so replay runs in eviction
    mode with no quantization work.
    """
    from .policies import config_for_budget
    from .replay import iter_head_streams, replay_stream

    rows: list[dict] = []
    for kind in kinds:
        cfg = config_for_budget(kind, budget, mode="evict_rest")
        covs: list[float] = []
        for stream in iter_head_streams(trace):
            for obs in replay_stream(stream, cfg, bits=2, scale=scale,
                                     exclude_first=exclude_first):
                rows.append({"policy": kind, "step": obs.step,
                             "coverage": obs.coverage})
                covs.append(obs.coverage)
        rows.append({"policy": kind, "step": -1,
                     "coverage": float(np.mean(covs)) if covs else 0.0})
    return rows
