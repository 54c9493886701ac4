"""Decode replay: drive a compressed cache through one (layer, kv-head)
stream of a trace and observe per-step fidelity against the uncompressed
oracle.

The prompt is ingested through the same append path as decode tokens, in
original order, so every policy sees an identical workload.  At each decode
step the new token's K/V is appended first (a token attends to itself), then
the query runs against both the compressed cache and the full-precision
oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .cache import CompressedKVCache, StepResult, oracle_attend
from .metrics import attention_l1_error, compression_ratio, token_coverage
from .policies import PolicyConfig
from .tensor import AttentionConfig
from .tracefile import TraceFile


@dataclass(frozen=True)
class HeadStream:
    """One replayable attention stream: a single kv head's K/V plus the
    queries aimed at it (already aggregated across its query-head group)."""

    stream_id: str
    prompt_k: np.ndarray  # (prompt_len, d)
    prompt_v: np.ndarray
    step_k: np.ndarray  # (steps, d)
    step_v: np.ndarray
    queries: np.ndarray  # (steps, d)


@dataclass(frozen=True)
class StepObservation:
    step: int
    position: int
    coverage: float
    l1_error: float
    fp_count: int
    q_count: int
    compression_ratio: float
    oracle: StepResult
    result: StepResult


def iter_head_streams(trace: TraceFile, gqa_mode: str = "mean") -> Iterator[HeadStream]:
    """Split a trace into per-(layer, kv-head) streams.

    ``gqa_mode="mean"`` averages each kv head's query group into one query
    per step; ``"per_head"`` yields one stream per query head, all sharing
    that kv head's K/V (the cache advances independently per stream).
    """
    group = trace.head_count // trace.kv_head_count
    for layer in range(trace.layer_count):
        for kvh in range(trace.kv_head_count):
            heads = range(kvh * group, (kvh + 1) * group)
            base = f"{trace.trace_id or 'trace'}:L{layer}:K{kvh}"
            if gqa_mode == "mean":
                q = trace.queries[:, layer, list(heads)].mean(axis=1)
                yield HeadStream(base, trace.prompt_k[layer, kvh],
                                 trace.prompt_v[layer, kvh],
                                 trace.step_k[:, layer, kvh],
                                 trace.step_v[:, layer, kvh], q)
            elif gqa_mode == "per_head":
                for h in heads:
                    yield HeadStream(f"{base}:H{h}", trace.prompt_k[layer, kvh],
                                     trace.prompt_v[layer, kvh],
                                     trace.step_k[:, layer, kvh],
                                     trace.step_v[:, layer, kvh],
                                     trace.queries[:, layer, h])
            else:
                raise ValueError(f"unknown gqa_mode {gqa_mode!r}")


def replay_stream(stream: HeadStream, policy: PolicyConfig, bits: int,
                  group_size: int = 64, scale: float | None = None,
                  fp_element_bytes: int = 2, exclude_first: int = 2
                  ) -> Iterator[StepObservation]:
    """Replay one stream; yields an observation per decode step."""
    d = stream.prompt_k.shape[1]
    cfg = AttentionConfig(head_dim=d, scale=scale)
    cache = CompressedKVCache(policy, d, bits=bits, group_size=group_size,
                              fp_element_bytes=fp_element_bytes)
    fp_bits = 8 * fp_element_bytes
    storage_bits = bits if policy.mode == "quantize_rest" else 0

    full_k = np.vstack([stream.prompt_k, stream.step_k]).astype(np.float32)
    full_v = np.vstack([stream.prompt_v, stream.step_v]).astype(np.float32)
    prompt_len = stream.prompt_k.shape[0]

    for pos in range(prompt_len):
        cache.append_token(stream.prompt_k[pos], stream.prompt_v[pos], pos)

    for step in range(stream.queries.shape[0]):
        pos = prompt_len + step
        cache.append_token(stream.step_k[step], stream.step_v[step], pos)
        q = stream.queries[step]
        result = cache.attend(q, cfg)
        oracle = oracle_attend(full_k[:pos + 1], full_v[:pos + 1], q, cfg)
        cache.observe_attention(result)

        cov = token_coverage(oracle.dist_by_origin, cache.state.kept,
                             policy.fp_budget, exclude_first=exclude_first)
        l1 = attention_l1_error(result.dist_by_origin, oracle.dist_by_origin)
        ratio = compression_ratio(pos + 1, cache.fp_count, storage_bits, fp_bits)
        yield StepObservation(
            step=step, position=pos, coverage=cov, l1_error=l1,
            fp_count=cache.fp_count, q_count=cache.released_count,
            compression_ratio=ratio, oracle=oracle, result=result,
        )
