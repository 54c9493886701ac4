"""The live KV-cache state machine.

Couples a selection policy to the quantizer: kept tokens live in a
full-precision store, released tokens move (in whole batches, exactly once)
into an append-only quantized store, and attention runs over the
concatenation in storage order.  Storage order is a permutation of original
positions; the attention identity under row permutation is what licenses
ignoring positions entirely during computation.  Original positions are
carried only for reporting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .policies import PolicyConfig, SelectionState, policy_append, update_h2o_scores
from .quantize import (
    QuantizedTensor,
    concat_tensors,
    dequantize,
    default_kv_params,
    quantize,
    serialize_quantized,
    deserialize_quantized,
)
from .tensor import AttentionConfig, Matrix, attention, check_finite


@dataclass
class StepResult:
    """One decode step's attention view.

    ``dist_over_stored`` follows cache storage order; ``dist_by_origin`` is
    the same mass re-indexed by original token position, with exact zeros at
    positions that were evicted (so error metrics are defined over the full
    index set).
    """

    dist_over_stored: np.ndarray
    dist_by_origin: np.ndarray
    output: np.ndarray


class CompressedKVCache:
    """Single (layer, head) cache stream. Single-owner; not thread-safe."""

    def __init__(self, policy: PolicyConfig, head_dim: int, bits: int = 2,
                 group_size: int = 64, fp_element_bytes: int = 2) -> None:
        if head_dim < 1:
            raise ValueError("head_dim must be >= 1")
        self.policy = policy
        self.head_dim = head_dim
        self.fp_element_bytes = fp_element_bytes
        self.quant_params = default_kv_params(bits, group_size)
        self.state = SelectionState()
        self._fp: dict[int, tuple[np.ndarray, np.ndarray]] = {}  # pos -> (k, v)
        self._qk: QuantizedTensor | None = None
        self._qv: QuantizedTensor | None = None
        self._q_dek = np.zeros((0, head_dim), dtype=np.float32)
        self._q_dev = np.zeros((0, head_dim), dtype=np.float32)
        self._q_origins: list[int] = []
        self._evicted_count = 0

    # -- bookkeeping views -------------------------------------------------
    @property
    def appended_count(self) -> int:
        return self.state.last_appended + 1 if self.state.last_appended >= 0 else 0

    @property
    def fp_count(self) -> int:
        return len(self.state.kept)

    @property
    def quantized_count(self) -> int:
        return len(self._q_origins)

    @property
    def released_count(self) -> int:
        return len(self._q_origins) + self._evicted_count

    @property
    def origin_positions(self) -> list[int]:
        """Original position of each stored row, in storage order."""
        return list(self.state.kept) + list(self._q_origins)

    # -- state transitions ---------------------------------------------------
    def append_token(self, k_row, v_row, pos: int) -> list[int]:
        """Admit one token's K/V at original position ``pos``.

        Runs the policy; any released tokens leave the full-precision store
        as one batch, quantized (quantize_rest) or dropped (evict_rest).
        Returns the released positions.
        """
        k_row = np.asarray(k_row, dtype=np.float32).reshape(-1)
        v_row = np.asarray(v_row, dtype=np.float32).reshape(-1)
        if k_row.shape[0] != self.head_dim or v_row.shape[0] != self.head_dim:
            raise ValueError(
                f"expected {self.head_dim}-dim k/v rows, got {k_row.shape[0]}/{v_row.shape[0]}"
            )
        check_finite(k_row, "k_row")
        check_finite(v_row, "v_row")

        # Stored before the policy runs: a score-driven policy may release
        # the new position itself.
        self._fp[pos] = (k_row, v_row)
        released = policy_append(self.policy, self.state, pos)
        if released:
            k_batch = np.stack([self._fp[p][0] for p in released])
            v_batch = np.stack([self._fp[p][1] for p in released])
            for p in released:
                del self._fp[p]
            if self.policy.mode == "quantize_rest":
                self._absorb_released(k_batch, v_batch, released)
            else:
                self._evicted_count += len(released)
        return released

    def _absorb_released(self, k_batch: Matrix, v_batch: Matrix,
                         released: list[int]) -> None:
        pk, pv = self.quant_params
        qk_tail = quantize(k_batch, pk)
        qv_tail = quantize(v_batch, pv)
        self._qk = qk_tail if self._qk is None else concat_tensors(self._qk, qk_tail)
        self._qv = qv_tail if self._qv is None else concat_tensors(self._qv, qv_tail)
        # Blocks are quantized independently, so the materialized view can be
        # extended incrementally; it stays byte-identical to a full dequantize.
        self._q_dek = np.vstack([self._q_dek, dequantize(qk_tail)])
        self._q_dev = np.vstack([self._q_dev, dequantize(qv_tail)])
        self._q_origins.extend(released)

    def attend(self, q_row, cfg: AttentionConfig) -> StepResult:
        """Attention over the stored rows: full-precision first, then the
        dequantized region, both in insertion order."""
        stored = self.fp_count + self.quantized_count
        if stored == 0:
            raise ValueError("empty cache")
        kept = self.state.kept
        fp_k = np.stack([self._fp[p][0] for p in kept]) if kept else \
            np.zeros((0, self.head_dim), dtype=np.float32)
        fp_v = np.stack([self._fp[p][1] for p in kept]) if kept else \
            np.zeros((0, self.head_dim), dtype=np.float32)
        k_eff = np.vstack([fp_k, self._q_dek])
        v_eff = np.vstack([fp_v, self._q_dev])
        dist, out = attention(q_row, k_eff, v_eff, cfg)
        by_origin = np.zeros(self.appended_count, dtype=np.float64)
        by_origin[np.asarray(self.origin_positions, dtype=np.intp)] = dist
        return StepResult(dist_over_stored=dist, dist_by_origin=by_origin, output=out)

    def observe_attention(self, result: StepResult) -> None:
        """Feed one step's attention back into score-driven policies."""
        if self.policy.kind == "h2o":
            update_h2o_scores(self.state, result.dist_over_stored[:self.fp_count])

    # -- accounting ----------------------------------------------------------
    def memory_footprint(self) -> tuple[int, int, int]:
        """(fp_bytes, q_bytes, metadata_bytes) under the deployment model:
        full-precision elements at ``fp_element_bytes`` each (K and V), the
        quantized payload at packed size plus float32 group metadata, and
        4 bytes per stored-row origin entry."""
        fp_bytes = self.fp_count * self.head_dim * 2 * self.fp_element_bytes
        q_bytes = 0
        for t in (self._qk, self._qv):
            if t is not None:
                q_bytes += t.payload_bytes()
        metadata_bytes = 4 * (self.fp_count + self.quantized_count)
        return fp_bytes, q_bytes, metadata_bytes

    def group_size_counts(self) -> dict[int, int]:
        """Histogram of quantized group lengths (diagnostics; short groups
        appear when a release batch is smaller than G)."""
        counts: dict[int, int] = {}
        if self._qk is not None:
            for h in self._qk.row_blocks:
                counts[h] = counts.get(h, 0) + self._qk.logical_cols
        if self._qv is not None:
            g = self._qv.params.group_size
            cols = self._qv.logical_cols
            full, rem = divmod(cols, g)
            per_row = {g: full} if full else {}
            if rem:
                per_row[rem] = per_row.get(rem, 0) + 1
            for length, n in per_row.items():
                counts[length] = counts.get(length, 0) + n * self._qv.logical_rows
        return counts

    # -- debugging dump -------------------------------------------------------
    DUMP_MAGIC = b"KVCD"

    def dump_state(self) -> bytes:
        """Serialize the cache for offline inspection (see FORMATS.md)."""
        kept = self.state.kept
        fp_k = b"".join(self._fp[p][0].astype("<f4").tobytes() for p in kept)
        fp_v = b"".join(self._fp[p][1].astype("<f4").tobytes() for p in kept)
        head = struct.pack(
            "<4sHIIIB",
            self.DUMP_MAGIC, 1, self.head_dim, self.fp_count, self.quantized_count,
            0 if self.policy.mode == "quantize_rest" else 1,
        )
        origins = np.asarray(self.origin_positions, dtype="<i4").tobytes()
        qk = serialize_quantized(self._qk) if self._qk is not None else b""
        qv = serialize_quantized(self._qv) if self._qv is not None else b""
        has_q = struct.pack("<B", 1 if self._qk is not None else 0)
        return head + fp_k + fp_v + origins + has_q + qk + qv


def load_state_dump(buf: bytes):
    """Parse a dump_state() payload back into plain pieces (debug helper)."""
    magic, version, head_dim, fp_count, q_count, mode_tag = struct.unpack_from("<4sHIIIB", buf)
    if magic != CompressedKVCache.DUMP_MAGIC:
        raise ValueError("bad magic")
    offset = struct.calcsize("<4sHIIIB")
    n = fp_count * head_dim
    fp_k = np.frombuffer(buf, "<f4", n, offset).reshape(fp_count, head_dim).copy()
    offset += 4 * n
    fp_v = np.frombuffer(buf, "<f4", n, offset).reshape(fp_count, head_dim).copy()
    offset += 4 * n
    origins = np.frombuffer(buf, "<i4", fp_count + q_count, offset).copy()
    offset += 4 * (fp_count + q_count)
    (has_q,) = struct.unpack_from("<B", buf, offset)
    offset += 1
    qk = qv = None
    if has_q:
        qk, offset = deserialize_quantized(buf, offset)
        qv, offset = deserialize_quantized(buf, offset)
    mode = "quantize_rest" if mode_tag == 0 else "evict_rest"
    return {"head_dim": head_dim, "mode": mode, "fp_k": fp_k, "fp_v": fp_v,
            "origins": origins, "qk": qk, "qv": qv, "version": version}


def oracle_attend(full_k: Matrix, full_v: Matrix, q_row, cfg: AttentionConfig) -> StepResult:
    """Uncompressed attention over all tokens in original order; the
    reference every fidelity metric compares against."""
    dist, out = attention(q_row, full_k, full_v, cfg)
    return StepResult(dist_over_stored=dist, dist_by_origin=dist, output=out)
