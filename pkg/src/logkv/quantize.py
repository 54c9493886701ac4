"""Asymmetric round-to-nearest group quantization to 2 or 4 bits.

Keys are grouped per channel (one group = one channel across up to G
consecutive tokens); values per token (one group = up to G consecutive
channels of one token).  Codes are bit-packed least-significant-bits first,
each group padded to a byte boundary, groups serialized in group-index
order.  See FORMATS.md for the bit-exact layout.

``bits=16`` is a lossless float passthrough used by the harness to isolate
layout effects from precision effects; it stores raw float32 payload and
carries no groups.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .tensor import Matrix, check_finite

Axis = Literal["per_channel", "per_token"]

PASSTHROUGH_BITS = 16
_VALID_BITS = (2, 4, PASSTHROUGH_BITS)


@dataclass(frozen=True)
class QuantParams:
    """Quantization scheme: bit width, group length G, and grouping axis."""

    bits: int = 2
    group_size: int = 64
    axis: Axis = "per_token"

    def __post_init__(self) -> None:
        if self.bits not in _VALID_BITS:
            raise ValueError(f"bits must be one of {_VALID_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise ValueError(f"group_size must be >= 1, got {self.group_size}")
        if self.axis not in ("per_channel", "per_token"):
            raise ValueError(f"unknown axis {self.axis!r}")

    @property
    def codes_per_byte(self) -> int:
        return 8 // self.bits

    @property
    def qmax(self) -> int:
        return (1 << self.bits) - 1


@dataclass(frozen=True)
class QuantizedTensor:
    """Packed low-bit payload plus per-group scale/zero-point.

    ``row_blocks`` records the token-row batches the tensor was built from
    (each block at most ``group_size`` rows).  Per-channel groups never span
    blocks, which is what makes batch append a pure concatenation.
    """

    params: QuantParams
    logical_rows: int
    logical_cols: int
    packed: bytes
    scales: np.ndarray  # float32, one per group
    zero_points: np.ndarray  # float32, one per group
    row_blocks: tuple[int, ...] = field(default=())

    @property
    def n_groups(self) -> int:
        return len(self.scales)

    def group_map(self, row: int, col: int) -> int:
        """Group index holding element (row, col)."""
        if self.params.bits == PASSTHROUGH_BITS:
            raise ValueError("passthrough tensors have no groups")
        if not (0 <= row < self.logical_rows and 0 <= col < self.logical_cols):
            raise IndexError(f"({row}, {col}) outside {self.logical_rows}x{self.logical_cols}")
        if self.params.axis == "per_token":
            groups_per_row = -(-self.logical_cols // self.params.group_size)
            return row * groups_per_row + col // self.params.group_size
        block, r = 0, row
        for h in self.row_blocks:
            if r < h:
                break
            r -= h
            block += 1
        return block * self.logical_cols + col

    def payload_bytes(self) -> int:
        """Storage accounting: packed codes plus group metadata.

        Accounting is in the deployment dtype model: passthrough payload
        counts 2 bytes per element (nominal 16-bit original), not the 4
        bytes of the in-memory float32 copy.
        """
        if self.params.bits == PASSTHROUGH_BITS:
            return self.logical_rows * self.logical_cols * 2
        return len(self.packed) + 4 * len(self.scales) + 4 * len(self.zero_points)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def pack_codes(codes: np.ndarray, bits: int) -> bytes:
    """Pack a (n_groups, group_len) uint8 code matrix, one padded byte run
    per group, codes filling each byte from the least-significant bits."""
    if bits not in (2, 4):
        raise ValueError(f"pack_codes supports 2 or 4 bits, got {bits}")
    codes = np.asarray(codes, dtype=np.uint8)
    if codes.ndim != 2:
        raise ValueError("pack_codes expects a 2-D group-major code matrix")
    n_groups, group_len = codes.shape
    if n_groups == 0 or group_len == 0:
        return b""
    if codes.max(initial=0) > (1 << bits) - 1:
        raise ValueError(f"code out of range for {bits}-bit packing")
    per_byte = 8 // bits
    pad = (-group_len) % per_byte
    if pad:
        codes = np.pad(codes, ((0, 0), (0, pad)))
    stacked = codes.reshape(n_groups, -1, per_byte).astype(np.uint16)
    shifts = (np.arange(per_byte, dtype=np.uint16) * bits)
    packed = (stacked << shifts).sum(axis=2).astype(np.uint8)
    return packed.tobytes()


def unpack_codes(buf: bytes, n_groups: int, group_len: int, bits: int) -> np.ndarray:
    """Inverse of pack_codes for uniform-length groups."""
    if bits not in (2, 4):
        raise ValueError(f"unpack_codes supports 2 or 4 bits, got {bits}")
    if n_groups == 0 or group_len == 0:
        return np.zeros((n_groups, group_len), dtype=np.uint8)
    per_byte = 8 // bits
    bytes_per_group = -(-group_len // per_byte)
    arr = np.frombuffer(buf, dtype=np.uint8, count=n_groups * bytes_per_group)
    arr = arr.reshape(n_groups, bytes_per_group)
    shifts = np.arange(per_byte, dtype=np.uint8) * bits
    mask = (1 << bits) - 1
    codes = (arr[:, :, None] >> shifts) & mask
    return codes.reshape(n_groups, bytes_per_group * per_byte)[:, :group_len]


def _affine_encode(sub: np.ndarray, axis: int, qmax: int):
    """Min/max affine parameters and codes for one uniform chunk.

    ``sub`` holds the chunk, groups running along ``axis``.  Returns float32
    scales/zero-points (group order along the other axis) and uint8 codes of
    ``sub``'s shape.  A zero scale marks a constant group; its codes are 0.
    """
    x = sub.astype(np.float64)
    mn = x.min(axis=axis)
    mx = x.max(axis=axis)
    scales = ((mx - mn) / qmax).astype(np.float32)
    zps = mn.astype(np.float32)
    s64 = scales.astype(np.float64)
    z64 = zps.astype(np.float64)
    denom = np.where(s64 == 0.0, 1.0, s64)
    normalized = (x - np.expand_dims(z64, axis)) / np.expand_dims(denom, axis)
    codes = _round_half_away(normalized)
    codes = np.clip(codes, 0, qmax)
    codes = np.where(np.expand_dims(s64 == 0.0, axis), 0.0, codes)
    return scales, zps, codes.astype(np.uint8)


def _col_chunks(cols: int, g: int) -> list[tuple[int, int]]:
    return [(j, min(j + g, cols)) for j in range(0, cols, g)]


def quantize(m: Matrix, params: QuantParams) -> QuantizedTensor:
    """Quantize a float matrix; the grouping-axis length need not divide G
    (the trailing group is simply shorter)."""
    m = np.asarray(m, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"expected 2-D matrix, got shape {m.shape}")
    check_finite(m, "quantize input")
    rows, cols = m.shape

    if params.bits == PASSTHROUGH_BITS:
        return QuantizedTensor(
            params=params,
            logical_rows=rows,
            logical_cols=cols,
            packed=m.astype("<f4").tobytes(),
            scales=np.zeros(0, dtype=np.float32),
            zero_points=np.zeros(0, dtype=np.float32),
            row_blocks=(rows,) if rows else (),
        )

    g = params.group_size
    if rows == 0 or cols == 0:
        return QuantizedTensor(params, rows, cols, b"", np.zeros(0, np.float32),
                               np.zeros(0, np.float32), ())

    if params.axis == "per_token":
        # Groups tile each row left to right; group index = row-major (row, chunk).
        chunk_scales, chunk_zps, chunk_bytes = [], [], []
        for lo, hi in _col_chunks(cols, g):
            s, z, codes = _affine_encode(m[:, lo:hi], axis=1, qmax=params.qmax)
            chunk_scales.append(s)
            chunk_zps.append(z)
            raw = pack_codes(codes, params.bits)
            bpg = len(raw) // rows
            chunk_bytes.append(np.frombuffer(raw, np.uint8).reshape(rows, bpg))
        scales = np.stack(chunk_scales, axis=1).ravel()
        zps = np.stack(chunk_zps, axis=1).ravel()
        packed = b"".join(
            bytes(chunk_bytes[j][r]) for r in range(rows) for j in range(len(chunk_bytes))
        )
        return QuantizedTensor(params, rows, cols, packed,
                               scales.astype(np.float32), zps.astype(np.float32),
                               (rows,))

    # per_channel: groups run down each column within a block of <= G rows;
    # group index = block-major (block, col).
    scales_parts, zps_parts, packed_parts, blocks = [], [], [], []
    for lo in range(0, rows, g):
        hi = min(lo + g, rows)
        block = m[lo:hi]
        s, z, codes = _affine_encode(block, axis=0, qmax=params.qmax)
        scales_parts.append(s)
        zps_parts.append(z)
        packed_parts.append(pack_codes(codes.T, params.bits))
        blocks.append(hi - lo)
    return QuantizedTensor(params, rows, cols, b"".join(packed_parts),
                           np.concatenate(scales_parts).astype(np.float32),
                           np.concatenate(zps_parts).astype(np.float32),
                           tuple(blocks))


def dequantize(t: QuantizedTensor) -> Matrix:
    """Reconstruct ``code * scale + zero_point`` as a float32 matrix."""
    rows, cols = t.logical_rows, t.logical_cols
    if t.params.bits == PASSTHROUGH_BITS:
        return np.frombuffer(t.packed, dtype="<f4").reshape(rows, cols).copy()
    if rows == 0 or cols == 0:
        return np.zeros((rows, cols), dtype=np.float32)

    g = t.params.group_size
    out = np.empty((rows, cols), dtype=np.float32)
    if t.params.axis == "per_token":
        chunks = _col_chunks(cols, g)
        gpr = len(chunks)
        scales = t.scales.astype(np.float64).reshape(rows, gpr)
        zps = t.zero_points.astype(np.float64).reshape(rows, gpr)
        per_byte = t.params.codes_per_byte
        # Groups are serialized row-major; each row holds gpr byte runs.
        bpg = [-(-(hi - lo) // per_byte) for lo, hi in chunks]
        row_bytes = sum(bpg)
        buf = np.frombuffer(t.packed, np.uint8).reshape(rows, row_bytes)
        for j, (lo, hi) in enumerate(chunks):
            bo = sum(bpg[:j])
            codes = unpack_codes(buf[:, bo:bo + bpg[j]].tobytes(), rows, hi - lo, t.params.bits)
            out[:, lo:hi] = (codes.astype(np.float64) * scales[:, j:j + 1]
                             + zps[:, j:j + 1]).astype(np.float32)
        return out

    row_lo = 0
    group_base = 0
    offset = 0
    per_byte = t.params.codes_per_byte
    for h in t.row_blocks:
        bpg = -(-h // per_byte)
        raw = t.packed[offset:offset + bpg * cols]
        codes = unpack_codes(raw, cols, h, t.params.bits)  # (cols, h)
        s = t.scales[group_base:group_base + cols].astype(np.float64)
        z = t.zero_points[group_base:group_base + cols].astype(np.float64)
        out[row_lo:row_lo + h] = (codes.T.astype(np.float64) * s + z).astype(np.float32)
        row_lo += h
        group_base += cols
        offset += bpg * cols
    return out


def concat_tensors(a: QuantizedTensor, b: QuantizedTensor) -> QuantizedTensor:
    """Stack two tensors quantized with the same params along the token axis.

    Valid because groups never span the boundary: block-major (per-channel)
    and row-major (per-token) group orders are both preserved by appending.
    """
    if a.params != b.params or a.logical_cols != b.logical_cols:
        raise ValueError("concat requires identical params and column count")
    return QuantizedTensor(
        params=a.params,
        logical_rows=a.logical_rows + b.logical_rows,
        logical_cols=a.logical_cols,
        packed=a.packed + b.packed,
        scales=np.concatenate([a.scales, b.scales]),
        zero_points=np.concatenate([a.zero_points, b.zero_points]),
        row_blocks=a.row_blocks + b.row_blocks,
    )


def append_rows(t: QuantizedTensor, new_rows: Matrix) -> QuantizedTensor:
    """Quantize a batch of token rows as fresh groups and concatenate.

    The batch is tiled into blocks of at most G rows, so per-channel groups
    never straddle an append boundary.  Single-row increments to per-channel
    tensors are intentionally unsupported outside this whole-batch path.
    """
    new_rows = np.asarray(new_rows, dtype=np.float32)
    if new_rows.ndim != 2 or new_rows.shape[1] != t.logical_cols:
        raise ValueError(
            f"append_rows: expected (*, {t.logical_cols}) rows, got {new_rows.shape}"
        )
    if new_rows.shape[0] == 0:
        return t
    return concat_tensors(t, quantize(new_rows, t.params))


def default_kv_params(bits: int, group_size: int = 64) -> tuple[QuantParams, QuantParams]:
    """(key, value) params: keys per channel, values per token."""
    return (QuantParams(bits, group_size, "per_channel"),
            QuantParams(bits, group_size, "per_token"))


def quantize_kv(k_rows: Matrix, v_rows: Matrix,
                params_k: QuantParams, params_v: QuantParams
                ) -> tuple[QuantizedTensor, QuantizedTensor]:
    """Quantize matched key/value token rows into two independent tensors."""
    k_rows = np.asarray(k_rows, dtype=np.float32)
    v_rows = np.asarray(v_rows, dtype=np.float32)
    if k_rows.shape[0] != v_rows.shape[0]:
        raise ValueError(
            f"row-count mismatch: keys have {k_rows.shape[0]} rows, values {v_rows.shape[0]}"
        )
    return quantize(k_rows, params_k), quantize(v_rows, params_v)


# --- binary serialization (cache dumps; layout documented in FORMATS.md) ---

_AXIS_TAG = {"per_channel": 0, "per_token": 1}
_AXIS_FROM_TAG = {v: k for k, v in _AXIS_TAG.items()}


def serialize_quantized(t: QuantizedTensor) -> bytes:
    head = struct.pack(
        "<BBIIIII",
        t.params.bits,
        _AXIS_TAG[t.params.axis],
        t.params.group_size,
        t.logical_rows,
        t.logical_cols,
        len(t.row_blocks),
        t.n_groups,
    )
    blocks = struct.pack(f"<{len(t.row_blocks)}I", *t.row_blocks)
    payload = (t.scales.astype("<f4").tobytes()
               + t.zero_points.astype("<f4").tobytes()
               + struct.pack("<Q", len(t.packed)) + t.packed)
    return head + blocks + payload


def deserialize_quantized(buf: bytes, offset: int = 0) -> tuple[QuantizedTensor, int]:
    bits, axis_tag, g, rows, cols, n_blocks, n_groups = struct.unpack_from("<BBIIIII", buf, offset)
    offset += struct.calcsize("<BBIIIII")
    blocks = struct.unpack_from(f"<{n_blocks}I", buf, offset)
    offset += 4 * n_blocks
    scales = np.frombuffer(buf, "<f4", n_groups, offset).copy()
    offset += 4 * n_groups
    zps = np.frombuffer(buf, "<f4", n_groups, offset).copy()
    offset += 4 * n_groups
    (packed_len,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    packed = bytes(buf[offset:offset + packed_len])
    offset += packed_len
    t = QuantizedTensor(QuantParams(bits, g, _AXIS_FROM_TAG[axis_tag]),
                        rows, cols, packed, scales, zps, tuple(blocks))
    return t, offset
