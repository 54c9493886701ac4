"""KVTR trace-file writer.

Implements the byte layout documented in the engine repo's FORMATS.md; the
exporter talks to the engine only through this file format, so the layout
is reproduced here rather than imported.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"KVTR"
VERSION = 1
DTYPE_F32 = 1
_HEADER = "<4sH6IH"


def write_trace_arrays(path, prompt_k: np.ndarray, prompt_v: np.ndarray,
                       queries: np.ndarray, step_k: np.ndarray,
                       step_v: np.ndarray) -> None:
    """Write one trace.

    Shapes: prompt_k/v (layers, kv_heads, prompt_len, d);
    queries (steps, layers, heads, d); step_k/v (steps, layers, kv_heads, d).
    """
    layers, kv_heads, prompt_len, d = prompt_k.shape
    steps, _, heads, _ = queries.shape
    if heads % kv_heads != 0:
        raise ValueError(f"head_count {heads} not a multiple of kv_head_count {kv_heads}")
    for name, arr in (("prompt_v", prompt_v), ("queries", queries),
                      ("step_k", step_k), ("step_v", step_v)):
        if not np.isfinite(arr).all():
            raise ValueError(f"{name}: non-finite capture")
    if not np.isfinite(prompt_k).all():
        raise ValueError("prompt_k: non-finite capture")

    with open(Path(path), "wb") as f:
        f.write(struct.pack(_HEADER, MAGIC, VERSION, layers, heads, kv_heads,
                            d, prompt_len, steps, DTYPE_F32))
        for layer in range(layers):
            for kvh in range(kv_heads):
                f.write(prompt_k[layer, kvh].astype("<f4").tobytes())
                f.write(prompt_v[layer, kvh].astype("<f4").tobytes())
        for s in range(steps):
            for layer in range(layers):
                f.write(queries[s, layer].astype("<f4").tobytes())
                for kvh in range(kv_heads):
                    f.write(step_k[s, layer, kvh].astype("<f4").tobytes())
                    f.write(step_v[s, layer, kvh].astype("<f4").tobytes())
