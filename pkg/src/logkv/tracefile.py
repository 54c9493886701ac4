"""Binary attention traces: a recorded workload of prompt K/V plus per-step
decode queries and generated-token K/V rows.

Layout (all little-endian, see FORMATS.md):

    header:  magic "KVTR" | version u16 | layer_count u32 | head_count u32
             | kv_head_count u32 | head_dim u32 | prompt_len u32
             | decode_steps u32 | dtype u16 (1 = float32)
    prompt:  for layer, for kv_head: K[prompt_len x d], V[prompt_len x d]
    steps:   for step, for layer: query[d] per head,
             then (k[d], v[d]) per kv_head

The synthetic generator plants key vectors so the oracle attention
reproduces a chosen pattern: near-uniform, recency-decayed, or spikes whose
distances from the prompt end are log-uniform (density proportional to
1/distance) with optional heavy mass on positions 0-1.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import check_finite

MAGIC = b"KVTR"
VERSION = 1
DTYPE_F32 = 1
_HEADER = "<4sH6IH"
HEADER_SIZE = struct.calcsize(_HEADER)

SPIKE_MODELS = ("uniform", "log_uniform_spikes", "recency_decay")


@dataclass
class TraceFile:
    """In-memory trace. Arrays are float32:

    prompt_k/prompt_v: (layers, kv_heads, prompt_len, d)
    queries:           (steps, layers, heads, d)
    step_k/step_v:     (steps, layers, kv_heads, d)
    """

    head_dim: int
    prompt_len: int
    decode_steps: int
    layer_count: int
    head_count: int
    kv_head_count: int
    prompt_k: np.ndarray
    prompt_v: np.ndarray
    queries: np.ndarray
    step_k: np.ndarray
    step_v: np.ndarray
    trace_id: str = ""
    version: int = VERSION

    def __post_init__(self) -> None:
        if self.head_count % self.kv_head_count != 0:
            raise ValueError(
                f"head_count {self.head_count} must be a multiple of "
                f"kv_head_count {self.kv_head_count}"
            )
        expected = {
            "prompt_k": (self.layer_count, self.kv_head_count, self.prompt_len, self.head_dim),
            "prompt_v": (self.layer_count, self.kv_head_count, self.prompt_len, self.head_dim),
            "queries": (self.decode_steps, self.layer_count, self.head_count, self.head_dim),
            "step_k": (self.decode_steps, self.layer_count, self.kv_head_count, self.head_dim),
            "step_v": (self.decode_steps, self.layer_count, self.kv_head_count, self.head_dim),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if tuple(arr.shape) != shape:
                raise ValueError(f"{name}: expected shape {shape}, got {tuple(arr.shape)}")
            check_finite(arr.reshape(-1, self.head_dim), name)

    @property
    def total_tokens(self) -> int:
        return self.prompt_len + self.decode_steps


def write_trace(trace: TraceFile, path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(struct.pack(
            _HEADER, MAGIC, trace.version, trace.layer_count, trace.head_count,
            trace.kv_head_count, trace.head_dim, trace.prompt_len,
            trace.decode_steps, DTYPE_F32,
        ))
        for layer in range(trace.layer_count):
            for kvh in range(trace.kv_head_count):
                f.write(trace.prompt_k[layer, kvh].astype("<f4").tobytes())
                f.write(trace.prompt_v[layer, kvh].astype("<f4").tobytes())
        for s in range(trace.decode_steps):
            for layer in range(trace.layer_count):
                f.write(trace.queries[s, layer].astype("<f4").tobytes())
                for kvh in range(trace.kv_head_count):
                    f.write(trace.step_k[s, layer, kvh].astype("<f4").tobytes())
                    f.write(trace.step_v[s, layer, kvh].astype("<f4").tobytes())


def _expected_payload(layers: int, heads: int, kv_heads: int, d: int,
                      prompt_len: int, steps: int) -> int:
    prompt = layers * kv_heads * 2 * prompt_len * d
    per_step = layers * (heads * d + kv_heads * 2 * d)
    return 4 * (prompt + steps * per_step)


def read_trace(path) -> TraceFile:
    """Load and fully validate a trace file."""
    path = Path(path)
    blob = path.read_bytes()
    report = validate_blob(blob)
    if report["errors"]:
        raise ValueError(f"{path}: {report['errors'][0]}")
    h = report["header"]
    layers, heads, kv_heads = h["layer_count"], h["head_count"], h["kv_head_count"]
    d, prompt_len, steps = h["head_dim"], h["prompt_len"], h["decode_steps"]
    data = np.frombuffer(blob, "<f4", offset=HEADER_SIZE)

    n_prompt = layers * kv_heads * 2 * prompt_len * d
    prompt = data[:n_prompt].reshape(layers, kv_heads, 2, prompt_len, d)
    prompt_k = np.ascontiguousarray(prompt[:, :, 0])
    prompt_v = np.ascontiguousarray(prompt[:, :, 1])

    rest = data[n_prompt:].reshape(steps, layers, (heads + 2 * kv_heads), d)
    queries = np.ascontiguousarray(rest[:, :, :heads])
    kv = rest[:, :, heads:].reshape(steps, layers, kv_heads, 2, d)
    step_k = np.ascontiguousarray(kv[:, :, :, 0])
    step_v = np.ascontiguousarray(kv[:, :, :, 1])

    return TraceFile(
        head_dim=d, prompt_len=prompt_len, decode_steps=steps,
        layer_count=layers, head_count=heads, kv_head_count=kv_heads,
        prompt_k=prompt_k, prompt_v=prompt_v, queries=queries,
        step_k=step_k, step_v=step_v, trace_id=path.stem, version=h["version"],
    )


def validate_blob(blob: bytes) -> dict:
    """Structural checks on raw trace bytes; returns header + error strings
    (each naming the offending offset where applicable)."""
    errors: list[str] = []
    header: dict = {}
    if len(blob) < HEADER_SIZE:
        return {"header": header,
                "errors": [f"file too short for header: {len(blob)} < {HEADER_SIZE} bytes"]}
    magic, version, layers, heads, kv_heads, d, prompt_len, steps, dtype = \
        struct.unpack_from(_HEADER, blob)
    header = {"magic": magic.decode("latin1"), "version": version,
              "layer_count": layers, "head_count": heads,
              "kv_head_count": kv_heads, "head_dim": d,
              "prompt_len": prompt_len, "decode_steps": steps, "dtype": dtype}
    if magic != MAGIC:
        errors.append(f"bad magic {magic!r} at offset 0")
        return {"header": header, "errors": errors}
    if version != VERSION:
        errors.append(f"unsupported version {version} at offset 4")
    if dtype != DTYPE_F32:
        errors.append(f"unsupported dtype tag {dtype} at offset {HEADER_SIZE - 2}")
    if min(layers, heads, kv_heads, d) < 1:
        errors.append("zero-sized dimension in header")
    elif heads % kv_heads != 0:
        errors.append(f"head_count {heads} not a multiple of kv_head_count {kv_heads}")
    if errors:
        return {"header": header, "errors": errors}

    expected = _expected_payload(layers, heads, kv_heads, d, prompt_len, steps)
    actual = len(blob) - HEADER_SIZE
    if actual < expected:
        errors.append(f"payload short by {expected - actual} bytes "
                      f"(expected {expected} after header)")
    elif actual > expected:
        errors.append(f"payload long by {actual - expected} bytes "
                      f"(expected {expected} after header)")
    if errors:
        return {"header": header, "errors": errors}

    data = np.frombuffer(blob, "<f4", offset=HEADER_SIZE)
    sample = data if data.size <= 65536 else data[:: max(1, data.size // 65536)]
    bad = np.nonzero(~np.isfinite(sample))[0]
    if bad.size:
        stride = max(1, data.size // 65536) if data.size > 65536 else 1
        flat = int(bad[0]) * stride
        errors.append(f"non-finite value at byte offset {HEADER_SIZE + 4 * flat}")
    return {"header": header, "errors": errors}


def validate_trace(path) -> dict:
    path = Path(path)
    if not path.exists():
        return {"header": {}, "errors": [f"no such file: {path}"]}
    return validate_blob(path.read_bytes())


# --- synthetic workload generation -----------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of a planted single-head attention workload.

    ``log_uniform_spikes`` draws spike distances from the trace end with
    density proportional to 1/distance (uniform in log space), optionally
    widening each spike into a short run of ``spike_width`` consecutive
    boosted positions, plus heavy mass on the first ``sink_tokens`` positions
    and a recency bump decaying over ``recency_tau`` tokens.
    """

    prompt_len: int
    decode_steps: int
    head_dim: int
    spike_model: str = "log_uniform_spikes"
    seed: int = 0
    n_spikes: int = 8
    spike_width: int = 1
    spike_strength: float = 6.0
    sink_strength: float = 5.0
    sink_tokens: int = 2
    recency_strength: float = 2.0
    recency_tau: float = 8.0
    key_noise: float = 0.5  # full-rank key variation (spiked models)
    base_noise: float = 0.02  # key variation for the uniform model
    query_jitter: float = 0.05
    strength_jitter: float = 0.25  # fractional spread of per-spike strength
    background_jitter: float = 0.5  # logit sd of non-spike positions
    min_spike_distance: int = 16  # spikes spawn behind the recency band
    max_spike_distance: int | None = None  # default: full prompt

    def __post_init__(self) -> None:
        if self.prompt_len < 4 or self.decode_steps < 1 or self.head_dim < 2:
            raise ValueError("degenerate dims for synthetic trace")
        if self.spike_model not in SPIKE_MODELS:
            raise ValueError(f"unknown spike model {self.spike_model!r}; "
                             f"choose from {SPIKE_MODELS}")
        if self.spike_width < 1:
            raise ValueError("spike_width must be >= 1")


def _logit_profile(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """Target logit boost per position; softmax of (boost + noise) is the
    intended oracle attention shape."""
    n = spec.prompt_len + spec.decode_steps
    c = np.zeros(n, dtype=np.float64)
    distance_from_end = (n - 1) - np.arange(n)
    if spec.spike_model == "uniform":
        return c
    if spec.spike_model == "recency_decay":
        return -distance_from_end / spec.recency_tau
    # log_uniform_spikes: spike distances behind the prompt end drawn with
    # density proportional to 1/distance (uniform in log space), so spikes
    # thin out with distance and recede as decoding advances; each spike may
    # span spike_width positions, with per-spike strength spread so spike
    # magnitudes vary the way observed attention scores do.
    c += rng.normal(scale=spec.background_jitter, size=n)
    max_dist = spec.max_spike_distance or (spec.prompt_len - 1 - spec.sink_tokens)
    max_dist = min(max_dist, spec.prompt_len - 1 - spec.sink_tokens)
    lo_dist = min(spec.min_spike_distance, max_dist - 1)
    log_lo = math.log(max(1.0, float(lo_dist)))
    log_hi = math.log(max(2.0, float(max_dist)))
    distances = np.exp(rng.uniform(log_lo, log_hi, size=spec.n_spikes)).astype(int)
    strengths = spec.spike_strength * rng.uniform(1.0 - spec.strength_jitter,
                                                  1.0 + spec.strength_jitter,
                                                  size=spec.n_spikes)
    for dist, strength in zip(distances, strengths):
        pos = spec.prompt_len - 1 - int(dist)
        lo = max(spec.sink_tokens, pos - spec.spike_width + 1)
        c[lo:pos + 1] = strength
    if spec.sink_strength > 0:
        c[:spec.sink_tokens] = spec.sink_strength
    # recency bump decaying from the final position; at any decode step the
    # newest existing tokens carry the highest bump
    c += spec.recency_strength * np.exp(-distance_from_end / spec.recency_tau)
    return c


def generate_synthetic_trace(spec: SynthSpec) -> TraceFile:
    """Single-layer single-head trace whose oracle attention follows the
    spike model in expectation; deterministic in the seed."""
    rng = np.random.default_rng(spec.seed)
    n = spec.prompt_len + spec.decode_steps
    d = spec.head_dim

    carrier = rng.normal(size=d)
    carrier /= np.linalg.norm(carrier)
    boosts = _logit_profile(spec, rng)

    noise_scale = spec.base_noise if spec.spike_model == "uniform" else spec.key_noise
    noise = rng.normal(scale=noise_scale, size=(n, d))
    noise -= np.outer(noise @ carrier, carrier)  # keep boosts exact along the carrier
    keys = (np.outer(boosts, carrier) + noise).astype(np.float32)
    values = rng.normal(size=(n, d)).astype(np.float32)

    # Queries point along the carrier (scaled to cancel the 1/sqrt(d) logit
    # scaling) with a small per-step wobble so scores vary across steps.
    queries = np.empty((spec.decode_steps, d), dtype=np.float32)
    for s in range(spec.decode_steps):
        direction = carrier + rng.normal(scale=spec.query_jitter, size=d)
        direction /= np.linalg.norm(direction)
        queries[s] = (math.sqrt(d) * direction).astype(np.float32)

    return TraceFile(
        head_dim=d, prompt_len=spec.prompt_len, decode_steps=spec.decode_steps,
        layer_count=1, head_count=1, kv_head_count=1,
        prompt_k=keys[:spec.prompt_len].reshape(1, 1, spec.prompt_len, d),
        prompt_v=values[:spec.prompt_len].reshape(1, 1, spec.prompt_len, d),
        queries=queries.reshape(spec.decode_steps, 1, 1, d),
        step_k=keys[spec.prompt_len:].reshape(spec.decode_steps, 1, 1, d),
        step_v=values[spec.prompt_len:].reshape(spec.decode_steps, 1, 1, d),
        trace_id=f"synthetic-{spec.spike_model}-s{spec.seed}",
    )
