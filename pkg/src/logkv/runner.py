"""Experiment orchestration: sweep (trace, policy, bits, budget, mode)
combinations, replay each through a compressed cache, and write one metrics
CSV per experiment.

Tasks are embarrassingly parallel (one cache per stream); results are merged
in sorted task order before writing, so a fixed (config, seed) pair produces
byte-identical output regardless of thread count.  ``LOGKV_THREADS`` caps
the worker pool.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .metrics import MetricsReport, StepMetrics
from .policies import MODES, POLICY_KINDS, config_for_budget
from .quantize import PASSTHROUGH_BITS
from .replay import iter_head_streams, replay_stream
from .tracefile import SPIKE_MODELS, SynthSpec, TraceFile, generate_synthetic_trace, read_trace

CSV_HEADER = ("trace_id,policy,mode,bits,budget,step,coverage,l1_error,"
              "fp_count,q_count,compression_ratio")

_VALID_BITS = (2, 4, PASSTHROUGH_BITS)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a sweep needs; defaults mirror the reference setup
    (G=64, budgets around 128-256, 1/sqrt(d) scaling)."""

    traces: tuple[str, ...] = ()
    policies: tuple[str, ...] = ("logquant", "kivi")
    bits: tuple[int, ...] = (2,)
    budgets: tuple[int, ...] = (128,)
    modes: tuple[str, ...] = ("quantize_rest",)
    group_size: int = 64
    scale: float | None = None  # None -> 1/sqrt(head_dim)
    seed: int = 0
    out_dir: str = "out"
    fp_element_bytes: int = 2
    exclude_first: int = 2
    sink_count: int | None = None  # streaming_llm: None -> 4
    h2o_recent_window: int = 0
    kivi_release_batch: int | None = None
    gqa_mode: str = "mean"
    # synthetic workload knobs, used when no trace paths are given
    synthetic_count: int = 0
    prompt_len: int = 192
    decode_steps: int = 64
    head_dim: int = 32
    spike_model: str = "log_uniform_spikes"
    n_spikes: int = 8

    def validate(self) -> None:
        for p in self.policies:
            if p not in POLICY_KINDS:
                raise ValueError(f"unknown policy {p!r}")
        for m in self.modes:
            if m not in MODES:
                raise ValueError(f"unknown mode {m!r}")
        for b in self.bits:
            if b not in _VALID_BITS:
                raise ValueError(f"bits must be in {_VALID_BITS}, got {b}")
        for r in self.budgets:
            if r < 3:
                raise ValueError(f"budget must be >= 3, got {r}")
        if not self.traces and self.synthetic_count < 1:
            raise ValueError("no traces given and synthetic_count < 1")
        if self.spike_model not in SPIKE_MODELS:
            raise ValueError(f"unknown spike model {self.spike_model!r}")
        if self.gqa_mode not in ("mean", "per_head"):
            raise ValueError(f"unknown gqa_mode {self.gqa_mode!r}")


_LIST_KEYS = {"traces": str, "policies": str, "modes": str,
              "bits": int, "budgets": int}
_SCALAR_KEYS = {
    "group_size": int, "seed": int, "out_dir": str, "fp_element_bytes": int,
    "exclude_first": int, "h2o_recent_window": int, "gqa_mode": str,
    "synthetic_count": int, "prompt_len": int, "decode_steps": int,
    "head_dim": int, "spike_model": str, "n_spikes": int,
}


def load_config(path) -> ExperimentConfig:
    """Parse a flat key=value config file (INI-style; '#' comments)."""
    cfg = ExperimentConfig()
    updates: dict = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _LIST_KEYS:
            conv = _LIST_KEYS[key]
            updates[key] = tuple(conv(v.strip()) for v in value.split(",") if v.strip())
        elif key in _SCALAR_KEYS:
            updates[key] = _SCALAR_KEYS[key](value)
        elif key == "scale":
            updates[key] = None if value == "rsqrt" else float(value)
        elif key == "sink_count":
            updates[key] = None if value == "default" else int(value)
        elif key == "kivi_release_batch":
            updates[key] = None if value in ("none", "") else int(value)
        else:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return replace(cfg, **updates)


def _load_traces(cfg: ExperimentConfig) -> list[TraceFile]:
    traces = [read_trace(p) for p in cfg.traces]
    for i in range(cfg.synthetic_count):
        spec = SynthSpec(prompt_len=cfg.prompt_len, decode_steps=cfg.decode_steps,
                         head_dim=cfg.head_dim, spike_model=cfg.spike_model,
                         seed=cfg.seed + i, n_spikes=cfg.n_spikes)
        traces.append(generate_synthetic_trace(spec))
    return traces


@dataclass(frozen=True)
class _Task:
    trace_index: int
    stream_index: int
    stream_id: str
    policy: str
    bits: int
    budget: int
    mode: str

    def sort_key(self):
        return (self.trace_index, self.stream_index, self.policy,
                self.bits, self.budget, self.mode)


def _worker_count() -> int:
    env = os.environ.get("LOGKV_THREADS")
    if env:
        return max(1, int(env))
    return min(8, os.cpu_count() or 1)


def run_experiment(cfg: ExperimentConfig) -> tuple[Path, list[MetricsReport]]:
    """Run the sweep; returns (csv path, reports) with reports in task order."""
    cfg.validate()
    traces = _load_traces(cfg)
    streams = []  # flat list aligned with (trace_index, stream_index)
    tasks: list[_Task] = []
    for ti, trace in enumerate(traces):
        per_trace = list(iter_head_streams(trace, cfg.gqa_mode))
        for si, stream in enumerate(per_trace):
            for policy in cfg.policies:
                for bits in cfg.bits:
                    for budget in cfg.budgets:
                        for mode in cfg.modes:
                            tasks.append(_Task(ti, si, stream.stream_id,
                                               policy, bits, budget, mode))
            streams.append(((ti, si), stream))
    tasks.sort(key=_Task.sort_key)
    stream_by_key = {key: s for key, s in streams}

    def run_task(task: _Task) -> MetricsReport:
        stream = stream_by_key[(task.trace_index, task.stream_index)]
        policy = config_for_budget(
            task.policy, task.budget, mode=task.mode,
            sink_count=cfg.sink_count if task.policy == "streaming_llm" else None,
            recent_window=cfg.h2o_recent_window if task.policy == "h2o" else 0,
            release_batch=cfg.kivi_release_batch
            if task.policy in ("kivi", "streaming_llm") else None,
        )
        report = MetricsReport(trace_id=task.stream_id, policy=task.policy,
                               mode=task.mode, bits=task.bits,
                               budget=task.budget, seed=cfg.seed)
        for obs in replay_stream(stream, policy, bits=task.bits,
                                 group_size=cfg.group_size, scale=cfg.scale,
                                 fp_element_bytes=cfg.fp_element_bytes,
                                 exclude_first=cfg.exclude_first):
            report.per_step.append(StepMetrics(
                step=obs.step, coverage=obs.coverage, l1_error=obs.l1_error,
                fp_count=obs.fp_count, q_count=obs.q_count,
                compression_ratio=obs.compression_ratio))
        return report.finalize()

    workers = _worker_count()
    if workers == 1 or len(tasks) == 1:
        reports = [run_task(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            reports = list(pool.map(run_task, tasks))

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "metrics.csv"
    write_metrics_csv(csv_path, reports)
    return csv_path, reports


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def write_metrics_csv(path, reports: list[MetricsReport]) -> None:
    """Fixed-header CSV; per-step rows plus one aggregate row (step = -1)
    carrying the mean coverage/error and final counts."""
    lines = [CSV_HEADER]
    for r in reports:
        prefix = f"{r.trace_id},{r.policy},{r.mode},{r.bits},{r.budget}"
        for s in r.per_step:
            lines.append(f"{prefix},{s.step},{_fmt(s.coverage)},{_fmt(s.l1_error)},"
                         f"{s.fp_count},{s.q_count},{_fmt(s.compression_ratio)}")
        if r.aggregate:
            a = r.aggregate
            lines.append(f"{prefix},-1,{_fmt(a['mean_coverage'])},"
                         f"{_fmt(a['mean_l1_error'])},{int(a['final_fp_count'])},"
                         f"{int(a['final_q_count'])},"
                         f"{_fmt(a['final_compression_ratio'])}")
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("ascii"))


def summarize_csvs(paths) -> list[dict]:
    """Aggregate one or more metrics CSVs into per-configuration means
    (aggregate rows only), sorted for stable output."""
    groups: dict[tuple, list[tuple[float, float, float]]] = {}
    for path in paths:
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != CSV_HEADER:
            raise ValueError(f"{path}: unexpected CSV header")
        for line in lines[1:]:
            cells = line.split(",")
            if cells[5] != "-1":
                continue
            key = (cells[1], cells[2], int(cells[3]), int(cells[4]))
            groups.setdefault(key, []).append(
                (float(cells[6]), float(cells[7]), float(cells[10])))
    rows = []
    for key in sorted(groups):
        vals = np.asarray(groups[key])
        rows.append({
            "policy": key[0], "mode": key[1], "bits": key[2], "budget": key[3],
            "streams": len(groups[key]),
            "mean_coverage": float(vals[:, 0].mean()),
            "mean_l1_error": float(vals[:, 1].mean()),
            "mean_compression_ratio": float(vals[:, 2].mean()),
        })
    return rows
