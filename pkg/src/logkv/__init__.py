"""Trace-driven KV-cache compression workbench.

Replays recorded attention workloads through compressed caches (log-spaced
2-bit quantization plus window, sink, and heavy-hitter baselines, each in
quantize-rest or evict-rest mode) and measures attention fidelity, token
coverage, and compression ratio against a full-precision oracle.
"""

from .cache import CompressedKVCache, StepResult, oracle_attend
from .metrics import (
    MetricsReport,
    SpikeStats,
    StepMetrics,
    attention_l1_error,
    compression_ratio,
    compression_ratio_with_overhead,
    coverage_comparison,
    spike_histogram,
    token_coverage,
)
from .policies import (
    PolicyConfig,
    SelectionState,
    config_for_budget,
    h2o_append,
    h2o_select,
    kivi_append,
    logquant_append,
    policy_append,
    streaming_append,
    update_h2o_scores,
)
from .quantize import (
    QuantParams,
    QuantizedTensor,
    append_rows,
    dequantize,
    default_kv_params,
    quantize,
    quantize_kv,
)
from .replay import HeadStream, StepObservation, iter_head_streams, replay_stream
from .runner import ExperimentConfig, load_config, run_experiment, summarize_csvs
from .tensor import AttentionConfig, Matrix, as_matrix, attention, softmax
from .tracefile import (
    SynthSpec,
    TraceFile,
    generate_synthetic_trace,
    read_trace,
    validate_trace,
    write_trace,
)

__version__ = "0.1.0"
