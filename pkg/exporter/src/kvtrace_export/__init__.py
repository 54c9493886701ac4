"""Attention-workload exporter: greedy-decodes a small causal LM and writes
its post-rotary K/V, decode queries, and attention rows in the KVTR trace
format consumed by the compression engine."""

from .capture import ExportSpec, export_trace, read_prompt_ids
from .writer import write_trace_arrays

__version__ = "0.1.0"
