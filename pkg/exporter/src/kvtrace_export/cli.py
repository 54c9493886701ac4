"""Export attention traces from a pretrained causal LM.

    kvtrace-export --model <id-or-path> --prompt <file> --steps N \
        [--layers 0,1] [--kv-heads 0] --out trace.kvtr \
        [--attention-out probs.npz]

Exit codes: 0 success, 1 usage error, 2 capture/model error.
"""

from __future__ import annotations

import argparse
import sys


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kvtrace-export", description=__doc__)
    parser.add_argument("--model", required=True)
    parser.add_argument("--prompt", required=True)
    parser.add_argument("--steps", type=int, required=True)
    parser.add_argument("--layers", type=_int_list, default=None)
    parser.add_argument("--kv-heads", type=_int_list, default=None)
    parser.add_argument("--out", required=True)
    parser.add_argument("--attention-out", default=None)
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 1

    from .capture import ExportSpec, export_trace

    try:
        spec = ExportSpec(model=args.model, prompt_path=args.prompt,
                          steps=args.steps, layers=args.layers,
                          kv_heads=args.kv_heads, out_path=args.out,
                          attention_out=args.attention_out)
        summary = export_trace(spec)
    except (ValueError, OSError, RuntimeError) as e:
        print(f"kvtrace-export: {e}", file=sys.stderr)
        return 2
    print(f"wrote {summary['out_path']}: prompt_len={summary['prompt_len']} "
          f"steps={summary['decode_steps']} layers={len(summary['layers'])} "
          f"heads={summary['heads']}/{summary['kv_heads']} d={summary['head_dim']}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
