"""Command-line front end.

Subcommands:
    run       execute a sweep from a config file (flags override keys)
    gen-trace write a synthetic trace file
    validate  structural checks on a trace file
    report    aggregate metrics CSVs into a comparison table

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .runner import ExperimentConfig, load_config, run_experiment, summarize_csvs
from .tracefile import SynthSpec, generate_synthetic_trace, validate_trace, write_trace

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="logkv", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment sweep")
    run.add_argument("--config", help="key=value config file")
    run.add_argument("--policy", action="append", dest="policies")
    run.add_argument("--bits", action="append", type=int)
    run.add_argument("--budget", action="append", type=int, dest="budgets")
    run.add_argument("--mode", action="append", dest="modes")
    run.add_argument("--trace", action="append", dest="traces")
    run.add_argument("--seed", type=int)
    run.add_argument("--out", dest="out_dir")
    run.add_argument("--synthetic-count", type=int, dest="synthetic_count")

    gen = sub.add_parser("gen-trace", help="write a synthetic trace")
    gen.add_argument("--out", required=True)
    gen.add_argument("--prompt-len", type=int, default=192)
    gen.add_argument("--decode-steps", type=int, default=64)
    gen.add_argument("--head-dim", type=int, default=32)
    gen.add_argument("--spike-model", default="log_uniform_spikes")
    gen.add_argument("--spikes", type=int, default=8)
    gen.add_argument("--seed", type=int, default=0)

    val = sub.add_parser("validate", help="check a trace file")
    val.add_argument("path")

    rep = sub.add_parser("report", help="aggregate metrics CSVs")
    rep.add_argument("csvs", nargs="+")
    rep.add_argument("--out", help="also write the table as CSV")
    return p


def _cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {k: tuple(v) for k, v in (
        ("policies", args.policies), ("bits", args.bits),
        ("budgets", args.budgets), ("modes", args.modes),
        ("traces", args.traces)) if v}
    for key in ("seed", "out_dir", "synthetic_count"):
        if getattr(args, key) is not None:
            overrides[key] = getattr(args, key)
    cfg = replace(cfg, **overrides)
    try:
        cfg.validate()
    except ValueError as e:
        print(f"logkv run: {e}", file=sys.stderr)
        return EXIT_USAGE
    try:
        csv_path, reports = run_experiment(cfg)
    except (ValueError, OSError) as e:
        print(f"logkv run: {e}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {csv_path} ({len(reports)} stream runs)")
    return EXIT_OK


def _cmd_gen_trace(args) -> int:
    try:
        spec = SynthSpec(prompt_len=args.prompt_len, decode_steps=args.decode_steps,
                         head_dim=args.head_dim, spike_model=args.spike_model,
                         seed=args.seed, n_spikes=args.spikes)
        trace = generate_synthetic_trace(spec)
    except ValueError as e:
        print(f"logkv gen-trace: {e}", file=sys.stderr)
        return EXIT_USAGE
    write_trace(trace, args.out)
    print(f"wrote {args.out}: prompt_len={trace.prompt_len} "
          f"decode_steps={trace.decode_steps} head_dim={trace.head_dim}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    report = validate_trace(args.path)
    h = report["header"]
    if h:
        dims = " ".join(f"{k}={v}" for k, v in h.items() if k != "magic")
        print(f"{args.path}: {dims}")
    for err in report["errors"]:
        print(f"{args.path}: error: {err}", file=sys.stderr)
    return EXIT_DATA if report["errors"] else EXIT_OK


def _cmd_report(args) -> int:
    try:
        rows = summarize_csvs(args.csvs)
    except (ValueError, OSError) as e:
        print(f"logkv report: {e}", file=sys.stderr)
        return EXIT_DATA
    header = ("policy", "mode", "bits", "budget", "streams",
              "mean_coverage", "mean_l1_error", "mean_compression_ratio")
    widths = [max(len(h), 14) for h in header]
    print("  ".join(h.ljust(w) for h, w in zip(header, widths)))
    lines = [",".join(header)]
    for r in rows:
        cells = [str(r["policy"]), str(r["mode"]), str(r["bits"]), str(r["budget"]),
                 str(r["streams"]), f"{r['mean_coverage']:.6g}",
                 f"{r['mean_l1_error']:.6g}", f"{r['mean_compression_ratio']:.6g}"]
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
        lines.append(",".join(cells))
    if args.out:
        Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "gen-trace": _cmd_gen_trace,
                "validate": _cmd_validate, "report": _cmd_report}
    return handlers[args.command](args)


if __name__ == "__main__":
    raise SystemExit(main())
