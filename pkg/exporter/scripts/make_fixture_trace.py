"""Regenerate tests/data/real_tiny.kvtr in the engine repo.

Builds the deterministic tiny rotary LM used by the exporter tests, runs a
48-token prompt for 48 greedy decode steps, and writes the trace the
engine's acceptance suite replays.  Run from the repo root:

    python exporter/scripts/make_fixture_trace.py
"""

from pathlib import Path
import sys
import tempfile

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from kvtrace_export import ExportSpec, export_trace  # noqa: E402


def main() -> None:
    from transformers import LlamaConfig, LlamaForCausalLM

    repo_root = Path(__file__).resolve().parents[2]
    out = repo_root / "tests" / "data" / "real_tiny.kvtr"
    out.parent.mkdir(parents=True, exist_ok=True)

    torch.manual_seed(1234)
    cfg = LlamaConfig(hidden_size=64, intermediate_size=128, num_hidden_layers=2,
                      num_attention_heads=4, num_key_value_heads=2,
                      vocab_size=256, max_position_embeddings=512)
    model = LlamaForCausalLM(cfg)

    with tempfile.TemporaryDirectory() as tmp:
        model.save_pretrained(tmp)
        prompt = Path(tmp) / "prompt.txt"
        ids = [(7 * i + 3) % 256 for i in range(96)]
        prompt.write_text(" ".join(str(i) for i in ids))
        summary = export_trace(ExportSpec(
            model=tmp, prompt_path=str(prompt), steps=48, out_path=str(out)))
    print(f"wrote {out} ({out.stat().st_size} bytes): {summary}")


if __name__ == "__main__":
    main()
