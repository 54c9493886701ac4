import subprocess
import sys

import numpy as np
import pytest

from kvtrace_export import ExportSpec, export_trace
from kvtrace_export.cli import main


def run_validate(path):
    return subprocess.run([sys.executable, "-m", "logkv.cli", "validate", str(path)],
                          capture_output=True, text=True)


class TestExport:
    def test_format_conformance(self, tiny_model_dir, prompt_file, tmp_path):
        out = tmp_path / "t.kvtr"
        summary = export_trace(ExportSpec(model=tiny_model_dir,
                                          prompt_path=prompt_file, steps=4,
                                          out_path=str(out)))
        assert summary["prompt_len"] == 48
        proc = run_validate(out)
        assert proc.returncode == 0, proc.stderr
        assert "prompt_len=48" in proc.stdout
        assert "decode_steps=4" in proc.stdout

    def test_deterministic_bytes(self, tiny_model_dir, prompt_file, tmp_path):
        blobs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.kvtr"
            export_trace(ExportSpec(model=tiny_model_dir, prompt_path=prompt_file,
                                    steps=3, out_path=str(out)))
            blobs.append(out.read_bytes())
        assert blobs[0] == blobs[1]

    def test_layer_and_head_subset(self, tiny_model_dir, prompt_file, tmp_path):
        out = tmp_path / "sub.kvtr"
        summary = export_trace(ExportSpec(
            model=tiny_model_dir, prompt_path=prompt_file, steps=2,
            layers=[1], kv_heads=[0], out_path=str(out)))
        assert summary["layers"] == [1]
        assert summary["heads"] == 2 and summary["kv_heads"] == 1  # group of 2
        proc = run_validate(out)
        assert proc.returncode == 0
        assert "layer_count=1" in proc.stdout
        assert "head_count=2" in proc.stdout

    def test_gqa_ratio_matches_model(self, tiny_model_dir, prompt_file, tmp_path):
        out = tmp_path / "g.kvtr"
        summary = export_trace(ExportSpec(model=tiny_model_dir,
                                          prompt_path=prompt_file, steps=2,
                                          out_path=str(out)))
        assert summary["heads"] == 4 and summary["kv_heads"] == 2

    def test_bad_selection_rejected(self, tiny_model_dir, prompt_file, tmp_path):
        with pytest.raises(ValueError, match="layer selection"):
            export_trace(ExportSpec(model=tiny_model_dir, prompt_path=prompt_file,
                                    steps=1, layers=[5],
                                    out_path=str(tmp_path / "x.kvtr")))

    def test_empty_prompt_rejected(self, tiny_model_dir, tmp_path):
        empty = tmp_path / "empty.txt"
        empty.write_text("")
        with pytest.raises(ValueError, match="empty"):
            export_trace(ExportSpec(model=tiny_model_dir, prompt_path=str(empty),
                                    steps=1, out_path=str(tmp_path / "x.kvtr")))

    def test_cli(self, tiny_model_dir, prompt_file, tmp_path):
        out = tmp_path / "cli.kvtr"
        code = main(["--model", tiny_model_dir, "--prompt", prompt_file,
                     "--steps", "2", "--layers", "0,1", "--out", str(out)])
        assert code == 0 and out.exists()
        assert main(["--model", tiny_model_dir, "--prompt", prompt_file,
                     "--steps", "0", "--out", str(out)]) == 2
        assert main(["--prompt", prompt_file]) == 1  # missing required flags


class TestEngineCrossCheck:
    def test_engine_attention_matches_model(self, tiny_model_dir, prompt_file,
                                            tmp_path):
        """Acceptance: engine-recomputed attention matches the model's own
        probabilities within 1e-3 on at least 95% of (step, head) pairs."""
        from logkv.replay import iter_head_streams
        from logkv.tensor import AttentionConfig, attention
        from logkv.tracefile import read_trace

        out = tmp_path / "check.kvtr"
        probs_path = tmp_path / "probs.npz"
        export_trace(ExportSpec(model=tiny_model_dir, prompt_path=prompt_file,
                                steps=8, out_path=str(out),
                                attention_out=str(probs_path)))
        trace = read_trace(out)
        probs = np.load(probs_path)
        cfg = AttentionConfig(head_dim=trace.head_dim)
        group = trace.head_count // trace.kv_head_count

        full = {}
        for si, stream in enumerate(iter_head_streams(trace, "per_head")):
            layer = si // trace.head_count
            head = si % trace.head_count
            full_k = np.vstack([stream.prompt_k, stream.step_k])
            full_v = np.vstack([stream.prompt_v, stream.step_v])
            full[(layer, head)] = (full_k, full_v, stream.queries)

        total = within = 0
        worst = 0.0
        for s in range(trace.decode_steps):
            model_rows = probs[f"step_{s:04d}"]  # (layers, heads, L)
            n = trace.prompt_len + s + 1
            for layer in range(trace.layer_count):
                for head in range(trace.head_count):
                    full_k, full_v, queries = full[(layer, head)]
                    dist, _ = attention(queries[s], full_k[:n], full_v[:n], cfg)
                    diff = np.abs(dist - model_rows[layer, head][:n]).max()
                    worst = max(worst, float(diff))
                    within += diff < 1e-3
                    total += 1
        frac = within / total
        print(f"engine-vs-model attention: {within}/{total} pairs within 1e-3 "
              f"(worst {worst:.2e})")
        assert frac >= 0.95
