"""Run a small causal LM greedily and capture what attention consumes.

Keys and values come from the model's own KV cache, i.e. after rotary
position embedding.  Decode queries are recomputed from each attention
block's captured inputs (q_proj output with the block's cos/sin applied),
which reproduces the model's attention logits bit-for-bit on the eager
path.  Attention probabilities per decode step are kept alongside for
cross-checking the engine's replay.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .writer import write_trace_arrays


@dataclass
class ExportSpec:
    model: str
    prompt_path: str
    steps: int
    layers: list[int] | None = None  # None -> all
    kv_heads: list[int] | None = None  # None -> all; query heads follow groups
    out_path: str = "trace.kvtr"
    attention_out: str | None = None  # sidecar .npz of per-step attention rows

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("decode steps must be >= 1")


def read_prompt_ids(path, tokenizer=None) -> list[int]:
    """Prompt file is tokenized text when the model ships a tokenizer,
    otherwise whitespace/comma-separated token ids."""
    text = Path(path).read_text().strip()
    if not text:
        raise ValueError("prompt file is empty")
    if tokenizer is not None:
        ids = tokenizer(text)["input_ids"]
        if not ids:
            raise ValueError("prompt tokenized to zero tokens")
        return list(ids)
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError as e:
        raise ValueError(
            "model has no tokenizer; prompt file must contain token ids") from e


def _load_model(name_or_path: str):
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(
        name_or_path, dtype=torch.float32, attn_implementation="eager")
    model.eval()
    return model


def _load_tokenizer(name_or_path: str):
    from transformers import AutoTokenizer

    try:
        return AutoTokenizer.from_pretrained(name_or_path)
    except Exception:
        return None


def _layer_kv(cache, idx: int) -> tuple[torch.Tensor, torch.Tensor]:
    if hasattr(cache, "layers"):  # transformers >= 4.54
        layer = cache.layers[idx]
        return layer.keys, layer.values
    return cache.key_cache[idx], cache.value_cache[idx]


@dataclass
class _Capture:
    hidden: list = field(default_factory=list)
    pos_emb: list = field(default_factory=list)


def export_trace(spec: ExportSpec) -> dict:
    """Greedy-decode and write the trace; returns a summary dict."""
    torch.manual_seed(0)
    model = _load_model(spec.model)
    tokenizer = _load_tokenizer(spec.model)
    ids = read_prompt_ids(spec.prompt_path, tokenizer)

    decoder = model.model  # the stacked transformer under the LM head
    attn_modules = [layer.self_attn for layer in decoder.layers]
    n_layers = len(attn_modules)
    cfg = model.config
    heads = cfg.num_attention_heads
    kv_heads = getattr(cfg, "num_key_value_heads", heads) or heads
    group = heads // kv_heads
    head_dim = getattr(cfg, "head_dim", None) or cfg.hidden_size // heads

    captures = [_Capture() for _ in range(n_layers)]

    def make_hook(idx):
        def hook(module, args, kwargs):
            hs = kwargs.get("hidden_states", args[0] if args else None)
            pe = kwargs.get("position_embeddings")
            if pe is None:
                raise RuntimeError(
                    "attention module passed no rotary position embeddings; "
                    "only rotary-family models are supported")
            captures[idx].hidden.append(hs.detach())
            captures[idx].pos_emb.append((pe[0].detach(), pe[1].detach()))
        return hook

    handles = [m.register_forward_pre_hook(make_hook(i), with_kwargs=True)
               for i, m in enumerate(attn_modules)]

    from transformers.models.llama.modeling_llama import apply_rotary_pos_emb

    def captured_query(layer_idx: int, forward_idx: int) -> np.ndarray:
        """Post-rotary query rows of the given forward, shape (S, heads, d)."""
        attn = attn_modules[layer_idx]
        hs = captures[layer_idx].hidden[forward_idx]
        cos, sin = captures[layer_idx].pos_emb[forward_idx]
        s = hs.shape[1]
        q = attn.q_proj(hs).reshape(1, s, heads, head_dim).transpose(1, 2)
        q_rot, _ = apply_rotary_pos_emb(q, q, cos, sin)
        return q_rot[0].transpose(0, 1).numpy().astype(np.float32)

    prompt_len = len(ids)
    input_ids = torch.tensor([ids], dtype=torch.long)
    step_attn: list[np.ndarray] = []  # (layers, heads, L) per decode step
    queries = np.empty((spec.steps, n_layers, heads, head_dim), np.float32)
    step_k = np.empty((spec.steps, n_layers, kv_heads, head_dim), np.float32)
    step_v = np.empty_like(step_k)
    generated: list[int] = []

    with torch.no_grad():
        out = model(input_ids, use_cache=True)
        cache = out.past_key_values
        prompt_k = np.stack([
            _layer_kv(cache, i)[0][0, :, :prompt_len].numpy().astype(np.float32)
            for i in range(n_layers)])
        prompt_v = np.stack([
            _layer_kv(cache, i)[1][0, :, :prompt_len].numpy().astype(np.float32)
            for i in range(n_layers)])
        next_id = int(out.logits[0, -1].argmax())

        for s in range(spec.steps):
            generated.append(next_id)
            for cap in captures:
                cap.hidden.clear()
                cap.pos_emb.clear()
            out = model(torch.tensor([[next_id]]), past_key_values=cache,
                        use_cache=True, output_attentions=True)
            cache = out.past_key_values
            for layer in range(n_layers):
                queries[s, layer] = captured_query(layer, 0)[-1]
                k, v = _layer_kv(cache, layer)
                step_k[s, layer] = k[0, :, prompt_len + s].numpy()
                step_v[s, layer] = v[0, :, prompt_len + s].numpy()
            step_attn.append(np.stack(
                [a[0, :, -1].numpy().astype(np.float32) for a in out.attentions]))
            next_id = int(out.logits[0, -1].argmax())

    for h in handles:
        h.remove()

    layer_sel = spec.layers if spec.layers is not None else list(range(n_layers))
    if any(not 0 <= l < n_layers for l in layer_sel):
        raise ValueError(f"layer selection {layer_sel} outside 0..{n_layers - 1}")
    kv_sel = spec.kv_heads if spec.kv_heads is not None else list(range(kv_heads))
    if any(not 0 <= h < kv_heads for h in kv_sel):
        raise ValueError(f"kv-head selection {kv_sel} outside 0..{kv_heads - 1}")
    head_sel = [kvh * group + g for kvh in kv_sel for g in range(group)]

    write_trace_arrays(
        spec.out_path,
        prompt_k[np.ix_(layer_sel, kv_sel)],
        prompt_v[np.ix_(layer_sel, kv_sel)],
        queries[:, layer_sel][:, :, head_sel],
        step_k[:, layer_sel][:, :, kv_sel],
        step_v[:, layer_sel][:, :, kv_sel],
    )

    if spec.attention_out:
        arrays = {f"step_{s:04d}": step_attn[s][np.ix_(layer_sel, head_sel)]
                  for s in range(spec.steps)}
        np.savez(spec.attention_out, **arrays)

    return {
        "prompt_len": prompt_len,
        "decode_steps": spec.steps,
        "layers": layer_sel,
        "head_dim": head_dim,
        "heads": len(head_sel),
        "kv_heads": len(kv_sel),
        "generated_ids": generated,
        "out_path": str(spec.out_path),
    }
