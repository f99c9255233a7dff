#!/usr/bin/env python3
"""Builds tests/data/tiny_gpt2: a randomly initialised 3-layer GPT-2
(Hugging Face implementation) converted to the canonical bundle layout, plus
reference outputs computed by the Hugging Face forward pass:

  reference_logits.json   per prompt: token ids, top-5 (id, logit as a
                          decimal string), full final-position logits
  reference_hidden.json   residual stream entering each layer and the final
                          ln_final output, for the first prompt
  manifest.json           sha256 of every tensor payload (hashlib)

The vocabulary is the first 512 GPT-2 tokens and the merges that produce
them, so the tokenizer files are a consistent subset of the real ones."""

import hashlib
import json
import pathlib
import struct

import numpy as np
import torch
from transformers import GPT2Config, GPT2LMHeadModel

HERE = pathlib.Path(__file__).resolve().parent
DATA = HERE.parent / "data"
OUT = DATA / "tiny_gpt2"

VOCAB = 512
D = 32
LAYERS = 3
HEADS = 4
POSITIONS = 64


def write_container(path, tensors):
    header = {}
    offset = 0
    for name, arr in tensors:
        nbytes = arr.size * 4
        header[name] = {"dtype": "F32", "shape": list(arr.shape), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
    text = json.dumps(header, separators=(",", ":"))
    text += " " * ((8 - len(text) % 8) % 8)
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(text)))
        f.write(text.encode())
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(1234)
    cfg = GPT2Config(vocab_size=VOCAB, n_positions=POSITIONS, n_embd=D, n_layer=LAYERS, n_head=HEADS,
                     activation_function="gelu_new", layer_norm_epsilon=1e-5,
                     resid_pdrop=0.0, embd_pdrop=0.0, attn_pdrop=0.0)
    model = GPT2LMHeadModel(cfg).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("ln_1.weight") or name.endswith("ln_2.weight") or name.endswith("ln_f.weight"):
                p.copy_(1.0 + 0.1 * torch.randn_like(p))
            elif name.endswith("bias"):
                p.copy_(0.05 * torch.randn_like(p))
            else:
                p.copy_(0.25 * torch.randn_like(p))

    sd = {k: v.detach().numpy().astype(np.float32) for k, v in model.state_dict().items()}
    dh = D // HEADS
    tensors = [("token_embedding", sd["transformer.wte.weight"]),
               ("position_embedding", sd["transformer.wpe.weight"])]
    for l in range(LAYERS):
        p = f"transformer.h.{l}."
        c_attn = sd[p + "attn.c_attn.weight"]  # [d, 3d], x @ W
        split = []
        for part in range(3):
            block = c_attn[:, part * D:(part + 1) * D]
            split.append(np.stack([block[:, h * dh:(h + 1) * dh] for h in range(HEADS)]))
        tensors += [
            (f"layers.{l}.ln_attn.gamma", sd[p + "ln_1.weight"]),
            (f"layers.{l}.ln_attn.beta", sd[p + "ln_1.bias"]),
            (f"layers.{l}.attn.w_query", split[0]),
            (f"layers.{l}.attn.w_key", split[1]),
            (f"layers.{l}.attn.w_value", split[2]),
            (f"layers.{l}.attn.b_qkv", sd[p + "attn.c_attn.bias"]),
            (f"layers.{l}.attn.w_out", sd[p + "attn.c_proj.weight"].reshape(HEADS, dh, D)),
            (f"layers.{l}.attn.b_out", sd[p + "attn.c_proj.bias"]),
            (f"layers.{l}.ln_ff.gamma", sd[p + "ln_2.weight"]),
            (f"layers.{l}.ln_ff.beta", sd[p + "ln_2.bias"]),
            (f"layers.{l}.ff.w_in", sd[p + "mlp.c_fc.weight"]),
            (f"layers.{l}.ff.b_in", sd[p + "mlp.c_fc.bias"]),
            (f"layers.{l}.ff.w_out", sd[p + "mlp.c_proj.weight"]),
            (f"layers.{l}.ff.b_out", sd[p + "mlp.c_proj.bias"]),
        ]
    tensors += [("ln_final.gamma", sd["transformer.ln_f.weight"]),
                ("ln_final.beta", sd["transformer.ln_f.bias"])]
    write_container(OUT / "model.tensors", tensors)

    manifest = {"tensors": sorted(
        ({"name": n, "dtype": "F32", "shape": list(a.shape),
          "sha256": hashlib.sha256(np.ascontiguousarray(a, dtype="<f4").tobytes()).hexdigest()}
         for n, a in tensors), key=lambda e: e["name"])}
    (OUT / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    (OUT / "config.json").write_text(json.dumps({
        "n_layers": LAYERS, "n_heads": HEADS, "d_model": D, "d_mlp": 4 * D, "vocab_size": VOCAB,
        "max_positions": POSITIONS, "layer_norm_eps": 1e-5, "tied_embeddings": True}, indent=2) + "\n")

    vocab = json.loads((DATA / "gpt2_tokenizer" / "vocab.json").read_text(encoding="utf-8"))
    sub_vocab = {t: i for t, i in vocab.items() if i < VOCAB}
    (OUT / "vocab.json").write_text(json.dumps(sub_vocab, ensure_ascii=False), encoding="utf-8")
    merges = (DATA / "gpt2_tokenizer" / "merges.txt").read_text(encoding="utf-8").splitlines()
    kept = [merges[0]]
    for line in merges[1:]:
        a, b = line.split(" ")
        if a in sub_vocab and b in sub_vocab and (a + b) in sub_vocab:
            kept.append(line)
    (OUT / "merges.txt").write_text("\n".join(kept) + "\n", encoding="utf-8")

    rng = np.random.default_rng(99)
    prompts = [[int(t) for t in rng.integers(0, VOCAB, size=int(n))] for n in [1, 2, 3, 5, 8, 13, 21, 34, 7, 11]]
    records = []
    for ids in prompts:
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0, -1].double().numpy()
        top = np.argsort(-logits, kind="stable")[:5]
        records.append({"text": None, "token_ids": ids,
                        "top5": [{"token_id": int(t), "logit": repr(float(logits[t]))} for t in top],
                        "logits": [repr(float(x)) for x in logits]})
    (OUT / "reference_logits.json").write_text(json.dumps({"model": "tiny-random-gpt2", "prompts": records}) + "\n")

    with torch.no_grad():
        out = model(torch.tensor([prompts[6]]), output_hidden_states=True)
    hidden = [h[0].double().numpy().tolist() for h in out.hidden_states]
    # hidden_states[L] already has ln_f applied by the HF implementation
    (OUT / "reference_hidden.json").write_text(json.dumps({
        "token_ids": prompts[6], "residual": hidden[:LAYERS], "final_ln": hidden[LAYERS]}) + "\n")


if __name__ == "__main__":
    main()
