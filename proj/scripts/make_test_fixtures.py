#!/usr/bin/env python3
"""Regenerate tests/fixtures/.

Builds a small byte-level BPE tokenizer (trained on the task prompts) and two
randomly initialized GPT-2-family checkpoints, then freezes reference outputs
(tokenizations and final-position logits) computed with the independent
torch/transformers stack. The C++ tests compare against these files.
"""

import json
import os
import sys

import regex
import torch
from safetensors.torch import save_file
from transformers import GPT2Config, GPT2LMHeadModel, GPT2Tokenizer

SPLIT_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


def bytes_to_unicode():
    bs = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("\xa1"), ord("\xac") + 1))
        + list(range(ord("\xae"), ord("\xff") + 1))
    )
    cs = bs[:]
    n = 0
    for b in range(2**8):
        if b not in bs:
            bs.append(b)
            cs.append(2**8 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


BYTE_ENCODER = bytes_to_unicode()


def corpus_texts():
    texts = []
    for task_file in ("country_capital.json", "product_developer.json", "country_capital_reverse.json"):
        with open(os.path.join(os.path.dirname(__file__), "..", "data", "tasks", task_file)) as f:
            task = json.load(f)
        for template in task["templates"]:
            for x, y in task["pairs"]:
                texts.append(template.replace("{X}", x) + " " + y)
                texts.append(task["shot_prefix_template"].replace("{X}", x).replace("{Y}", y))
    texts += [
        "The capital of France is Paris, the capital of Japan is Tokyo.",
        "don't you'll we've it's I'm he'd they're 1234 42 3.14",
        "  spaced   out\ttext\nwith newlines  ",
        "naïve café — 東京",
    ]
    return texts


def train_bpe(texts, n_merges):
    words = []
    for text in texts:
        for chunk in SPLIT_PATTERN.findall(text):
            encoded = tuple(BYTE_ENCODER[b] for b in chunk.encode("utf-8"))
            words.append(list(encoded))

    merges = []
    for _ in range(n_merges):
        counts = {}
        for w in words:
            for a, b in zip(w, w[1:]):
                counts[(a, b)] = counts.get((a, b), 0) + 1
        if not counts:
            break
        # deterministic: highest count, then lexicographic
        pair = min(counts.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if counts[pair] < 2:
            break
        merges.append(pair)
        merged = pair[0] + pair[1]
        new_words = []
        for w in words:
            out = []
            i = 0
            while i < len(w):
                if i + 1 < len(w) and w[i] == pair[0] and w[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(w[i])
                    i += 1
            new_words.append(out)
        words = new_words

    vocab = {}
    for b in sorted(BYTE_ENCODER):
        vocab[BYTE_ENCODER[b]] = len(vocab)
    for a, b in merges:
        vocab[a + b] = len(vocab)
    vocab["<|endoftext|>"] = len(vocab)
    return vocab, merges


def write_tokenizer(outdir, vocab, merges):
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "vocab.json"), "w") as f:
        json.dump(vocab, f, ensure_ascii=False)
    with open(os.path.join(outdir, "merges.txt"), "w") as f:
        f.write("#version: 0.2\n")
        for a, b in merges:
            f.write(f"{a} {b}\n")


def golden_tokenization(tok, outdir):
    cases = [
        "",
        " Paris",
        " France",
        "The capital of France is",
        "As we all know, the capital of China is",
        "The capital of France is Paris, As we all know, the capital of China is",
        "It's crucial to know that the capital of USA is",
        "don't stop",
        "I'm sure they're right, you'll see",
        "numbers 123 and 9000",
        "  double  spaces  ",
        "tab\tand\nnewline",
        "punct!? (brackets) [more]...",
        "naïve café — 東京",
        "trailing space ",
        "'s 't 're",
        "a'b",
        "Washington. D.C.",
        "GTX1060 is developed by",
    ]
    golden = {"cases": [{"text": t, "ids": tok.encode(t)} for t in cases]}
    with open(os.path.join(outdir, "golden_tokenization.json"), "w") as f:
        json.dump(golden, f, ensure_ascii=False, indent=1)
    # round-trip sanity of the reference itself
    for case in golden["cases"]:
        assert tok.decode(case["ids"]) == case["text"], case


def make_model(outdir, tok, vocab_size, n_layer, n_head, n_embd, seed, with_metadata):
    os.makedirs(outdir, exist_ok=True)
    torch.manual_seed(seed)
    config = GPT2Config(
        vocab_size=vocab_size,
        n_positions=128,
        n_embd=n_embd,
        n_layer=n_layer,
        n_head=n_head,
        bos_token_id=vocab_size - 1,
        eos_token_id=vocab_size - 1,
    )
    model = GPT2LMHeadModel(config)
    model.eval()

    state = {}
    for name, tensor in model.state_dict().items():
        if name == "lm_head.weight":  # tied to wte
            continue
        if name.startswith("transformer."):
            name = name[len("transformer.") :]
        if name.endswith(".attn.bias") and not name.endswith(".c_attn.bias"):
            continue
        if name.endswith(".attn.masked_bias"):
            continue
        state[name] = tensor.contiguous()
    metadata = {"n_head": str(n_head)} if with_metadata else None
    save_file(state, os.path.join(outdir, "model.safetensors"), metadata=metadata)

    prompts = [
        "The capital of France is",
        "As we all know, the capital of China is",
        "I am sure that the capital of Japan is",
        "Don't forget, the capital of Egypt is",
        "The capital of France is Paris, Keep in mind, the capital of Spain is",
        "YouTube is developed by",
        "numbers 42 and words",
    ]
    golden = {"prompts": []}
    with torch.no_grad():
        for p in prompts:
            ids = tok.encode(p)
            out = model(torch.tensor([ids]))
            logits = out.logits[0, -1, :].float().tolist()
            golden["prompts"].append(
                {"prompt": p, "token_ids": ids, "final_logits_last_position": logits}
            )
    with open(os.path.join(outdir, "golden_logits.json"), "w") as f:
        json.dump(golden, f, ensure_ascii=False)
    return model


def write_frequencies(outdir, vocab_size, seed):
    g = torch.Generator().manual_seed(seed)
    counts = torch.randint(1, 100000, (vocab_size,), generator=g)
    with open(os.path.join(outdir, "frequencies.tsv"), "w") as f:
        f.write("# token_id\tcount\n")
        for i in range(vocab_size):
            f.write(f"{i}\t{int(counts[i])}\n")


def main():
    root = os.path.join(os.path.dirname(__file__), "..", "tests", "fixtures")
    root = os.path.abspath(root)
    os.makedirs(root, exist_ok=True)

    vocab, merges = train_bpe(corpus_texts(), n_merges=400)
    tok_dir = os.path.join(root, "tiny_bpe")
    write_tokenizer(tok_dir, vocab, merges)
    tok = GPT2Tokenizer(
        vocab=os.path.join(tok_dir, "vocab.json"),
        merges=os.path.join(tok_dir, "merges.txt"),
    )
    golden_tokenization(tok, tok_dir)

    vocab_size = len(vocab)
    # default head-width inference path: d_head = 64
    make_model(os.path.join(root, "tiny_gpt2"), tok, vocab_size,
               n_layer=3, n_head=2, n_embd=128, seed=1234, with_metadata=False)
    # metadata path: d_head != 64, head count stored in the archive
    make_model(os.path.join(root, "tiny_gpt2_meta"), tok, vocab_size,
               n_layer=2, n_head=4, n_embd=48, seed=98765, with_metadata=True)

    write_frequencies(os.path.join(root, "tiny_gpt2"), vocab_size, seed=77)
    print(f"fixtures written under {root} (vocab size {vocab_size}, {len(merges)} merges)")


if __name__ == "__main__":
    main()
