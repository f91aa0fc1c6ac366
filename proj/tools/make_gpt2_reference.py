"""Writes reference top-1 tokens and last-position logits for GPT-2 small.

Usage: python tools/make_gpt2_reference.py <gpt2-dir> [<corpus.json>]

<gpt2-dir> is a Hugging Face GPT-2 snapshot (config.json, model.safetensors,
vocab.json, merges.txt); the result goes to <gpt2-dir>/reference.json, which
test_gpt2 compares against when present. The corpus defaults to the tokenizer
corpus in tests/fixtures.
"""

import json
import pathlib
import sys

import torch
from transformers import GPT2LMHeadModel, GPT2TokenizerFast

ROOT = pathlib.Path(__file__).resolve().parent.parent


def main():
    model_dir = pathlib.Path(sys.argv[1])
    corpus_path = pathlib.Path(sys.argv[2]) if len(sys.argv) > 2 else ROOT / "tests/fixtures/tokenizer_corpus.json"
    corpus = json.loads(corpus_path.read_text())
    sentences = [c["text"] for c in corpus["cases"]]

    tok = GPT2TokenizerFast.from_pretrained(model_dir)
    model = GPT2LMHeadModel.from_pretrained(model_dir).eval()
    cases = []
    with torch.no_grad():
        for text in sentences:
            ids = tok.encode(text)
            if not ids or len(ids) > 1024:
                continue
            logits = model(torch.tensor([ids])).logits[0, -1]
            cases.append({"text": text, "tokens": ids, "top1": int(logits.argmax()), "last_logits": logits.tolist()})
    (model_dir / "reference.json").write_text(json.dumps({"cases": cases}))
    print(f"wrote {len(cases)} cases to {model_dir / 'reference.json'}")


if __name__ == "__main__":
    main()
