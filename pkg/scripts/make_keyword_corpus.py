"""Regenerate the bundled keyword-desk corpus.

The corpus is drawn from a hand-designed bigram chain (unbounded length, each
sentence ends at EOS) and stored as ``count<TAB>sentence`` lines sorted by
sentence.  The package fits its order-2 base model to this file; the design
table below is only used here.
"""

import argparse
from collections import Counter
from pathlib import Path

import numpy as np

DESIGN = {
    "<s>": {"the": 0.6, "film": 0.25, "very": 0.1496, "amazing": 0.0004},
    "the": {"film": 0.7, "very": 0.2, "good": 0.1},
    "film": {"was": 0.7, "<eos>": 0.3},
    "was": {"very": 0.45, "good": 0.35, "<eos>": 0.2},
    "very": {"good": 0.93, "very": 0.0625, "amazing": 0.0075},
    "good": {"<eos>": 0.7, "the": 0.1, "film": 0.1, "very": 0.1},
    "amazing": {"<eos>": 0.6, "the": 0.2, "film": 0.2},
}

OUT = Path(__file__).resolve().parents[1] / "src/guardlab/harness/data/keyword_desk_corpus.tsv"


def generate(n: int, seed: int) -> Counter:
    rng = np.random.default_rng(seed)
    rows = {c: (list(d), np.array(list(d.values())) / sum(d.values())) for c, d in DESIGN.items()}
    out = Counter()
    for _ in range(n):
        ctx, words = "<s>", []
        while True:
            toks, p = rows[ctx]
            ctx = toks[rng.choice(len(toks), p=p)]
            if ctx == "<eos>":
                break
            words.append(ctx)
        out[" ".join(words)] += 1
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sentences", type=int, default=200_000)
    ap.add_argument("--seed", type=int, default=20240601)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    counts = generate(args.sentences, args.seed)
    with open(args.out, "w") as fh:
        for sentence in sorted(counts):
            fh.write(f"{counts[sentence]}\t{sentence}\n")
    print(f"wrote {len(counts)} distinct sentences ({args.sentences} total) to {args.out}")


if __name__ == "__main__":
    main()
