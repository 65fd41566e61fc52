#!/usr/bin/env python3
"""Regenerate the bundled training corpus.

The corpus is synthetic English-like text drawn from a small template
grammar over hand-picked word lists, so it is free of any copyright
concern and its statistics are fully controlled: strong determiner/
noun/verb transition structure for a masked model to learn, roughly two
hundred distinct tokens, and a fixed seed making the file byte-stable.

Usage: python3 tools/gen_corpus.py [out_path]
Default output: src/desklm/corpus/tiny.txt (relative to the repo root).
"""

import sys
from pathlib import Path

import numpy as np

NOUNS = [
    "harbor", "lantern", "meadow", "river", "orchard", "bridge", "garden",
    "mill", "tower", "valley", "forest", "cabin", "market", "quarry",
    "shore", "canal", "barn", "cliff", "creek", "grove", "hollow", "ridge",
    "summit", "trail", "pond", "field", "hedge", "gate", "well", "kiln",
    "wharf", "granary", "steeple", "pasture", "brook", "thicket", "knoll",
    "furrow", "hearth", "cellar", "attic", "porch", "fence", "ditch",
    "paddock", "loft", "shed", "spring", "marsh", "heath", "dune", "quay",
]

VERBS = [
    "guards", "borders", "feeds", "shadows", "overlooks", "crosses",
    "circles", "shelters", "drains", "floods", "warms", "cools",
    "hides", "reveals", "joins", "splits", "follows", "meets",
    "skirts", "crowns", "anchors", "frames", "marks", "divides",
    "cradles", "flanks", "faces", "mirrors", "touches", "holds",
]

ADJECTIVES = [
    "quiet", "amber", "narrow", "broad", "mossy", "sunlit", "foggy",
    "ancient", "crooked", "gentle", "steep", "shallow", "wide", "dusty",
    "frozen", "golden", "hollow", "silent", "stony", "weathered",
    "tangled", "sleepy", "bright", "pale", "distant", "lonely",
]

ADVERBS = [
    "slowly", "quietly", "gently", "steadily", "faintly", "briefly",
    "rarely", "often", "always", "seldom",
]

PREPOSITIONS = ["beyond", "beside", "below", "above", "near", "behind"]
DETERMINERS = ["the", "a", "every", "this", "that"]

SEED = 20240811
TARGET_BYTES = 200_000


def noun_phrase(rng) -> str:
    det = DETERMINERS[rng.integers(len(DETERMINERS))]
    parts = [det]
    if rng.random() < 0.55:
        parts.append(ADJECTIVES[rng.integers(len(ADJECTIVES))])
    parts.append(NOUNS[rng.integers(len(NOUNS))])
    return " ".join(parts)


def sentence(rng) -> str:
    subject = noun_phrase(rng)
    verb = VERBS[rng.integers(len(VERBS))]
    roll = rng.random()
    if roll < 0.5:
        tail = noun_phrase(rng)
    elif roll < 0.75:
        tail = f"{ADVERBS[rng.integers(len(ADVERBS))]}"
    else:
        prep = PREPOSITIONS[rng.integers(len(PREPOSITIONS))]
        tail = f"{prep} {noun_phrase(rng)}"
    return f"{subject} {verb} {tail}."


def generate() -> str:
    rng = np.random.default_rng(SEED)
    lines = []
    size = 0
    while size < TARGET_BYTES:
        n_sentences = 1 + int(rng.integers(0, 3))
        line = " ".join(sentence(rng) for _ in range(n_sentences))
        lines.append(line)
        size += len(line) + 1
    return "\n".join(lines) + "\n"


def main() -> None:
    root = Path(__file__).resolve().parent.parent
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else \
        root / "src" / "desklm" / "corpus" / "tiny.txt"
    text = generate()
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out} ({len(text.encode('utf-8'))} bytes, "
          f"{len(text.splitlines())} lines)")


if __name__ == "__main__":
    main()
