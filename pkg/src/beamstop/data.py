"""Synthetic length-prediction task and parallel-corpus ingestion."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import stream
from .model import EOS, Vocab

LETTER_VALUES = {"a": 1, "b": 2, "c": 3, "d": 4, "e": 5}
TARGET_TOKEN = "x"
SPLITS = ("train", "valid", "test")


class IngestionError(ValueError):
    pass


def expand_source(src: Sequence[str]) -> list[str]:
    """Apply the grammar a->x, b->xx, ..., e->xxxxx letter by letter."""
    if len(src) == 0:
        raise ValueError("source must be nonempty")
    out: list[str] = []
    for letter in src:
        try:
            out.extend([TARGET_TOKEN] * LETTER_VALUES[letter])
        except KeyError:
            raise ValueError(f"symbol {letter!r} is outside the alphabet a..e") from None
    return out


@dataclass
class SynthSpec:
    train: int = 5000
    valid: int = 1000
    test: int = 1000
    # source lengths ~ uniform integers on [min_len, max_len]
    min_len: int = 2
    max_len: int = 18
    seed: int = 0

    def __post_init__(self):
        if min(self.train, self.valid, self.test) < 1:
            raise ValueError("split sizes must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


def generate_corpus(spec: SynthSpec) -> dict[str, tuple[list[list[str]], list[list[str]]]]:
    rng = stream(spec.seed, "data")
    letters = sorted(LETTER_VALUES)
    corpus = {}
    for split in SPLITS:
        n = getattr(spec, split)
        lengths = rng.integers(spec.min_len, spec.max_len + 1, size=n)
        srcs = [[letters[i] for i in rng.integers(0, len(letters), size=k)] for k in lengths]
        corpus[split] = (srcs, [expand_source(s) for s in srcs])
    return corpus


def write_corpus(out_dir, corpus) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for split, (srcs, tgts) in corpus.items():
        write_lines(out / f"{split}.src", srcs)
        write_lines(out / f"{split}.tgt", tgts)


def write_lines(path, sentences: Sequence[Sequence[str]]) -> None:
    with open(path, "w", newline="\n") as fh:
        for s in sentences:
            fh.write(" ".join(s) + "\n")


def read_lines(path) -> list[list[str]]:
    with open(path) as fh:
        return [line.split() for line in fh.read().splitlines()]


@dataclass
class ParallelCorpus:
    src: list[list[int]]
    tgt: list[list[int]]  # every target ends with </eos>
    src_vocab: Vocab
    tgt_vocab: Vocab
    src_tokens: list[list[str]] = field(repr=False, default_factory=list)
    tgt_tokens: list[list[str]] = field(repr=False, default_factory=list)

    def __len__(self) -> int:
        return len(self.src)


def load_parallel(
    src_path,
    tgt_path,
    src_vocab: Vocab | None = None,
    tgt_vocab: Vocab | None = None,
    min_freq: int = 1,
) -> ParallelCorpus:
    """Whitespace-tokenize a file pair; vocabularies are built when not given."""
    src_tok = read_lines(src_path)
    tgt_tok = read_lines(tgt_path)
    if len(src_tok) != len(tgt_tok):
        raise IngestionError(f"line-count mismatch: {src_path} has {len(src_tok)}, {tgt_path} has {len(tgt_tok)}")
    if src_vocab is None:
        src_vocab = Vocab.build(src_tok, min_freq)
    if tgt_vocab is None:
        tgt_vocab = Vocab.build(tgt_tok, min_freq)
    return ParallelCorpus(
        [src_vocab.encode(s) for s in src_tok],
        [tgt_vocab.encode(t) + [EOS] for t in tgt_tok],
        src_vocab,
        tgt_vocab,
        src_tok,
        tgt_tok,
    )


def load_split(data_dir, split: str, src_vocab: Vocab | None = None, tgt_vocab: Vocab | None = None) -> ParallelCorpus:
    d = Path(data_dir)
    return load_parallel(d / f"{split}.src", d / f"{split}.tgt", src_vocab, tgt_vocab)


def batches(n: int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]
