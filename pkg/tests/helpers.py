"""Tiny models and corpora shared by the test modules."""
from __future__ import annotations

import numpy as np

from beamstop.model import EOS, ModelConfig, Seq2Seq, Vocab

SRC_VOCAB = Vocab.build([list("abcde")])
TGT_VOCAB = Vocab.build([["x"]])  # 5 ids: 4 reserved plus x


def tiny_model(seed: int = 0, cell: str = "lstm", **kw) -> Seq2Seq:
    cfg = ModelConfig(embed_dim=4, hidden_dim=3, cell=cell, init_scale=kw.pop("init_scale", 0.5), **kw)
    return Seq2Seq(cfg, SRC_VOCAB, TGT_VOCAB, seed=seed)


def random_pair(rng: np.random.Generator, max_src: int = 4, max_tgt: int = 5):
    src = [int(i) for i in rng.integers(4, len(SRC_VOCAB), size=rng.integers(1, max_src + 1))]
    n = int(rng.integers(1, max_tgt + 1))
    tgt = [int(i) for i in rng.integers(3, len(TGT_VOCAB), size=n - 1)] + [EOS]
    return src, tgt


def sample_coords(rng: np.random.Generator, k: int = 3):
    return lambda p: rng.choice(p.data.size, size=min(k, p.data.size), replace=False)
