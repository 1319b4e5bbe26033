"""Corpus BLEU, smoothed prefix BLEU and length ratios over token-id sequences."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Hashable, Sequence

from .model import EOS

MAX_ORDER = 4
EVAL_HEADER = ("beam", "scorer_mode", "stop_mode", "bleu", "len_ratio_ref", "len_ratio_src")

Tokens = Sequence[Hashable]


@dataclass
class EvalReport:
    corpus_bleu: float
    len_ratio_ref: float
    len_ratio_src: float
    sentence_count: int


def strip_eos(seq: Tokens) -> list:
    return [w for w in seq if w != EOS]


def ngrams(seq: Tokens, n: int) -> Counter:
    return Counter(tuple(seq[i : i + n]) for i in range(len(seq) - n + 1))


def _closest(c: int, refs: Sequence[Tokens]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def brevity_penalty(c: int, r: int) -> float:
    if c == 0:
        return 0.0
    return math.exp(min(0.0, 1.0 - r / c))


def corpus_bleu(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], max_order: int = MAX_ORDER) -> float:
    """Corpus BLEU on a 0-100 scale.

    Orders for which the hypotheses contain no n-grams at all are left out of
    the geometric mean, so two-word outputs are scored on n <= 2.
    """
    if not hyps:
        raise ValueError("empty hypothesis set")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses but {len(refs)} reference sets")
    match = [0] * max_order
    total = [0] * max_order
    c_len = r_len = 0
    for hyp, rs in zip(hyps, refs):
        if not rs:
            raise ValueError("every sentence needs at least one reference")
        hyp = strip_eos(hyp)
        rs = [strip_eos(r) for r in rs]
        c_len += len(hyp)
        r_len += _closest(len(hyp), rs)
        for n in range(1, max_order + 1):
            h = ngrams(hyp, n)
            best: Counter = Counter()
            for r in rs:
                best |= ngrams(r, n)
            match[n - 1] += sum(min(k, best[g]) for g, k in h.items())
            total[n - 1] += sum(h.values())
    orders = [n for n in range(max_order) if total[n] > 0]
    if not orders or any(match[n] == 0 for n in orders):
        return 0.0
    log_p = sum(math.log(match[n] / total[n]) for n in orders) / len(orders)
    return 100.0 * brevity_penalty(c_len, r_len) * math.exp(log_p)


def sentence_bleu_prefix(hyp: Tokens, gold: Tokens, max_order: int = MAX_ORDER) -> float:
    """Sentence BLEU in [0, 1] with add-one smoothing for n >= 2, so prefixes
    shorter than four tokens are not zeroed out."""
    hyp, gold = list(hyp), list(gold)
    if not hyp or not gold:
        raise ValueError("prefixes must be nonempty")
    log_p = 0.0
    for n in range(1, max_order + 1):
        h, g = ngrams(hyp, n), ngrams(gold, n)
        m = sum(min(k, g[x]) for x, k in h.items())
        t = sum(h.values())
        if n > 1:
            m, t = m + 1, t + 1
        if m == 0:
            return 0.0
        log_p += math.log(m / t)
    value = brevity_penalty(len(hyp), len(gold)) * math.exp(log_p / max_order)
    return min(1.0, max(0.0, value))


def length_ratios(hyps: Sequence[Tokens], refs: Sequence[Sequence[Tokens]], srcs: Sequence[Tokens]) -> tuple[float, float]:
    """(sum |y| / sum |y*|, sum |y| / sum |x|) with </eos> left out of every count."""
    if not (len(hyps) == len(refs) == len(srcs)):
        raise ValueError("hypotheses, references and sources must align")
    c = r = s = 0
    for hyp, rs, src in zip(hyps, refs, srcs):
        n = len(strip_eos(hyp))
        c += n
        r += _closest(n, [strip_eos(x) for x in rs])
        s += len(strip_eos(src))
    return c / max(r, 1), c / max(s, 1)


def evaluate(hyps, refs, srcs) -> EvalReport:
    ratio_ref, ratio_src = length_ratios(hyps, refs, srcs)
    return EvalReport(corpus_bleu(hyps, refs), ratio_ref, ratio_src, len(hyps))
