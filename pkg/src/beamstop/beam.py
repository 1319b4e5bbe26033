"""Beam search with optimal stopping, BSO's shrinking beam, or a plain length cap."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Any, NamedTuple, Protocol, Sequence

import numpy as np

from .model import BOS, EOS, PAD, RAW, SCORER_MODES, DecoderState, Seq2Seq, score_step

OPTIMAL, SHRINKING, MAXLEN = "optimal", "shrinking", "maxlen"
STOP_MODES = (OPTIMAL, SHRINKING, MAXLEN)
DEFAULT_BANNED = (PAD, BOS)


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    score: float
    step_scores: tuple[float, ...] = ()
    state: Any = None  # opaque handle owned by the scorer
    truncated: bool = False

    @property
    def finished(self) -> bool:
        return bool(self.tokens) and self.tokens[-1] == EOS

    def __len__(self) -> int:
        return len(self.tokens)


def rank_key(h: Hypothesis):
    """Descending score, then lexicographically smaller token ids first."""
    return (-h.score, h.tokens)


class Extension(NamedTuple):
    parent: int
    token: int
    score: float


class StepScorer(Protocol):
    vocab_size: int

    def root(self) -> Hypothesis: ...

    def step(self, parents: Sequence[Hypothesis]) -> tuple[np.ndarray, list]:
        """Step scores [k, V] for each parent plus one child state handle per parent."""
        ...


class ModelScorer:
    """Adapts a :class:`Seq2Seq` to the beam-search scorer protocol."""

    def __init__(self, model: Seq2Seq, src: Sequence[int], mode: str):
        if mode not in SCORER_MODES:
            raise ValueError(f"unknown scorer mode {mode!r}")
        self.model = model
        self.mode = mode
        self.enc = model.encode(src)
        self.vocab_size = len(model.tgt_vocab)
        self._enc_rows: dict[int, Any] = {}

    def root(self) -> Hypothesis:
        return Hypothesis((), 0.0, state=(self.model.initial_state(self.enc), 0))

    def _enc_for(self, k: int):
        if k not in self._enc_rows:
            self._enc_rows[k] = self.enc.rows(np.zeros(k, dtype=np.int64))
        return self._enc_rows[k]

    def step(self, parents: Sequence[Hypothesis]) -> tuple[np.ndarray, list]:
        batches = [p.state[0] for p in parents]
        rows = [p.state[1] for p in parents]
        if all(b is batches[0] for b in batches):
            state = batches[0].rows(rows)
        else:
            state = DecoderState.cat([b.rows([r]) for b, r in zip(batches, rows)])
        prev = [p.tokens[-1] if p.tokens else BOS for p in parents]
        raw, new_state = self.model.decode_step(self._enc_for(len(parents)), state, prev)
        scores = score_step(raw, self.mode, self.model.sig).data
        return scores, [(new_state, i) for i in range(len(parents))]


def expand(
    beam: Sequence[Hypothesis],
    step_scores: np.ndarray,
    k: int | None,
    banned: Sequence[int] = (),
) -> list[Extension]:
    """Top-k successors over every (parent, word) pair, best first.

    Ties are broken by the successor's token sequence, lexicographically.
    """
    if not beam:
        raise ValueError("cannot expand an empty beam")
    if any(h.finished for h in beam):
        raise ValueError("finished hypotheses are never extended")
    n, V = step_scores.shape
    parent_scores = np.array([h.score for h in beam])
    total = parent_scores[:, None] + step_scores
    allowed = np.ones(V, dtype=bool)
    allowed[list(banned)] = False
    # children share a length, so their lexicographic order is (parent tokens, token)
    lex = sorted(range(n), key=lambda i: beam[i].tokens)
    parent_rank = np.empty(n, dtype=np.int64)
    for r, i in enumerate(lex):
        parent_rank[i] = r if r == 0 or beam[i].tokens != beam[lex[r - 1]].tokens else parent_rank[lex[r - 1]]
    par = np.repeat(np.arange(n), V)
    tok = np.tile(np.arange(V), n)
    flat = total.reshape(-1)
    keep = np.tile(allowed, n)
    par, tok, flat = par[keep], tok[keep], flat[keep]
    order = np.lexsort((tok, parent_rank[par], -flat))
    if k is not None:
        order = order[:k]
    return [Extension(int(par[i]), int(tok[i]), float(flat[i])) for i in order]


def extend(parent: Hypothesis, token: int, step_score: float, handle) -> Hypothesis:
    return Hypothesis(
        parent.tokens + (token,),
        parent.score + step_score,
        parent.step_scores + (step_score,),
        handle,
    )


def materialize(beam, step_scores, handles, exts: Sequence[Extension]) -> list[Hypothesis]:
    return [extend(beam[e.parent], e.token, float(step_scores[e.parent, e.token]), handles[e.parent]) for e in exts]


def optimal_stop_check(candidates: Sequence[Hypothesis], best_finished: Hypothesis | None, mode: str) -> bool:
    """Stop when the best candidate is finished, or the best unfinished one
    already scores below the best finished hypothesis."""
    if mode == RAW:
        raise ValueError("optimal stopping needs per-step scores that never increase; raw mode has none")
    if candidates and candidates[0].finished:
        return True
    live = [h for h in candidates if not h.finished]
    if not live:
        return True
    return best_finished is not None and live[0].score < best_finished.score


def shrinking_beam_step(candidates: Sequence[Hypothesis]) -> tuple[list[Hypothesis], bool]:
    """Refill each finished slot with a copy of the top unfinished candidate.

    Returns the new beam and whether search is over (every slot finished).
    """
    live = [h for h in candidates if not h.finished]
    if not live:
        return [], True
    n_done = len(candidates) - len(live)
    if n_done == 0:
        return list(candidates), False
    top = live[0]
    return [top] * (n_done + 1) + live[1:], False


def unique(beam: Sequence[Hypothesis]) -> list[Hypothesis]:
    """First occurrence of each token sequence, order kept."""
    seen: set[tuple[int, ...]] = set()
    out = []
    for h in beam:
        if h.tokens not in seen:
            seen.add(h.tokens)
            out.append(h)
    return out


def _better(a: Hypothesis, b: Hypothesis | None) -> bool:
    return b is None or rank_key(a) < rank_key(b)


def beam_search(
    scorer: StepScorer,
    b: int,
    mode: str,
    stop: str,
    max_len: int,
    banned: Sequence[int] = DEFAULT_BANNED,
) -> Hypothesis:
    """Best finished hypothesis; if none finishes within ``max_len`` steps the
    top candidate is closed with </eos> and flagged ``truncated``."""
    if b < 1 or max_len < 1:
        raise ValueError("beam size and max_len must be >= 1")
    if stop not in STOP_MODES:
        raise ValueError(f"unknown stop mode {stop!r}")
    if stop == OPTIMAL and mode == RAW:
        raise ValueError("optimal stopping is unsound with raw scores")
    beam = [scorer.root()]
    best: Hypothesis | None = None
    for _ in range(max_len):
        if stop == SHRINKING:
            # refilled slots are placeholders; a copy must not expand into
            # duplicate successors, or every beam size collapses to greedy
            beam = unique(beam)
        scores, handles = scorer.step(beam)
        cands = materialize(beam, scores, handles, expand(beam, scores, b, banned))
        for h in cands:
            if h.finished and _better(h, best):
                best = h
        if stop == SHRINKING:
            beam, done = shrinking_beam_step(cands)
            if done:
                break
            continue
        done = optimal_stop_check(cands, best, mode) if stop == OPTIMAL else False
        beam = [h for h in cands if not h.finished]
        if done or not beam:
            break
    if best is not None:
        return best
    top = beam[0]
    return replace(top, tokens=top.tokens + (EOS,), truncated=True)


def default_max_len(src_len: int, ratio: float = 3.0) -> int:
    return int(math.ceil(max(ratio, 3.0) * src_len)) + 10


def decode(
    model: Seq2Seq,
    src: Sequence[int],
    b: int,
    mode: str,
    stop: str,
    max_len: int | None = None,
) -> Hypothesis:
    if max_len is None:
        max_len = default_max_len(len(src))
    return beam_search(ModelScorer(model, src, mode), b, mode, stop, max_len)


def greedy_decode(model: Seq2Seq, src: Sequence[int], mode: str, max_len: int | None = None) -> list[int]:
    """Step-wise argmax until </eos>; the beam-1 reference path."""
    if max_len is None:
        max_len = default_max_len(len(src))
    scorer = ModelScorer(model, src, mode)
    h = scorer.root()
    out: list[int] = []
    for _ in range(max_len):
        scores, handles = scorer.step([h])
        row = scores[0].copy()
        row[list(DEFAULT_BANNED)] = -np.inf
        tok = int(np.argmax(row))
        h = extend(h, tok, float(row[tok]), handles[0])
        out.append(tok)
        if tok == EOS:
            break
    return out
