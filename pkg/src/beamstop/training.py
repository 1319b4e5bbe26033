"""Cross-entropy pretraining and beam-search optimization with an early-stop penalty.

BSO runs in two phases per batch.  First the beam search is run without a tape
using the current parameters; every violation is recorded as a pair of token
sequences.  Then all sequences the losses mention are teacher-forced in one
batch on a tape, and the hinges are rebuilt from those scores.  The search
decisions are therefore constants and gradients flow only through the scores
inside active hinges.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Adagrad, Tape, Tensor
from .beam import DEFAULT_BANNED, Hypothesis, ModelScorer, default_max_len, expand, extend, materialize
from .config import stream
from .data import ParallelCorpus, batches
from .metrics import sentence_bleu_prefix
from .model import BOS, EOS, LOGSOFTMAX, PAD, RAW, SIGMOID, Seq2Seq, score_step

log = logging.getLogger(__name__)

CE, BSO_RAW, BSO_SIGMOID = "ce", "bso-raw", "bso-sigmoid"
TRAIN_MODES = (CE, BSO_RAW, BSO_SIGMOID)
MARGIN, EARLY_EOS, FINAL = "margin", "early_eos", "final"
METRICS_HEADER = ("epoch", "train_margin_loss", "train_earlystop_loss", "restarts_per_sentence", "val_loss", "lr")

_DEFAULTS = {
    # lr, lr_decay, batch_size, epochs
    CE: (0.05, 0.5, 64, 15),
    BSO_RAW: (0.01, 0.75, 40, 5),
    BSO_SIGMOID: (0.01, 0.75, 40, 5),
}


@dataclass
class TrainConfig:
    mode: str = CE
    train_beam: int = 4
    margin: float = 1.0
    # with no margin the penalty goes quiet as soon as g_eos dips below the
    # b+1-th candidate's g (often ~0.98), and fine-tuning drifts short
    eos_margin: float = 1.0
    lr: float | None = None
    lr_decay: float | None = None
    batch_size: int | None = None
    epochs: int | None = None
    early_stop_penalty: bool = True
    scale_augment: bool = True
    cumulative_margin: bool = True
    # decode-length cap is ceil(max(3, ratio) * |src|) + 10; None derives the
    # ratio from the training corpus
    max_len_ratio: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in TRAIN_MODES:
            raise ValueError(f"unknown training mode {self.mode!r}; choose from {TRAIN_MODES}")
        lr, decay, bs, epochs = _DEFAULTS[self.mode]
        self.lr = lr if self.lr is None else float(self.lr)
        self.lr_decay = decay if self.lr_decay is None else float(self.lr_decay)
        self.batch_size = bs if self.batch_size is None else int(self.batch_size)
        self.epochs = epochs if self.epochs is None else int(self.epochs)
        if self.lr <= 0 or self.lr_decay <= 0:
            raise ValueError("lr and lr_decay must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.is_bso and self.train_beam < 2:
            raise ValueError("BSO needs train_beam >= 2 so a b-th competitor exists")
        if self.early_stop_penalty and self.mode == BSO_RAW:
            raise ValueError("the early-stop penalty is defined on sigmoid scores; use bso-sigmoid")

    @property
    def is_bso(self) -> bool:
        return self.mode != CE

    @property
    def scorer_mode(self) -> str:
        return {CE: LOGSOFTMAX, BSO_RAW: RAW, BSO_SIGMOID: SIGMOID}[self.mode]


@dataclass
class ViolationRecord:
    step: int
    kind: str
    loss_value: float
    delta_scale: float = 1.0


@dataclass
class TrainStepReport:
    margin_loss: float = 0.0
    early_stop_loss: float = 0.0
    restarts: int = 0
    violations: list[ViolationRecord] = field(default_factory=list)
    skipped: bool = False


# --------------------------------------------------------------- cross entropy


def _check_gold(gold: Sequence[int]) -> None:
    if len(gold) == 0 or gold[-1] != EOS:
        raise ValueError("gold sequence must end with </eos>")
    if any(t in (PAD, BOS) for t in gold):
        raise ValueError("gold sequence contains <pad> or <s>")


def cross_entropy_batch(model: Seq2Seq, srcs: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> Tensor:
    """Summed negative log-likelihood of each gold under teacher forcing."""
    for g in golds:
        _check_gold(g)
    steps, gold, mask = model.teacher_force(srcs, golds)
    total = None
    for t, raw in enumerate(steps):
        nll = ad.pick(ad.log_softmax(raw), gold[:, t])
        term = ad.sum_(ad.mul(nll, Tensor(-mask[:, t])))
        total = term if total is None else ad.add(total, term)
    return total


def cross_entropy_loss(model: Seq2Seq, src: Sequence[int], gold: Sequence[int]) -> Tensor:
    """-sum_t log p(y_t | x, y_<t)."""
    return cross_entropy_batch(model, [src], [gold])


# ------------------------------------------------------------- hinge formulas


def bso_margin_loss(gold_score: float, bth_score: float, delta: float, margin: float = 1.0) -> float:
    return delta * max(0.0, margin + bth_score - gold_score)


def early_stop_penalty(
    candidates: Sequence[tuple[int, float]],
    b: int,
    t: int,
    gold_len: int,
    margin: float = 0.0,
) -> float:
    """Sum of (g_eos - g_{b+1})^+ over </eos> entries in the top b.

    ``candidates`` are sorted (token, per-step g) pairs.  Nothing accrues once
    the gold reference has finished, or when fewer than b+1 candidates exist.
    """
    if t >= gold_len:
        return 0.0
    if len(candidates) <= b:
        log.debug("early-stop penalty skipped: only %d candidates for beam %d", len(candidates), b)
        return 0.0
    g_next = candidates[b][1]
    return sum(max(0.0, margin + g - g_next) for tok, g in candidates[:b] if tok == EOS)


# ------------------------------------------------------------------ the search


@dataclass(frozen=True)
class LossTerm:
    """One hinge: push ``high`` above ``low`` (margin/final) or ``low`` above
    ``high`` (early_eos uses ``high`` for the </eos> candidate)."""

    kind: str
    step: int
    high: tuple[int, ...]  # sequence whose score the loss pushes down
    low: tuple[int, ...]  # sequence whose score the loss pushes up
    delta: float = 1.0


@dataclass
class SearchTrace:
    terms: list[LossTerm]
    restarts: int = 0
    short_pool: int = 0
    skipped: bool = False
    beams: list[list[tuple[int, ...]]] = field(default_factory=list)  # filled when recording


def _delta(hyp: Sequence[int], gold: Sequence[int], scale_augment: bool) -> float:
    return 1.0 - sentence_bleu_prefix(hyp, gold) if scale_augment else 1.0


def bso_search(
    scorer,
    gold: Sequence[int],
    cfg: TrainConfig,
    banned: Sequence[int] = DEFAULT_BANNED,
    record_beams: bool = False,
) -> SearchTrace:
    """Beam search over a training sentence that records every violation.

    At each step before the gold ends, </eos> candidates in the top b are
    expelled (and penalized when enabled); if the gold prefix is not among the
    first b surviving candidates, a margin term is recorded against the b-th
    and search restarts from the gold prefix alone.  At the last step the gold
    must beat the best incorrect candidate.
    """
    b, T = cfg.train_beam, len(gold)
    trace = SearchTrace([])
    beam: list[Hypothesis] = [scorer.root()]
    for t in range(1, T + 1):
        scores, handles = scorer.step(beam)
        # at most one </eos> child per parent, so 2b+1 covers every lookup below
        pool = materialize(beam, scores, handles, expand(beam, scores, 2 * b + 1, banned))
        gold_prefix = tuple(gold[:t])
        if t < T:
            if cfg.early_stop_penalty:
                early = [h for h in pool[:b] if h.finished]
                if early and len(pool) <= b:
                    trace.short_pool += 1
                elif early:
                    for h in early:
                        trace.terms.append(LossTerm(EARLY_EOS, t, h.tokens, pool[b].tokens))
            live = [h for h in pool if not h.finished][:b]
            if any(h.tokens == gold_prefix for h in live):
                beam = live
                if record_beams:
                    trace.beams.append([h.tokens for h in beam])
                continue
            bth = live[-1]
            trace.terms.append(LossTerm(MARGIN, t, bth.tokens, gold_prefix, _delta(bth.tokens, gold_prefix, cfg.scale_augment)))
            parent = next(i for i, h in enumerate(beam) if h.tokens == gold_prefix[:-1])
            tok = gold_prefix[-1]
            beam = [extend(beam[parent], tok, float(scores[parent, tok]), handles[parent])]
            trace.restarts += 1
            if record_beams:
                trace.beams.append([h.tokens for h in beam])
        else:
            wrong = next((h for h in pool if h.tokens != gold_prefix), None)
            if wrong is not None:
                trace.terms.append(LossTerm(FINAL, t, wrong.tokens, gold_prefix, _delta(wrong.tokens, gold_prefix, cfg.scale_augment)))
    return trace


def search_trajectory(model: Seq2Seq, src: Sequence[int], gold: Sequence[int], cfg: TrainConfig) -> SearchTrace:
    _check_gold(gold)
    if len(gold) > default_max_len(len(src), cfg.max_len_ratio or 3.0):
        log.warning("skipping sentence: gold length %d exceeds the decoding cap", len(gold))
        return SearchTrace([], skipped=True)
    if active_tape_guard():
        raise RuntimeError("search must run without an active tape")
    return bso_search(ModelScorer(model, src, cfg.scorer_mode), gold, cfg)


def active_tape_guard() -> bool:
    return ad.active_tape() is not None


# ------------------------------------------------------------------ rescoring


@dataclass
class Rescored:
    total: Tensor
    margin_values: np.ndarray  # per term, zero for early_eos terms
    eos_values: np.ndarray  # per term, zero for margin/final terms
    item_of_term: np.ndarray


def _rows_cover(contexts: list[tuple[int, tuple[int, ...]]]):
    """Group (item, context) pairs under maximal contexts sharing a prefix."""
    rows: list[tuple[int, tuple[int, ...]]] = []
    row_of: dict[tuple[int, tuple[int, ...]], int] = {}
    for item, ctx in sorted(set(contexts), key=lambda c: (-len(c[1]), c)):
        for r, (ri, rctx) in enumerate(rows):
            if ri == item and rctx[: len(ctx)] == ctx:
                row_of[(item, ctx)] = r
                break
        else:
            row_of[(item, ctx)] = len(rows)
            rows.append((item, ctx))
    return rows, row_of


def rescore(model: Seq2Seq, srcs: Sequence[Sequence[int]], traces: Sequence[SearchTrace], cfg: TrainConfig) -> Rescored:
    """Rebuild the recorded hinges from teacher-forced scores.

    With a tape active the returned total is differentiable in every parameter.
    """
    terms = [(i, term) for i, tr in enumerate(traces) for term in tr.terms]
    n_terms = len(terms)
    if n_terms == 0:
        return Rescored(Tensor(0.0), np.zeros(0), np.zeros(0), np.zeros(0, dtype=np.int64))
    seqs = sorted({(i, s) for i, term in terms for s in (term.high, term.low)})
    seq_id = {s: k for k, s in enumerate(seqs)}
    rows, row_of = _rows_cover([(i, s[:-1]) for i, s in seqs])

    # one decoder pass over all rows; row r provides next-word scores after
    # each of its prefixes, i.e. at positions 0..len(context)
    used_items = sorted({i for i, _ in rows})
    enc = model.encode_batch([srcs[i] for i in used_items])
    enc = enc.rows([used_items.index(i) for i, _ in rows])
    state = model.initial_state(enc)
    P = max(len(ctx) for _, ctx in rows) + 1
    inputs = np.full((len(rows), P), PAD, dtype=np.int64)
    inputs[:, 0] = BOS
    for r, (_, ctx) in enumerate(rows):
        inputs[r, 1 : len(ctx) + 1] = ctx
    steps = []
    for p in range(P):
        raw, state = model.decode_step(enc, state, inputs[:, p])
        steps.append(raw)
    V = len(model.tgt_vocab)
    grid = ad.reshape(ad.stack(steps, axis=1), (len(rows) * P, V))

    pick_id: dict[tuple[int, int, int], int] = {}
    seq_picks: list[list[int]] = []
    for i, s in seqs:
        r = row_of[(i, s[:-1])]
        ids = []
        for pos, tok in enumerate(s):
            key = (r, pos, tok)
            ids.append(pick_id.setdefault(key, len(pick_id)))
        seq_picks.append(ids)
    keys = sorted(pick_id, key=pick_id.get)
    flat_idx = np.array([(r * P + pos) * V + tok for r, pos, tok in keys])

    mode = cfg.scorer_mode
    if mode == LOGSOFTMAX:
        scores = ad.take(ad.reshape(ad.log_softmax(grid), (-1,)), flat_idx)
        raw_picks = None
    else:
        raw_picks = ad.take(ad.reshape(grid, (-1,)), flat_idx)
        scores = score_step(raw_picks, mode, model.sig)
    n_picks = len(keys)

    # sequence scores: cumulative sums (or last step only) of picked scores
    M = np.zeros((len(seqs), n_picks))
    L = np.zeros((len(seqs), n_picks))
    for k, ids in enumerate(seq_picks):
        if cfg.cumulative_margin:
            M[k, ids] += 1.0
        else:
            M[k, ids[-1]] = 1.0
        L[k, ids[-1]] = 1.0
    margin_rows = [k for k, (_, t) in enumerate(terms) if t.kind != EARLY_EOS]
    eos_rows = [k for k, (_, t) in enumerate(terms) if t.kind == EARLY_EOS]
    margin_values = np.zeros(n_terms)
    eos_values = np.zeros(n_terms)
    parts = []
    if margin_rows:
        D = np.zeros((len(margin_rows), len(seqs)))
        delta = np.zeros((len(margin_rows), 1))
        for j, k in enumerate(margin_rows):
            i, term = terms[k]
            D[j, seq_id[(i, term.high)]] += 1.0
            D[j, seq_id[(i, term.low)]] -= 1.0
            delta[j, 0] = term.delta
        diff = ad.matmul(Tensor(D @ M), ad.reshape(scores, (n_picks, 1)))
        hinge = ad.mul(Tensor(delta), ad.relu_plus(ad.add(diff, Tensor(cfg.margin))))
        margin_values[margin_rows] = hinge.data[:, 0]
        parts.append(ad.sum_(hinge))
    if eos_rows:
        if mode != SIGMOID:
            raise ValueError("early-stop terms need sigmoid scores")
        E = np.zeros((len(eos_rows), len(seqs)))
        for j, k in enumerate(eos_rows):
            i, term = terms[k]
            E[j, seq_id[(i, term.high)]] += 1.0
            E[j, seq_id[(i, term.low)]] -= 1.0
        g = model.sig.g(raw_picks)
        diff = ad.matmul(Tensor(E @ L), ad.reshape(g, (n_picks, 1)))
        hinge = ad.relu_plus(ad.add(diff, Tensor(cfg.eos_margin)))
        eos_values[eos_rows] = hinge.data[:, 0]
        parts.append(ad.sum_(hinge))
    total = parts[0] if len(parts) == 1 else ad.add(parts[0], parts[1])
    return Rescored(total, margin_values, eos_values, np.array([i for i, _ in terms]))


def _reports(traces: Sequence[SearchTrace], res: Rescored) -> list[TrainStepReport]:
    out = [TrainStepReport(restarts=tr.restarts, skipped=tr.skipped) for tr in traces]
    k = 0
    for i, tr in enumerate(traces):
        rep = out[i]
        for term in tr.terms:
            m, e = float(res.margin_values[k]), float(res.eos_values[k])
            rep.margin_loss += m
            rep.early_stop_loss += e
            value = e if term.kind == EARLY_EOS else m
            if value > 0:
                rep.violations.append(ViolationRecord(term.step, term.kind, value, term.delta))
            k += 1
    return out


def bso_batch_step(
    model: Seq2Seq,
    srcs: Sequence[Sequence[int]],
    golds: Sequence[Sequence[int]],
    cfg: TrainConfig,
    optimizer: Adagrad | None = None,
) -> list[TrainStepReport]:
    """Search every sentence, then one backward pass and one optimizer step."""
    traces = [search_trajectory(model, s, g, cfg) for s, g in zip(srcs, golds)]
    if optimizer is None:
        return _reports(traces, rescore(model, srcs, traces, cfg))
    with Tape() as tape:
        res = rescore(model, srcs, traces, cfg)
    if any(tr.terms for tr in traces):
        tape.backward(res.total)
        optimizer.step()
    return _reports(traces, res)


def beam_train_step(model: Seq2Seq, src, gold, cfg: TrainConfig, optimizer: Adagrad | None = None) -> TrainStepReport:
    if not cfg.is_bso:
        raise ValueError("beam_train_step needs a BSO mode")
    return bso_batch_step(model, [src], [gold], cfg, optimizer)[0]


# -------------------------------------------------------------------- training


def validation_loss(model: Seq2Seq, corpus: ParallelCorpus, cfg: TrainConfig, batch_size: int = 100) -> float:
    """Mean per-sentence training objective on held-out data."""
    model.eval()
    total = 0.0
    for start in range(0, len(corpus), batch_size):
        src = corpus.src[start : start + batch_size]
        tgt = corpus.tgt[start : start + batch_size]
        if cfg.is_bso:
            total += sum(r.margin_loss + r.early_stop_loss for r in bso_batch_step(model, src, tgt, cfg))
        else:
            total += cross_entropy_batch(model, src, tgt).item()
    return total / max(len(corpus), 1)


def corpus_length_ratio(corpus: ParallelCorpus) -> float:
    return max((len(t) - 1) / len(s) for s, t in zip(corpus.src, corpus.tgt))


def train(
    model: Seq2Seq,
    corpus: ParallelCorpus,
    valid: ParallelCorpus,
    cfg: TrainConfig,
    metrics_path=None,
    on_epoch: Callable[[dict], None] | None = None,
) -> list[dict]:
    """Epochs over the shuffled corpus; the learning rate decays whenever the
    validation loss fails to improve.  Returns one metrics row per epoch."""
    if len(corpus) == 0:
        raise ValueError("empty training corpus")
    if cfg.max_len_ratio is None:
        cfg = replace(cfg, max_len_ratio=corpus_length_ratio(corpus))
    opt = Adagrad(model.parameters(), cfg.lr)
    rng = stream(cfg.seed, "shuffle")
    best = math.inf
    history = []
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRICS_HEADER)
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        margin = early = 0.0
        restarts = 0
        for idx in batches(len(corpus), cfg.batch_size, rng):
            src = [corpus.src[i] for i in idx]
            tgt = [corpus.tgt[i] for i in idx]
            if cfg.is_bso:
                for rep in bso_batch_step(model, src, tgt, cfg, opt):
                    margin += rep.margin_loss
                    early += rep.early_stop_loss
                    restarts += rep.restarts
            else:
                with Tape() as tape:
                    loss = cross_entropy_batch(model, src, tgt)
                tape.backward(loss)
                opt.step()
                margin += loss.item()
        val = validation_loss(model, valid, cfg)
        n = len(corpus)
        row = {
            "epoch": epoch,
            "train_margin_loss": margin / n,
            "train_earlystop_loss": early / n,
            "restarts_per_sentence": restarts / n,
            "val_loss": val,
            "lr": opt.lr,
        }
        history.append(row)
        if metrics_path is not None:
            with open(metrics_path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[k]) for k in METRICS_HEADER])
        if on_epoch is not None:
            on_epoch(row)
        if val < best:
            best = val
        else:
            opt.lr *= cfg.lr_decay
    model.eval()
    return history


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else f"{v:.6g}"


def read_metrics(path) -> list[dict[str, str]]:
    with open(Path(path)) as fh:
        return list(csv.DictReader(fh))
