import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beamstop.autodiff import Adagrad
from beamstop.beam import ModelScorer, extend
from beamstop.data import ParallelCorpus
from beamstop.model import EOS
from beamstop.training import (
    EARLY_EOS,
    FINAL,
    MARGIN,
    METRICS_HEADER,
    TrainConfig,
    _delta,
    beam_train_step,
    bso_margin_loss,
    bso_search,
    early_stop_penalty,
    rescore,
    search_trajectory,
    train,
)

from gradcheck import check
from helpers import SRC_VOCAB, TGT_VOCAB, random_pair, sample_coords, tiny_model
from stubs import FunctionScorer

X, Y, UNK = 4, 5, 3


# ------------------------------------------------------------- hinge formulas


def test_margin_loss_examples():
    assert bso_margin_loss(1.0, 0.0, 1.0, 1.0) == 0.0
    assert bso_margin_loss(0.2, 0.5, 0.8, 1.0) == pytest.approx(1.04)
    assert bso_margin_loss(-5.0, 3.0, 0.0, 1.0) == 0.0


def test_early_stop_penalty_examples():
    cands = [(X, 0.9), (EOS, 0.7), (Y, 0.5), (UNK, 0.4)]
    assert early_stop_penalty(cands, 3, 2, 6) == pytest.approx(0.3)
    assert early_stop_penalty([(X, 0.9), (Y, 0.8), (UNK, 0.7), (EOS, 0.1)], 3, 2, 6) == 0.0
    assert early_stop_penalty([(EOS, 0.4), (X, 0.3), (Y, 0.5)], 2, 2, 6) == 0.0
    # once gold has finished nothing accrues
    assert early_stop_penalty(cands, 3, 6, 6) == 0.0
    # a pool with no b+1-th candidate is treated as zero
    assert early_stop_penalty(cands[:3], 3, 2, 6) == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="bso-sigmoid", train_beam=1)
    with pytest.raises(ValueError):
        TrainConfig(mode="reinforce")
    with pytest.raises(ValueError):
        TrainConfig(mode="bso-raw", early_stop_penalty=True)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    cfg = TrainConfig(mode="bso-sigmoid")
    assert (cfg.lr, cfg.lr_decay, cfg.batch_size) == (0.01, 0.75, 40)


# -------------------------------------------------------------- search traces


def _table_scorer(table, default=-4.0, V=6):
    """Step scores from {prefix: {token: score}} with ``default`` elsewhere."""

    def fn(prefix):
        s = np.full(V, default)
        s[EOS] = default - 1.0
        for tok, v in table.get(prefix, {}).items():
            s[tok] = v
        return s

    return FunctionScorer(fn, V)


def test_restart_when_gold_falls_off_at_step_five():
    gold = (X,) * 6 + (EOS,)
    table = {gold[:k]: {X: -0.1, Y: -2.0, UNK: -2.0} for k in range(4)}
    # at step 5 the gold word collapses and non-gold extensions overtake it
    table[gold[:4]] = {X: -9.0, Y: -0.5, UNK: -0.6, EOS: -20.0}
    table[gold[:5]] = {X: -0.1}
    table[gold[:6]] = {EOS: -0.1}
    cfg = TrainConfig(mode="bso-sigmoid", train_beam=3)
    trace = bso_search(_table_scorer(table), gold, cfg, record_beams=True)
    assert trace.restarts == 1
    margins = [t for t in trace.terms if t.kind == MARGIN]
    assert [t.step for t in margins] == [5]
    assert margins[0].low == gold[:5]
    assert trace.beams[4] == [gold[:5]]
    assert all(gold[: t + 1] in beam for t, beam in enumerate(trace.beams))
    assert not [t for t in trace.terms if t.kind == EARLY_EOS]


def test_early_eos_is_expelled_and_recorded():
    gold = (X, X, X, EOS)
    table = {(): {X: -0.1, EOS: -0.2, Y: -1.0, UNK: -1.5}, (X,): {X: -0.1}, (X, X): {X: -0.1}}
    cfg = TrainConfig(mode="bso-sigmoid", train_beam=2)
    trace = bso_search(_table_scorer(table), gold, cfg, record_beams=True)
    early = [t for t in trace.terms if t.kind == EARLY_EOS]
    assert [(t.step, t.high) for t in early] == [(1, (EOS,))]
    assert early[0].low == (Y,)  # the b+1-th candidate of the pool
    assert trace.beams[0] == [(X,), (Y,)]
    assert all(len(beam) == 2 for beam in trace.beams)


def test_final_step_term_targets_best_incorrect():
    gold = (X, EOS)
    table = {(): {X: -0.1}, (X,): {EOS: -0.1, X: -0.5}}
    trace = bso_search(_table_scorer(table), gold, TrainConfig(mode="bso-raw", early_stop_penalty=False))
    final = [t for t in trace.terms if t.kind == FINAL]
    assert len(final) == 1 and final[0].high == (X, X) and final[0].low == gold


def _hinge_values(trace, fn, cfg):
    """Loss values recomputed straight from per-prefix log scores."""

    def cum(seq):
        return sum(fn(seq[:i])[tok] for i, tok in enumerate(seq))

    def g(seq):
        return np.exp(fn(seq[:-1])[seq[-1]])

    margin = early = 0.0
    for term in trace.terms:
        if term.kind == EARLY_EOS:
            early += max(0.0, cfg.eos_margin + g(term.high) - g(term.low))
        else:
            margin += bso_margin_loss(cum(term.low), cum(term.high), term.delta, cfg.margin)
    return margin, early


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 4), st.lists(st.integers(4, 5), max_size=7))
def test_loss_semantics_on_adversarial_scores(seed, b, body):
    gold = tuple(body) + (EOS,)
    rng = np.random.default_rng(seed)
    cache = {}

    def fn(prefix):
        if prefix not in cache:
            # peaked random distributions often rank </eos> and wrong words first
            cache[prefix] = np.log(rng.dirichlet(np.full(6, 0.3)) + 1e-12)
        return cache[prefix]

    cfg = TrainConfig(mode="bso-sigmoid", train_beam=b)
    trace = bso_search(FunctionScorer(fn, 6), gold, cfg, record_beams=True)
    margin, early = _hinge_values(trace, fn, cfg)
    assert margin >= 0 and early >= 0
    assert trace.restarts == sum(t.kind == MARGIN for t in trace.terms) <= len(gold)
    for t, beam in enumerate(trace.beams, start=1):
        assert gold[:t] in beam
        assert all(EOS not in seq for seq in beam)
    for term in trace.terms:
        assert 0.0 <= term.delta <= 1.0
        if term.kind == MARGIN:
            assert trace.beams[term.step - 1] == [gold[: term.step]]


def test_delta_is_zero_for_identical_prefixes():
    assert _delta((X, X), (X, X), True) == 0.0
    assert _delta((Y, Y), (X, X), True) == 1.0
    assert _delta((X, Y), (X, X), False) == 1.0


# --------------------------------------------------------- model-level steps


def _confident_model():
    m = tiny_model(0)
    m.params["out.W"].data[:] = 0.0
    m.params["out.b"].data[:] = -10.0
    m.params["out.b"].data[EOS] = 10.0
    return m


def test_nothing_changes_when_margins_are_met():
    m = _confident_model()
    before = {k: p.data.copy() for k, p in m.params.items()}
    cfg = TrainConfig(mode="bso-sigmoid", train_beam=2)
    rep = beam_train_step(m, [4, 5], [EOS], cfg, Adagrad(m.parameters(), 0.1))
    assert (rep.margin_loss, rep.early_stop_loss, rep.restarts, rep.violations) == (0.0, 0.0, 0, [])
    for k, p in m.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def _prefix_scores(model, src, mode):
    sc = ModelScorer(model, src, mode)

    def fn(prefix):
        h = sc.root()
        for tok in prefix:
            scores, handles = sc.step([h])
            h = extend(h, tok, float(scores[0, tok]), handles[0])
        return sc.step([h])[0][0]

    return fn


def test_rescored_values_match_search_scores():
    rng = np.random.default_rng(3)
    checked = 0
    for seed in range(10):
        m = tiny_model(seed, init_scale=1.0)
        cfg = TrainConfig(mode="bso-sigmoid", train_beam=2, scale_augment=bool(seed % 2), eos_margin=float(seed % 3 > 0))
        src, gold = random_pair(rng, max_tgt=6)
        trace = search_trajectory(m, src, gold, cfg)
        res = rescore(m, [src], [trace], cfg)
        margin, early = _hinge_values(trace, _prefix_scores(m, src, "sigmoid"), cfg)
        assert res.margin_values.sum() == pytest.approx(margin)
        assert res.eos_values.sum() == pytest.approx(early)
        checked += bool(trace.terms)
    assert checked > 0


@pytest.mark.parametrize("mode", ["bso-sigmoid", "bso-raw"])
def test_frozen_trajectory_gradients_match_finite_differences(mode):
    rng = np.random.default_rng(21 if mode == "bso-sigmoid" else 22)
    worst, informative = 0.0, 0
    for trial in range(100):
        m = tiny_model(trial, init_scale=1.0, bidirectional_encoder=bool(trial % 2))
        cfg = TrainConfig(mode=mode, train_beam=int(rng.integers(2, 4)), early_stop_penalty=mode == "bso-sigmoid")
        srcs, traces = [], []
        for _ in range(2):
            src, gold = random_pair(rng, max_tgt=6)
            srcs.append(src)
            traces.append(search_trajectory(m, src, gold, cfg))
        loss = lambda: rescore(m, srcs, traces, cfg).total
        if loss().item() == 0.0:
            continue
        informative += 1
        worst = max(worst, check(loss, m.parameters(), coords=sample_coords(rng, 4)))
    assert informative >= 80
    assert worst < 1e-3, f"relative error {worst:.2e}"


def _corpus(n, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [random_pair(rng) for _ in range(n)]
    return ParallelCorpus([p[0] for p in pairs], [p[1] for p in pairs], SRC_VOCAB, TGT_VOCAB)


def test_train_writes_metrics_and_decays_lr(tmp_path):
    corpus = _corpus(12)
    m = tiny_model(1)
    path = tmp_path / "metrics.csv"
    hist = train(m, corpus, corpus, TrainConfig(mode="ce", epochs=4, batch_size=4, lr=0.05), metrics_path=path)
    rows = list(csv.reader(open(path)))
    assert tuple(rows[0]) == METRICS_HEADER and len(rows) == 5
    best = np.inf
    for prev, cur in zip(hist, hist[1:]):
        improved = prev["val_loss"] < best
        best = min(best, prev["val_loss"])
        assert cur["lr"] == pytest.approx(prev["lr"] if improved else prev["lr"] * 0.5)


def test_bso_training_reports_nonnegative_losses():
    corpus = _corpus(8, seed=1)
    m = tiny_model(2)
    hist = train(m, corpus, corpus, TrainConfig(mode="bso-sigmoid", epochs=2, batch_size=4, train_beam=2))
    assert len(hist) == 2
    assert all(r["train_margin_loss"] >= 0 and r["train_earlystop_loss"] >= 0 for r in hist)


def test_long_gold_is_skipped():
    m = tiny_model()
    cfg = TrainConfig(mode="bso-sigmoid", max_len_ratio=3.0)
    trace = search_trajectory(m, [4], [X] * 20 + [EOS], cfg)
    assert trace.skipped and trace.terms == []
