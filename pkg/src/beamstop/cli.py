"""Command-line entry point: gen-synth, train, decode, eval, sweep."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from .beam import OPTIMAL, SHRINKING, STOP_MODES, decode, default_max_len
from .config import ConfigError, format_config, read_config, stream_seed
from .data import SynthSpec, generate_corpus, load_split, read_lines, write_corpus, write_lines
from .metrics import EVAL_HEADER, evaluate
from .model import RAW, SCORER_MODES, ModelConfig, Seq2Seq, load_checkpoint, save_checkpoint
from .training import TRAIN_MODES, TrainConfig, corpus_length_ratio, train

log = logging.getLogger("beamstop")

# keys accepted by `train --config FILE`
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} | {f.name for f in fields(ModelConfig)} | {
    "data",
    "init_from",
    "out",
    "metrics",
}
_BOOL = {"on": True, "off": False, "true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _onoff(text: str) -> bool:
    try:
        return _BOOL[str(text).strip().lower()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"expected on/off, got {text!r}") from None


def _beams(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        out = list(range(int(lo), int(hi) + 1))
    else:
        out = [int(x) for x in text.split(",") if x]
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"bad beam list {text!r}")
    return out


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beamstop", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", help="write the synthetic length task")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--train", type=int, default=5000)
    g.add_argument("--valid", type=int, default=1000)
    g.add_argument("--test", type=int, default=1000)
    g.add_argument("--min-len", type=int, default=2)
    g.add_argument("--max-len", type=int, default=18)

    t = sub.add_parser("train", help="cross-entropy or BSO training")
    t.add_argument("--config")
    t.add_argument("--mode", choices=TRAIN_MODES)
    t.add_argument("--data")
    t.add_argument("--train-beam", type=int)
    t.add_argument("--init-from")
    t.add_argument("--early-stop-penalty", type=_onoff)
    t.add_argument("--scale-augment", type=_onoff)
    t.add_argument("--eos-margin", type=float, help="margin of the early-stop hinge (default 1.0)")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--metrics", help="per-epoch CSV (default: OUT.metrics.csv)")
    t.add_argument("--out")

    d = sub.add_parser("decode", help="beam-search a source file")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--src", required=True)
    d.add_argument("--beam", type=int, help="default: training beam - 1")
    d.add_argument("--stop", choices=STOP_MODES)
    d.add_argument("--scorer", choices=SCORER_MODES, help="default: the checkpoint's training scorer")
    d.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="append BLEU and length ratios to a CSV")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True, help="FILE[,FILE...]")
    e.add_argument("--src", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--beam", default="-")
    e.add_argument("--scorer-mode", default="-")
    e.add_argument("--stop-mode", default="-")

    s = sub.add_parser("sweep", help="decode the test split at each beam size")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--beams", type=_beams, default=list(range(1, 10)))
    s.add_argument("--stop", choices=STOP_MODES)
    s.add_argument("--scorer", choices=SCORER_MODES)
    s.add_argument("--split", default="test")
    s.add_argument("--out", required=True)
    return p


# --------------------------------------------------------------- subcommands


def cmd_gen_synth(a) -> None:
    spec = SynthSpec(a.train, a.valid, a.test, a.min_len, a.max_len, a.seed)
    write_corpus(a.out, generate_corpus(spec))


def resolve_train_config(a) -> dict:
    """File values first, then any flag given on the command line."""
    cfg: dict = {}
    if a.config:
        raw = read_config(a.config)
        unknown = sorted(set(raw) - _TRAIN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(raw)
    for key in ("mode", "data", "train_beam", "init_from", "early_stop_penalty", "scale_augment", "eos_margin", "epochs", "lr", "lr_decay", "batch_size", "seed", "metrics", "out"):
        value = getattr(a, key)
        if value is not None:
            cfg[key] = value
    for key in ("mode", "data", "out"):
        if key not in cfg:
            raise ConfigError(f"train needs --{key.replace('_', '-')}")
    return cfg


def _typed(cls, cfg: dict) -> dict:
    out = {}
    for f in fields(cls):
        if f.name not in cfg:
            continue
        v = cfg[f.name]
        kind = str(f.type)
        if isinstance(v, str):
            if kind.startswith("bool"):
                v = _onoff(v)
            elif kind.startswith("int"):
                v = int(v)
            elif kind.startswith("float"):
                v = float(v)
        out[f.name] = v
    return out


def cmd_train(a) -> None:
    cfg = resolve_train_config(a)
    tcfg = TrainConfig(**_typed(TrainConfig, cfg))
    log.info("resolved config:\n%s", format_config({**cfg, **{f.name: getattr(tcfg, f.name) for f in fields(tcfg)}}))
    if tcfg.is_bso:
        if "init_from" not in cfg:
            raise ConfigError("BSO modes need --init-from CKPT (a cross-entropy checkpoint)")
        model, _ = load_checkpoint(cfg["init_from"])
        trn = load_split(cfg["data"], "train", model.src_vocab, model.tgt_vocab)
    else:
        trn = load_split(cfg["data"], "train")
        mcfg = ModelConfig(**_typed(ModelConfig, cfg))
        model = Seq2Seq(mcfg, trn.src_vocab, trn.tgt_vocab, seed=stream_seed(tcfg.seed, "init"))
    val = load_split(cfg["data"], "valid", model.src_vocab, model.tgt_vocab)
    if tcfg.max_len_ratio is None:
        tcfg.max_len_ratio = corpus_length_ratio(trn)
    metrics = cfg.get("metrics") or f"{cfg['out']}.metrics.csv"
    train(model, trn, val, tcfg, metrics_path=metrics, on_epoch=lambda row: log.info("epoch %s", row))
    meta = {
        "train_mode": tcfg.mode,
        "scorer_mode": tcfg.scorer_mode,
        "train_beam": tcfg.train_beam,
        "max_len_ratio": repr(float(tcfg.max_len_ratio)),
        "early_stop_penalty": "on" if tcfg.early_stop_penalty else "off",
        "scale_augment": "on" if tcfg.scale_augment else "off",
        "eos_margin": repr(float(tcfg.eos_margin)),
        "seed": tcfg.seed,
    }
    Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(cfg["out"], model, meta)


def _decode_settings(meta: dict, beam: int | None, stop: str | None, scorer: str | None) -> tuple[str, str, float]:
    scorer = scorer or meta.get("scorer_mode", "logsoftmax")
    stop = stop or (SHRINKING if scorer == RAW else OPTIMAL)
    return scorer, stop, float(meta.get("max_len_ratio", 3.0))


def default_beam(meta: dict) -> int:
    return max(1, int(meta.get("train_beam", 2)) - 1)


def decode_corpus(model: Seq2Seq, srcs, beam: int, scorer: str, stop: str, ratio: float) -> list[list[int]]:
    out = []
    for src in srcs:
        h = decode(model, src, beam, scorer, stop, default_max_len(len(src), ratio))
        out.append(list(h.tokens))
    return out


def cmd_decode(a) -> None:
    model, meta = load_checkpoint(a.ckpt)
    scorer, stop, ratio = _decode_settings(meta, a.beam, a.stop, a.scorer)
    beam = a.beam if a.beam is not None else default_beam(meta)
    srcs = [model.src_vocab.encode(s) for s in read_lines(a.src)]
    hyps = decode_corpus(model, srcs, beam, scorer, stop, ratio)
    write_lines(a.out, [model.tgt_vocab.decode(h) for h in hyps])


def _append_row(path, row: Sequence) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(EVAL_HEADER)
        w.writerow(row)


def _row(beam, scorer, stop, report) -> list:
    return [beam, scorer, stop, f"{report.corpus_bleu:.4f}", f"{report.len_ratio_ref:.4f}", f"{report.len_ratio_src:.4f}"]


def cmd_eval(a) -> None:
    hyps = read_lines(a.hyp)
    refs_by_file = [read_lines(f) for f in a.ref.split(",") if f]
    srcs = read_lines(a.src)
    for f, r in zip(a.ref.split(","), refs_by_file):
        if len(r) != len(hyps):
            raise ValueError(f"{f} has {len(r)} lines but {a.hyp} has {len(hyps)}")
    refs = [list(rs) for rs in zip(*refs_by_file)]
    report = evaluate(hyps, refs, srcs)
    _append_row(a.out, _row(a.beam, a.scorer_mode, a.stop_mode, report))


def cmd_sweep(a) -> None:
    model, meta = load_checkpoint(a.ckpt)
    scorer, stop, ratio = _decode_settings(meta, None, a.stop, a.scorer)
    corpus = load_split(a.data, a.split, model.src_vocab, model.tgt_vocab)
    refs = [[list(t)] for t in corpus.tgt]
    rows = []
    for beam in a.beams:
        hyps = decode_corpus(model, corpus.src, beam, scorer, stop, ratio)
        report = evaluate(hyps, refs, corpus.src)
        if not 0.98 <= report.len_ratio_ref <= 1.02:
            log.warning("beam %d: length ratio %.4f outside [0.98, 1.02]", beam, report.len_ratio_ref)
        log.info("beam %d: bleu %.2f ratio %.4f", beam, report.corpus_bleu, report.len_ratio_ref)
        rows.append(_row(beam, scorer, stop, report))
    with open(a.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_HEADER)
        w.writerows(rows)


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        COMMANDS[a.command](a)
    except (ConfigError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"beamstop {a.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
