"""Synthetic length experiment: gen-synth, CE, BSO-sigmoid, sweep beams 1..9.

    python scripts/reproduce_length.py --work runs/length
"""
from __future__ import annotations

import argparse
import csv
import time
from pathlib import Path

from beamstop.cli import main as cli


def run(*argv: str) -> None:
    if cli(list(argv)) != 0:
        raise SystemExit(f"failed: beamstop {' '.join(argv)}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="runs/length")
    p.add_argument("--seed", default="0")
    p.add_argument("--train-beam", default="4")
    a = p.parse_args()
    w = Path(a.work)
    w.mkdir(parents=True, exist_ok=True)
    syn, ce, bso = w / "syn", w / "ce.ckpt", w / "bso.ckpt"
    start = time.perf_counter()
    run("gen-synth", "--out", str(syn), "--seed", a.seed)
    run("-v", "train", "--mode", "ce", "--data", str(syn), "--seed", a.seed, "--out", str(ce))
    run("-v", "train", "--mode", "bso-sigmoid", "--data", str(syn), "--init-from", str(ce),
        "--train-beam", a.train_beam, "--early-stop-penalty", "on", "--seed", a.seed, "--out", str(bso))
    for name, ckpt in (("ce", ce), ("bso", bso)):
        run("sweep", "--ckpt", str(ckpt), "--data", str(syn), "--beams", "1..9", "--out", str(w / f"sweep_{name}.csv"))
    print(f"done in {time.perf_counter() - start:.0f}s")
    for name in ("ce", "bso"):
        print(f"\n{name}")
        for row in csv.DictReader(open(w / f"sweep_{name}.csv")):
            print(f"  beam {row['beam']}: bleu {float(row['bleu']):6.2f}  len_ratio_ref {float(row['len_ratio_ref']):.4f}")


if __name__ == "__main__":
    main()
