"""Ablations on the synthetic task, starting from a CE checkpoint.

Trains BSO-sigmoid without the early-stop penalty and BSO with raw scores,
then sweeps beam sizes.  Run scripts/reproduce_length.py first.

    python scripts/ablations.py --work runs/length
"""
from __future__ import annotations

import argparse
import csv
from pathlib import Path

from beamstop.cli import main as cli


def run(*argv: str) -> None:
    if cli(list(argv)) != 0:
        raise SystemExit(f"failed: beamstop {' '.join(argv)}")


def show(path: Path) -> None:
    print(f"\n{path.name}")
    for row in csv.DictReader(open(path)):
        print(f"  beam {row['beam']} ({row['stop_mode']}): bleu {float(row['bleu']):6.2f}  len_ratio_ref {float(row['len_ratio_ref']):.4f}")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--work", default="runs/length")
    p.add_argument("--beams", default="1..9")
    a = p.parse_args()
    w = Path(a.work)
    syn, ce = str(w / "syn"), str(w / "ce.ckpt")
    base = ["train", "--data", syn, "--init-from", ce, "--train-beam", "4", "--early-stop-penalty", "off"]
    run(*base, "--mode", "bso-sigmoid", "--out", str(w / "nopen.ckpt"))
    run(*base, "--mode", "bso-raw", "--out", str(w / "raw.ckpt"))
    runs = [
        ("nopen.ckpt", "optimal", "sweep_nopen.csv"),
        ("raw.ckpt", "shrinking", "sweep_raw_shrinking.csv"),
        ("raw.ckpt", "maxlen", "sweep_raw_maxlen.csv"),
    ]
    for ckpt, stop, out in runs:
        run("sweep", "--ckpt", str(w / ckpt), "--data", syn, "--beams", a.beams, "--stop", stop, "--out", str(w / out))
        show(w / out)


if __name__ == "__main__":
    main()
