"""Hyperparameter and contamination sweeps through ``simsid ablate``.

Every sweep uses the benchmark training settings and writes
``results.csv`` and ``results.svg`` under ``OUT/<sweep>/``. The full set
takes many hours on one core; ``--epochs`` and ``--n-train`` shrink it.

    python scripts/sweeps.py --out runs/sweeps
    python scripts/sweeps.py --out runs/smoke --epochs 1 --n-train 16 --only grid
"""
import argparse

from simsid.benchmark import BENCHMARK
from simsid.cli import main as cli

SWEEPS = {
    "grid": "grid=1,2,4,8",
    "top_k": "top_k=1,3,5,10,100",
    "items": "items=10,50,100,200,500",
    "contamination": "contamination=0,0.1,0.25,0.5",
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--epochs", type=int, default=BENCHMARK.epochs)
    ap.add_argument("--n-train", type=int, default=400)
    ap.add_argument("--n-eval", type=int, default=200, help="validation and test size, half abnormal")
    ap.add_argument("--only", choices=sorted(SWEEPS), action="append")
    args = ap.parse_args()
    b = BENCHMARK
    common = ["--epochs", args.epochs, "--n-train", args.n_train, "--n-val", args.n_eval, "--n-test", args.n_eval,
              "--batch-size", b.batch_size, "--lr-max", b.lr_max, "--lr-min", b.lr_min,
              "--memory-lr-scale", b.memory_lr_scale, "--translate", b.translate, "--patience", b.patience]
    for name in args.only or SWEEPS:
        argv = ["ablate", *map(str, common), "--sweep", SWEEPS[name], "--out", f"{args.out}/{name}"]
        print(" ".join(["simsid", *argv]), flush=True)
        cli(argv)


if __name__ == "__main__":
    main()
