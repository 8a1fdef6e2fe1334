"""Run the end-to-end synthetic benchmark and record the result.

    python scripts/benchmark.py --out results/clean
    python scripts/benchmark.py --contamination 0.25 --out results/contamination-0.25
"""
import argparse
import logging

from simsid.benchmark import BENCHMARK, run_benchmark


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--contamination", type=float, default=0.0)
    ap.add_argument("--grid", type=int, default=4, help="patch grid side")
    ap.add_argument("--epochs", type=int, default=BENCHMARK.epochs)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    res = run_benchmark(contamination=args.contamination, seed=args.seed, out_dir=args.out,
                        grid=(args.grid, args.grid), epochs=args.epochs)
    print(res.to_json(), end="")


if __name__ == "__main__":
    main()
