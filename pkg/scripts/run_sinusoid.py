"""Sinusoid comparison: MAML, EMAML and BMAML over several seeds.

    python scripts/run_sinusoid.py --seeds 0 1 2 --out runs/sinusoid

Prints the per-seed mean test MSE on held-out tasks and the median over seeds.
"""
import argparse
from pathlib import Path

import numpy as np

from bmaml.config import load_config
from bmaml.experiment import train

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--algos", nargs="+", default=["maml", "emaml", "bmaml"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--out", default="runs/sinusoid")
    p.add_argument("--override", action="append", default=[])
    args = p.parse_args()
    table = {}
    for algo in args.algos:
        for seed in args.seeds:
            cfg = load_config(CONFIGS / f"sinusoid_{algo}.json", [f"seed={seed}", *args.override])
            res = train(cfg, Path(args.out) / f"{algo}-seed{seed}", lambda m: print(f"[{algo} {seed}] {m}", flush=True))
            table.setdefault(algo, []).append(res.rows[-1][2])
    print("\nalgo     " + "  ".join(f"seed{s:<4}" for s in args.seeds) + "  median")
    for algo, vals in table.items():
        print(f"{algo:<8} " + "  ".join(f"{v:8.4f}" for v in vals) + f"  {np.median(vals):.4f}")


if __name__ == "__main__":
    main()
