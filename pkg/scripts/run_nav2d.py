"""2D navigation: SVPG-Chaser against VPG-Reptile over several seeds.

    python scripts/run_nav2d.py --seeds 0 1 2 --out runs/nav2d

Reports the adapted return (best particle, averaged over evaluation tasks)
after the first and the last meta-iteration.
"""
import argparse
from pathlib import Path

from bmaml.config import load_config
from bmaml.experiment import train

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--algos", nargs="+", default=["svpg-chaser", "vpg-reptile"])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--out", default="runs/nav2d")
    p.add_argument("--override", action="append", default=[])
    args = p.parse_args()
    summary = []
    for seed in args.seeds:
        for algo in args.algos:
            cfg = load_config(CONFIGS / f"nav2d_{algo.replace('-', '_')}.json", [f"seed={seed}", *args.override])
            rows = train(cfg, Path(args.out) / f"{algo}-seed{seed}", lambda m: print(f"[{algo} {seed}] {m}", flush=True)).rows
            summary.append((algo, seed, rows[0][2], rows[-1][2]))
    print("\nalgo          seed  first     final")
    for algo, seed, first, final in summary:
        print(f"{algo:<13} {seed:<4}  {first:8.3f}  {final:8.3f}")


if __name__ == "__main__":
    main()
