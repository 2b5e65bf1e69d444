"""Active learning on synthetic 5-way 1-shot tasks.

    python scripts/run_active.py --config configs/active_bmaml.json --out runs/active

Meta-trains, then runs entropy and random acquisition on held-out tasks and
writes the mean accuracy after each acquisition to ``active.csv``.
"""
import argparse
from pathlib import Path

from bmaml.config import load_config
from bmaml.experiment import active_histories, train, write_active_csv


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--config", default=str(Path(__file__).resolve().parent.parent / "configs" / "active_bmaml.json"))
    p.add_argument("--out", default="runs/active")
    p.add_argument("--tasks", type=int, default=50)
    p.add_argument("--override", action="append", default=[])
    args = p.parse_args()
    cfg = load_config(args.config, args.override)
    out = Path(args.out)
    theta = train(cfg, out, print).theta
    hist = active_histories(cfg, theta, args.tasks)
    write_active_csv(out / "active.csv", hist)
    ent, rnd = hist["entropy"].mean(axis=0), hist["random"].mean(axis=0)
    for a, (e, r) in enumerate(zip(ent, rnd)):
        print(f"{a:2d}  entropy {e:.4f}  random {r:.4f}")


if __name__ == "__main__":
    main()
