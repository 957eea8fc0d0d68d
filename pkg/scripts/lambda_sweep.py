"""Centroid distance of sampled factors as the shift strength grows.

    python scripts/lambda_sweep.py --seeds 0 1 2 --lambdas 0 0.1 0.4 0.7
"""
import argparse
from dataclasses import replace
from pathlib import Path

import numpy as np

from gdda.pipeline import ExperimentConfig, run_lambda_sweep


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--lambdas", type=float, nargs="+", default=[0.0, 0.1, 0.4, 0.7])
    ap.add_argument("--out", type=Path, default=Path("runs/sweep"))
    args = ap.parse_args()
    base = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    for seed in args.seeds:
        cfg = replace(base, seed=seed, output_dir=str(args.out / f"seed-{seed}"))
        rows = run_lambda_sweep(cfg, args.lambdas)["rows"]
        dc = [r["mean_distance_c"] for r in rows]
        ds = [r["mean_distance_s"] for r in rows]
        mono = bool(np.all(np.diff(dc) >= 0) and np.all(np.diff(ds) >= 0))
        print(f"seed {seed}: " + "  ".join(f"λ={r['lambda']:g} c={r['mean_distance_c']:.3f} s={r['mean_distance_s']:.3f}"
                                           for r in rows) + f"  monotone={mono}")
    print(f"projection CSVs under {args.out}/seed-*/sweep/")


if __name__ == "__main__":
    main()
