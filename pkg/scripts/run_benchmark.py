"""Multi-seed comparison of GDDA, the energy baseline and both ablations.

    python scripts/run_benchmark.py --seeds 0 1 2 3 4 --out runs/bench
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from gdda.pipeline import ExperimentConfig, Pipeline, write_json

VARIANTS = (("gdda", "none"), ("energy_baseline", "none"), ("gdda", "no_pseudo_ind"), ("gdda", "no_pseudo_ood"))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--out", type=Path, default=Path("runs/bench"))
    args = ap.parse_args()
    base = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    rows = {f"{m}/{a}": [] for m, a in VARIANTS}
    for seed in args.seeds:
        cfg = replace(base, seed=seed, output_dir=str(args.out / f"seed-{seed}"))
        for method, ablation in VARIANTS:
            pipe = Pipeline(replace(cfg, ablation=ablation), args.out / "cache" / f"seed-{seed}")
            report = pipe.evaluate(method)
            pipe.write_metrics(report, method)
            rows[f"{method}/{ablation}"].append(report)
    summary = {}
    print(f"{'variant':28s} {'auroc':>13s} {'aupr':>13s} {'fpr95':>13s} {'ind_acc':>13s}")
    for name, reports in rows.items():
        stats = {k: (float(np.mean([r[k] for r in reports])), float(np.std([r[k] for r in reports])))
                 for k in ("auroc", "aupr", "fpr95", "ind_acc")}
        summary[name] = {"seeds": args.seeds, **{f"{k}_mean": m for k, (m, _) in stats.items()},
                         **{f"{k}_std": s for k, (_, s) in stats.items()}}
        print(f"{name:28s} " + " ".join(f"{m:6.3f}±{s:5.3f}" for m, s in stats.values()))
    write_json(summary, args.out / "summary.json")


if __name__ == "__main__":
    main()
