"""Train every method on the desk-scale scenario and print a comparison table.

    python3 scripts/compare_methods.py --alpha 0.1 --rounds 30 --out runs/compare
"""
import argparse
import json
from pathlib import Path

import numpy as np

from fedack import experiment as X


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--alpha", type=float, default=0.1, help="Dirichlet concentration")
    ap.add_argument("--rounds", type=int, default=30)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--methods", default=",".join(X.METHODS))
    ap.add_argument("--out", default=None, help="optional output root for per-run files")
    args = ap.parse_args()

    base = X.ExperimentConfig(concentration=args.alpha, rounds=args.rounds,
                              seeds=[int(s) for s in args.seeds.split(",")])
    dataset = X.load_dataset(base.data)
    results = {}
    for method in args.methods.split(","):
        cfg = base.replace(method=method)
        runs = []
        for s in cfg.seeds:
            out = Path(args.out) / method / f"seed_{s}" if args.out else None
            runs.append(X.run_experiment(cfg, s, out, dataset).result)
        results[method] = runs

    target = float(np.mean([r.final_accuracy for r in results.get("fedavg", next(iter(results.values())))]))
    print(f"{'method':<10} {'max acc':>16} {'final acc':>16} {'rounds to ' + format(target, '.3f'):>18}")
    summary = {}
    for method, runs in results.items():
        mx = [r.max_accuracy for r in runs]
        fin = [r.final_accuracy for r in runs]
        rt = X.mean_rounds_to_target([r.curve for r in runs], target, base.rounds + 1)
        summary[method] = {"max_mean": float(np.mean(mx)), "max_std": float(np.std(mx)),
                           "final_mean": float(np.mean(fin)), "rounds_to_target": rt}
        print(f"{method:<10} {np.mean(mx):>9.4f}±{np.std(mx):.4f} {np.mean(fin):>9.4f}±{np.std(fin):.4f} {rt:>18.2f}")
    if args.out:
        Path(args.out, "summary.json").write_text(json.dumps({"target": target, "methods": summary}, indent=2))


if __name__ == "__main__":
    main()
