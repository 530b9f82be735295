"""Grid-search tau for the adaptive interval on a held-out validation split.

Every cell trains the ``ours`` policy with ``val_size`` training samples held
out; the test split is never read. Writes ``tau_grid.json`` and prints the
mean validation accuracy per tau.

    python scripts/tau_grid.py presets/mlp_mnist_444.cfg --taus 10 100 1000 --seeds 0 1
"""

from __future__ import annotations

import argparse
import json
import statistics
from pathlib import Path

from fxpgrad.experiment.config import load_config
from fxpgrad.experiment.runner import train_run


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("config")
    p.add_argument("--taus", type=float, nargs="+", default=[10, 30, 100, 300, 1000, 3000])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1])
    p.add_argument("--val-size", type=int, default=1000)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", default="runs/tau_grid")
    args = p.parse_args(argv)

    out = Path(args.out)
    results = {}
    for tau in args.taus:
        accs, gammas = [], []
        for seed in args.seeds:
            overrides = {
                "policy": "ours",
                "tau": repr(tau),
                "seed": str(seed),
                "val_size": str(args.val_size),
                "out": str(out / f"tau{tau:g}_s{seed}"),
            }
            if args.epochs is not None:
                overrides["epochs"] = str(args.epochs)
            summary = train_run(load_config(args.config, overrides))
            accs.append(summary["final_test_acc"])
            gammas.extend(summary["final_gamma"].values())
        results[f"{tau:g}"] = {
            "val_acc": accs,
            "mean_val_acc": statistics.fmean(accs),
            "mean_final_gamma": statistics.fmean(gammas) if gammas else None,
        }
        print(f"tau={tau:<8g} val_acc={100 * results[f'{tau:g}']['mean_val_acc']:.2f}  "
              f"mean final gamma={results[f'{tau:g}']['mean_final_gamma']}")
    best = max(results, key=lambda k: results[k]["mean_val_acc"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "tau_grid.json").write_text(json.dumps({"best_tau": float(best), "grid": results}, indent=2) + "\n")
    print(f"best tau: {best}")


if __name__ == "__main__":
    main()
