"""Weak versus full supervision on synthetic single-slice phantoms.

Trains the micro U-Net with each objective in k-fold cross-validation,
evaluates the folds on their validation split and on a domain-shifted test
set, and ensembles the bounded model's folds. The default is a quick pass
(about six CPU minutes); ``--full`` runs the acceptance configuration
(roughly half an hour).

    python demos/03_desk_experiment.py [--full]
"""

import argparse
import time
from dataclasses import replace

from weakseg.experiment import DeskConfig, mean_metric, run_desk
from weakseg.metrics import relative_change


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--full", action="store_true")
    args = ap.parse_args()
    cfg = DeskConfig()
    seeds = (0, 1, 2)
    if not args.full:
        cfg = replace(cfg, n_cases=120, n_test=40, folds=3, epochs=50,
                      losses=("supervised_ce_dice", "partial_ce", "ce_it_cb"))
        seeds = (0,)

    t0 = time.perf_counter()
    res = run_desk(cfg, ensemble_seeds=seeds, log=print)
    print(f"\n{'loss':20s} {'val AP':>7s} {'test AP':>8s} {'test/val':>9s} {'Dice':>6s}")
    for loss, outs in res["cv"].items():
        val, test = mean_metric(outs, "val", "AP"), mean_metric(outs, "test", "AP")
        ratio = relative_change(test, val)
        print(f"{loss:20s} {val:7.3f} {test:8.3f} {ratio or float('nan'):9.2f} "
              f"{mean_metric(outs, 'val', 'dice_prostate'):6.3f}")
    for seed, g in res["ensembles"].items():
        members = mean_metric(g["members"], "test", "AP")
        print(f"ensemble seed {seed}: shifted-test AP {g['ensemble']['AP']:.3f} "
              f"vs member mean {members:.3f}")
    print(f"{time.perf_counter() - t0:.0f}s")


if __name__ == "__main__":
    main()
