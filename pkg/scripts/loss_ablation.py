"""Meta loss and DRL toggles over several seeds on the standard setup.

    python scripts/loss_ablation.py --seeds 10
"""

import argparse
import itertools

import numpy as np

from drl.config import ExperimentConfig, load_config
from drl.training import run_experiment


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()

    print(f"{'meta':>5} {'drl':>5} {'acc':>8} {'sd':>7} {'novel':>8} {'sep':>8}")
    for use_meta, use_drl in itertools.product([False, True], repeat=2):
        accs, novel, sep = [], [], []
        for s in range(args.seeds):
            run = cfg.replace(train={"use_meta": use_meta, "use_drl": use_drl, "seed": s}, data={"seed": s})
            ev = run_experiment(run).eval
            accs.append(ev.query_accuracy)
            novel.append(ev.novel_accuracy)
            sep.append(ev.class_separation)
        print(f"{use_meta!s:>5} {use_drl!s:>5} {np.mean(accs):8.4f} {np.std(accs):7.4f} "
              f"{np.mean(novel):8.4f} {np.mean(sep):8.4f}")


if __name__ == "__main__":
    main()
