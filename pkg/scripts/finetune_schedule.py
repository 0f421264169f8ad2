"""How the DRL gain depends on the length of fine-tuning.

Runs DRL on and off for a range of fine-tune episode counts and prints the
mean accuracy difference. A doubled classification loss (lr x2 with DRL off)
is included as a control for the extra gradient signal DRL adds.
"""

import argparse

import numpy as np

from drl.config import ExperimentConfig
from drl.training import run_experiment


def mean_acc(cfg, seeds, **train):
    return np.mean([
        run_experiment(cfg.replace(train={**train, "seed": s}, data={"seed": s})).eval.query_accuracy
        for s in range(seeds)
    ])


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--episodes", default="10,20,30,50,100")
    args = ap.parse_args()
    cfg = ExperimentConfig()
    print(f"{'ft_eps':>6} {'drl_on':>8} {'drl_off':>8} {'gain':>8} {'2x_lr':>8}")
    for n in map(int, args.episodes.split(",")):
        on = mean_acc(cfg, args.seeds, finetune_episodes=n)
        off = mean_acc(cfg, args.seeds, finetune_episodes=n, use_drl=False)
        ctrl = mean_acc(cfg, args.seeds, finetune_episodes=n, use_drl=False, lr=2 * cfg.train.lr)
        print(f"{n:6d} {on:8.4f} {off:8.4f} {on - off:+8.4f} {ctrl:8.4f}")


if __name__ == "__main__":
    main()
