"""Write sampled episodes to a JSONL file, one episode per line."""

import argparse

from drl.config import ExperimentConfig, load_config
from drl.episodes import make_generator, write_episodes
from drl.numkernel import make_rng


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--stage", choices=["base", "fine_tune"], default="fine_tune")
    ap.add_argument("-n", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="episodes.jsonl")
    args = ap.parse_args()
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    gen = make_generator(cfg.data)
    rng = make_rng(args.seed, 7)
    shots = cfg.train.base_shots if args.stage == "base" else cfg.train.finetune_shots
    write_episodes(args.out, (gen.sample_episode(args.stage, shots, cfg.train.n_roi, rng) for _ in range(args.n)))
    print(f"wrote {args.n} {args.stage} episodes to {args.out}")


if __name__ == "__main__":
    main()
