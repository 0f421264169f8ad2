"""Dump the relation matrix and per-layer GCN outputs for one episode to JSON."""

import argparse
import json

from drl import metanet as mn
from drl import relevance as rel
from drl.config import ExperimentConfig, load_config
from drl.episodes import make_generator
from drl.numkernel import make_rng
from drl.training import init_params


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=None)
    ap.add_argument("--checkpoint", default=None, help="parameters to use (default: fresh init)")
    ap.add_argument("--out", default="graph_dump.json")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    t = cfg.train
    params = mn.load_checkpoint(args.checkpoint) if args.checkpoint else init_params(cfg)
    p = mn.lift(params)
    ep = make_generator(cfg.data).sample_episode("fine_tune", t.finetune_shots, t.n_roi, make_rng(args.seed, 9))
    bundle = mn.forward(p, ep)
    sim = {k: v for k, v in p.items() if k.startswith("sim.")} or None
    graph = rel.build_graph(bundle, ep, rel.SimilarityMetric(t.metric), sim)
    slots = rel.prob_slots(ep.class_ids, ep.include_background)
    stack = rel.stack_for_episode(p, t.depth, slots, t.structure, t.activation,
                                  shift_negative=t.shift_negative, scale_by_nodes=t.scale_by_nodes)
    rel.gcn_forward(graph, stack)
    with open(args.out, "w") as fh:
        json.dump(rel.debug_dump(stack), fh)
    print(f"wrote {args.out} ({graph.n_nodes} nodes, width {graph.width})")


if __name__ == "__main__":
    main()
