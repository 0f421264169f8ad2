"""Command-line experiment runner.

Subcommands write CSV/JSON artifacts under ``--out`` (default ``$DRL_OUT_DIR``
or ``./runs``). Exit codes: 0 ok, 2 configuration error, 3 numerical failure.

CSV schemas (``schema_version`` is the last column of every file):

    losses.csv        stage, episode, l_cls, l_meta, l_drl, total
    ablate_<axis>.csv variant, seed, query_accuracy, class_separation,
                      query_accuracy_std, class_separation_std
    depth_sweep.csv   depth, seed, query_accuracy, class_separation,
                      query_accuracy_std, class_separation_std
    group_compare.csv method, shots, seed, query_accuracy, class_separation,
                      query_accuracy_std, class_separation_std

Summary rows carry ``seed = summary``, the mean in the value columns and the
population standard deviation in the ``*_std`` columns.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import metanet as mn
from .checks import gradient_suite
from .config import ExperimentConfig, apply_overrides, from_dict, load_config
from .episodes import BudgetError, ConfigError
from .training import NonFiniteLossError, run_experiment

SCHEMA_VERSION = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

ABLATIONS: dict[str, dict[str, dict]] = {
    "drl": {"drl_on": {"use_drl": True}, "drl_off": {"use_drl": False}},
    "meta": {"meta_on": {"use_meta": True}, "meta_off": {"use_meta": False}},
    "structure": {"normal": {"structure": "normal"}, "residual": {"structure": "residual"}},
    "metric": {m: {"metric": m} for m in ("pearson", "cosine", "euclidean", "gaussian", "learned")},
}


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([*header, "schema_version"])
        for row in rows:
            w.writerow([_fmt(v) for v in row] + [SCHEMA_VERSION])


def seeded(cfg: ExperimentConfig, seed: int) -> ExperimentConfig:
    return cfg.replace(train={"seed": seed}, data={"seed": seed})


def resolve_config(args) -> ExperimentConfig:
    path = args.config
    if path and str(path).endswith(".json"):
        try:
            cfg = from_dict(json.loads(Path(path).read_text())["config"])
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: not a readable run manifest ({exc})") from None
    else:
        cfg = load_config(path)
    overrides = list(args.set or [])
    if getattr(args, "shots", None) is not None:
        overrides += [f"train.base_shots={args.shots}", f"train.finetune_shots={args.shots}"]
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    return apply_overrides(cfg, overrides).validate()


def seed_list(args, cfg: ExperimentConfig) -> list[int]:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    return [cfg.train.seed + i for i in range(args.seeds)]


def out_dir(args) -> Path:
    root = Path(args.out or os.environ.get("DRL_OUT_DIR") or "runs")
    root.mkdir(parents=True, exist_ok=True)
    return root


def manifest(cfg: ExperimentConfig, seeds: list[int], outputs: dict[str, str], **extra) -> dict:
    return {
        "tool": "drl",
        "version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "seeds": seeds,
        "outputs": outputs,
        **extra,
    }


def summary_rows(keys: list, results: dict) -> list[list]:
    rows = []
    for key in keys:
        acc = np.array([r[0] for r in results[key]])
        sep = np.array([r[1] for r in results[key]])
        rows.append([*key, "summary", acc.mean(), sep.mean(), acc.std(), sep.std()])
    return rows


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = out_dir(args)
    result = run_experiment(cfg)
    ckpt, loss_csv, man = out / "checkpoint.json", out / "losses.csv", out / "manifest.json"
    mn.save_checkpoint(ckpt, result.params)
    rows = []
    counters: dict[str, int] = {}
    for rep in result.losses:
        i = counters.get(rep.stage, 0)
        counters[rep.stage] = i + 1
        r = rep.row(i)
        rows.append([r["stage"], r["episode"], r["l_cls"], r["l_meta"], r["l_drl"], r["total"]])
    write_csv(loss_csv, ["stage", "episode", "l_cls", "l_meta", "l_drl", "total"], rows)
    doc = manifest(cfg, [cfg.train.seed], {"checkpoint": str(ckpt), "losses": str(loss_csv)},
                   shots=cfg.train.finetune_shots, eval=result.eval.to_dict())
    man.write_text(json.dumps(doc, indent=2))
    print(f"query_accuracy={result.eval.query_accuracy:.4f} class_separation={result.eval.class_separation:.4f}")
    print(f"wrote {ckpt}, {loss_csv}, {man}")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.axis not in ABLATIONS:
        raise ConfigError(f"unknown ablation axis {args.axis!r}; choose from {sorted(ABLATIONS)}")
    seeds = seed_list(args, cfg)
    variants = ABLATIONS[args.axis]
    results: dict[tuple, list] = {}
    rows = []
    for name, change in variants.items():
        for s in seeds:
            ev = run_experiment(seeded(cfg.replace(train=change), s)).eval
            results.setdefault((name,), []).append((ev.query_accuracy, ev.class_separation))
            rows.append([name, s, ev.query_accuracy, ev.class_separation, "", ""])
    rows += summary_rows([(n,) for n in variants], results)
    out = out_dir(args)
    path = out / f"ablate_{args.axis}.csv"
    write_csv(path, ["variant", "seed", "query_accuracy", "class_separation",
                     "query_accuracy_std", "class_separation_std"], rows)
    (out / f"ablate_{args.axis}.manifest.json").write_text(
        json.dumps(manifest(cfg, seeds, {"csv": str(path)}, axis=args.axis), indent=2))
    print(f"wrote {path}")
    return 0


def parse_int_list(text: str, what: str) -> list[int]:
    items: list[int] = []
    for part in filter(None, (p.strip() for p in text.split(","))):
        try:
            if "-" in part[1:]:
                lo, hi = part.split("-", 1)
                items += list(range(int(lo), int(hi) + 1))
            else:
                items.append(int(part))
        except ValueError:
            raise ConfigError(f"cannot parse {what} list {text!r}") from None
    if not items:
        raise ConfigError(f"{what} list is empty")
    return items


def dedupe(values: list[int], what: str) -> list[int]:
    seen: list[int] = []
    for v in values:
        if v in seen:
            print(f"warning: duplicate {what} {v} ignored", file=sys.stderr)
        else:
            seen.append(v)
    return seen


def cmd_depth_sweep(args) -> int:
    cfg = resolve_config(args)
    depths = dedupe(parse_int_list(args.depths, "depth"), "depth")
    if min(depths) < 1:
        raise ConfigError("every depth must be >= 1")
    seeds = seed_list(args, cfg)
    results: dict[tuple, list] = {}
    rows = []
    for d in depths:
        for s in seeds:
            ev = run_experiment(seeded(cfg.replace(train={"depth": d}), s)).eval
            results.setdefault((d,), []).append((ev.query_accuracy, ev.class_separation))
            rows.append([d, s, ev.query_accuracy, ev.class_separation, "", ""])
    rows += summary_rows([(d,) for d in depths], results)
    out = out_dir(args)
    path = out / "depth_sweep.csv"
    write_csv(path, ["depth", "seed", "query_accuracy", "class_separation",
                     "query_accuracy_std", "class_separation_std"], rows)
    (out / "depth_sweep.manifest.json").write_text(
        json.dumps(manifest(cfg, seeds, {"csv": str(path)}, depths=depths), indent=2))
    print(f"wrote {path}")
    return 0


def cmd_group_compare(args) -> int:
    cfg = resolve_config(args)
    shots = dedupe(parse_int_list(args.shots_list, "shot"), "shot")
    if min(shots) < 1:
        raise ConfigError("every shot count must be >= 1")
    if max(shots) > cfg.data.novel_shots:
        raise ConfigError(f"shot count {max(shots)} exceeds data.novel_shots={cfg.data.novel_shots}")
    if args.steps < 1:
        raise ConfigError("--steps must be >= 1")
    seeds = seed_list(args, cfg)
    methods = {"gcn": {"group_loss": False}, "group_loss": {"group_loss": True, "group_steps": args.steps}}
    results: dict[tuple, list] = {}
    rows = []
    for k in shots:
        for method, change in methods.items():
            for s in seeds:
                run_cfg = cfg.replace(train={**change, "use_drl": True, "base_shots": k, "finetune_shots": k})
                ev = run_experiment(seeded(run_cfg, s)).eval
                results.setdefault((method, k), []).append((ev.query_accuracy, ev.class_separation))
                rows.append([method, k, s, ev.query_accuracy, ev.class_separation, "", ""])
    rows += summary_rows([(m, k) for k in shots for m in methods], results)
    out = out_dir(args)
    path = out / "group_compare.csv"
    write_csv(path, ["method", "shots", "seed", "query_accuracy", "class_separation",
                     "query_accuracy_std", "class_separation_std"], rows)
    (out / "group_compare.manifest.json").write_text(
        json.dumps(manifest(cfg, seeds, {"csv": str(path)}, shots=shots, steps=args.steps), indent=2))
    print(f"wrote {path}")
    return 0


def cmd_gradcheck(args) -> int:
    cases = gradient_suite(step=args.step, tolerance=args.tolerance)
    ok = True
    for case in cases:
        status = "PASS" if case.report.passed else "FAIL"
        ok &= case.report.passed
        print(f"{status} {case.label} max_rel_error={case.report.max_error:.3e}")
    return 0 if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file or a run manifest (JSON)")
    common.add_argument("--seed", type=int, default=None, help="base seed (sets train.seed and data.seed)")
    common.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds to run")
    common.add_argument("--out", default=None, help="output directory (default $DRL_OUT_DIR or ./runs)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.lr=0.05")

    parser = argparse.ArgumentParser(prog="drl", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"drl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="base training then fine-tuning; writes checkpoint, losses, manifest")
    p.add_argument("--shots", type=int, default=None, help="K for both stages")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", parents=[common], help="compare variants along one axis")
    p.add_argument("--axis", required=True, help="drl | meta | structure | metric")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("depth-sweep", parents=[common], help="accuracy against GCN depth")
    p.add_argument("--depths", default="1-10", help="comma list or ranges, e.g. 1,2,4 or 1-10")
    p.set_defaults(func=cmd_depth_sweep)

    p = sub.add_parser("group-compare", parents=[common], help="dynamic GCN against the group-loss refinement")
    p.add_argument("--shots", dest="shots_list", default="1,2,3,5,10", help="comma list of shot counts")
    p.add_argument("--steps", type=int, default=5, help="group-loss iterations T")
    p.set_defaults(func=cmd_group_compare)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BudgetError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteLossError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
