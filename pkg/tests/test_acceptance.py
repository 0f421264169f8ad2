"""End-to-end acceptance checks. Each test records a PASS/FAIL line that is
printed in the terminal summary."""

import time

import numpy as np
import pytest

from drl import relevance as rel
from drl import training as tr
from drl.checks import gradient_suite
from drl.cli import main
from drl.config import ExperimentConfig
from drl.episodes import make_generator

pytestmark = pytest.mark.slow

SEEDS = range(10)


def random_graph(rng, n_anchor, n_drift, width):
    feats = rng.standard_normal((n_anchor + n_drift, int(rng.integers(2, 9))))
    s = rel.relation_matrix(rel.SimilarityMetric("pearson"), feats).value
    x0 = np.zeros((n_anchor + n_drift, width))
    x0[np.arange(n_anchor), rng.integers(0, width, n_anchor)] = 1.0
    logits = 3.0 * rng.standard_normal((n_drift, width))
    x0[n_anchor:] = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    mask = np.r_[np.ones(n_anchor, bool), np.zeros(n_drift, bool)]
    return rel.graph_from_arrays(s, x0, mask, rng.integers(0, width, n_drift))


def sizes(rng):
    return int(rng.integers(1, 8)), int(rng.integers(1, 12)), int(rng.integers(2, 7))


@pytest.fixture(scope="module")
def standard_runs():
    """Evaluations of the standard setup for each seed, per variant."""
    variants = {"drl_on": {}, "drl_off": {"use_drl": False}, "meta_off": {"use_meta": False}}
    out = {}
    for name, change in variants.items():
        out[name] = [tr.run_experiment(ExperimentConfig().replace(train={**change, "seed": s}, data={"seed": s})).eval
                     for s in SEEDS]
    return out


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    cases = gradient_suite()
    elapsed = time.perf_counter() - t0
    worst = max(c.report.max_error for c in cases)
    ok = all(c.report.passed for c in cases) and worst <= 1e-4 and elapsed < 120
    criterion("gradient suite", ok, f"{len(cases)} cases, max rel error {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_group_loss_equivalence(criterion):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        n_a, n_d, width = sizes(rng)
        g = random_graph(rng, n_a, n_d, width)
        stack = rel.GcnStack([np.eye(width)], "normal", "identity", shift_negative=True)
        out = rel.gcn_forward(g, stack).value[n_a:]
        it = rel.group_loss_iterate(g.relation, g.x0.value[n_a:], g.x0.value[:n_a], 1).value
        worst = max(worst, float(np.max(np.abs(out - it))))
    ok = worst <= 1e-10
    criterion("group-loss equivalence", ok, f"100 instances, max |diff| {worst:.2e}")
    assert ok


def test_anchor_invariance_and_row_stochasticity(criterion):
    rng = np.random.default_rng(7)
    failures = 0
    worst = 0.0
    for i in range(1000):
        structure = ("normal", "residual")[i % 2]
        depth = 1 + (i // 2) % 10
        activation = "sigmoid" if i % 4 < 2 else "identity"
        n_a, n_d, width = sizes(rng)
        g = random_graph(rng, n_a, n_d, width)
        ws = [np.eye(width) + 0.5 * rng.standard_normal((width, width)) for _ in range(depth)]
        out = rel.gcn_forward(g, rel.GcnStack(ws, structure, activation)).value
        worst = max(worst, float(np.max(np.abs(out.sum(axis=1) - 1.0))))
        if not (np.array_equal(out[:n_a], g.x0.value[:n_a]) and np.all(out >= 0)):
            failures += 1
    ok = failures == 0 and worst <= 1e-9
    criterion("anchor invariance / row-stochasticity", ok,
              f"1000 graphs, {failures} anchor/sign failures, max |row sum - 1| {worst:.1e}")
    assert ok


def test_permutation_equivariance(criterion):
    rng = np.random.default_rng(11)
    bad = 0
    for i in range(100):
        n_a, n_d, width = sizes(rng)
        n_d += 1
        g = random_graph(rng, n_a, n_d, width)
        ws = [rng.standard_normal((width, width)) for _ in range(1 + i % 4)]
        structure = ("normal", "residual")[i % 2]
        perm = np.r_[np.arange(n_a), n_a + rng.permutation(n_d)]
        gp = rel.graph_from_arrays(g.relation.value[np.ix_(perm, perm)], g.x0.value[perm], g.anchor_mask,
                                   g.drift_labels[perm[n_a:] - n_a])
        out = rel.gcn_forward(g, rel.GcnStack(ws, structure))
        outp = rel.gcn_forward(gp, rel.GcnStack(ws, structure))
        la = rel.drl_loss(out, g.anchor_mask, g.drift_labels).value
        lb = rel.drl_loss(outp, gp.anchor_mask, gp.drift_labels).value
        if not (np.array_equal(out.value[perm], outp.value) and np.array_equal(la, lb)):
            bad += 1
    ok = bad == 0
    criterion("permutation equivariance", ok, f"100 instances, {bad} inexact")
    assert ok


def test_drl_effect_and_meta_ordering(standard_runs, criterion):
    on = np.array([e.query_accuracy for e in standard_runs["drl_on"]])
    off = np.array([e.query_accuracy for e in standard_runs["drl_off"]])
    meta_off = np.array([e.query_accuracy for e in standard_runs["meta_off"]])
    gain = on.mean() - off.mean()
    pooled = np.sqrt((on.var(ddof=1) + meta_off.var(ddof=1)) / 2)
    meta_gap = on.mean() - meta_off.mean()
    ok_drl = gain >= 0.03
    ok_meta = meta_gap <= 2 * pooled
    criterion("DRL effect", ok_drl, f"on {on.mean():.4f} vs off {off.mean():.4f} (gain {gain:+.4f}, need >= +0.03)")
    criterion("meta-loss ordering", ok_meta,
              f"meta on {on.mean():.4f} vs off {meta_off.mean():.4f} (gap {meta_gap:+.4f}, 2 sd {2 * pooled:.4f})")
    assert ok_drl and ok_meta


def test_depth_insensitivity(criterion):
    means, finite = [], True
    for depth in range(1, 7):
        accs = []
        for s in range(5):
            res = tr.run_experiment(ExperimentConfig().replace(train={"depth": depth, "seed": s}, data={"seed": s}))
            finite &= all(np.isfinite(r.total) for r in res.losses)
            accs.append(res.eval.query_accuracy)
        means.append(float(np.mean(accs)))
    spread = max(means) - min(means)
    ok = spread <= 0.05 and finite
    criterion("depth insensitivity", ok, f"L=1..6 means {[round(m, 4) for m in means]}, range {spread:.4f}")
    assert ok


def test_inference_path_independence(criterion):
    cfg = ExperimentConfig().replace(train={"base_episodes": 40, "finetune_episodes": 10})
    params = tr.run_experiment(cfg).params
    gen = make_generator(cfg.data)
    a = tr.evaluate(gen, cfg.replace(train={"use_drl": True}), params)
    b = tr.evaluate(gen, cfg.replace(train={"use_drl": False}), params)
    ok = a.to_dict() == b.to_dict()
    criterion("inference-path independence", ok, f"accuracy {a.query_accuracy!r} vs {b.query_accuracy!r}")
    assert ok


def test_train_determinism(tmp_path, criterion):
    first, second = tmp_path / "first", tmp_path / "second"
    assert main(["train", "--out", str(first)]) == 0
    assert main(["train", "--config", str(first / "manifest.json"), "--out", str(second)]) == 0
    same = {n: (first / n).read_bytes() == (second / n).read_bytes() for n in ("losses.csv", "checkpoint.json")}
    ok = all(same.values())
    criterion("train determinism", ok, ", ".join(f"{n} {'identical' if v else 'differs'}" for n, v in same.items()))
    assert ok


def test_separation_trend(standard_runs, criterion):
    on = np.mean([e.class_separation for e in standard_runs["drl_on"]])
    off = np.mean([e.class_separation for e in standard_runs["drl_off"]])
    ok = on > off
    criterion("separation trend", ok, f"DRL {on:.4f} vs no-DRL {off:.4f}")
    assert ok
