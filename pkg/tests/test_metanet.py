import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drl import metanet as mn
from drl import numkernel as nk
from drl.episodes import DatasetSpec, make_generator
from drl.numkernel import ShapeError, Var


def const(**arrays):
    return {k.replace("_", "."): Var(np.asarray(v, dtype=np.float64)) for k, v in arrays.items()}


def test_extract_zero_weights_gives_zero_features():
    p = const(ext_w1=np.zeros((4, 3)), ext_b1=np.zeros((1, 3)), ext_w2=np.zeros((3, 2)), ext_b2=np.zeros((1, 2)))
    out = mn.extract(p, np.random.default_rng(0).standard_normal((5, 4)))
    assert out.shape == (5, 2) and np.all(out.value == 0)


def test_extract_identity_path_hand_trace():
    eye = np.eye(2)
    p = const(ext_w1=eye, ext_b1=np.zeros((1, 2)), ext_w2=eye, ext_b2=np.zeros((1, 2)))
    out = mn.extract(p, [[1.0, -2.0], [-0.5, 3.0]]).value
    assert np.array_equal(out, [[1.0, 0.0], [0.0, 3.0]])


def test_extract_width_mismatch():
    p = const(ext_w1=np.zeros((4, 3)), ext_b1=np.zeros((1, 3)), ext_w2=np.zeros((3, 2)), ext_b2=np.zeros((1, 2)))
    with pytest.raises(ShapeError):
        mn.extract(p, np.zeros((2, 5)))


def test_class_attentive_examples():
    assert np.array_equal(mn.class_attentive(np.zeros((1, 3)), 1, 1).value, np.full((1, 3), 0.5))
    a = mn.class_attentive([[2.0, 0.0], [0.0, 2.0]], 1, 2).value
    assert np.allclose(a, 1.0 / (1.0 + math.exp(-1.0)), atol=1e-15)
    assert a[0, 0] == pytest.approx(0.7311, abs=1e-4)


def test_class_attentive_ragged_groups():
    with pytest.raises(ShapeError):
        mn.class_attentive(np.zeros((5, 2)), 2, 3)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 10_000))
def test_class_attentive_shot_order_and_range(C, K, seed):
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((C * K, 3)) * 5
    perm = np.concatenate([rng.permutation(K) + c * K for c in range(C)])
    a = mn.class_attentive(v, C, K).value
    assert np.array_equal(a, mn.class_attentive(v[perm], C, K).value)
    assert np.all((a > 0) & (a < 1))


def test_aggregate_examples():
    assert np.array_equal(mn.aggregate([[1.0, 2.0]], [[0.5, 0.5]]).value, [[0.5, 1.0, 0.5, 1.5, 1.0, 2.0]])
    r = np.array([[3.0, -1.0]])
    ones = np.ones((1, 2))
    assert np.array_equal(mn.aggregate(ones, ones).value, [[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]])
    assert np.array_equal(mn.aggregate(r, np.ones((1, 2))).value, [[3.0, -1.0, 2.0, -2.0, 3.0, -1.0]])
    assert np.array_equal(mn.aggregate(r, np.zeros((1, 2))).value, [[0.0, 0.0, 3.0, -1.0, 3.0, -1.0]])
    with pytest.raises(ShapeError):
        mn.aggregate(np.ones((1, 2)), np.ones((1, 3)))


def _head(w, b):
    return const(head_w=w, head_b=b)


def test_classify_equal_logits_uniform():
    p = _head(np.zeros((6, 4)), np.zeros((1, 4)))
    prob = mn.classify(p, np.ones((2 * 3, 6)), 2, [0, 1, 2], True).value
    assert np.allclose(prob, 0.25)


def test_classify_dominant_logit_is_one_hot():
    b = np.zeros((1, 3))
    b[0, 2] = 50.0
    prob = mn.classify(_head(np.zeros((3, 3)), b), np.zeros((3, 3)), 1, [0, 1, 2], False).value
    assert prob[0, 2] == pytest.approx(1.0, abs=1e-15) and prob[0, :2].max() < 1e-20


def test_classify_two_class_closed_form():
    # f = 1: r = 2, a = (0.5, 0.25)
    rhat = mn.aggregate_pairs([[2.0]], [[0.5], [0.25]]).value
    assert np.array_equal(rhat, [[1.0, 1.5, 2.0], [0.5, 1.75, 2.0]])
    w = np.array([[1.0, -1.0], [0.5, 0.0], [0.0, 0.25]])
    b = np.array([[0.1, -0.2]])
    prob = mn.classify(_head(w, b), rhat, 1, [0, 1], False).value
    l0, l1 = 1.0 + 0.75 + 0.1, -0.5 + 0.5 - 0.2
    p0 = 1.0 / (1.0 + math.exp(l1 - l0))
    assert np.allclose(prob, [[p0, 1 - p0]], atol=1e-15)


def test_classify_two_class_with_background_closed_form():
    rhat = mn.aggregate_pairs([[2.0]], [[0.5], [0.25]]).value
    w = np.array([[0.3, 1.0, -1.0], [-0.2, 0.5, 0.0], [0.1, 0.0, 0.25]])
    b = np.array([[0.05, 0.1, -0.2]])
    prob = mn.classify(_head(w, b), rhat, 1, [0, 1], True).value
    mean_row = np.array([0.75, 1.625, 2.0])
    lb = 0.75 * 0.3 - 1.625 * 0.2 + 0.2 + 0.05
    l0, l1 = 1.85, -0.2
    z = math.exp(lb) + math.exp(l0) + math.exp(l1)
    assert mean_row @ w[:, 0] + b[0, 0] == pytest.approx(lb)
    assert np.allclose(prob, [[math.exp(lb) / z, math.exp(l0) / z, math.exp(l1) / z]], atol=1e-15)


def test_classify_missing_rows():
    with pytest.raises(ShapeError):
        mn.classify(_head(np.zeros((3, 3)), np.zeros((1, 3))), np.zeros((5, 3)), 2, [0, 1, 2], False)


def test_cls_loss_examples():
    assert mn.cls_loss([[0.0, 1.0, 0.0]], [1]).value.item() == 0.0
    assert mn.cls_loss(np.full((3, 4), 0.25), [0, 1, 3]).value.item() == pytest.approx(math.log(4))
    assert mn.cls_loss([[0.7, 0.3]], [0]).value.item() == pytest.approx(-math.log(0.7), abs=1e-15)
    assert mn.cls_loss([[0.7, 0.3]], [0]).value.item() == pytest.approx(0.35667, abs=1e-5)
    with pytest.raises(mn.LabelError):
        mn.cls_loss([[0.7, 0.3]], [2])


def test_meta_loss_examples():
    v = np.eye(3)
    p = const(meta_w=50.0 * np.eye(3), meta_b=np.zeros((1, 3)))
    assert mn.meta_loss(p, v, [1, 2, 3], [0, 1, 2]).value.item() <= 1e-6
    p0 = const(meta_w=np.zeros((3, 4)), meta_b=np.zeros((1, 4)))
    assert mn.meta_loss(p0, v, [1, 2, 3], [0, 1, 2]).value.item() == pytest.approx(math.log(3))
    with pytest.raises(mn.LabelError):
        mn.meta_loss(p, v, [0, 1, 2], [0, 1, 2])


def test_meta_loss_two_class_toy():
    p = const(meta_w=[[2.0, 0.0], [0.0, 1.0]], meta_b=[[0.0, 0.0]])
    got = mn.meta_loss(p, [[1.0, 0.0], [0.0, 1.0]], [1, 2], [0, 1]).value.item()
    want = 0.5 * (math.log1p(math.exp(-2.0)) + math.log1p(math.exp(-1.0)))
    assert got == pytest.approx(want, abs=1e-15)


def test_meta_loss_reads_episode_class_columns():
    w = np.zeros((2, 5))
    w[0, 3], w[1, 4] = 50.0, 50.0
    p = const(meta_w=w, meta_b=np.zeros((1, 5)))
    assert mn.meta_loss(p, np.eye(2), [1, 2], [3, 4]).value.item() < 1e-6


def _episode_and_params(background, seed=0):
    spec = DatasetSpec(base_class_count=3, novel_class_count=0, base_shots=4, novel_shots=2, raw_dim=5,
                       include_background=background, seed=seed)
    gen = make_generator(spec)
    ep = gen.sample_episode("base", 2, 6, nk.make_rng(seed, 1))
    shape = mn.NetShape(raw_dim=5, hidden_dim=6, feat_dim=4, n_classes=3, include_background=background)
    params = mn.init_params(shape, nk.make_rng(seed, 2))
    return ep, params


@pytest.mark.parametrize("background", [True, False])
def test_forward_probability_rows(background):
    ep, params = _episode_and_params(background)
    b = mn.forward(mn.lift(params), ep)
    assert b.prob.shape == (6, 3 + background)
    assert np.allclose(b.prob.value.sum(axis=1), 1.0, atol=1e-9)
    assert b.aggregated.shape == (18, 12)
    assert np.all((b.attentive.value > 0) & (b.attentive.value < 1))


@pytest.mark.parametrize("background", [True, False])
def test_cls_loss_gradient_through_extractor_and_head(background):
    for seed in range(3):
        ep, params = _episode_and_params(background, seed)
        params["ext.b1"] = 0.1 * np.ones_like(params["ext.b1"])
        params["head.b"] = 0.1 * nk.make_rng(seed, 5).standard_normal(params["head.b"].shape)
        sub = {k: v for k, v in params.items() if k.startswith(("ext.", "head."))}
        fixed = mn.lift({k: v for k, v in params.items() if k not in sub})

        def f(tape):
            p = {**fixed, **mn.register(tape, sub)}
            b = mn.forward(p, ep)
            return mn.cls_loss(b.prob, mn.prob_labels(ep.query_labels, background))

        rep = nk.gradient_check(f, sub)
        assert rep.passed, rep.errors


def test_checkpoint_round_trip_bitwise(tmp_path):
    _, params = _episode_and_params(True)
    params["odd"] = np.array([[1e-310, -0.0, np.pi]])
    path = tmp_path / "ck.json"
    mn.save_checkpoint(path, params)
    back = mn.load_checkpoint(path)
    assert back.keys() == params.keys()
    for k in params:
        assert back[k].shape == params[k].shape
        assert back[k].tobytes() == params[k].tobytes()
