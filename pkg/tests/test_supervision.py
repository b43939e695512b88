import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from dyss import decoder as Dm
from dyss import supervision as Sv
from dyss.kernels import Tensor, grad_check
from dyss.kernels.tensor import as_tensor
from dyss.queries import encode_boxes
from dyss.verify import toy_problem


def brute_force_min(cost):
    n, m = cost.shape
    if n <= m:
        return min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(m), n))
    return min(sum(cost[p[j], j] for j in range(m)) for p in itertools.permutations(range(n), m))


def total_cost(cost, match):
    return sum(cost[p, g] for p, g in match.pairs)


# ---------------------------------------------------------------- hungarian

def test_hungarian_trivial_cases(each_backend):
    assert Sv.hungarian([[3.0]]).pairs == [(0, 0)]
    cost = np.ones((3, 3)) * 5 - 4 * np.eye(3)
    assert Sv.hungarian(cost).pairs == [(0, 0), (1, 1), (2, 2)]


def test_hungarian_empty_ground_truth():
    m = Sv.hungarian(np.zeros((4, 0)))
    assert m.pairs == [] and list(m.unmatched) == [0, 1, 2, 3]


def test_hungarian_rejects_non_finite():
    with pytest.raises(ValueError):
        Sv.hungarian([[1.0, np.nan]])


@pytest.mark.parametrize("seed", range(100))
def test_hungarian_7x7_matches_bruteforce(seed, each_backend):
    cost = np.random.default_rng(seed).random((7, 7))
    m = Sv.hungarian(cost)
    assert total_cost(cost, m) == pytest.approx(brute_force_min(cost), abs=1e-12)


@pytest.mark.parametrize("shape", [(2, 5), (5, 2), (4, 6), (6, 3), (1, 7), (7, 1)])
def test_hungarian_rectangular_bruteforce(shape, rng):
    cost = rng.random(shape)
    m = Sv.hungarian(cost)
    assert len(m.pairs) == min(shape)
    assert len({p for p, _ in m.pairs}) == len({g for _, g in m.pairs}) == min(shape)
    assert total_cost(cost, m) == pytest.approx(brute_force_min(cost), abs=1e-12)
    assert len(m.unmatched) == shape[0] - len(m.pairs)


@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 40))
@settings(max_examples=60, deadline=None)
def test_hungarian_matches_scipy(seed, n, m):
    cost = np.random.default_rng(seed).normal(size=(n, m))
    rows, cols = linear_sum_assignment(cost)
    assert total_cost(cost, Sv.hungarian(cost)) == pytest.approx(cost[rows, cols].sum(), abs=1e-9)


@given(st.integers(0, 2**31), st.floats(0.01, 100.0))
@settings(max_examples=40, deadline=None)
def test_hungarian_scale_invariant(seed, scale):
    cost = np.random.default_rng(seed).random((6, 8))
    a, b = Sv.hungarian(cost), Sv.hungarian(cost * scale)
    assert total_cost(cost, a) == pytest.approx(total_cost(cost, b), abs=1e-12)


# ---------------------------------------------------------------- match cost

def gt_box(x, y, cls_w=2.0):
    return [x, y, 0.0, cls_w, 4.0, 1.5, 0.3, 1.0, 0.0]


def test_perfect_prediction_is_row_minimum():
    gt = np.array([gt_box(0, 0), gt_box(10, 5), gt_box(-4, 8)])
    logits = np.full((3, 4), -5.0)
    logits[np.arange(3), [0, 1, 2]] = 5.0
    cost = Sv.match_cost(logits, encode_boxes(gt), [0, 1, 2], gt)
    assert list(cost.argmin(axis=1)) == [0, 1, 2]


def test_duplicate_predictions_have_equal_rows(rng):
    gt = np.array([gt_box(0, 0), gt_box(10, 5)])
    boxes = encode_boxes(np.array([gt_box(1, 1), gt_box(1, 1)]))
    logits = np.tile(rng.normal(size=(1, 4)), (2, 1))
    cost = Sv.match_cost(logits, boxes, [0, 3], gt)
    assert np.array_equal(cost[0], cost[1])


def test_match_cost_hand_case():
    gt = np.array([gt_box(0, 0), gt_box(10, 0)])
    pred = encode_boxes(np.array([gt_box(0, 0), gt_box(5, 0)]))
    logits = np.zeros((2, 2))
    logits[0, 1] = np.log(3.0)            # sigmoid -> 0.75
    cost = Sv.match_cost(logits, pred, [0, 1], gt)
    expected = np.array([[2 * 0.5 + 0.0, 2 * 0.25 + 1.0],
                         [2 * 0.5 + 0.5, 2 * 0.5 + 0.5]])
    assert np.allclose(cost, expected, rtol=0, atol=1e-14)


# ---------------------------------------------------------------- focal

def test_focal_hand_value():
    loss = Sv.focal_loss(np.zeros((1, 1)), [0]).data
    assert loss == pytest.approx(0.25 * 0.25 * np.log(2), abs=1e-15)


def test_focal_gamma_zero_is_weighted_ce(rng):
    logits = rng.normal(size=(5, 3))
    targets = np.array([0, -1, 2, 1, -1])
    p = 1 / (1 + np.exp(-logits))
    y = np.zeros((5, 3))
    y[[0, 2, 3], [0, 2, 1]] = 1
    ce = -(0.25 * y * np.log(p) + 0.75 * (1 - y) * np.log(1 - p)).sum() / 5
    assert Sv.focal_loss(logits, targets, gamma=0.0).data == pytest.approx(ce, rel=1e-13)


def test_focal_confident_correct_is_near_zero():
    logits = np.array([[30.0, -30.0], [-30.0, -30.0]])
    assert Sv.focal_loss(logits, [0, -1]).data < 1e-20


def test_focal_grad(rng):
    rep = grad_check(lambda x: Sv.focal_loss(x, [1, -1, 0]), [rng.normal(size=(3, 4))])
    assert rep.passed(1e-4), rep.describe()


# ---------------------------------------------------------------- l1

def test_l1_exact_is_zero():
    gt = np.array([gt_box(1, 2), gt_box(3, 4)])
    m = Sv.MatchResult([(0, 1), (1, 0)], np.array([], dtype=np.int64))
    loss, empty = Sv.l1_box_loss(encode_boxes(gt[[1, 0]]), gt, m)
    assert not empty and loss.data == pytest.approx(0.0, abs=1e-14)


def test_l1_yaw_wraps():
    g, p = np.array([gt_box(0, 0)]), np.array([gt_box(0, 0)])
    g[0, 6], p[0, 6] = np.pi - 0.01, -np.pi + 0.01
    m = Sv.MatchResult([(0, 0)], np.array([], dtype=np.int64))
    loss, _ = Sv.l1_box_loss(encode_boxes(p), g, m)
    assert loss.data * 9 == pytest.approx(0.02, abs=1e-12)


def test_l1_single_pair_hand_case():
    g = np.array([[0.0, 0.0, 0.0, 2.0, 4.0, 1.5, 0.0, 0.0, 0.0]])
    p = np.array([[1.0, -2.0, 0.5, 2.5, 4.0, 1.5, 0.3, 1.0, 0.0]])
    m = Sv.MatchResult([(0, 0)], np.array([], dtype=np.int64))
    loss, _ = Sv.l1_box_loss(encode_boxes(p), g, m)
    assert loss.data == pytest.approx((1 + 2 + 0.5 + 0.5 + 0.3 + 1) / 9, abs=1e-14)


def test_l1_no_matches_flags():
    loss, empty = Sv.l1_box_loss(np.zeros((3, 9)), np.zeros((0, 9)), Sv.MatchResult([], np.arange(3)))
    assert empty and loss.data == 0.0


def test_l1_grad(rng):
    g = np.array([gt_box(1, 2), gt_box(-3, 0)])
    m = Sv.MatchResult([(0, 1), (2, 0)], np.array([1]))
    p = encode_boxes(np.array([gt_box(0.5, 1), gt_box(0, 0), gt_box(-2, 1)])) + rng.normal(0, 0.1, (3, 9))
    rep = grad_check(lambda b: Sv.l1_box_loss(b, g, m)[0], [p])
    assert rep.passed(1e-4), rep.describe()


# ---------------------------------------------------------------- total

def fake_layer(logits, boxes, L_r=0.0, L_f=0.0):
    return SimpleNamespace(logits=as_tensor(logits), boxes=as_tensor(boxes), L_r=Tensor(L_r), L_f=Tensor(L_f),
                           single_step=False)


def test_total_without_aux_error_is_detection_only(rng):
    gt = np.array([gt_box(1, 2), gt_box(-3, 0)])
    layers = [fake_layer(rng.normal(size=(4, 3)), encode_boxes(np.array([gt_box(i, i) for i in range(4)])))
              for _ in range(2)]
    out = Sv.total_loss(SimpleNamespace(layers=layers), [0, 2], gt)
    det = 0.0
    for layer, m in zip(layers, out.matches):
        targets = np.full(4, -1)
        targets[m.pred_idx] = np.array([0, 2])[m.gt_idx]
        det += Sv.focal_loss(layer.logits, targets).data + 0.25 * Sv.l1_box_loss(layer.boxes, gt, m)[0].data
    assert out.L_r == out.L_f == 0.0
    assert float(out.total.data) == pytest.approx(det, rel=1e-14)


def test_total_combines_weighted_terms(rng):
    gt = np.array([gt_box(1, 2)])
    layers = [fake_layer(rng.normal(size=(3, 2)), encode_boxes(np.array([gt_box(0, 0)] * 3)), 0.3, 0.7)]
    out = Sv.total_loss(SimpleNamespace(layers=layers), [1], gt)
    assert float(out.total.data) == pytest.approx(out.cls + 0.25 * out.box + 0.5 * 0.3 + 0.5 * 0.7, rel=1e-14)
    assert len(out.matches[0].pairs) == 1


def test_total_on_random_init_is_finite_and_positive():
    model, inputs, scene = toy_problem(0)
    out = Sv.total_loss(Dm.forward(model, inputs, training=True), scene.classes, scene.gt_boxes())
    assert np.isfinite(out.total.data) and out.total.data > 0
    assert min(out.cls, out.box, out.L_r, out.L_f) >= 0
    assert len(out.per_layer) == model.cfg.layers


@pytest.mark.parametrize("seed", range(3))
def test_total_loss_grad_frozen_matches(seed, rng):
    gt = np.array([gt_box(1, 2), gt_box(-3, 0)])
    logits = rng.normal(size=(2, 5, 3))
    boxes = encode_boxes(np.array([gt_box(*rng.normal(0, 3, 2)) for _ in range(10)])).reshape(2, 5, 9)
    boxes = boxes + rng.normal(0, 0.1, boxes.shape)  # keep every |diff| away from its kink
    res = SimpleNamespace(layers=[fake_layer(logits[i], boxes[i]) for i in range(2)])
    matches = Sv.total_loss(res, [0, 1], gt).matches

    def fn(l0, l1, b0, b1):
        r = SimpleNamespace(layers=[fake_layer(l0, b0), fake_layer(l1, b1)])
        return Sv.total_loss(r, [0, 1], gt, matches=matches).total

    rep = grad_check(fn, [logits[0], logits[1], boxes[0], boxes[1]])
    assert rep.passed(1e-3), rep.describe()
