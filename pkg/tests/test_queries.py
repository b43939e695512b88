import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dyss import queries as Q
from dyss.kernels import ContractError, Tensor, grad_check, ops


def heads(d=8, seed=0):
    return Q.QueryUpdateHeads(np.random.default_rng(seed), d)


def qset_from(features, boxes=None, floor=1):
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if boxes is None:
        boxes = Q.init_queries(n, 0, 2).boxes.data
    return Q.QuerySet(Tensor(boxes), Tensor(features), floor)


# ---------------------------------------------------------------- init and encoding

def test_init_on_ground_with_fixed_height():
    q = Q.init_queries(50, 3, 8)
    dec = q.decoded()
    assert np.array_equal(dec[:, 2], np.zeros(50))
    assert np.array_equal(dec[:, 7:9], np.zeros((50, 2)))
    assert np.allclose(dec[:, 5], 4.0, rtol=0, atol=1e-12)


def test_init_is_deterministic():
    a, b = Q.init_queries(20, 7, 4), Q.init_queries(20, 7, 4)
    assert np.array_equal(a.boxes.data, b.boxes.data)
    assert np.array_equal(a.features.data, b.features.data)


def test_box_encoding_roundtrip(rng):
    boxes = np.column_stack([rng.normal(size=(5, 3)), rng.uniform(0.5, 5, (5, 3)),
                             rng.uniform(-np.pi + 0.01, np.pi, 5), rng.normal(size=(5, 2))])
    assert np.allclose(Q.decode_boxes(Q.encode_boxes(boxes)), boxes, rtol=1e-14, atol=1e-14)


def test_queryset_rejects_mismatched_rows():
    with pytest.raises(ContractError):
        Q.QuerySet(Tensor(np.zeros((3, 9))), Tensor(np.zeros((2, 4))), 1)


# ---------------------------------------------------------------- covariance

def test_covariance_hand_case():
    C = Q.covariance(np.array([[1.0, -1.0], [2.0, -2.0]])).data
    assert np.array_equal(C, [[2.0, 4.0], [4.0, 8.0]])


def test_covariance_duplicates_and_constants(rng):
    F = rng.standard_normal((4, 6))
    F[2] = F[0]
    C = Q.covariance(F).data
    assert C[0, 0] == C[0, 2] == C[2, 2]
    assert np.array_equal(Q.covariance(np.full((3, 5), 1.7)).data, np.zeros((3, 3)))


@given(st.integers(0, 10_000), st.integers(2, 9), st.integers(2, 7))
@settings(max_examples=40, deadline=None)
def test_covariance_symmetric_psd_diagonal(seed, n, d):
    C = Q.covariance(np.random.default_rng(seed).standard_normal((n, d))).data
    assert np.max(np.abs(C - C.T)) <= 1e-12
    assert np.all(np.diag(C) >= -1e-12)


def test_row_and_pooled_stats_hand_case():
    C = Tensor(np.array([[4.0, 1.0, 3.0], [1.0, 2.0, 0.0], [3.0, 0.0, 5.0]]))
    stats = Q.row_stats(C).data
    assert np.array_equal(stats[:, 0], [3.0, 1.0, 3.0])
    assert np.allclose(stats[:, 1], [8 / 3, 1.0, 8 / 3], rtol=0, atol=1e-15)
    assert np.array_equal(stats[:, 2], [4.0, 2.0, 5.0])
    pooled = Q.pooled_stats(Tensor(stats)).data
    assert pooled.shape == (1, 2)
    assert np.allclose(pooled, [[(8 / 3 * 2 + 1) / 3, 7 / 3]], rtol=0, atol=1e-15)


# ---------------------------------------------------------------- cross attention

def test_attention_over_one_token_is_value_projection(rng):
    h = heads()
    q = qset_from(rng.standard_normal((5, 8)))
    S = rng.standard_normal((1, 8))
    out = Q.cross_attend(q, S, h).features.data
    expected = q.features.data + h.attn_o(h.attn_v(S)).data
    assert np.allclose(out, expected, rtol=0, atol=1e-13)


def test_attention_permutation_properties(rng):
    h = heads()
    q = qset_from(rng.standard_normal((6, 8)))
    S = rng.standard_normal((10, 8))
    base = Q.cross_attend(q, S, h).features.data
    perm_tokens = Q.cross_attend(q, S[rng.permutation(10)], h).features.data
    assert np.allclose(base, perm_tokens, rtol=0, atol=1e-13)
    p = rng.permutation(6)
    q_perm = Q.QuerySet(Tensor(q.boxes.data[p]), Tensor(q.features.data[p]), 1)
    assert np.allclose(Q.cross_attend(q_perm, S, h).features.data, base[p], rtol=0, atol=1e-13)


def test_attention_grad(rng):
    h = heads()
    boxes = Q.init_queries(4, 0, 8).boxes

    def fn(F, S, *_):
        return Q.cross_attend(Q.QuerySet(boxes, F, 1), S, h).features

    rep = grad_check(fn, [rng.standard_normal((4, 8)), rng.standard_normal((6, 8)),
                          h.attn_q.weight, h.attn_k.weight, h.attn_v.weight, h.attn_o.weight])
    assert rep.passed(1e-4), rep.describe()


# ---------------------------------------------------------------- merge

def test_merge_all_labels_zero_is_identity(rng):
    q = qset_from(rng.standard_normal((5, 8)))
    out, plan = Q.merge(q, Q.covariance(q.features), heads(), labels=Tensor(np.zeros(5)))
    assert plan == [] and out is q


def test_merge_exact_duplicates(rng):
    f = rng.standard_normal((3, 8))
    f[2] = f[0]
    b = Q.init_queries(3, 1, 8).boxes.data
    b[2] = b[0]
    q = qset_from(f, b)
    out, plan = Q.merge(q, Q.covariance(q.features), heads(), labels=Tensor(np.array([1.0, 0.0, 1.0])))
    assert plan == [(0, 2)] and out.n == 2
    assert np.allclose(out.boxes.data[0], b[0], rtol=0, atol=1e-12)
    assert np.array_equal(out.features.data[0], f[0])
    assert np.array_equal(out.boxes.data[1], b[1])


def _best_pairing_value(C):
    """Brute force over all perfect pairings of 4 items: the max total covariance."""
    best, arg = -np.inf, None
    for perm in itertools.permutations(range(4)):
        pairs = {tuple(sorted((perm[0], perm[1]))), tuple(sorted((perm[2], perm[3])))}
        val = sum(C[i, j] for i, j in pairs)
        if val > best:
            best, arg = val, pairs
    return arg


def test_merge_two_duplicate_pairs_matches_bruteforce(rng):
    base = rng.standard_normal((2, 8)) * 3
    f = base[[0, 1, 1, 0]]
    q = qset_from(f)
    C = Q.covariance(q.features).data
    out, plan = Q.merge(q, Tensor(C), heads(), labels=Tensor(np.ones(4)))
    assert out.n == 2
    assert {tuple(sorted(p)) for p in plan} == _best_pairing_value(C) == {(0, 3), (1, 2)}
    assert all(j == Q.partner_index(C)[i] for i, j in plan)


def test_merge_respects_floor_budget(rng):
    q = qset_from(rng.standard_normal((6, 8)), floor=5)
    out, plan = Q.merge(q, Q.covariance(q.features), heads(), labels=Tensor(np.ones(6)))
    assert len(plan) == 1 and out.n == 5


def test_merge_circular_mean_of_yaw():
    f = np.array([[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    b = np.zeros((2, 9))
    b[:, 6] = [np.pi - 0.1, -np.pi + 0.1]
    q = qset_from(f, b)
    out, _ = Q.merge(q, Q.covariance(q.features), heads(4), labels=Tensor(np.ones(2)))
    assert abs(abs(out.boxes.data[0, 6]) - np.pi) < 1e-12


def test_merge_averages_actual_sizes():
    b = np.zeros((2, 9))
    b[:, 3:6] = np.log([[1.0, 2.0, 3.0], [3.0, 4.0, 5.0]])
    q = qset_from(np.eye(2, 4), b)
    out, _ = Q.merge(q, Q.covariance(q.features), heads(4), labels=Tensor(np.ones(2)))
    assert np.allclose(np.exp(out.boxes.data[0, 3:6]), [2.0, 3.0, 4.0], rtol=1e-14)


# ---------------------------------------------------------------- remove

def test_remove_count_arithmetic():
    assert Q.remove_count(900, 0.30, 269) == (270, False)
    assert Q.remove_count(900, 0.2, 269) == (180, False)
    assert Q.remove_count(300, 0.3, 269) == (31, True)
    assert Q.remove_count(269, 0.25, 269) == (0, True)


@given(st.integers(10, 2000), st.floats(0.2, 0.3))
@settings(max_examples=200, deadline=None)
def test_remove_count_fraction_bounds(n, r):
    k, clamped = Q.remove_count(n, r, 1)
    lo, hi = math.ceil(0.2 * n - 1e-9), math.floor(0.3 * n + 1e-9)
    if lo <= hi and not clamped:
        assert 0.2 * n - 1e-9 <= k <= 0.3 * n + 1e-9


def test_remove_at_floor_is_identity(rng):
    q = qset_from(rng.standard_normal((5, 8)), floor=5)
    out, removed, _, clamped = Q.remove(q, Q.covariance(q.features), heads())
    assert out is q and removed.size == 0 and clamped


@pytest.mark.parametrize("seed", range(100))
def test_remove_fraction_random_heads(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(20, 400))
    q = qset_from(r.standard_normal((n, 8)))
    h = heads(seed=seed)
    h.remove_ratio_head.weight.data = r.standard_normal((2, 1)) * 5
    out, removed, ratio, clamped = Q.remove(q, Q.covariance(q.features), h)
    assert not clamped
    assert 0.2 * n - 1e-9 <= removed.size <= 0.3 * n + 1e-9
    assert out.n == n - removed.size
    keep = np.setdiff1d(np.arange(n), removed)
    assert np.array_equal(out.boxes.data, q.boxes.data[keep])


# ---------------------------------------------------------------- split

def test_split_count_arithmetic():
    assert Q.split_count(269, 5.0) == 13
    assert Q.split_count(19, 5.0) == 0


def test_split_with_full_percentage(rng):
    q = qset_from(rng.standard_normal((269, 8)))
    h = heads()
    h.split_ratio_head.weight.data[:] = 0.0
    h.split_ratio_head.bias.data[:] = 50.0
    out, sources, pct = Q.split(q, Q.covariance(q.features), h)
    assert pct == 5.0 and sources.size == 13 and out.n == 282
    assert np.array_equal(out.features.data[269:], out.features.data[sources])
    assert np.array_equal(out.boxes.data[269:], out.boxes.data[sources])


def test_split_zero_count_is_identity(rng):
    q = qset_from(rng.standard_normal((10, 8)))
    out, sources, _ = Q.split(q, Q.covariance(q.features), heads())
    assert sources.size == 0 and out is q


# ---------------------------------------------------------------- update

def test_update_with_neutral_heads_only_attends(rng):
    h = heads()
    h.merge_head.bias.data[:] = -50.0
    q = qset_from(rng.standard_normal((12, 8)), floor=12)
    S = rng.standard_normal((7, 8))
    out, rec = Q.update(q, S, h)
    assert out.n == 12 and rec.merge_pairs == [] and rec.removed.size == 0 and rec.split_sources.size == 0
    assert np.array_equal(out.features.data, Q.cross_attend(q, S, h).features.data)


@pytest.mark.parametrize("seed", range(30))
def test_update_count_bounds(seed):
    r = np.random.default_rng(seed)
    n = int(r.integers(30, 300))
    floor = int(r.integers(1, n))
    h = heads(seed=seed)
    h.merge_head.bias.data[:] = r.normal(0, 2)
    q = qset_from(r.standard_normal((n, 8)), floor=floor)
    out, rec = Q.update(q, r.standard_normal((20, 8)), h)
    merged = len(rec.merge_pairs)
    assert out.n >= floor
    assert out.n <= math.floor(n * 1.05)
    assert rec.n_after_remove >= max(floor, math.ceil(0.7 * (n - merged) - 1e-9))
    assert len(rec.split_sources) <= 0.05 * rec.n_after_remove


def test_update_static_mode_keeps_count(rng):
    q = qset_from(rng.standard_normal((9, 8)))
    out, rec = Q.update(q, rng.standard_normal((4, 8)), heads(), dynamic=False)
    assert out.n == 9 and rec.n_after == 9


def test_update_replays_plan(rng):
    h = heads()
    h.merge_head.bias.data[:] = 1.0
    q = qset_from(rng.standard_normal((40, 8)), floor=10)
    S = rng.standard_normal((5, 8))
    out, rec = Q.update(q, S, h)
    again, _ = Q.update(q, S, h, plan=rec)
    assert np.array_equal(out.features.data, again.features.data)


@pytest.mark.parametrize("seed", range(3))
def test_full_update_grads_with_frozen_selection(seed):
    r = np.random.default_rng(seed)
    h = heads(seed=seed)
    h.merge_head.bias.data[:] = 0.5
    F, B, S = r.standard_normal((24, 8)), Q.init_queries(24, seed, 8).boxes.data, r.standard_normal((6, 8))
    _, rec = Q.update(Q.QuerySet(Tensor(B), Tensor(F), 8), S, h)
    assert rec.merge_pairs and rec.removed.size

    def fn(f, b, s, *_):
        out, _ = Q.update(Q.QuerySet(b, f, 8), s, h, plan=rec)
        return ops.concat([out.features, out.boxes], axis=1)

    params = [p for _, p in h.named_parameters() if "ratio" not in _]
    rep = grad_check(fn, [F, B, S, *params], max_entries=12, seed=seed)
    assert rep.passed(1e-4), rep.describe()
