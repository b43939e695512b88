"""Dynamic pillar queries: initialisation, covariance, cross-attention and the
merge -> remove -> split update applied after every decoder layer.

Boxes are carried internally as ``(x, y, z, log w, log l, log h, theta, vx,
vy)`` with ``z`` the box bottom, so size updates stay positive.  Selections
(which queries merge, which are removed, which split) are hard decisions on
the forward values; gradients reach the label heads through the feature
paths described on each operation.  Every selection is stored in an
:class:`UpdateRecord`, and passing that record back as ``plan`` replays the
same selections, which is what gradient checks need.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import ops
from .kernels.nn import MLP, Linear, Module
from .kernels.tensor import ContractError, Tensor, as_tensor

BOX_DIM = 9
MERGE_THRESHOLD = 0.5
REMOVE_MIN, REMOVE_MAX = 0.2, 0.3
SPLIT_MAX_PCT = 5.0
N_HEADS = 4


# ---------------------------------------------------------------- box encoding

def encode_boxes(boxes) -> np.ndarray:
    """Decoded ``(x, y, z, w, l, h, theta, vx, vy)`` -> internal encoding."""
    b = np.array(boxes, dtype=np.float64)
    b[..., 3:6] = np.log(b[..., 3:6])
    b[..., 6] = ops.wrap_angle_array(b[..., 6])
    return b


def decode_boxes(internal) -> np.ndarray:
    b = np.array(internal.data if isinstance(internal, Tensor) else internal, dtype=np.float64)
    b[..., 3:6] = np.exp(b[..., 3:6])
    return b


def decode_boxes_tensor(internal: Tensor) -> Tensor:
    """Differentiable decode (sizes through ``exp``)."""
    return ops.concat([internal[:, 0:3], ops.exp(internal[:, 3:6]), internal[:, 6:9]], axis=1)


@dataclass
class QueryInitConfig:
    xy_std: float = 15.0
    w_mean: float = 1.5
    w_std: float = 0.2
    l_mean: float = 3.0
    l_std: float = 0.4
    theta_std: float = 1.0
    height: float = 4.0
    feature_std: float = 0.02


@dataclass
class QuerySet:
    boxes: Tensor        # [N, 9] internal encoding
    features: Tensor     # [N, D]
    floor: int
    layer: int = 0

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def __post_init__(self):
        self.boxes, self.features = as_tensor(self.boxes), as_tensor(self.features)
        if self.boxes.shape[0] != self.features.shape[0]:
            raise ContractError(f"QuerySet: {self.boxes.shape[0]} boxes but {self.features.shape[0]} feature rows")
        if self.boxes.shape[1:] != (BOX_DIM,):
            raise ContractError(f"QuerySet: boxes must be [N, {BOX_DIM}], got {self.boxes.shape}")

    def decoded(self) -> np.ndarray:
        return decode_boxes(self.boxes)


def init_queries(n: int, seed, d_model: int, floor: int | None = None,
                 cfg: QueryInitConfig | None = None) -> QuerySet:
    """Pillars on the ground plane: z = 0, fixed height, zero velocity."""
    if n < 1:
        raise ValueError("need at least one query")
    cfg = cfg or QueryInitConfig()
    rng = np.random.default_rng(seed)
    boxes = np.zeros((n, BOX_DIM))
    boxes[:, 0:2] = rng.normal(0.0, cfg.xy_std, (n, 2))
    boxes[:, 3] = np.abs(rng.normal(cfg.w_mean, cfg.w_std, n)) + 0.1
    boxes[:, 4] = np.abs(rng.normal(cfg.l_mean, cfg.l_std, n)) + 0.1
    boxes[:, 5] = cfg.height
    boxes[:, 6] = rng.normal(0.0, cfg.theta_std, n)
    features = rng.normal(0.0, cfg.feature_std, (n, d_model))
    return QuerySet(Tensor(encode_boxes(boxes)), Tensor(features), 1 if floor is None else floor)


# ---------------------------------------------------------------- covariance

def covariance(features) -> Tensor:
    """Similarity among queries: per-query centered rows, ``X X^T / (D - 1)``."""
    features = as_tensor(features)
    if features.ndim != 2 or features.shape[0] < 2:
        raise ContractError(f"covariance needs at least two query rows, got shape {features.shape}")
    D = features.shape[1]
    if D < 2:
        raise ContractError("covariance needs feature width >= 2")
    # shift by the first column before centering: same result, but constant rows stay exactly zero
    xs = features - features[:, 0:1]
    xc = xs - xs.mean(axis=1, keepdims=True)
    return ops.matmul(xc, xc.T) * (1.0 / (D - 1))


def row_stats(C: Tensor) -> Tensor:
    """Per-query ``[max off-diagonal, row mean, diagonal]`` -> ``[N, 3]``."""
    N = C.shape[0]
    eye = np.eye(N, dtype=bool)
    off = ops.where(eye, -1e300, C)
    rmax = ops.amax(off, axis=1)
    rmean = C.mean(axis=1)
    diag = C[np.arange(N), np.arange(N)]
    return ops.stack([rmax, rmean, diag], axis=1)


def pooled_stats(stats: Tensor) -> Tensor:
    """Fixed-size summary of a covariance matrix: mean over rows of (row mean, row max)."""
    return ops.stack([stats[:, 1].mean(), stats[:, 0].mean()]).reshape(1, 2)


def partner_index(C: np.ndarray) -> np.ndarray:
    """Arg-max off-diagonal covariance per row; ties go to the lower index."""
    off = np.array(C, dtype=np.float64)
    np.fill_diagonal(off, -np.inf)
    return np.argmax(off, axis=1)


def _rank_desc(values: np.ndarray) -> np.ndarray:
    """Indices by descending value, ties broken by lower index."""
    return np.argsort(-values, kind="stable")


# ---------------------------------------------------------------- heads

class QueryUpdateHeads(Module):
    def __init__(self, rng: np.random.Generator, d_model: int, hidden: int = 32):
        d_in = d_model + 3
        self.merge_head = Linear(rng, d_in, 1, std=0.1 / math.sqrt(d_in), bias_init=-2.0)
        self.remove_head = MLP(rng, d_in, hidden, 1)
        self.split_head = MLP(rng, d_in, hidden, 1)
        self.remove_ratio_head = Linear(rng, 2, 1, std=0.01)
        self.split_ratio_head = Linear(rng, 2, 1, std=0.01)
        self.attn_q = Linear(rng, d_model, d_model)
        self.attn_k = Linear(rng, d_model, d_model)
        self.attn_v = Linear(rng, d_model, d_model)
        self.attn_o = Linear(rng, d_model, d_model, std=0.1 / math.sqrt(d_model))


def _label_inputs(features: Tensor, stats: Tensor) -> Tensor:
    return ops.concat([features, stats], axis=1)


# ---------------------------------------------------------------- records

@dataclass
class UpdateRecord:
    layer: int
    n_before: int
    merge_pairs: list = field(default_factory=list)   # (i, j) in pre-merge indexing
    n_after_merge: int = 0
    removed: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    remove_ratio: float = 0.0
    remove_clamped: bool = False
    n_after_remove: int = 0
    split_sources: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    split_pct: float = 0.0
    n_after: int = 0

    def log_row(self) -> dict:
        return {"layer": self.layer, "n_before": self.n_before, "merged": len(self.merge_pairs),
                "removed": int(len(self.removed)), "split": int(len(self.split_sources)),
                "n_after": self.n_after, "remove_ratio": self.remove_ratio, "split_pct": self.split_pct,
                "floor_clamped": self.remove_clamped}


# ---------------------------------------------------------------- operations

def cross_attend(qset: QuerySet, S, heads: QueryUpdateHeads) -> QuerySet:
    """Multi-head scaled dot-product attention from query features to state tokens, plus residual."""
    S = as_tensor(S)
    Q = qset.features
    D = Q.shape[1]
    if S.ndim != 2 or S.shape[1] != D:
        raise ContractError(f"cross_attend: state tokens {S.shape} do not match query width {D}")
    if D % N_HEADS:
        raise ContractError(f"cross_attend: width {D} not divisible by {N_HEADS} heads")
    dh = D // N_HEADS
    N, M = Q.shape[0], S.shape[0]
    q = heads.attn_q(Q).reshape(N, N_HEADS, dh).transpose(1, 0, 2)
    k = heads.attn_k(S).reshape(M, N_HEADS, dh).transpose(1, 2, 0)
    v = heads.attn_v(S).reshape(M, N_HEADS, dh).transpose(1, 0, 2)
    w = ops.softmax(ops.matmul(q, k) * (1.0 / math.sqrt(dh)), axis=-1)
    out = ops.matmul(w, v).transpose(1, 0, 2).reshape(N, D)
    return QuerySet(qset.boxes, Q + heads.attn_o(out), qset.floor, qset.layer)


def merge_labels(qset: QuerySet, C: Tensor, heads: QueryUpdateHeads) -> Tensor:
    return ops.sigmoid(heads.merge_head(_label_inputs(qset.features, row_stats(C)))).reshape(-1)


def _merged_boxes(boxes: Tensor, idx_a: np.ndarray, idx_b: np.ndarray, is_pair: np.ndarray) -> Tensor:
    """Row-wise fusion of ``boxes[idx_a]`` and ``boxes[idx_b]`` where ``is_pair``; other rows pass through."""
    A, B = ops.take_rows(boxes, idx_a), ops.take_rows(boxes, idx_b)
    mean = (A + B) * 0.5
    sizes = ops.log((ops.exp(A[:, 3:6]) + ops.exp(B[:, 3:6])) * 0.5)
    yaw = ops.atan2(ops.sin(A[:, 6:7]) + ops.sin(B[:, 6:7]), ops.cos(A[:, 6:7]) + ops.cos(B[:, 6:7]))
    fused = ops.concat([mean[:, 0:3], sizes, yaw, mean[:, 7:9]], axis=1)
    return ops.where(is_pair[:, None], fused, A)


def merge(qset: QuerySet, C: Tensor, heads: QueryUpdateHeads, labels: Tensor | None = None,
          plan: list | None = None) -> tuple[QuerySet, list]:
    """Fuse queries whose merge label exceeds 0.5 with their most similar partner.

    Candidates are visited by descending label; a query takes part in at most
    one merge, and merging stops before the count would drop below the floor.
    The fused query sits at the lower of the two indices and holds the mean
    box (circular mean for yaw, arithmetic mean of sizes) and mean features.
    The fused features are additionally scaled by the pair's mean label,
    which is how the merge head receives gradient; with labels at 1 the
    fused query is exactly the mean.
    """
    N = qset.n
    if labels is None:
        labels = merge_labels(qset, C, heads)
    if plan is None:
        lab = labels.data
        partner = partner_index(C.data)
        used = np.zeros(N, dtype=bool)
        plan = []
        budget = max(N - qset.floor, 0)
        for i in _rank_desc(lab):
            if lab[i] <= MERGE_THRESHOLD or len(plan) >= budget:
                break
            j = int(partner[i])
            if used[i] or used[j]:
                continue
            used[i] = used[j] = True
            plan.append((int(i), j))
    if not plan:
        return qset, plan
    drop = {max(i, j) for i, j in plan}
    lower = {min(i, j): max(i, j) for i, j in plan}
    rows = [r for r in range(N) if r not in drop]
    idx_a = np.array(rows, dtype=np.int64)
    idx_b = np.array([lower.get(r, r) for r in rows], dtype=np.int64)
    is_pair = idx_a != idx_b
    half = np.where(is_pair, 0.5, 1.0)[:, None]
    feats = ops.take_rows(qset.features, idx_a) * half + ops.take_rows(qset.features, idx_b) * (1.0 - half)
    pair_label = (ops.take_rows(labels, idx_a) + ops.take_rows(labels, idx_b)) * 0.5
    gate = ops.where(is_pair, pair_label, 1.0)
    feats = feats * gate.reshape(-1, 1)
    boxes = _merged_boxes(qset.boxes, idx_a, idx_b, is_pair)
    return QuerySet(boxes, feats, qset.floor, qset.layer), plan


def remove_count(n: int, ratio: float, floor: int) -> tuple[int, bool]:
    """Number of queries to delete for ratio ``r`` in (0.2, 0.3).

    ``floor(r n)`` is kept inside ``[ceil(0.2 n), floor(0.3 n)]`` so the
    realised fraction honours both bounds exactly, then limited so at least
    ``floor`` queries survive.  Returns ``(k, clamped_by_floor)``.
    """
    k = math.floor(ratio * n)
    lo, hi = math.ceil(REMOVE_MIN * n - 1e-9), math.floor(REMOVE_MAX * n + 1e-9)
    if lo <= hi:
        k = min(max(k, lo), hi)
    allowed = max(n - floor, 0)
    if k > allowed:
        return allowed, True
    return k, False


def remove(qset: QuerySet, C: Tensor, heads: QueryUpdateHeads, plan: np.ndarray | None = None
           ) -> tuple[QuerySet, np.ndarray, float, bool]:
    """Delete the top-k queries by remove label; survivors are scaled by ``1 - label``.

    Returns ``(qset, removed_indices, ratio, clamped_by_floor)``.  When the
    floor leaves nothing to delete the set is returned unchanged.
    """
    N = qset.n
    stats = row_stats(C)
    labels = ops.sigmoid(heads.remove_head(_label_inputs(qset.features, stats))).reshape(-1)
    ratio = REMOVE_MIN + (REMOVE_MAX - REMOVE_MIN) * float(
        ops._sigmoid(heads.remove_ratio_head(pooled_stats(stats)).data.item()))
    if plan is None:
        k, clamped = remove_count(N, ratio, qset.floor)
        removed = np.sort(_rank_desc(labels.data)[:k])
    else:
        removed = np.asarray(plan, dtype=np.int64)
        clamped = False
    if removed.size == 0:
        return qset, removed, ratio, clamped
    keep = np.setdiff1d(np.arange(N), removed)
    feats = ops.take_rows(qset.features, keep) * (1.0 - ops.take_rows(labels, keep)).reshape(-1, 1)
    return QuerySet(ops.take_rows(qset.boxes, keep), feats, qset.floor, qset.layer), removed, ratio, clamped


def split_count(n: int, pct: float) -> int:
    return math.floor(pct / 100.0 * n + 1e-12)


def split(qset: QuerySet, C: Tensor | None, heads: QueryUpdateHeads, plan: np.ndarray | None = None,
          suppress: bool = False) -> tuple[QuerySet, np.ndarray, float]:
    """Duplicate the top-m queries by split label and append the copies.

    Source features are scaled by their split label before copying, so the
    split head receives gradient and each copy stays bitwise equal to its
    source.
    """
    N = qset.n
    if C is None or N < 2:
        return qset, np.zeros(0, dtype=np.int64), 0.0
    stats = row_stats(C)
    labels = ops.sigmoid(heads.split_head(_label_inputs(qset.features, stats))).reshape(-1)
    pct = SPLIT_MAX_PCT * float(ops._sigmoid(heads.split_ratio_head(pooled_stats(stats)).data.item()))
    if plan is None:
        m = 0 if suppress else split_count(N, pct)
        sources = _rank_desc(labels.data)[:m]
    else:
        sources = np.asarray(plan, dtype=np.int64)
    if sources.size == 0:
        return qset, sources, pct
    is_src = np.zeros(N, dtype=bool)
    is_src[sources] = True
    gate = ops.where(is_src, labels, 1.0)
    feats = qset.features * gate.reshape(-1, 1)
    feats = ops.concat([feats, ops.take_rows(feats, sources)], axis=0)
    boxes = ops.concat([qset.boxes, ops.take_rows(qset.boxes, sources)], axis=0)
    return QuerySet(boxes, feats, qset.floor, qset.layer), sources, pct


def update(qset: QuerySet, S, heads: QueryUpdateHeads, dynamic: bool = True,
           plan: UpdateRecord | None = None) -> tuple[QuerySet, UpdateRecord]:
    """cross-attend, then merge, remove and split, each on a freshly computed covariance."""
    rec = UpdateRecord(layer=qset.layer, n_before=qset.n)
    q = cross_attend(qset, S, heads)
    if dynamic and q.n >= 2:
        C = covariance(q.features)
        q, rec.merge_pairs = merge(q, C, heads, plan=None if plan is None else plan.merge_pairs)
    rec.n_after_merge = q.n
    clamped = False
    if dynamic and q.n >= 2:
        C = covariance(q.features)
        q, rec.removed, rec.remove_ratio, clamped = remove(q, C, heads,
                                                           plan=None if plan is None else plan.removed)
        rec.remove_clamped = clamped
    rec.n_after_remove = q.n
    if dynamic and q.n >= 2:
        C = covariance(q.features)
        q, rec.split_sources, rec.split_pct = split(q, C, heads, suppress=clamped,
                                                    plan=None if plan is None else plan.split_sources)
    rec.n_after = q.n
    if q.n < q.floor and dynamic:
        raise ContractError(f"query count {q.n} fell below floor {q.floor}")
    return QuerySet(q.boxes, q.features, q.floor, qset.layer + 1), rec
