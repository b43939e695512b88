"""Detection metrics: center-distance matching, interpolated AP, true-positive
errors, a composite score, and a forward-latency benchmark.

AP is computed per class and distance threshold by greedy matching in
descending score order (ties broken by lower prediction index) and 101-point
interpolation of the precision envelope.  TP errors use the matches at the
2 m threshold.  The composite is ``(5 mAP + sum(1 - min(1, e))) / 9`` over
the four errors ATE, ASE, AOE, AVE.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .kernels.ops import wrap_angle_array
from .kernels.tensor import no_grad

THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
ERROR_NAMES = ("ATE", "ASE", "AOE", "AVE")


def score_order(scores) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_predictions(pred_boxes, scores, gt_boxes, threshold: float) -> np.ndarray:
    """Greedy center-distance matching.

    Predictions are visited by descending score; each takes the nearest
    still-unmatched ground truth whose BEV center lies within ``threshold``.
    Returns, per prediction (original order), the matched GT index or -1.
    """
    pred = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 9)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 9)
    out = np.full(len(pred), -1, dtype=np.int64)
    if len(pred) == 0 or len(gt) == 0:
        return out
    dist = np.hypot(pred[:, None, 0] - gt[None, :, 0], pred[:, None, 1] - gt[None, :, 1])
    taken = np.zeros(len(gt), dtype=bool)
    for i in score_order(scores):
        d = np.where(taken, np.inf, dist[i])
        j = int(np.argmin(d))
        if d[j] <= threshold:
            out[i] = j
            taken[j] = True
    return out


def average_precision(tp_flags, scores, n_gt: int) -> float:
    """101-point interpolated AP from per-prediction TP flags (any order)."""
    if n_gt <= 0:
        raise ValueError("average precision is undefined without ground truth")
    tp = np.asarray(tp_flags, dtype=bool)
    if tp.size == 0:
        return 0.0
    order = score_order(scores)
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    # envelope: best precision at any recall >= r
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        idx = np.searchsorted(recall, r - 1e-12, side="left")
        ap += envelope[idx] if idx < len(recall) else 0.0
    return float(ap / len(RECALL_POINTS))


def tp_errors(pred_boxes, gt_boxes) -> dict:
    """Per-pair errors for matched (pred, gt) rows of decoded boxes."""
    p = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 9)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 9)
    ate = np.hypot(p[:, 0] - g[:, 0], p[:, 1] - g[:, 1])
    inter = np.prod(np.minimum(p[:, 3:6], g[:, 3:6]), axis=1)
    union = np.prod(p[:, 3:6], axis=1) + np.prod(g[:, 3:6], axis=1) - inter
    ase = 1.0 - inter / union
    aoe = np.abs(wrap_angle_array(p[:, 6] - g[:, 6]))
    ave = np.hypot(p[:, 7] - g[:, 7], p[:, 8] - g[:, 8])
    return {"ATE": ate, "ASE": ase, "AOE": aoe, "AVE": ave}


def composite_score(mAP: float, errors: dict) -> float:
    return float((5.0 * mAP + sum(1.0 - min(1.0, errors[k]) for k in ERROR_NAMES)) / 9.0)


@dataclass
class EvalReport:
    mAP: float
    mATE: float
    mASE: float
    mAOE: float
    mAVE: float
    composite: float
    ap_per_threshold: dict = field(default_factory=dict)
    per_class: dict = field(default_factory=dict)
    n_scenes: int = 0
    n_gt: int = 0
    n_pred: int = 0
    flags: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_FIELDS = tuple(EvalReport.__dataclass_fields__)


def evaluate(samples, class_names) -> EvalReport:
    """Aggregate metrics over scenes.

    ``samples`` is a sequence of ``(pred, gt_classes, gt_boxes)`` where
    ``pred`` holds ``boxes`` (decoded ``[N, 9]``), ``scores`` and ``labels``.
    """
    samples = list(samples)
    K = len(class_names)
    per_class = {}
    ap_table = np.full((K, len(THRESHOLDS)), np.nan)
    errs_by_class = {}
    flags = []
    n_gt_total = n_pred_total = 0
    for c in range(K):
        n_gt = 0
        hits = {th: [] for th in THRESHOLDS}
        scores_all = []
        pairs_p, pairs_g = [], []
        for pred, gcls, gboxes in samples:
            gcls = np.asarray(gcls, dtype=np.int64)
            gb = np.asarray(gboxes, dtype=np.float64).reshape(-1, 9)[gcls == c]
            sel = np.asarray(pred["labels"]) == c
            pb = np.asarray(pred["boxes"]).reshape(-1, 9)[sel]
            ps = np.asarray(pred["scores"])[sel]
            n_gt += len(gb)
            scores_all.append(ps)
            for th in THRESHOLDS:
                m = match_predictions(pb, ps, gb, th)
                hits[th].append(m >= 0)
                if th == TP_THRESHOLD:
                    ok = m >= 0
                    pairs_p.append(pb[ok])
                    pairs_g.append(gb[m[ok]])
        n_gt_total += n_gt
        scores_c = np.concatenate(scores_all) if scores_all else np.zeros(0)
        n_pred_total += len(scores_c)
        if n_gt == 0:
            continue
        for ti, th in enumerate(THRESHOLDS):
            ap_table[c, ti] = average_precision(np.concatenate(hits[th]), scores_c, n_gt)
        P = np.concatenate(pairs_p) if pairs_p else np.zeros((0, 9))
        G = np.concatenate(pairs_g) if pairs_g else np.zeros((0, 9))
        if len(P):
            e = {k: float(v.mean()) for k, v in tp_errors(P, G).items()}
        else:
            e = {k: 1.0 for k in ERROR_NAMES}
            flags.append(f"class {class_names[c]}: no matches at {TP_THRESHOLD} m, errors set to 1.0")
        errs_by_class[c] = e
        per_class[class_names[c]] = {"AP": float(np.mean(ap_table[c])), "n_gt": n_gt, "n_matched": len(P),
                                     **{f"AP@{th}": float(ap_table[c, ti]) for ti, th in enumerate(THRESHOLDS)},
                                     **e}
    valid = ~np.isnan(ap_table[:, 0])
    if not valid.any():
        flags.append("no ground truth in any class")
        mAP = 0.0
        errors = {k: 1.0 for k in ERROR_NAMES}
        ap_thr = {str(th): 0.0 for th in THRESHOLDS}
    else:
        mAP = float(ap_table[valid].mean())
        errors = {k: float(np.mean([errs_by_class[c][k] for c in errs_by_class])) for k in ERROR_NAMES}
        ap_thr = {str(th): float(ap_table[valid, ti].mean()) for ti, th in enumerate(THRESHOLDS)}
    return EvalReport(mAP, errors["ATE"], errors["ASE"], errors["AOE"], errors["AVE"],
                      composite_score(mAP, errors), ap_thr, per_class, len(samples), n_gt_total,
                      n_pred_total, flags)


# ---------------------------------------------------------------- latency

@dataclass
class BenchResult:
    mean_latency: float
    std_latency: float
    query_counts: list          # per layer, query rows processed
    rows_touched: int


def time_forward(model, inputs, n_warmup: int = 2, n_iters: int = 10) -> BenchResult:
    from .decoder import forward
    with no_grad():
        for _ in range(n_warmup):
            forward(model, inputs)
        times = []
        res = None
        for _ in range(n_iters):
            t0 = time.perf_counter()
            res = forward(model, inputs)
            times.append(time.perf_counter() - t0)
    counts = [layer.n_queries for layer in res.layers]
    return BenchResult(float(np.mean(times)), float(np.std(times)), counts, int(sum(counts)))


def bench_forward(model, inputs, n_warmup: int = 2, n_iters: int = 10) -> dict:
    """Latency of the model's configuration against the same weights with a static query set."""
    dyn = model.cfg.dynamic
    try:
        model.cfg.dynamic = True
        dynamic = time_forward(model, inputs, n_warmup, n_iters)
        model.cfg.dynamic = False
        static = time_forward(model, inputs, n_warmup, n_iters)
    finally:
        model.cfg.dynamic = dyn
    return {"dynamic": dynamic, "static": static,
            "ratio": dynamic.mean_latency / static.mean_latency,
            "speedup": static.mean_latency / dynamic.mean_latency}
