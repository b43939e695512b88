"""Set-based detection objective with deep supervision and the SSM auxiliary terms."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .kernels import backend, ops
from .kernels.tensor import Tensor, as_tensor
from .queries import decode_boxes_tensor

# per-parameter divisors used by the matching cost: x, y, z, log w, log l, log h, yaw, vx, vy
COST_SCALE = np.array([10.0, 10.0, 2.0, 1.0, 1.0, 1.0, np.pi, 5.0, 5.0])


@dataclass
class LossWeights:
    box: float = 0.25
    recon: float = 0.5
    pred: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    cost_class: float = 2.0
    cost_box: float = 1.0


@dataclass
class MatchResult:
    pairs: list                 # (prediction index, ground-truth index), sorted by prediction
    unmatched: np.ndarray       # prediction indices without a partner

    @property
    def pred_idx(self) -> np.ndarray:
        return np.array([p for p, _ in self.pairs], dtype=np.int64)

    @property
    def gt_idx(self) -> np.ndarray:
        return np.array([g for _, g in self.pairs], dtype=np.int64)


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float = 0.0
    box: float = 0.0
    L_r: float = 0.0
    L_f: float = 0.0
    per_layer: list = field(default_factory=list)
    matches: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    def row(self) -> dict:
        return {"cls": self.cls, "box": self.box, "L_r": self.L_r, "L_f": self.L_f,
                "total": float(self.total.data)}


def hungarian(cost) -> MatchResult:
    """Exact minimum-cost assignment for a rectangular ``[N_pred, N_gt]`` cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    n_pred, n_gt = cost.shape
    if n_pred == 0 or n_gt == 0:
        return MatchResult([], np.arange(n_pred))
    if not np.all(np.isfinite(cost)):
        raise ValueError("hungarian: cost matrix has non-finite entries")
    solve = backend.impl("hungarian_rows")
    if n_gt <= n_pred:
        cols = solve(np.ascontiguousarray(cost.T))
        pairs = sorted((int(cols[g]), g) for g in range(n_gt))
    else:
        cols = solve(np.ascontiguousarray(cost))
        pairs = [(p, int(cols[p])) for p in range(n_pred)]
    matched = {p for p, _ in pairs}
    return MatchResult(pairs, np.array([p for p in range(n_pred) if p not in matched], dtype=np.int64))


def box_param_diff(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Pairwise differences ``[N, G, 9]`` of internal encodings, yaw wrapped."""
    d = pred[:, None, :] - gt[None, :, :]
    d[..., 6] = ops.wrap_angle_array(d[..., 6])
    return d


def match_cost(logits, boxes_internal, gt_classes, gt_boxes, weights: LossWeights | None = None) -> np.ndarray:
    """``a * (1 - p_true) + b * sum_k |diff_k| / scale_k`` over the 9 box parameters.

    ``gt_boxes`` are decoded; predictions are internal encodings; the size
    terms compare log sizes.
    """
    w = weights or LossWeights()
    probs = ops._sigmoid(np.asarray(logits.data if isinstance(logits, Tensor) else logits))
    pred = np.asarray(boxes_internal.data if isinstance(boxes_internal, Tensor) else boxes_internal)
    gt = np.array(gt_boxes, dtype=np.float64).reshape(-1, 9)
    gt_enc = gt.copy()
    gt_enc[:, 3:6] = np.log(gt[:, 3:6])
    cls_cost = 1.0 - probs[:, np.asarray(gt_classes, dtype=np.int64)]
    box_cost = (np.abs(box_param_diff(pred, gt_enc)) / COST_SCALE).sum(axis=-1)
    return w.cost_class * cls_cost + w.cost_box * box_cost


def focal_loss(logits, targets, gamma: float = 2.0, alpha: float = 0.25) -> Tensor:
    """Sigmoid focal loss summed over classes, averaged over predictions.

    ``targets[i]`` is the class of prediction i or -1 for background.
    """
    logits = as_tensor(logits)
    N, K = logits.shape
    if N == 0:
        return Tensor(0.0)
    onehot = np.zeros((N, K))
    targets = np.asarray(targets, dtype=np.int64)
    pos = targets >= 0
    onehot[np.flatnonzero(pos), targets[pos]] = 1.0
    p = ops.sigmoid(logits)
    ce_pos = ops.softplus(logits * -1.0)     # -log p
    ce_neg = ops.softplus(logits)            # -log(1 - p)
    if gamma == 0:
        mod_pos, mod_neg = 1.0, 1.0
    else:
        mod_pos = ops.power(1.0 - p, gamma)
        mod_neg = ops.power(p, gamma)
    loss = onehot * alpha * mod_pos * ce_pos + (1.0 - onehot) * (1.0 - alpha) * mod_neg * ce_neg
    return loss.sum() * (1.0 / N)


def l1_box_loss(boxes_internal, gt_boxes, match: MatchResult) -> tuple[Tensor, bool]:
    """Mean absolute error of decoded parameters over matched pairs, yaw wrapped.

    Returns ``(loss, no_matches)``.
    """
    if not match.pairs:
        return Tensor(0.0), True
    pred = decode_boxes_tensor(ops.take_rows(as_tensor(boxes_internal), match.pred_idx))
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 9)[match.gt_idx]
    diff = pred - gt
    diff = ops.concat([diff[:, :6], ops.wrap_angle(diff[:, 6:7]), diff[:, 7:]], axis=1)
    return ops.abs(diff).mean(), False


def match_layer(logits, boxes, gt_classes, gt_boxes, weights: LossWeights) -> MatchResult:
    if len(gt_classes) == 0:
        return MatchResult([], np.arange(logits.shape[0]))
    return hungarian(match_cost(logits, boxes, gt_classes, gt_boxes, weights))


def total_loss(result, gt_classes, gt_boxes, weights: LossWeights | None = None,
               matches: list | None = None, aux: bool = True) -> LossBreakdown:
    """Sum over layers of focal + box + auxiliary terms, with a fresh match per layer.

    ``matches`` freezes the per-layer assignments (for gradient checks).
    """
    w = weights or LossWeights()
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 9)
    total = Tensor(0.0)
    out = LossBreakdown(total)
    for li, layer in enumerate(result.layers):
        m = matches[li] if matches is not None else match_layer(layer.logits, layer.boxes, gt_classes, gt_boxes, w)
        targets = np.full(layer.logits.shape[0], -1, dtype=np.int64)
        if m.pairs:
            targets[m.pred_idx] = gt_classes[m.gt_idx]
        cls = focal_loss(layer.logits, targets, w.focal_gamma, w.focal_alpha)
        box, empty = l1_box_loss(layer.boxes, gt_boxes, m)
        term = cls + box * w.box
        if aux:
            term = term + layer.L_r * w.recon + layer.L_f * w.pred
        total = total + term
        comp = {"layer": li, "cls": float(cls.data), "box": float(box.data),
                "L_r": float(layer.L_r.data) if aux else 0.0, "L_f": float(layer.L_f.data) if aux else 0.0}
        out.per_layer.append(comp)
        out.matches.append(m)
        if empty:
            out.flags.append(f"layer {li}: no matches")
        if aux and layer.single_step:
            out.flags.append(f"layer {li}: single frame, no prediction loss")
        out.cls += comp["cls"]
        out.box += comp["box"]
        out.L_r += comp["L_r"]
        out.L_f += comp["L_f"]
    out.total = total
    return out

