"""Shared-weight decoder: sample -> SSM scan -> adaptive mixing -> heads -> query update.

One set of weights is applied ``L`` times.  Each layer samples features for
the live queries over all frames, scans them with one SSM block per input
transform (their per-token readouts are summed), mixes the readout per query
along channels and then along points with weights generated from the query
itself, predicts classes and box refinements, and finally updates the
query set.  Boxes are refined additively.  By default the refined boxes
enter the next layer without gradient (``detach_boxes``); with it off,
gradients also flow into the next layer's sampling geometry.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import queries as Qm
from .kernels import ops
from .kernels.nn import MLP, LayerNorm, Linear, Module
from .kernels.tensor import ContractError, Param, Tensor, as_tensor
from .sampling import SceneInputs, offset_head, sample_all
from .ssm import FeatureBundle, MaskConfig, SSMBlock, aux_losses, mixing_features, ssm_scan

BOX_SCALE = np.array([30.0, 30.0, 4.0, 1.0, 1.0, 1.0, 1.0, 1.0, 5.0, 5.0])


@dataclass
class DecoderConfig:
    layers: int = 6
    d_model: int = 64
    points: int = 4
    frames: int = 8
    n_state: int = 128
    channels: int = 32
    num_classes: int = 4
    n_queries: int = 900
    floor: int = 269
    transforms: tuple = ("identity", "fft")
    dynamic: bool = True
    aux: bool = True
    mask_ratio: float = 0.5
    mask_every_layer: bool = True
    mix_source: str = "state"
    head_hidden: int = 64
    detach_boxes: bool = True
    query_seed: int = 0
    query_init: Qm.QueryInitConfig = field(default_factory=Qm.QueryInitConfig)

    def __post_init__(self):
        self.transforms = tuple(self.transforms)
        if isinstance(self.query_init, dict):
            self.query_init = Qm.QueryInitConfig(**self.query_init)
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not self.transforms:
            raise ValueError("at least one transform is required")
        if self.floor > self.n_queries:
            raise ValueError(f"floor {self.floor} exceeds initial query count {self.n_queries}")


def box_encoding(boxes) -> Tensor:
    """Scaled box descriptor ``[N, 10]`` (yaw as sin/cos) fed to the positional encoder."""
    b = as_tensor(boxes)
    enc = ops.concat([b[:, :6], ops.sin(b[:, 6:7]), ops.cos(b[:, 6:7]), b[:, 7:9]], axis=1)
    return enc * (1.0 / BOX_SCALE)


class DySSDecoder(Module):
    def __init__(self, cfg: DecoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        D, P = cfg.d_model, cfg.points
        init = Qm.init_queries(cfg.n_queries, cfg.query_seed, D, cfg.floor, cfg.query_init)
        self.query_boxes = Param(init.boxes.data)
        self.query_features = Param(init.features.data)
        self.pos_enc = MLP(rng, BOX_SCALE.size, D, D)
        self.offsets = offset_head(rng, D, P)
        self.blocks = {kind: SSMBlock(rng, cfg.channels, cfg.n_state, D, kind, cfg.mix_source)
                       for kind in cfg.transforms}
        self.wc_gen = Linear(rng, D, D * D, std=0.1 / np.sqrt(D) / np.sqrt(D), bias_init=np.eye(D).reshape(-1))
        self.ln_c = LayerNorm(D)
        self.wp_gen = Linear(rng, D, P * P, std=0.1 / np.sqrt(D), bias_init=np.eye(P).reshape(-1))
        self.ln_p = LayerNorm(D * P)
        self.mix_out = Linear(rng, D * P, D, std=0.5 / np.sqrt(D * P))
        self.cls_head = MLP(rng, D, cfg.head_hidden, cfg.num_classes, out_std=0.01,
                            out_bias=-np.log((1 - 0.01) / 0.01))
        self.box_head = MLP(rng, D, cfg.head_hidden, Qm.BOX_DIM, out_std=0.01)
        self.qheads = Qm.QueryUpdateHeads(rng, D)

    def initial_queries(self) -> Qm.QuerySet:
        return Qm.QuerySet(self.query_boxes, self.query_features, self.cfg.floor, 0)


# ---------------------------------------------------------------- mixing

def channel_mix(Q, S, wc_gen: Linear, ln: LayerNorm) -> Tensor:
    """``ReLU(LN(S W_c))`` with ``W_c = wc_gen(Q)`` reshaped to ``[N, D, D]``; S is ``[N, P, D]``."""
    Q, S = as_tensor(Q), as_tensor(S)
    N, D = Q.shape
    if S.ndim != 3 or S.shape[0] != N or S.shape[2] != D:
        raise ContractError(f"channel_mix: state features {S.shape} do not match queries {Q.shape}")
    Wc = wc_gen(Q).reshape(N, D, D)
    return ops.relu(ln(ops.matmul(S, Wc)))


def point_mix(Mc, Q, wp_gen: Linear, ln: LayerNorm) -> Tensor:
    """``ReLU(LN(Mc^T W_p))`` with ``W_p = wp_gen(Q)`` as ``[N, P, P]``; returns ``[N, D, P]``.

    The normalisation runs over the flattened ``D * P`` entries of each query.
    """
    Mc, Q = as_tensor(Mc), as_tensor(Q)
    N, P, D = Mc.shape
    if Q.shape[0] != N:
        raise ContractError(f"point_mix: {Mc.shape} vs queries {Q.shape}")
    Wp = wp_gen(Q).reshape(N, P, P)
    mixed = ops.matmul(Mc.transpose(0, 2, 1), Wp).reshape(N, D * P)
    return ops.relu(ln(mixed)).reshape(N, D, P)


def mix_residual(Mp, Q, out: Linear) -> Tensor:
    Mp, Q = as_tensor(Mp), as_tensor(Q)
    N = Q.shape[0]
    return Q + out(Mp.reshape(N, -1))


def predict_heads(Q, boxes, cls_head: MLP, box_head: MLP) -> tuple[Tensor, Tensor]:
    """Class logits ``[N, K]`` and refined internal boxes ``[N, 9]`` (yaw wrapped)."""
    Q = as_tensor(Q)
    logits = cls_head(Q)
    delta = box_head(Q)
    refined = as_tensor(boxes) + delta
    wrapped = ops.concat([refined[:, :6], ops.wrap_angle(refined[:, 6:7]), refined[:, 7:]], axis=1)
    return logits, wrapped


# ---------------------------------------------------------------- forward

@dataclass
class LayerOutput:
    logits: Tensor                 # [N, K]
    boxes: Tensor                  # [N, 9] internal encoding
    bundles: dict                  # transform -> FeatureBundle
    L_r: Tensor
    L_f: Tensor
    single_step: bool
    record: Qm.UpdateRecord
    n_queries: int


@dataclass
class ForwardResult:
    layers: list
    final: Qm.QuerySet
    trajectory: list

    def replay(self) -> dict:
        """Keyword arguments that make a later ``forward`` take the same discrete choices
        and hold the same stop-gradient targets fixed."""
        return {"plans": [l.record for l in self.layers],
                "targets": [{k: b.F.data.copy() for k, b in l.bundles.items()} for l in self.layers],
                "boxes": [l.boxes.data.copy() for l in self.layers]}

    def final_predictions(self) -> dict:
        """Scores, labels and decoded boxes of the last layer (numpy)."""
        last = self.layers[-1]
        probs = ops._sigmoid(last.logits.data)
        return {"scores": probs.max(axis=1), "labels": probs.argmax(axis=1),
                "probs": probs, "boxes": Qm.decode_boxes(last.boxes.data)}


def forward(model: DySSDecoder, inputs: SceneInputs, training: bool = False, seed=0,
            plans: list | None = None, layers: int | None = None,
            targets: list | None = None, boxes: list | None = None) -> ForwardResult:
    """Run all decoder layers on one clip.

    ``seed`` drives the feature masks (training only).  ``plans`` replays the
    per-layer query update selections recorded by an earlier call,
    ``targets`` (per layer, transform -> array) its auxiliary-loss targets and
    ``boxes`` the refined boxes handed on without gradient.
    """
    cfg = model.cfg
    L = cfg.layers if layers is None else layers
    if inputs.frames != cfg.frames:
        raise ContractError(f"clip has {inputs.frames} frames, decoder expects {cfg.frames}")
    if inputs.maps.shape[2] != cfg.channels:
        raise ContractError(f"maps have {inputs.maps.shape[2]} channels, decoder expects {cfg.channels}")
    mask_cfg = MaskConfig(cfg.mask_ratio, enabled=cfg.aux and cfg.mask_ratio > 0)
    frozen = boxes
    q = model.initial_queries()
    outputs, trajectory = [], []
    seed_seq = np.atleast_1d(np.asarray(seed, dtype=np.int64)).tolist()
    for layer in range(L):
        N, P, D = q.n, cfg.points, cfg.d_model
        Q_in = q.features + model.pos_enc(box_encoding(q.boxes))
        F, _, _ = sample_all(q, model.offsets, inputs, P, features=Q_in)
        S = None
        bundles: dict[str, FeatureBundle] = {}
        L_r = L_f = Tensor(0.0)
        single = False
        masking = training and (cfg.mask_every_layer or layer == 0)
        for b, kind in enumerate(cfg.transforms):
            block = model.blocks[kind]
            bundle, state = ssm_scan(block, F, training=masking, mask_cfg=mask_cfg,
                                     seed=seed_seq + [layer, b], layer=layer)
            bundles[kind] = bundle
            s = mixing_features(block, bundle, state)
            S = s if S is None else S + s
            if cfg.aux:
                lr, lf, single = aux_losses(bundle, None if targets is None else targets[layer][kind])
                L_r = L_r + lr * (1.0 / len(cfg.transforms))
                L_f = L_f + lf * (1.0 / len(cfg.transforms))
        S_q = S.reshape(N, P, D)
        Mc = channel_mix(Q_in, S_q, model.wc_gen, model.ln_c)
        Mp = point_mix(Mc, Q_in, model.wp_gen, model.ln_p)
        Qn = mix_residual(Mp, q.features, model.mix_out)
        logits, boxes = predict_heads(Qn, q.boxes, model.cls_head, model.box_head)
        carried = boxes
        if cfg.detach_boxes:
            carried = Tensor(boxes.data.copy() if frozen is None else frozen[layer])
        nxt = Qm.QuerySet(carried, Qn, q.floor, q.layer)
        q, rec = Qm.update(nxt, S, model.qheads, dynamic=cfg.dynamic,
                           plan=None if plans is None else plans[layer])
        outputs.append(LayerOutput(logits, boxes, bundles, L_r, L_f, single, rec, N))
        trajectory.append(rec.log_row())
    return ForwardResult(outputs, q, trajectory)


def config_to_dict(cfg: DecoderConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["transforms"] = list(cfg.transforms)
    return d
