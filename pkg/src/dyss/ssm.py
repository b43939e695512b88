"""Temporal feature learning with a diagonal linear state-space recurrence.

Sampled features ``F[T, tokens, d]`` are (optionally) masked, moved into a
transform domain (identity, or the DFT packed as real/imag channels), and
scanned with

    h_t  = a * h_{t-1} + [x_t, tanh(xp_t)] B^T
    y_t  = h_t C^T          (enhanced features)
    xp_{t+1} = h_t P^T      (prediction of the next step's features)

where ``a = 0.999 * tanh(a_raw)`` keeps the evolution inside the unit circle
and the tanh on the fed-back prediction keeps the closed loop bounded (a
linear feedback ``B_p P`` could otherwise push it past 1).  The prediction input of step t is always the model's own output from
step t-1 (zeros at t=0); ground-truth features never enter that path.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import fused, ops
from .kernels.fft import inverse_spectrum, spectrum
from .kernels.nn import Linear, Module
from .kernels.tensor import ContractError, Param, Tensor, as_tensor

TRANSFORMS = ("identity", "fft")
STABILITY = 0.999


@dataclass
class MaskConfig:
    ratio: float = 0.5
    enabled: bool = True


@dataclass
class SSMState:
    h: Tensor          # [tokens, N]
    t: int = 0
    layer: int = 0


@dataclass
class FeatureBundle:
    F: Tensor          # [T, tokens, d] targets (detached)
    F_hat: Tensor      # [T, tokens, d] enhanced features
    F_tilde: Tensor    # [T, tokens, d]; row t predicts F[t + 1]
    mask: np.ndarray   # bool [T, tokens], True where the input was masked


def forward_transform(x, kind: str) -> Tensor:
    if kind == "identity":
        return as_tensor(x)
    if kind == "fft":
        return spectrum(x)
    raise ValueError(f"unknown transform {kind!r}; expected one of {TRANSFORMS}")


def inverse_transform(z, kind: str) -> Tensor:
    if kind == "identity":
        return as_tensor(z)
    if kind == "fft":
        return inverse_spectrum(z)
    raise ValueError(f"unknown transform {kind!r}; expected one of {TRANSFORMS}")


def _init_a_raw(n: int) -> np.ndarray:
    # decay rates spread between fast (0.5) and slow (0.95) memories
    target = np.linspace(0.5, 0.95, n) if n > 1 else np.array([0.8])
    return np.arctanh(target / STABILITY)


class SSMBlock(Module):
    """Recurrence parameters for one transform, plus the readout used for mixing.

    ``mix_source`` selects what the mixing stage consumes: the final hidden
    state (``"state"``) or the final enhanced features (``"enhanced"``), in
    both cases projected per token to width ``d_model``.
    """

    def __init__(self, rng: np.random.Generator, d_tok: int, n_state: int, d_model: int,
                 transform: str = "identity", mix_source: str = "state"):
        if transform not in TRANSFORMS:
            raise ValueError(f"unknown transform {transform!r}; expected one of {TRANSFORMS}")
        if mix_source not in ("state", "enhanced"):
            raise ValueError(f"mix_source must be 'state' or 'enhanced', got {mix_source!r}")
        self.transform = transform
        self.mix_source = mix_source
        self.d_tok = d_tok
        self.n_state = n_state
        width = d_tok if transform == "identity" else 2 * d_tok
        self.a_raw = Param(_init_a_raw(n_state))
        self.B = Param(rng.standard_normal((n_state, 2 * width)) / np.sqrt(2 * width))
        self.C = Param(rng.standard_normal((width, n_state)) / np.sqrt(n_state))
        self.P_head = Param(rng.standard_normal((width, n_state)) / np.sqrt(n_state))
        self.mask_embed = Param(rng.standard_normal(d_tok) * 0.02)
        self.readout = Linear(rng, n_state if mix_source == "state" else d_tok, d_model)

    def evolution(self) -> Tensor:
        """Diagonal of A after the stability squash."""
        return ops.tanh(self.a_raw) * STABILITY


def ssm_step(block: SSMBlock, state: SSMState, x_t, x_pred_t) -> tuple[SSMState, Tensor, Tensor]:
    """Advance one step in the transform domain; returns (state', y, y_pred_next)."""
    x_t, x_pred_t = as_tensor(x_t), as_tensor(x_pred_t)
    if x_t.shape[0] != state.h.shape[0] or x_pred_t.shape[0] != state.h.shape[0]:
        raise ContractError(f"ssm_step: state has {state.h.shape[0]} tokens, inputs have "
                            f"{x_t.shape[0]} / {x_pred_t.shape[0]}")
    h, y, yp = fused.ssm_step(block.evolution(), block.B, block.C, block.P_head, state.h, x_t, x_pred_t)
    return SSMState(h, state.t + 1, state.layer), y, yp


def zero_state(block: SSMBlock, tokens: int, layer: int = 0) -> SSMState:
    return SSMState(Tensor(np.zeros((tokens, block.n_state))), 0, layer)


def mask_features(F, ratio: float, seed, embed=None) -> tuple[Tensor, np.ndarray]:
    """Replace a Bernoulli(ratio) subset of tokens (per step, per token) by ``embed``.

    ``embed`` defaults to zeros.  Deterministic in ``seed`` (anything accepted
    by ``numpy.random.default_rng``).
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    F = as_tensor(F)
    T, M = F.shape[0], F.shape[1]
    if ratio == 0.0:
        return F, np.zeros((T, M), dtype=bool)
    mask = np.random.default_rng(seed).random((T, M)) < ratio
    if embed is None:
        embed = np.zeros(F.shape[-1])
    embed = as_tensor(embed).reshape(1, 1, -1)
    return ops.where(mask[..., None], embed, F), mask


def ssm_scan(block: SSMBlock, X, training: bool = False, mask_cfg: MaskConfig | None = None,
             seed=0, layer: int = 0) -> tuple[FeatureBundle, SSMState]:
    """Scan ``X[T, tokens, d]`` through the block.

    In training mode with masking enabled the inputs are masked first; the
    returned bundle's targets ``F`` are always the unmasked, detached inputs.
    """
    X = as_tensor(X)
    if X.ndim != 3 or X.shape[-1] != block.d_tok:
        raise ContractError(f"ssm_scan: expected [T, tokens, {block.d_tok}], got {X.shape}")
    T, M, _ = X.shape
    if T < 1:
        raise ContractError("ssm_scan: need at least one time step")
    mask = np.zeros((T, M), dtype=bool)
    inputs = X
    if training and mask_cfg is not None and mask_cfg.enabled and mask_cfg.ratio > 0:
        inputs, mask = mask_features(X, mask_cfg.ratio, seed, block.mask_embed)
    Z = forward_transform(inputs, block.transform)
    H, Y, YP = fused.ssm_scan(block.evolution(), block.B, block.C, block.P_head, Z)
    bundle = FeatureBundle(
        F=X.detach(),
        F_hat=inverse_transform(Y, block.transform),
        F_tilde=inverse_transform(YP, block.transform),
        mask=mask,
    )
    return bundle, SSMState(H[T - 1], T, layer)


def mixing_features(block: SSMBlock, bundle: FeatureBundle, state: SSMState) -> Tensor:
    """Per-token ``[tokens, d_model]`` features handed to the mixing stage."""
    if block.mix_source == "state":
        return block.readout(state.h)
    return block.readout(bundle.F_hat[bundle.F_hat.shape[0] - 1])


def aux_losses(bundle: FeatureBundle, target=None) -> tuple[Tensor, Tensor, bool]:
    """Reconstruction and next-step prediction losses, mean per element.

    The targets are the unmasked inputs without gradient; ``target`` replaces
    them with fixed values (used to replay a stop-gradient exactly).
    Returns ``(L_r, L_f, single_step)``; with one time step there is no next
    frame, so ``L_f`` is zero and ``single_step`` is True.
    """
    F = bundle.F.detach() if target is None else Tensor(np.asarray(target, dtype=np.float64))
    L_r = ops.square(bundle.F_hat - F).mean()
    T = F.shape[0]
    if T < 2:
        return L_r, Tensor(0.0), True
    L_f = ops.square(bundle.F_tilde[:T - 1] - F[1:]).mean()
    return L_r, L_f, False
