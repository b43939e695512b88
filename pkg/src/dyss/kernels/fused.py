"""Differentiable wrappers around the backend hot loops."""
from __future__ import annotations

import numpy as np

from . import backend
from .tensor import ShapeError, Tensor, as_tensor, make_node


def bilinear(maps, pix, valid) -> Tensor:
    """Bilinear lookup with zero padding.

    maps: ``[K, C, H, W]``; pix: ``[K, M, 2]`` as (x, y) in map cells;
    valid: bool ``[K, M]``.  Returns ``[K, M, C]``; invalid rows are zero and
    carry no gradient.
    """
    maps, pix = as_tensor(maps), as_tensor(pix)
    K, C, H, W = maps.shape
    if pix.shape[0] != K or pix.shape[-1] != 2:
        raise ShapeError(f"bilinear: maps {maps.shape} vs pixels {pix.shape}")
    valid = np.ascontiguousarray(np.broadcast_to(np.asarray(valid, dtype=bool), pix.shape[:-1]))
    hwc = np.ascontiguousarray(maps.data.transpose(0, 2, 3, 1))
    pd = np.ascontiguousarray(pix.data)
    out = backend.impl("bilinear_gather")(hwc, pd, valid)
    need_maps = maps.requires_grad

    def bw(g):
        gmaps, gpix = backend.impl("bilinear_backward")(hwc, pd, valid, np.ascontiguousarray(g), need_maps)
        gm = gmaps.transpose(0, 3, 1, 2) if need_maps else None
        return gm, gpix

    return make_node(out, (maps, pix), bw)


def ssm_scan(a, B, C, P, X) -> tuple[Tensor, Tensor, Tensor]:
    """Run the linear recurrence over ``X[T, M, d]`` with prediction feedback.

    ``h_t = a*h_{t-1} + [x_t, tanh(xp_t)] B^T``, ``y_t = h_t C^T``,
    ``xp_{t+1} = h_t P^T`` with ``xp_0 = 0`` and ``h_{-1} = 0``.  The
    squash on the fed-back prediction keeps ``h`` bounded for any weights:
    ``|h| <= (|B_x x| + |B_p|) / (1 - max|a|)``.
    Returns ``(H, Y, YP)``; one node per output would double the backward
    work, so the three share a single backward through a packed node.
    """
    a, B, C, P, X = (as_tensor(t) for t in (a, B, C, P, X))
    T, M, d = X.shape
    N = a.shape[0]
    dp = P.shape[0]
    if B.shape != (N, d + dp) or C.shape[1] != N or P.shape[1] != N:
        raise ShapeError(f"ssm_scan: a {a.shape}, B {B.shape}, C {C.shape}, P {P.shape}, X {X.shape}")
    args = [np.ascontiguousarray(t.data) for t in (a, B, C, P, X)]
    H, Y, YP = backend.impl("ssm_scan")(*args)
    sizes = (H[0].size, Y[0].size, YP[0].size)
    packed = np.concatenate([H.reshape(T, -1), Y.reshape(T, -1), YP.reshape(T, -1)], axis=1)

    def bw(g):
        gH = g[:, :sizes[0]].reshape(H.shape)
        gY = np.ascontiguousarray(g[:, sizes[0]:sizes[0] + sizes[1]].reshape(Y.shape))
        gYP = np.ascontiguousarray(g[:, sizes[0] + sizes[1]:].reshape(YP.shape))
        if np.any(gH):
            # a direct gradient on h_t enters like an extra output read of h_t;
            # fold it in through a pseudo output channel (identity readout).
            return _scan_backward_with_state(args, H, YP, gH, gY, gYP)
        return backend.impl("ssm_scan_backward")(*args, H, YP, gY, gYP)

    node = make_node(packed, (a, B, C, P, X), bw)
    o1, o2 = sizes[0], sizes[0] + sizes[1]
    return (node[:, :o1].reshape(H.shape), node[:, o1:o2].reshape(Y.shape),
            node[:, o2:].reshape(YP.shape))


def _scan_backward_with_state(args, H, YP, gH, gY, gYP):
    a, B, C, P, X = args
    N = a.shape[0]
    C_aug = np.concatenate([C, np.eye(N)], axis=0)
    gY_aug = np.ascontiguousarray(np.concatenate([gY, gH], axis=-1))
    ga, gB, gC_aug, gP, gX = backend.impl("ssm_scan_backward")(a, B, np.ascontiguousarray(C_aug), P, X, H, YP,
                                                              gY_aug, gYP)
    return ga, gB, gC_aug[:C.shape[0]], gP, gX


def ssm_step(a, B, C, P, h, x, xp) -> tuple[Tensor, Tensor, Tensor]:
    """One recurrence step; same arithmetic as a single iteration of :func:`ssm_scan`."""
    a, B, C, P, h, x, xp = (as_tensor(t) for t in (a, B, C, P, h, x, xp))
    if h.shape[0] != x.shape[0] or x.shape[0] != xp.shape[0]:
        raise ShapeError(f"ssm_step: token counts differ: h {h.shape}, x {x.shape}, x_pred {xp.shape}")
    ad, Bd, Cd, Pd, hd, xd, xpd = (np.ascontiguousarray(t.data) for t in (a, B, C, P, h, x, xp))
    hn, y, yp = backend.impl("ssm_step")(ad, Bd, Cd, Pd, hd, xd, xpd)
    M, N = hn.shape
    dy, dp = y.shape[1], yp.shape[1]
    packed = np.concatenate([hn, y, yp], axis=1)
    d = xd.shape[1]

    def bw(g):
        g_hn = g[:, :N] + g[:, N:N + dy] @ Cd + g[:, N + dy:] @ Pd
        gC = g[:, N:N + dy].T @ hn
        gP = g[:, N + dy:].T @ hn
        tx = np.tanh(xpd)
        z = np.concatenate((xd, tx), axis=1)
        gB = g_hn.T @ z
        gz = g_hn @ Bd
        ga = (g_hn * hd).sum(axis=0)
        return ga, gB, gC, gP, g_hn * ad, gz[:, :d], gz[:, d:] * (1.0 - tx * tx)

    node = make_node(packed, (a, B, C, P, h, x, xp), bw)
    return node[:, :N], node[:, N:N + dy], node[:, N + dy:]
