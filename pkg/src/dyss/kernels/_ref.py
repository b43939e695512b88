"""Vectorised numpy kernels (the fallback path).

Every function here has a twin with the same signature in ``_jit``.
"""
from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------- bilinear

def _taps(pix, valid, H, W):
    x = pix[..., 0]
    y = pix[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    taps = []
    for dy, dx, w in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)),
                      (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        xi = x0 + dx
        yi = y0 + dy
        inside = valid & (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        taps.append((np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), np.where(inside, w, 0.0), inside))
    return taps, fx, fy


def bilinear_gather(maps, pix, valid):
    """maps (K,H,W,C), pix (K,M,2) as (x, y) map coords, valid (K,M) -> (K,M,C)."""
    K, H, W, C = maps.shape
    kidx = np.broadcast_to(np.arange(K)[:, None], valid.shape)
    out = np.zeros(valid.shape + (C,))
    taps, _, _ = _taps(pix, valid, H, W)
    for yi, xi, w, _ in taps:
        out += w[..., None] * maps[kidx, yi, xi]
    return out


def bilinear_backward(maps, pix, valid, gout, need_maps):
    K, H, W, C = maps.shape
    kidx = np.broadcast_to(np.arange(K)[:, None], valid.shape)
    taps, fx, fy = _taps(pix, valid, H, W)
    vals = []
    for yi, xi, _, inside in taps:
        vals.append(np.where(inside[..., None], maps[kidx, yi, xi], 0.0))
    v00, v01, v10, v11 = vals
    gx = ((1 - fy)[..., None] * (v01 - v00) + fy[..., None] * (v11 - v10)) * gout
    gy = ((1 - fx)[..., None] * (v10 - v00) + fx[..., None] * (v11 - v01)) * gout
    gpix = np.stack([gx.sum(-1), gy.sum(-1)], axis=-1)
    gpix[~valid] = 0.0
    gmaps = None
    if need_maps:
        gmaps = np.zeros((K * H * W, C))
        for yi, xi, w, _ in taps:
            lin = (kidx * H + yi) * W + xi
            np.add.at(gmaps, lin.ravel(), (w[..., None] * gout).reshape(-1, C))
        gmaps = gmaps.reshape(K, H, W, C)
    return gmaps, gpix


# ---------------------------------------------------------------- assignment

def hungarian_rows(cost):
    """Shortest augmenting path assignment for n <= m; returns col index per row."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assign = np.full(n, -1, dtype=np.int64)
    for j in range(1, m + 1):
        if p[j]:
            assign[p[j] - 1] = j - 1
    return assign


# ---------------------------------------------------------------- fft

def fft_rows(z, inverse):
    return np.fft.ifft(z, axis=-1) if inverse else np.fft.fft(z, axis=-1)


# ---------------------------------------------------------------- ssm recurrence

def ssm_step(a, B, C, P, h, x, xp):
    # the fed-back prediction is squashed so the closed loop stays bounded
    z = np.concatenate((x, np.tanh(xp)), axis=1)
    hn = a * h + z @ B.T
    return hn, hn @ C.T, hn @ P.T


def ssm_scan(a, B, C, P, X):
    T, M, d = X.shape
    N = a.shape[0]
    H = np.empty((T, M, N))
    Y = np.empty((T, M, C.shape[0]))
    YP = np.empty((T, M, P.shape[0]))
    h = np.zeros((M, N))
    xp = np.zeros((M, P.shape[0]))
    for t in range(T):
        h, y, xp = ssm_step(a, B, C, P, h, X[t], xp)
        H[t] = h
        Y[t] = y
        YP[t] = xp
    return H, Y, YP


def ssm_scan_backward(a, B, C, P, X, H, YP, gY, gYP):
    T, M, d = X.shape
    N = a.shape[0]
    ga = np.zeros(N)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gP = np.zeros_like(P)
    gX = np.empty_like(X)
    gh_carry = np.zeros((M, N))
    gxp_next = np.zeros((M, P.shape[0]))
    zeros_h = np.zeros((M, N))
    zeros_x = np.zeros((M, P.shape[0]))
    for t in range(T - 1, -1, -1):
        gyp = gYP[t] + gxp_next
        h_t = H[t]
        gh = gh_carry + gY[t] @ C + gyp @ P
        gC += gY[t].T @ h_t
        gP += gyp.T @ h_t
        xp_t = np.tanh(YP[t - 1]) if t > 0 else zeros_x
        z = np.concatenate((X[t], xp_t), axis=1)
        gB += gh.T @ z
        gz = gh @ B
        gX[t] = gz[:, :d]
        gxp_next = gz[:, d:] * (1.0 - xp_t * xp_t)
        h_prev = H[t - 1] if t > 0 else zeros_h
        ga += (gh * h_prev).sum(axis=0)
        gh_carry = gh * a
    return ga, gB, gC, gP, gX
