"""numba kernels; signatures mirror ``_ref``."""
from __future__ import annotations

import math

import numpy as np
from numba import njit


# ---------------------------------------------------------------- bilinear

@njit(cache=True, nogil=True)
def _tap(maps, k, yi, xi, H, W, c):
    if xi < 0 or xi >= W or yi < 0 or yi >= H:
        return 0.0
    return maps[k, yi, xi, c]


@njit(cache=True, nogil=True)
def bilinear_gather(maps, pix, valid):
    K, H, W, C = maps.shape
    M = pix.shape[1]
    out = np.zeros((K, M, C))
    for k in range(K):
        for m in range(M):
            if not valid[k, m]:
                continue
            x = pix[k, m, 0]
            y = pix[k, m, 1]
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            fx = x - x0
            fy = y - y0
            w00 = (1.0 - fx) * (1.0 - fy)
            w01 = fx * (1.0 - fy)
            w10 = (1.0 - fx) * fy
            w11 = fx * fy
            for c in range(C):
                out[k, m, c] = (w00 * _tap(maps, k, y0, x0, H, W, c)
                                + w01 * _tap(maps, k, y0, x0 + 1, H, W, c)
                                + w10 * _tap(maps, k, y0 + 1, x0, H, W, c)
                                + w11 * _tap(maps, k, y0 + 1, x0 + 1, H, W, c))
    return out


@njit(cache=True, nogil=True)
def _scatter(gmaps, k, yi, xi, H, W, c, val):
    if 0 <= xi < W and 0 <= yi < H:
        gmaps[k, yi, xi, c] += val


@njit(cache=True, nogil=True)
def bilinear_backward(maps, pix, valid, gout, need_maps):
    K, H, W, C = maps.shape
    M = pix.shape[1]
    gpix = np.zeros((K, M, 2))
    gmaps = np.zeros((K, H, W, C)) if need_maps else np.zeros((1, 1, 1, 1))
    for k in range(K):
        for m in range(M):
            if not valid[k, m]:
                continue
            x = pix[k, m, 0]
            y = pix[k, m, 1]
            x0 = int(math.floor(x))
            y0 = int(math.floor(y))
            fx = x - x0
            fy = y - y0
            sx = 0.0
            sy = 0.0
            for c in range(C):
                g = gout[k, m, c]
                v00 = _tap(maps, k, y0, x0, H, W, c)
                v01 = _tap(maps, k, y0, x0 + 1, H, W, c)
                v10 = _tap(maps, k, y0 + 1, x0, H, W, c)
                v11 = _tap(maps, k, y0 + 1, x0 + 1, H, W, c)
                sx += ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10)) * g
                sy += ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01)) * g
                if need_maps:
                    _scatter(gmaps, k, y0, x0, H, W, c, (1.0 - fx) * (1.0 - fy) * g)
                    _scatter(gmaps, k, y0, x0 + 1, H, W, c, fx * (1.0 - fy) * g)
                    _scatter(gmaps, k, y0 + 1, x0, H, W, c, (1.0 - fx) * fy * g)
                    _scatter(gmaps, k, y0 + 1, x0 + 1, H, W, c, fx * fy * g)
            gpix[k, m, 0] = sx
            gpix[k, m, 1] = sy
    return gmaps, gpix


# ---------------------------------------------------------------- assignment

@njit(cache=True, nogil=True)
def hungarian_rows(cost):
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.int64)
    way = np.zeros(m + 1, dtype=np.int64)
    minv = np.empty(m + 1)
    used = np.empty(m + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = np.inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = np.inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
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

@njit(cache=True, nogil=True)
def _fft_pow2(a, sign):
    n = a.shape[0]
    j = 0
    for i in range(1, n):
        bit = n >> 1
        while j & bit:
            j ^= bit
            bit >>= 1
        j ^= bit
        if i < j:
            tmp = a[i]
            a[i] = a[j]
            a[j] = tmp
    tw = np.empty(max(n // 2, 1), dtype=np.complex128)
    for k in range(n // 2):
        ang = sign * 2.0 * math.pi * k / n
        tw[k] = complex(math.cos(ang), math.sin(ang))
    length = 2
    while length <= n:
        half = length // 2
        step = n // length
        for start in range(0, n, length):
            for k in range(half):
                u = a[start + k]
                v = a[start + k + half] * tw[k * step]
                a[start + k] = u + v
                a[start + k + half] = u - v
        length <<= 1


@njit(cache=True, nogil=True)
def _bluestein(x, sign):
    n = x.shape[0]
    m = 1
    while m < 2 * n - 1:
        m <<= 1
    w = np.empty(n, dtype=np.complex128)
    for k in range(n):
        # k*k mod 2n keeps the chirp phase exact for long rows
        ang = sign * math.pi * ((k * k) % (2 * n)) / n
        w[k] = complex(math.cos(ang), math.sin(ang))
    a = np.zeros(m, dtype=np.complex128)
    b = np.zeros(m, dtype=np.complex128)
    for k in range(n):
        a[k] = x[k] * w[k]
    b[0] = w[0].conjugate()
    for k in range(1, n):
        b[k] = w[k].conjugate()
        b[m - k] = w[k].conjugate()
    _fft_pow2(a, -1.0)
    _fft_pow2(b, -1.0)
    for k in range(m):
        a[k] *= b[k]
    _fft_pow2(a, 1.0)
    out = np.empty(n, dtype=np.complex128)
    for k in range(n):
        out[k] = w[k] * a[k] / m
    return out


@njit(cache=True, nogil=True)
def fft_rows(z, inverse):
    R, n = z.shape
    out = np.empty((R, n), dtype=np.complex128)
    sign = 1.0 if inverse else -1.0
    pow2 = n > 0 and (n & (n - 1)) == 0
    for r in range(R):
        if pow2:
            row = z[r].copy()
            _fft_pow2(row, sign)
        else:
            row = _bluestein(z[r], sign)
        if inverse:
            for k in range(n):
                row[k] /= n
        out[r] = row
    return out


# ---------------------------------------------------------------- ssm recurrence

@njit(cache=True, nogil=True)
def ssm_step(a, B, C, P, h, x, xp):
    M, d = x.shape
    dp = xp.shape[1]
    N = a.shape[0]
    z = np.empty((M, d + dp))
    z[:, :d] = x
    z[:, d:] = np.tanh(xp)
    u = np.dot(z, B.T)
    hn = np.empty((M, N))
    for i in range(M):
        for n in range(N):
            hn[i, n] = a[n] * h[i, n] + u[i, n]
    return hn, np.dot(hn, C.T), np.dot(hn, P.T)


@njit(cache=True, nogil=True)
def ssm_scan(a, B, C, P, X):
    T, M, d = X.shape
    N = a.shape[0]
    H = np.empty((T, M, N))
    Y = np.empty((T, M, C.shape[0]))
    YP = np.empty((T, M, P.shape[0]))
    h = np.zeros((M, N))
    xp = np.zeros((M, P.shape[0]))
    for t in range(T):
        h, y, xp = ssm_step(a, B, C, P, h, np.ascontiguousarray(X[t]), xp)
        H[t] = h
        Y[t] = y
        YP[t] = xp
    return H, Y, YP


@njit(cache=True, nogil=True)
def ssm_scan_backward(a, B, C, P, X, H, YP, gY, gYP):
    T, M, d = X.shape
    N = a.shape[0]
    dp = P.shape[0]
    ga = np.zeros(N)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gP = np.zeros_like(P)
    gX = np.empty_like(X)
    gh_carry = np.zeros((M, N))
    gxp_next = np.zeros((M, dp))
    z = np.empty((M, d + dp))
    for t in range(T - 1, -1, -1):
        gyp = np.ascontiguousarray(gYP[t]) + gxp_next
        h_t = np.ascontiguousarray(H[t])
        gy = np.ascontiguousarray(gY[t])
        gh = gh_carry + np.dot(gy, C) + np.dot(gyp, P)
        gC += np.dot(gy.T, h_t)
        gP += np.dot(gyp.T, h_t)
        z[:, :d] = X[t]
        if t > 0:
            z[:, d:] = np.tanh(YP[t - 1])
        else:
            z[:, d:] = 0.0
        gB += np.dot(gh.T, z)
        gz = np.dot(gh, B)
        gX[t] = gz[:, :d]
        gxp_next = np.ascontiguousarray(gz[:, d:] * (1.0 - z[:, d:] * z[:, d:]))
        if t > 0:
            for i in range(M):
                for n in range(N):
                    ga[n] += gh[i, n] * H[t - 1, i, n]
        for i in range(M):
            for n in range(N):
                gh_carry[i, n] = gh[i, n] * a[n]
    return ga, gB, gC, gP, gX
