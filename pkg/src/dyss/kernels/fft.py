"""Discrete Fourier transform along the last axis.

Arrays go through the active backend's ``fft_rows`` (radix-2 with a
Bluestein fallback for other lengths under numba, ``numpy.fft`` otherwise).
The differentiable pair packs a spectrum as ``concat(real, imag)`` on the
last axis so everything downstream stays real-valued.
"""
from __future__ import annotations

import numpy as np

from . import backend
from .tensor import Tensor, as_tensor, make_node


def _rows(z: np.ndarray, inverse: bool) -> np.ndarray:
    lead = z.shape[:-1]
    n = z.shape[-1]
    flat = np.ascontiguousarray(z.reshape(-1, n), dtype=np.complex128)
    return backend.impl("fft_rows")(flat, inverse).reshape(lead + (n,))


def fft(re, im=None):
    """Forward DFT; returns the (real, imag) pair."""
    re = np.asarray(re, dtype=np.float64)
    z = re + 0j if im is None else re + 1j * np.asarray(im, dtype=np.float64)
    out = _rows(z, inverse=False)
    return out.real.copy(), out.imag.copy()


def ifft(re, im):
    """Inverse DFT (1/n normalised); returns the (real, imag) pair."""
    z = np.asarray(re, dtype=np.float64) + 1j * np.asarray(im, dtype=np.float64)
    out = _rows(z, inverse=True)
    return out.real.copy(), out.imag.copy()


def dft_direct(x: np.ndarray, inverse: bool = False) -> np.ndarray:
    """O(n^2) reference DFT of a complex array along the last axis."""
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    sign = 1.0 if inverse else -1.0
    w = np.exp(sign * 2j * np.pi * np.outer(k, k) / n)
    out = x @ w.T
    return out / n if inverse else out


def spectrum(x) -> Tensor:
    """Real ``[..., D]`` -> ``[..., 2D]`` holding (Re, Im) of its DFT."""
    x = as_tensor(x)
    D = x.shape[-1]
    re, im = fft(x.data)

    def bw(g):
        # transpose of x -> (Re Fx, Im Fx); F is symmetric
        gr, _ = fft(g[..., :D])
        _, gi = fft(g[..., D:])
        return (gr + gi,)

    return make_node(np.concatenate([re, im], axis=-1), (x,), bw)


def inverse_spectrum(z) -> Tensor:
    """``[..., 2D]`` (Re, Im) -> real part of the inverse DFT, ``[..., D]``."""
    z = as_tensor(z)
    D = z.shape[-1] // 2
    re, _ = ifft(z.data[..., :D], z.data[..., D:])

    def bw(g):
        fr, fi = fft(g)
        return (np.concatenate([fr, fi], axis=-1) / D,)

    return make_node(re, (z,), bw)
