"""Slow reference implementations used by the test-suite and ``fad verify``.

Nothing here touches ``numpy.fft`` or the im2col convolution path; each
function evaluates its defining sum directly.
"""
from __future__ import annotations

import math

import numpy as np


def naive_dft2(h: np.ndarray) -> np.ndarray:
    """Unshifted forward DFT of one ``H x W`` map by the direct double sum."""
    h = np.asarray(h, dtype=np.float64)
    H, W = h.shape
    m = np.arange(H)[:, None]
    n = np.arange(W)[None, :]
    out = np.empty((H, W), dtype=np.complex128)
    for u in range(H):
        for v in range(W):
            out[u, v] = np.sum(h * np.exp(-2j * math.pi * (u * m / H + v * n / W)))
    return out


def naive_idft2(F: np.ndarray) -> np.ndarray:
    """Unshifted inverse DFT with ``1 / (H W)`` normalization (complex result)."""
    F = np.asarray(F, dtype=np.complex128)
    H, W = F.shape
    u = np.arange(H)[:, None]
    v = np.arange(W)[None, :]
    out = np.empty((H, W), dtype=np.complex128)
    for x in range(H):
        for y in range(W):
            out[x, y] = np.sum(F * np.exp(2j * math.pi * (u * x / H + v * y / W))) / (H * W)
    return out


def center(F: np.ndarray) -> np.ndarray:
    """Roll an unshifted spectrum so DC lands on ``(H // 2, W // 2)``."""
    H, W = F.shape[-2:]
    return np.roll(F, (H // 2, W // 2), axis=(-2, -1))


def uncenter(F: np.ndarray) -> np.ndarray:
    H, W = F.shape[-2:]
    return np.roll(F, (-(H // 2), -(W // 2)), axis=(-2, -1))


def naive_conv2d(x: np.ndarray, weight: np.ndarray, bias=None) -> np.ndarray:
    """Zero-padded same-size cross-correlation, one output value at a time."""
    x = np.asarray(x, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    c_in, H, W = x.shape
    c_out, _, k, _ = weight.shape
    p = k // 2
    out = np.zeros((c_out, H, W))
    for o in range(c_out):
        for i in range(H):
            for j in range(W):
                acc = 0.0
                for c in range(c_in):
                    for a in range(k):
                        for b in range(k):
                            ii, jj = i + a - p, j + b - p
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += weight[o, c, a, b] * x[c, ii, jj]
                out[o, i, j] = acc + (0.0 if bias is None else bias[o])
    return out


def pointwise_band(height: int, width: int, u: int, v: int, r1: float, r2: float) -> str:
    """Band of one centered grid point under the low-inclusive convention."""
    u0, v0 = height // 2, width // 2
    d = math.sqrt(((u - u0) / u0) ** 2 + ((v - v0) / v0) ** 2)
    if d <= r1:
        return "low"
    if d <= r2:
        return "mid"
    return "high"


def naive_band_decompose(h: np.ndarray, r1: float, r2: float) -> dict[str, np.ndarray]:
    """Naive DFT, pointwise mask, naive IDFT, real part; one ``H x W`` map."""
    H, W = h.shape
    F = center(naive_dft2(h))
    out = {}
    for kind in ("low", "mid", "high"):
        mask = np.array(
            [[pointwise_band(H, W, u, v, r1, r2) == kind for v in range(W)] for u in range(H)],
            dtype=np.float64,
        )
        out[kind] = naive_idft2(uncenter(F * mask)).real
    return out


def adadelta_recurrence(x0: float, grad_fn, steps: int, rho=0.9, eps=1e-6, lr=1.0):
    """Scalar Adadelta written out longhand; returns the iterate after each step."""
    x, eg2, edx2 = x0, 0.0, 0.0
    xs = []
    for _ in range(steps):
        g = grad_fn(x)
        eg2 = rho * eg2 + (1.0 - rho) * g * g
        dx = -math.sqrt(edx2 + eps) / math.sqrt(eg2 + eps) * g
        edx2 = rho * edx2 + (1.0 - rho) * dx * dx
        x = x + lr * dx
        xs.append(x)
    return xs
