"""Centered 2-D DFT, radial band masks and band decomposition of feature maps.

Spectra are stored *centered*: after the forward transform the DC coefficient
is moved to index ``(H // 2, W // 2)``, so radial masks can be written directly
in terms of the distance to the spectral center. The forward transform is the
unnormalized sum; the inverse carries the ``1 / (H W)`` factor.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor_core import ShapeError

BAND_KINDS = ("low", "mid", "high")

# test-only mutation hook for the verify command: flips the IDFT normalization
_IDFT_NORM_SIGN = 1.0


class SymmetryError(RuntimeError):
    """An inverse transform left a non-negligible imaginary part behind."""


@dataclass(frozen=True)
class BandThresholds:
    r1: float = 0.3
    r2: float = 0.5

    def __post_init__(self):
        if not (0.0 < self.r1 < self.r2 <= math.sqrt(2.0) + 1e-12):
            raise ValueError(
                f"thresholds need 0 < r1 < r2 <= sqrt(2), got r1={self.r1}, r2={self.r2}"
            )


@dataclass(frozen=True, eq=False)
class BandMask:
    height: int
    width: int
    r1: float
    r2: float
    band_kind: str
    values: np.ndarray

    def mirror(self) -> np.ndarray:
        return _mirror(self.values)

    @property
    def popcount(self) -> int:
        return int(self.values.sum())


def _check_spatial(x: np.ndarray) -> None:
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"expected ... x H x W with H, W >= 1, got shape {x.shape}")


def dft2(h: np.ndarray) -> np.ndarray:
    """Per-channel forward DFT over the last two axes, DC moved to the center."""
    h = np.asarray(h, dtype=np.float64)
    _check_spatial(h)
    return np.fft.fftshift(np.fft.fft2(h, axes=(-2, -1)), axes=(-2, -1))


def idft2(spectrum: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse of :func:`dft2`.

    Returns the real part of the reconstruction and the L-infinity norm of the
    imaginary part that was discarded.
    """
    spectrum = np.asarray(spectrum, dtype=np.complex128)
    _check_spatial(spectrum)
    z = np.fft.ifft2(np.fft.ifftshift(spectrum, axes=(-2, -1)), axes=(-2, -1))
    z = z * _IDFT_NORM_SIGN
    residual = float(np.max(np.abs(z.imag))) if z.size else 0.0
    return np.ascontiguousarray(z.real), residual


def normalized_distance(height: int, width: int) -> np.ndarray:
    """``d(u, v)`` on the centered grid, 0 at DC and sqrt(2) at the corner."""
    if height < 2 or width < 2:
        raise ValueError(f"radial masks need H, W >= 2, got {height}x{width}")
    u0, v0 = height // 2, width // 2
    du = (np.arange(height) - u0) / u0
    dv = (np.arange(width) - v0) / v0
    return np.sqrt(du[:, None] ** 2 + dv[None, :] ** 2)


def radial_mask(height: int, width: int, r1: float, r2: float, band_kind: str) -> BandMask:
    """Binary mask selecting ``r1 < d <= r2``.

    ``low`` uses ``d <= r2`` (DC included, ``r1`` ignored); ``high`` uses
    ``d > r1`` with no upper bound (``r2`` ignored).
    """
    if band_kind not in BAND_KINDS:
        raise ValueError(f"band_kind must be one of {BAND_KINDS}, got {band_kind!r}")
    if band_kind == "mid" and not (0.0 <= r1 < r2):
        raise ValueError(f"need 0 <= r1 < r2, got r1={r1}, r2={r2}")
    d = normalized_distance(height, width)
    if band_kind == "low":
        values = d <= r2
        r1 = 0.0
    elif band_kind == "mid":
        values = (d > r1) & (d <= r2)
    else:
        values = d > r1
        r2 = math.inf
    values = values.astype(np.float64)
    values.setflags(write=False)
    return BandMask(height, width, float(r1), float(r2), band_kind, values)


@lru_cache(maxsize=256)
def band_masks(height: int, width: int, thresholds: BandThresholds = BandThresholds()):
    """The (low, mid, high) partition of the centered grid."""
    t = thresholds
    return (
        radial_mask(height, width, 0.0, t.r1, "low"),
        radial_mask(height, width, t.r1, t.r2, "mid"),
        radial_mask(height, width, t.r2, math.inf, "high"),
    )


def _mirror(values: np.ndarray) -> np.ndarray:
    """Map each centered index to the one holding the negated frequency."""
    h, w = values.shape[-2:]
    iu = (2 * (h // 2) - np.arange(h)) % h
    iv = (2 * (w // 2) - np.arange(w)) % w
    return values[..., iu[:, None], iv[None, :]]


def apply_mask(spectrum: np.ndarray, mask: BandMask) -> np.ndarray:
    spectrum = np.asarray(spectrum)
    if spectrum.shape[-2:] != mask.values.shape:
        raise ShapeError(
            f"spectrum spatial shape {spectrum.shape[-2:]} != mask shape {mask.values.shape}"
        )
    return spectrum * mask.values


def band_decompose(h: np.ndarray, thresholds: BandThresholds = BandThresholds(), tol: float = 1e-9):
    """Split ``h`` into spatial low/mid/high components that sum back to ``h``."""
    h = np.asarray(h, dtype=np.float64)
    spectrum = dft2(h)
    bands = []
    for mask in band_masks(h.shape[-2], h.shape[-1], thresholds):
        part, residual = idft2(apply_mask(spectrum, mask))
        if residual > tol * max(1.0, float(np.max(np.abs(h), initial=0.0))):
            raise SymmetryError(
                f"{mask.band_kind} band left imaginary residual {residual:.3e}"
            )
        bands.append(part)
    return tuple(bands)


def kernel_transfer_function(kernel: np.ndarray, height: int, width: int) -> np.ndarray:
    """Centered complex frequency response of correlating with ``kernel``.

    The impulse response of a same-size cross-correlation is the flipped
    kernel; it is wrapped onto an ``H x W`` circular grid with its center at
    the origin and transformed with :func:`dft2`.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"kernel must be k x k, got {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 != 1:
        raise ValueError(f"kernel size must be odd, got {k}")
    if k > min(height, width):
        raise ValueError(f"kernel size {k} exceeds grid {height}x{width}")
    p = k // 2
    grid = np.zeros((height, width))
    offsets = np.arange(-p, p + 1)
    # correlation output y(m) = sum_a w(a) x(m + a): impulse response g(-a) = w(a)
    rows = (-offsets) % height
    cols = (-offsets) % width
    grid[np.ix_(rows, cols)] = kernel
    return dft2(grid)
