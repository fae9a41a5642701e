"""Dense float64 array helpers and the elementary operations the rest of the
package is built from.

Feature maps are plain ``numpy.ndarray`` objects in channel-major layout,
``C x H x W`` or batched ``B x C x H x W``. Convolution follows the
cross-correlation convention (no kernel flip) with zero "same" padding.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_real(values, name: str = "tensor") -> np.ndarray:
    """Return ``values`` as a float64 array, rejecting non-finite entries."""
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class ConvKernelSet:
    """Weights ``out x in x k x k`` plus an optional length-``out`` bias."""

    weight: np.ndarray
    bias: Optional[np.ndarray] = None

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"kernel weight must be out x in x k x k, got {w.shape}")
        if w.shape[2] % 2 != 1:
            raise ValueError(f"kernel size must be odd, got k={w.shape[2]}")
        object.__setattr__(self, "weight", w)
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.shape != (w.shape[0],):
                raise ShapeError(
                    f"bias length {b.shape} does not match out_channels={w.shape[0]}"
                )
            object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def size(self) -> int:
        n = self.weight.size
        return n + (0 if self.bias is None else self.bias.size)

    @classmethod
    def zeros(cls, out_channels: int, in_channels: int, k: int, bias: bool = False):
        return cls(
            np.zeros((out_channels, in_channels, k, k)),
            np.zeros(out_channels) if bias else None,
        )


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected C x H x W or B x C x H x W input, got shape {x.shape}")


def conv2d_same(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    """Stride-1 cross-correlation with zero padding ``(k-1)/2`` on each side.

    ``x`` is ``C_in x H x W`` or ``B x C_in x H x W``; ``weight`` is
    ``C_out x C_in x k x k``. The output keeps the spatial size of ``x``.
    """
    xb, squeeze = _batched(np.asarray(x, dtype=np.float64))
    weight = np.asarray(weight, dtype=np.float64)
    if weight.ndim != 4:
        raise ShapeError(f"weight must be 4-D, got shape {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or k % 2 != 1:
        raise ShapeError(f"kernel must be square with odd side, got {k}x{k2}")
    if xb.shape[1] != c_in:
        raise ShapeError(
            f"input channels {xb.shape[1]} != kernel in_channels {c_in}"
        )
    b, _, h, w = xb.shape
    if k == 1:
        out = np.einsum("oi,bihw->bohw", weight[:, :, 0, 0], xb)
    else:
        p = k // 2
        padded = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
        # (B, C_in, H, W, k, k) -> (B, H, W, C_in, k, k)
        patches = sliding_window_view(padded, (k, k), axis=(2, 3))
        cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c_in * k * k)
        out = (cols @ weight.reshape(c_out, -1).T).reshape(b, h, w, c_out)
        out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        bias = np.asarray(bias, dtype=np.float64)
        if bias.shape != (c_out,):
            raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")
        out = out + bias[None, :, None, None]
    out = np.ascontiguousarray(out)
    return out[0] if squeeze else out


def conv2d_weight_grad(x: np.ndarray, grad_out: np.ndarray, k: int) -> np.ndarray:
    """Gradient of ``sum(grad_out * conv2d_same(x, W))`` with respect to ``W``."""
    xb, _ = _batched(x)
    gb, _ = _batched(grad_out)
    b, c_in, h, w = xb.shape
    c_out = gb.shape[1]
    if k == 1:
        g = np.einsum("bohw,bihw->oi", gb, xb)
        return g[:, :, None, None]
    p = k // 2
    padded = np.pad(xb, ((0, 0), (0, 0), (p, p), (p, p)))
    patches = sliding_window_view(padded, (k, k), axis=(2, 3))
    cols = patches.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c_in * k * k)
    gmat = gb.transpose(0, 2, 3, 1).reshape(b * h * w, c_out)
    return (gmat.T @ cols).reshape(c_out, c_in, k, k)


def conv2d_input_grad(grad_out: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Adjoint of ``conv2d_same`` in its input: correlation with the flipped,
    channel-transposed kernel."""
    flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_same(grad_out, flipped)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")
    return a + b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return np.asarray(a, dtype=np.float64) * float(s)


def reduce_mean(values: np.ndarray) -> float:
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("reduce_mean of an empty tensor")
    return float(arr.mean())


def argmax_rows(values: np.ndarray) -> np.ndarray:
    """Per-row index of the maximum; ties resolve to the lowest index."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise ValueError(f"argmax_rows needs a non-empty 2-D input, got shape {arr.shape}")
    # np.argmax returns the first occurrence of the maximum
    return np.argmax(arr, axis=1)
