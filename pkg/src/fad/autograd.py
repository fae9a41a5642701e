"""A small tape-free reverse-mode differentiation engine over numpy arrays.

Every op returns a :class:`Tensor` that remembers its parents and a closure
propagating the incoming gradient to them. Graph edges are only recorded when
at least one input requires a gradient, so frozen forward passes cost nothing
extra.

Complex-valued nodes (spectra) carry their gradient as
``dL/dRe(z) + 1j * dL/dIm(z)``; with that convention the backward rule of a
complex-linear map is its conjugate transpose.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

from . import spectral
from .tensor_core import ShapeError, conv2d_input_grad, conv2d_same, conv2d_weight_grad


class GraphError(RuntimeError):
    """The recorded graph cannot be differentiated."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.asarray(data)
        if not np.iscomplexobj(arr):
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable[[], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, copy=True)
        else:
            self.grad = self.grad + g


def tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = lambda: backward(out.grad)
    return out


def backward(loss: Tensor) -> None:
    """Fill ``.grad`` on every node that requires one, starting from ``loss``."""
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data, dtype=np.float64)
    for node in reversed(order):
        if node.is_leaf:
            continue
        if node._backward is None:
            raise GraphError(f"node {node!r} has parents but no backward rule")
        if node.grad is None:
            continue
        node._backward()


# --------------------------------------------------------------------------- #
# elementary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}")

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    return _node(a.data + b.data, (a, b), bw)


def add_n(items: Sequence[Tensor]) -> Tensor:
    out = items[0]
    for t in items[1:]:
        out = add(out, t)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = tensor(a)
    s = float(s)
    return _node(a.data * s, (a,), lambda g: a._accumulate(g * s))


def sum_all(a: Tensor) -> Tensor:
    a = tensor(a)
    return _node(np.array(a.data.sum()), (a,), lambda g: a._accumulate(np.full(a.shape, float(g))))


def mean_all(a: Tensor) -> Tensor:
    a = tensor(a)
    n = a.data.size
    return _node(np.array(a.data.mean()), (a,), lambda g: a._accumulate(np.full(a.shape, float(g) / n)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = tensor(a), tensor(b)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    a = tensor(a)
    return _node(a.data.T, (a,), lambda g: a._accumulate(g.T))


def add_bias(a: Tensor, bias: Tensor) -> Tensor:
    """Row-wise bias for ``N x D`` matrices."""
    a, bias = tensor(a), tensor(bias)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g)
        if bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return _node(a.data + bias.data[None, :], (a, bias), bw)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    x, weight = tensor(x), tensor(weight)
    parents = (x, weight) if bias is None else (x, weight, tensor(bias))
    out = conv2d_same(x.data, weight.data, None if bias is None else parents[2].data)
    k = weight.shape[-1]

    def bw(g):
        if x.requires_grad:
            x._accumulate(conv2d_input_grad(g, weight.data))
        if weight.requires_grad:
            weight._accumulate(conv2d_weight_grad(x.data, g, k))
        if bias is not None and parents[2].requires_grad:
            axes = (0, 2, 3) if g.ndim == 4 else (1, 2)
            parents[2]._accumulate(g.sum(axis=axes))

    return _node(out, parents, bw)


_relu_log: Optional[list] = None


@contextlib.contextmanager
def record_relu_patterns():
    """Collect the on/off pattern of every ReLU evaluated inside the block."""
    global _relu_log
    saved, _relu_log = _relu_log, []
    try:
        yield _relu_log
    finally:
        _relu_log = saved


def relu(a: Tensor) -> Tensor:
    a = tensor(a)
    mask = a.data > 0
    if _relu_log is not None:
        _relu_log.append(mask)
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: a._accumulate(g * mask))


def avg_pool2(a: Tensor) -> Tensor:
    a = tensor(a)
    *lead, h, w = a.shape
    if h % 2 or w % 2:
        raise ShapeError(f"2x2 average pooling needs even H, W, got {h}x{w}")
    out = a.data.reshape(*lead, h // 2, 2, w // 2, 2).mean(axis=(-3, -1))

    def bw(g):
        a._accumulate(np.repeat(np.repeat(g, 2, axis=-2), 2, axis=-1) * 0.25)

    return _node(out, (a,), bw)


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    a = tensor(a)
    shape = a.shape
    return _node(a.data.reshape(shape[0], -1), (a,), lambda g: a._accumulate(g.reshape(shape)))


def l2_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row of an ``N x D`` matrix to unit norm, ``x / max(|x|, eps)``."""
    a = tensor(a)
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    clamped = norms <= eps
    denom = np.where(clamped, eps, norms)
    y = a.data / denom

    def bw(g):
        proj = np.where(clamped, 0.0, np.sum(y * g, axis=1, keepdims=True))
        a._accumulate((g - y * proj) / denom)

    return _node(y, (a,), bw)


def class_means(emb: Tensor, labels: np.ndarray, n_classes: int) -> Tensor:
    """Per-class mean of the rows of ``emb`` (``N x D`` → ``n_classes x D``)."""
    emb = tensor(emb)
    labels = np.asarray(labels)
    onehot = np.zeros((labels.size, n_classes))
    onehot[np.arange(labels.size), labels] = 1.0
    counts = onehot.sum(axis=0)
    if np.any(counts == 0):
        missing = [int(c) for c in np.flatnonzero(counts == 0)]
        raise ValueError(f"classes without support examples: {missing}")
    weights = onehot / counts[None, :]
    return _node(weights.T @ emb.data, (emb,), lambda g: emb._accumulate(weights @ g))


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax of the target column, max-shifted."""
    logits = tensor(logits)
    labels = np.asarray(labels)
    n = labels.size
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    loss = np.mean(logsum - z[np.arange(n), labels])

    def bw(g):
        p = np.exp(z - logsum[:, None])
        p[np.arange(n), labels] -= 1.0
        logits._accumulate(p * (float(g) / n))

    return _node(np.array(loss), (logits,), bw)


# --------------------------------------------------------------------------- #
# spectral ops


def dft2(x: Tensor) -> Tensor:
    x = tensor(x)
    h, w = x.shape[-2:]

    def bw(g):
        back = np.fft.ifft2(np.fft.ifftshift(g, axes=(-2, -1)), axes=(-2, -1))
        x._accumulate(back.real * (h * w))

    return _node(spectral.dft2(x.data), (x,), bw)


def apply_mask(F: Tensor, mask: np.ndarray) -> Tensor:
    F = tensor(F)
    mask = np.asarray(mask, dtype=np.float64)
    if F.shape[-2:] != mask.shape:
        raise ShapeError(f"spectrum spatial shape {F.shape[-2:]} != mask shape {mask.shape}")
    return _node(F.data * mask, (F,), lambda g: F._accumulate(g * mask))


def idft2_real(F: Tensor) -> Tensor:
    """Real part of the centered inverse DFT."""
    F = tensor(F)
    h, w = F.shape[-2:]
    real, _ = spectral.idft2(F.data)

    def bw(g):
        adj = np.fft.fftshift(np.fft.fft2(g, axes=(-2, -1)), axes=(-2, -1))
        F._accumulate(adj * (spectral._IDFT_NORM_SIGN / (h * w)))

    return _node(real, (F,), bw)


def band_split(x: Tensor, thresholds: spectral.BandThresholds) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable counterpart of :func:`spectral.band_decompose`."""
    x = tensor(x)
    F = dft2(x)
    masks = spectral.band_masks(x.shape[-2], x.shape[-1], thresholds)
    return tuple(idft2_real(apply_mask(F, m.values)) for m in masks)
