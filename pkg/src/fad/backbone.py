"""Small convolutional backbone with per-block adapter insertion points.

Each block is ``conv3x3 (+ adapter of the block input) -> ReLU -> 2x2 average
pool``. The final map is flattened and L2-normalized into the embedding used by
the nearest-centroid head.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .adapter import AdapterParams, FadConfig, adapter_graph
from .io import read_flat, write_flat
from .tensor_core import ConvKernelSet, ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    num_blocks: int = 4
    channels: tuple[int, ...] = (8, 16, 16, 32)
    input_shape: tuple[int, int, int] = (1, 32, 32)

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if len(self.channels) != self.num_blocks:
            raise ValueError(
                f"need one channel count per block: {len(self.channels)} != {self.num_blocks}"
            )
        _, h, w = self.input_shape
        step = 2 ** self.num_blocks
        if h % step or w % step:
            raise ValueError(f"input {h}x{w} is not divisible by 2^{self.num_blocks}")

    def block_io(self) -> list[tuple[int, int, int]]:
        """``(in_channels, out_channels, spatial size)`` of every block."""
        c, h, _ = self.input_shape
        out = []
        for c_out in self.channels:
            out.append((c, c_out, h))
            c, h = c_out, h // 2
        return out

    @property
    def embedding_dim(self) -> int:
        _, h, w = self.input_shape
        s = 2 ** self.num_blocks
        return self.channels[-1] * (h // s) * (w // s)

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "channels": list(self.channels),
            "input_shape": list(self.input_shape),
        }


@dataclass(frozen=True)
class BackboneParams:
    config: BackboneConfig
    blocks: tuple[ConvKernelSet, ...]
    frozen: bool = False
    seed: Optional[int] = None

    def arrays(self) -> list[np.ndarray]:
        out = []
        for ks in self.blocks:
            out += [ks.weight, ks.bias]
        return out

    def freeze(self) -> "BackboneParams":
        blocks = []
        for ks in self.blocks:
            w, b = ks.weight.copy(), ks.bias.copy()
            w.setflags(write=False)
            b.setflags(write=False)
            blocks.append(ConvKernelSet(w, b))
        return BackboneParams(self.config, tuple(blocks), True, self.seed)


def init_backbone(config: BackboneConfig = BackboneConfig(), seed: int = 0) -> BackboneParams:
    """He-normal conv weights, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for c_in, c_out, _ in config.block_io():
        std = np.sqrt(2.0 / (c_in * 9))
        blocks.append(ConvKernelSet(rng.normal(0.0, std, (c_out, c_in, 3, 3)), np.zeros(c_out)))
    return BackboneParams(config, tuple(blocks), False, seed)


def all_blocks(config: BackboneConfig) -> tuple[bool, ...]:
    return (True,) * config.num_blocks


def single_block(config: BackboneConfig, index: int) -> tuple[bool, ...]:
    return tuple(i == index for i in range(config.num_blocks))


def backbone_graph(
    x: ag.Tensor,
    block_weights: Sequence[tuple[ag.Tensor, ag.Tensor]],
    adapters: Optional[Sequence[Optional[tuple[dict, object]]]] = None,
    fad_config: FadConfig = FadConfig(),
) -> ag.Tensor:
    """Embedding node for a batch ``x`` (``B x C x H x W``).

    ``adapters[i]`` is ``None`` or a ``(weights, variant)`` pair for block ``i``.
    """
    h = x
    for i, (w, b) in enumerate(block_weights):
        out = ag.conv2d(h, w, b)
        if adapters is not None and adapters[i] is not None:
            weights, variant = adapters[i]
            out = ag.add(out, adapter_graph(h, weights, variant, fad_config))
        h = ag.avg_pool2(ag.relu(out))
    return ag.l2_normalize(ag.flatten(h))


def resolve_adapters(
    params: BackboneParams,
    adapters: Optional[Sequence[Optional[AdapterParams]]],
    mask: Optional[Sequence[bool]],
) -> list[Optional[AdapterParams]]:
    """Adapters active under ``mask``; raises when an enabled block has none."""
    n = params.config.num_blocks
    if mask is None:
        mask = (adapters is not None,) * n
    if len(mask) != n:
        raise ValueError(f"insertion mask has {len(mask)} entries for {n} blocks")
    active: list[Optional[AdapterParams]] = [None] * n
    for i, on in enumerate(mask):
        if not on:
            continue
        if adapters is None or i >= len(adapters) or adapters[i] is None:
            raise ValueError(f"block {i} is enabled in the insertion mask but has no adapter")
        c_in, c_out, _ = params.config.block_io()[i]
        a = adapters[i]
        if (a.in_channels, a.out_channels) != (c_in, c_out):
            raise ShapeError(
                f"adapter for block {i} maps {a.in_channels}->{a.out_channels}, "
                f"block maps {c_in}->{c_out}"
            )
        active[i] = a
    return active


def backbone_forward(
    x: np.ndarray,
    params: BackboneParams,
    adapters: Optional[Sequence[Optional[AdapterParams]]] = None,
    mask: Optional[Sequence[bool]] = None,
    fad_config: FadConfig = FadConfig(),
) -> np.ndarray:
    """L2-normalized embeddings (``B x D``) of a batch, or ``D`` for one image."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    xb = x[None] if single else x
    if xb.shape[1:] != params.config.input_shape:
        raise ShapeError(f"input shape {xb.shape[1:]} != configured {params.config.input_shape}")
    active = resolve_adapters(params, adapters, mask)
    weights = [(ag.Tensor(k.weight), ag.Tensor(k.bias)) for k in params.blocks]
    graph_adapters = [
        None if a is None else ({n: ag.Tensor(v) for n, v in a.arrays().items()}, a.variant)
        for a in active
    ]
    emb = backbone_graph(ag.Tensor(xb), weights, graph_adapters, fad_config).data
    return emb[0] if single else emb


def pretrain(
    config: BackboneConfig,
    dataset,
    epochs: int = 30,
    lr: float = 0.5,
    seed: int = 0,
    batch_size: int = 32,
    history: Optional[dict] = None,
) -> BackboneParams:
    """Train backbone plus a throwaway linear head with mini-batch gradient
    descent on softmax cross-entropy; returns the frozen backbone.

    If ``history`` is given it receives per-epoch mean loss and the final
    full-pass training accuracy of backbone + head.
    """
    images = np.asarray(dataset.images, dtype=np.float64)
    if images.shape[0] == 0:
        raise ValueError("pretraining dataset is empty")
    classes, labels = np.unique(np.asarray(dataset.labels), return_inverse=True)
    params = init_backbone(config, seed)
    if epochs == 0:
        return params.freeze()
    rng = np.random.default_rng([seed, 1])
    weights = [
        (ag.Tensor(k.weight.copy(), True), ag.Tensor(k.bias.copy(), True)) for k in params.blocks
    ]
    head_w = ag.Tensor(rng.normal(0.0, 0.01, (config.embedding_dim, classes.size)), True)
    head_b = ag.Tensor(np.zeros(classes.size), True)
    leaves = [t for pair in weights for t in pair] + [head_w, head_b]
    n = images.shape[0]
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            emb = backbone_graph(ag.Tensor(images[idx]), weights)
            logits = ag.add_bias(ag.matmul(emb, head_w), head_b)
            loss = ag.cross_entropy(logits, labels[idx])
            total += float(loss.data) * idx.size
            for t in leaves:
                t.grad = None
            ag.backward(loss)
            for t in leaves:
                t.data = t.data - lr * t.grad
        losses.append(total / n)
    blocks = tuple(ConvKernelSet(w.data, b.data) for w, b in weights)
    out = BackboneParams(config, blocks, False, seed).freeze()
    if history is not None:
        emb = backbone_forward(images, out)
        pred = np.argmax(emb @ head_w.data + head_b.data, axis=1)
        history["loss"] = losses
        history["train_accuracy"] = float(np.mean(pred == labels))
    return out


def save_backbone(path, params: BackboneParams, extra: Optional[dict] = None):
    sidecar = {
        "kind": "backbone",
        "config": params.config.to_dict(),
        "order": [f"block{i}.{p}" for i in range(params.config.num_blocks) for p in ("weight", "bias")],
        "seed": params.seed,
        **(extra or {}),
    }
    return write_flat(path, params.arrays(), sidecar)


def load_backbone(path) -> BackboneParams:
    arrays, meta = read_flat(path)
    c = meta["config"]
    config = BackboneConfig(c["num_blocks"], tuple(c["channels"]), tuple(c["input_shape"]))
    blocks = tuple(ConvKernelSet(arrays[2 * i], arrays[2 * i + 1]) for i in range(config.num_blocks))
    return BackboneParams(config, blocks, False, meta.get("seed")).freeze()
