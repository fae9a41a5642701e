"""Frequency diversion adapter and the two spatial baselines it is compared to.

* ``FAD``: split the input into low/mid/high radial bands, run a dedicated
  convolution on each reconstructed band and sum the results.
* ``BandwiseSpatial``: the same three convolutions applied to the unsplit
  input (identical parameter budget, no frequency transform).
* ``Linear1x1``: a single 1x1 convolution, the usual residual adapter.

Adapters read the input of their host block and their output is added to the
block output, so they map ``in_channels`` to ``out_channels`` of the host
convolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import autograd as ag
from .io import read_flat, write_flat
from .spectral import BandThresholds
from .tensor_core import ConvKernelSet, ShapeError, add

BRANCHES = ("low", "mid", "high")


class Variant(str, Enum):
    FAD = "FAD"
    LINEAR_1X1 = "Linear1x1"
    BANDWISE_SPATIAL = "BandwiseSpatial"


@dataclass(frozen=True)
class FadConfig:
    thresholds: BandThresholds = field(default_factory=BandThresholds)
    k_low: int = 3
    k_mid: int = 3
    k_high: int = 5
    use_bias: bool = False

    def __post_init__(self):
        for name in ("k_low", "k_mid", "k_high"):
            k = getattr(self, name)
            if k < 1 or k % 2 != 1:
                raise ValueError(f"{name} must be odd and >= 1, got {k}")

    def kernel_size(self, branch: str) -> int:
        return getattr(self, f"k_{branch}")

    def to_dict(self) -> dict:
        return {
            "r1": self.thresholds.r1,
            "r2": self.thresholds.r2,
            "k_low": self.k_low,
            "k_mid": self.k_mid,
            "k_high": self.k_high,
            "use_bias": self.use_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FadConfig":
        return cls(
            thresholds=BandThresholds(d["r1"], d["r2"]),
            k_low=d["k_low"],
            k_mid=d["k_mid"],
            k_high=d["k_high"],
            use_bias=d["use_bias"],
        )


@dataclass(frozen=True)
class AdapterParams:
    variant: Variant
    kernels: dict[str, ConvKernelSet]

    @property
    def in_channels(self) -> int:
        return next(iter(self.kernels.values())).in_channels

    @property
    def out_channels(self) -> int:
        return next(iter(self.kernels.values())).out_channels

    def names(self) -> list[str]:
        """Flat tensor order: all weights by branch, then all biases."""
        names = [f"{b}.weight" for b in self.kernels]
        names += [f"{b}.bias" for b, ks in self.kernels.items() if ks.bias is not None]
        return names

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"{b}.weight": ks.weight for b, ks in self.kernels.items()}
        out.update({f"{b}.bias": ks.bias for b, ks in self.kernels.items() if ks.bias is not None})
        return {n: out[n] for n in self.names()}

    def replace_arrays(self, arrays: dict[str, np.ndarray]) -> "AdapterParams":
        kernels = {
            b: ConvKernelSet(arrays[f"{b}.weight"], arrays.get(f"{b}.bias"))
            for b in self.kernels
        }
        return AdapterParams(self.variant, kernels)


def init_adapter(
    channels: int,
    config: FadConfig = FadConfig(),
    variant: Variant = Variant.FAD,
    seed: int = 0,
    out_channels: Optional[int] = None,
) -> AdapterParams:
    """Zero-initialized adapter, so the adapted layer starts as the frozen one.

    ``seed`` is accepted for interface symmetry with other initializers; zero
    initialization consumes no randomness.
    """
    del seed
    if channels < 1:
        raise ValueError(f"channels must be >= 1, got {channels}")
    variant = Variant(variant)
    c_out = channels if out_channels is None else out_channels
    if variant is Variant.LINEAR_1X1:
        kernels = {"linear": ConvKernelSet.zeros(c_out, channels, 1, config.use_bias)}
    else:
        kernels = {
            b: ConvKernelSet.zeros(c_out, channels, config.kernel_size(b), config.use_bias)
            for b in BRANCHES
        }
    return AdapterParams(variant, kernels)


def param_count(params: AdapterParams) -> int:
    return sum(ks.size for ks in params.kernels.values())


def _check_input(h, params: AdapterParams):
    channels = h.shape[-3] if len(h.shape) >= 3 else None
    if channels != params.in_channels:
        raise ShapeError(
            f"adapter expects {params.in_channels} input channels, got input shape {tuple(h.shape)}"
        )


def adapter_graph(x: ag.Tensor, weights: dict[str, ag.Tensor], variant: Variant, config: FadConfig) -> ag.Tensor:
    """Adapter output as a differentiable graph node.

    ``weights`` maps the names from :meth:`AdapterParams.names` to tensors.
    """
    variant = Variant(variant)
    if variant is Variant.LINEAR_1X1:
        return ag.conv2d(x, weights["linear.weight"], weights.get("linear.bias"))
    if variant is Variant.FAD:
        inputs = ag.band_split(x, config.thresholds)
    else:
        inputs = (x, x, x)
    outs = [
        ag.conv2d(h, weights[f"{b}.weight"], weights.get(f"{b}.bias"))
        for b, h in zip(BRANCHES, inputs)
    ]
    return ag.add_n(outs)


def _run(h: np.ndarray, params: AdapterParams, config: FadConfig) -> np.ndarray:
    _check_input(np.asarray(h), params)
    weights = {n: ag.Tensor(a) for n, a in params.arrays().items()}
    return adapter_graph(ag.Tensor(h), weights, params.variant, config).data


def fad_forward(h: np.ndarray, params: AdapterParams, config: FadConfig = FadConfig()) -> np.ndarray:
    """``Conv_low(h_low) + Conv_mid(h_mid) + Conv_high(h_high)``."""
    if params.variant is not Variant.FAD:
        raise ValueError(f"fad_forward needs a FAD adapter, got {params.variant.value}")
    return _run(h, params, config)


def baseline_forward(h: np.ndarray, params: AdapterParams, config: FadConfig = FadConfig()) -> np.ndarray:
    if params.variant is Variant.FAD:
        raise ValueError("baseline_forward needs a Linear1x1 or BandwiseSpatial adapter")
    return _run(h, params, config)


def adapter_forward(h: np.ndarray, params: AdapterParams, config: FadConfig = FadConfig()) -> np.ndarray:
    """Dispatch on ``params.variant``."""
    return _run(h, params, config)


def residual_apply(block_output: np.ndarray, adapter_output: np.ndarray) -> np.ndarray:
    return add(block_output, adapter_output)


def save_adapter(path, params: AdapterParams, config: FadConfig, extra: Optional[dict] = None):
    arrays = params.arrays()
    sidecar = {
        "kind": "adapter",
        "variant": params.variant.value,
        "config": config.to_dict(),
        "order": list(arrays),
        **(extra or {}),
    }
    return write_flat(path, list(arrays.values()), sidecar)


def load_adapter(path) -> tuple[AdapterParams, FadConfig]:
    arrays, meta = read_flat(path)
    variant = Variant(meta["variant"])
    named = dict(zip(meta["order"], arrays))
    branches = ["linear"] if variant is Variant.LINEAR_1X1 else list(BRANCHES)
    kernels = {b: ConvKernelSet(named[f"{b}.weight"], named.get(f"{b}.bias")) for b in branches}
    return AdapterParams(variant, kernels), FadConfig.from_dict(meta["config"])
