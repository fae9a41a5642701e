"""Run configuration: a JSON document mapped onto nested dataclasses.

Unknown keys are rejected at every level; :func:`write_resolved` records all
defaults so each run can write a self-describing ``resolved_config.json``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, get_args, get_origin, get_type_hints

from .episodes import DomainSpec, default_source_spec, default_target_spec


class ConfigError(ValueError):
    pass


@dataclass
class BackboneSection:
    num_blocks: int = 4
    channels: list = field(default_factory=lambda: [8, 16, 16, 32])
    input_shape: list = field(default_factory=lambda: [1, 32, 32])


@dataclass
class PretrainSection:
    epochs: int = 15
    lr: float = 0.5
    batch_size: int = 32
    seed: int = 0


@dataclass
class DomainSection:
    size: int = 32
    envelope_exponent: float = 1.0
    band: list = field(default_factory=lambda: [0.05, 0.5])
    annuli_per_class: int = 2
    annulus_width: float = 0.08
    signature_gain: float = 4.0
    background: float = 1.0
    phase_jitter: float = 0.3
    noise: float = 0.1
    class_offset: int = 0
    signature_seed: int = 0

    @classmethod
    def from_spec(cls, spec: DomainSpec) -> "DomainSection":
        return cls(**{f.name: getattr(spec, f.name) for f in dataclasses.fields(cls) if f.name != "band"},
                   band=list(spec.band))

    def to_spec(self) -> DomainSpec:
        d = dataclasses.asdict(self)
        d["band"] = tuple(d["band"])
        return DomainSpec(**d)


def _source_default() -> DomainSection:
    return DomainSection.from_spec(default_source_spec())


def _target_default() -> DomainSection:
    return DomainSection.from_spec(default_target_spec())


@dataclass
class DataSection:
    source_classes: int = 8
    source_per_class: int = 40
    target_classes: int = 12
    target_per_class: int = 20
    seed: int = 0


@dataclass
class FadSection:
    r1: float = 0.3
    r2: float = 0.5
    k_low: int = 3
    k_mid: int = 3
    k_high: int = 5
    use_bias: bool = False


@dataclass
class SamplerSection:
    mode: str = "varying_fiveshot"
    way_min: int = 3
    way_max: int = 6
    max_support: int = 10
    query_per_class: int = 10
    seed: int = 7


@dataclass
class StopSection:
    support_acc_threshold: float = 0.99
    patience_after_threshold: int = 0
    max_steps: int = 40


@dataclass
class OptimizerSection:
    lr: float = 3.0
    rho: float = 0.9
    eps: float = 1e-6


@dataclass
class RunConfig:
    backbone: BackboneSection = field(default_factory=BackboneSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    source: DomainSection = field(default_factory=_source_default)
    target: DomainSection = field(default_factory=_target_default)
    data: DataSection = field(default_factory=DataSection)
    fad: FadSection = field(default_factory=FadSection)
    variant: str = "FAD"
    insertion_mask: Optional[list] = None
    sampler: SamplerSection = field(default_factory=SamplerSection)
    stop: StopSection = field(default_factory=StopSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    episodes: int = 20
    seed: int = 0
    out_dir: str = "runs/default"
    checkpoint: Optional[str] = None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    base = cls()
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        value, hint = data[name], hints[name]
        if dataclasses.is_dataclass(hint):
            # nested sections merge over this section's own default
            sub = dataclasses.asdict(getattr(base, name))
            sub.update(_check_keys(hint, value, f"{where}.{name}"))
            value = _build(hint, sub, f"{where}.{name}")
        else:
            value = _coerce(hint, value, f"{where}.{name}")
        kwargs[name] = value
    return dataclasses.replace(base, **kwargs)


def _check_keys(cls, value, where):
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected an object, got {type(value).__name__}")
    unknown = sorted(set(value) - {f.name for f in dataclasses.fields(cls)})
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    return value


def _coerce(hint, value, where):
    if get_origin(hint) is not None and type(None) in get_args(hint):
        if value is None:
            return None
        hint = next(a for a in get_args(hint) if a is not type(None))
    if hint is float and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if hint is int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if hint is bool and isinstance(value, bool):
        return value
    if hint is str and isinstance(value, str):
        return value
    if hint is list and isinstance(value, list):
        return value
    raise ConfigError(f"{where}: expected {getattr(hint, '__name__', hint)}, got {value!r}")


def from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data, "config")


def load(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(data)


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "resolved_config.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return path
