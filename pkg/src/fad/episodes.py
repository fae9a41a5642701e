"""Synthetic spectral-shift domains, episodic sampling and IDX ingestion.

Synthetic images are built directly in the centered frequency domain: a
power-law envelope times a per-class set of active annuli, with per-class base
phases perturbed per image. Source and target domains place their annuli in
different radial ranges, realizing a controlled spectral domain shift.

All randomness comes from numpy ``Generator`` objects keyed by explicit seed
tuples, so every dataset and episode is reproducible from its seeds alone.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .spectral import band_masks, dft2, normalized_distance, BandThresholds

SQRT2 = math.sqrt(2.0)

# stream tags keep the per-purpose generators independent
_SIGNATURE, _CLASS_PHASE, _IMAGE = 11, 23, 37


@dataclass
class LabeledDataset:
    images: np.ndarray  # N x C x H x W
    labels: np.ndarray  # N, global class ids
    ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(self.labels.size)
        if self.images.shape[0] != self.labels.size:
            raise ValueError(f"{self.images.shape[0]} images but {self.labels.size} labels")

    def __len__(self):
        return self.labels.size

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


# --------------------------------------------------------------------------- #
# synthetic domains


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for a family of spectrally defined image classes.

    ``band`` bounds the radial range where class annuli are placed;
    ``signatures`` overrides the seeded draw with explicit
    ``((r_in, r_out, magnitude), ...)`` tuples, one per class.
    """

    size: int = 32
    envelope_exponent: float = 1.0
    band: tuple[float, float] = (0.05, 0.5)
    annuli_per_class: int = 2
    annulus_width: float = 0.08
    signature_gain: float = 4.0
    background: float = 1.0
    phase_jitter: float = 0.3
    noise: float = 0.1
    class_offset: int = 0
    signature_seed: int = 0
    signatures: Optional[tuple] = None

    def __post_init__(self):
        if self.envelope_exponent < 0:
            raise ValueError("envelope_exponent must be >= 0")
        lo, hi = self.band
        if not (0.0 <= lo < hi <= SQRT2):
            raise ValueError(f"band {self.band} must lie within [0, sqrt(2)]")
        if self.signatures is not None:
            for sig in self.signatures:
                for r_in, r_out, _ in sig:
                    if not (0.0 <= r_in < r_out <= SQRT2):
                        raise ValueError(f"annulus ({r_in}, {r_out}] lies outside [0, sqrt(2)]")

    def class_signatures(self, n_classes: int) -> list[tuple[tuple[float, float, float], ...]]:
        if self.signatures is not None:
            if n_classes > len(self.signatures):
                raise ValueError(f"spec defines {len(self.signatures)} classes, {n_classes} requested")
            return [tuple(s) for s in self.signatures[:n_classes]]
        lo, hi = self.band
        w = self.annulus_width
        if hi - lo < w:
            raise ValueError(f"band {self.band} is narrower than annulus_width={w}")
        out = []
        for c in range(n_classes):
            rng = np.random.default_rng([self.signature_seed, _SIGNATURE, c])
            starts = rng.uniform(lo, hi - w, self.annuli_per_class)
            mags = rng.uniform(0.5, 1.0, self.annuli_per_class) * self.signature_gain
            out.append(tuple((float(s), float(s + w), float(m)) for s, m in zip(starts, mags)))
        return out


def _class_magnitude(spec: DomainSpec, signature, d: np.ndarray) -> np.ndarray:
    envelope = 1.0 / np.maximum(d, 1.0 / spec.size) ** spec.envelope_exponent
    amp = np.full(d.shape, spec.background)
    for r_in, r_out, mag in signature:
        amp = amp + mag * ((d > r_in) & (d <= r_out))
    out = envelope * amp
    out[d == 0] = 0.0
    return out


def synth_domain_generate(spec: DomainSpec, classes: int, per_class: int, seed: int) -> LabeledDataset:
    """``classes * per_class`` single-channel images of side ``spec.size``.

    Labels are ``spec.class_offset + c``. Each image is the real part of the
    inverse DFT of ``magnitude * exp(i * (class phase + jitter))`` plus white
    noise, standardized to zero mean and unit variance.
    """
    if classes < 2 and spec.signatures is None:
        raise ValueError("need at least 2 classes")
    if classes < 1 or per_class < 1:
        raise ValueError("classes and per_class must be >= 1")
    n = spec.size
    d = normalized_distance(n, n)
    images, labels = [], []
    for c, sig in enumerate(spec.class_signatures(classes)):
        mag = _class_magnitude(spec, sig, d)
        base_phase = np.random.default_rng([seed, _CLASS_PHASE, c]).uniform(-math.pi, math.pi, (n, n))
        for i in range(per_class):
            rng = np.random.default_rng([seed, _IMAGE, c, i])
            phase = base_phase + spec.phase_jitter * rng.uniform(-math.pi, math.pi, (n, n))
            spectrum = np.fft.ifftshift(mag * np.exp(1j * phase))
            img = np.fft.ifft2(spectrum).real
            std = img.std()
            img = img / std if std > 0 else img
            if spec.noise > 0:
                img = img + spec.noise * rng.standard_normal((n, n))
            img = img - img.mean()
            std = img.std()
            images.append(img / std if std > 0 else img)
            labels.append(spec.class_offset + c)
    return LabeledDataset(np.stack(images)[:, None], np.array(labels))


def default_source_spec(**overrides) -> DomainSpec:
    return replace(DomainSpec(band=(0.05, 0.45), class_offset=0, signature_seed=101), **overrides)


def default_target_spec(**overrides) -> DomainSpec:
    return replace(DomainSpec(band=(0.5, 1.0), class_offset=1000, signature_seed=202), **overrides)


def make_shift_pair(source_spec: DomainSpec, target_spec: DomainSpec, seed: int,
                    source_classes: int = 8, source_per_class: int = 40,
                    target_classes: int = 12, target_per_class: int = 20):
    """Pretraining set and meta-test pool from two domain recipes."""
    src_ids = set(range(source_spec.class_offset, source_spec.class_offset + source_classes))
    tgt_ids = set(range(target_spec.class_offset, target_spec.class_offset + target_classes))
    if src_ids & tgt_ids:
        raise ValueError(f"source and target class ids overlap: {sorted(src_ids & tgt_ids)[:5]}...")
    source = synth_domain_generate(source_spec, source_classes, source_per_class, seed)
    target = synth_domain_generate(target_spec, target_classes, target_per_class, seed + 1)
    return source, target


def band_energy_profile(images: np.ndarray, thresholds: BandThresholds = BandThresholds()) -> np.ndarray:
    """Mean fraction of non-DC spectral energy in the (low, mid, high) bands."""
    images = np.asarray(images, dtype=np.float64)
    F = dft2(images.reshape(-1, *images.shape[-2:]))
    power = np.abs(F) ** 2
    h, w = images.shape[-2:]
    power[:, h // 2, w // 2] = 0.0
    total = power.sum(axis=(1, 2))
    fracs = [(power * m.values).sum(axis=(1, 2)) / total for m in band_masks(h, w, thresholds)]
    return np.array([f.mean() for f in fracs])


def annulus_energy_fraction(image: np.ndarray, r_in: float, r_out: float) -> float:
    """Share of non-DC energy of one ``H x W`` image inside ``r_in < d <= r_out``."""
    image = np.asarray(image, dtype=np.float64)
    power = np.abs(dft2(image)) ** 2
    h, w = image.shape
    power[h // 2, w // 2] = 0.0
    d = normalized_distance(h, w)
    return float(power[(d > r_in) & (d <= r_out)].sum() / power.sum())


# --------------------------------------------------------------------------- #
# episodes

MODES = ("varying_varying", "varying_fiveshot")


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "varying_fiveshot"
    way_min: int = 3
    way_max: int = 6
    max_support: int = 10
    query_per_class: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.way_min < 2 or self.way_max < self.way_min:
            raise ValueError(f"bad way range [{self.way_min}, {self.way_max}]")
        if self.max_support < 1 or self.query_per_class < 1:
            raise ValueError("shot caps must be >= 1")


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    way: int
    shots: list = field(default_factory=list)
    support_ids: Optional[np.ndarray] = None
    query_ids: Optional[np.ndarray] = None
    classes: Optional[np.ndarray] = None

    @property
    def support(self):
        return list(zip(self.support_images, self.support_labels))

    @property
    def query(self):
        return list(zip(self.query_images, self.query_labels))


def sample_episode(pool: LabeledDataset, cfg: SamplerConfig, episode_index: int) -> Episode:
    """Draw an N-way episode; deterministic in ``(cfg.seed, episode_index)``.

    Labels are remapped to ``0..N-1`` in draw order.
    """
    rng = np.random.default_rng([cfg.seed, episode_index])
    classes = pool.classes
    if classes.size < cfg.way_max:
        raise ValueError(f"pool has {classes.size} classes, sampler may need {cfg.way_max}")
    way = int(rng.integers(cfg.way_min, cfg.way_max + 1))
    chosen = rng.choice(classes, size=way, replace=False)
    s_idx, s_lab, q_idx, q_lab, shots = [], [], [], [], []
    for new_label, c in enumerate(chosen):
        members = np.flatnonzero(pool.labels == c)
        shot = 5 if cfg.mode == "varying_fiveshot" else int(rng.integers(1, cfg.max_support + 1))
        need = shot + cfg.query_per_class
        if members.size < need:
            raise ValueError(f"class {c} has {members.size} examples, episode needs {need}")
        perm = rng.permutation(members)
        s_idx += list(perm[:shot])
        q_idx += list(perm[shot:need])
        s_lab += [new_label] * shot
        q_lab += [new_label] * cfg.query_per_class
        shots.append(shot)
    s_idx, q_idx = np.array(s_idx), np.array(q_idx)
    return Episode(
        support_images=pool.images[s_idx],
        support_labels=np.array(s_lab),
        query_images=pool.images[q_idx],
        query_labels=np.array(q_lab),
        way=way,
        shots=shots,
        support_ids=pool.ids[s_idx],
        query_ids=pool.ids[q_idx],
        classes=chosen,
    )


# --------------------------------------------------------------------------- #
# IDX files

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


def _read_header(blob: bytes, path, magic: int, n_dims: int) -> tuple[int, ...]:
    need = 4 * (1 + n_dims)
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes is shorter than the {need}-byte header")
    found = struct.unpack(">I", blob[:4])[0]
    if found != magic:
        raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    return struct.unpack(f">{n_dims}I", blob[4:need])


def read_idx_images(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    count, rows, cols = _read_header(blob, path, IMAGE_MAGIC, 3)
    body = blob[16:]
    if len(body) < count * rows * cols:
        raise TruncatedFileError(f"{path}: expected {count * rows * cols} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count * rows * cols).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    (count,) = _read_header(blob, path, LABEL_MAGIC, 1)
    body = blob[8:]
    if len(body) < count:
        raise TruncatedFileError(f"{path}: expected {count} label bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8, count=count)


def load_idx(images_path, labels_path) -> LabeledDataset:
    """Big-endian IDX image/label pair; pixels scaled to ``[0, 1]``."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    return LabeledDataset(images[:, None].astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(dataset: LabeledDataset, images_path, labels_path) -> None:
    """Export single-channel images (min-max quantized to bytes) and labels."""
    imgs = np.asarray(dataset.images, dtype=np.float64)
    if imgs.ndim == 4:
        if imgs.shape[1] != 1:
            raise ValueError("IDX export supports single-channel images only")
        imgs = imgs[:, 0]
    lo, hi = imgs.min(), imgs.max()
    q = np.zeros(imgs.shape, dtype=np.uint8) if hi == lo else np.rint((imgs - lo) / (hi - lo) * 255).astype(np.uint8)
    labels = np.asarray(dataset.labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("IDX labels must fit in an unsigned byte")
    n, rows, cols = q.shape
    Path(images_path).parent.mkdir(parents=True, exist_ok=True)
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + q.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, n) + labels.astype(np.uint8).tobytes())
