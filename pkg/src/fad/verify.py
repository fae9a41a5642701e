"""Property suite behind ``fad verify``.

Each check returns ``(measured, tolerance)``; it passes when
``measured <= tolerance`` (or ``>`` for the entries marked ``greater``).
Checks run on small seeded problems so the whole suite takes seconds.
"""
from __future__ import annotations

import contextlib
import math
import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import oracles, spectral
from .adapter import BRANCHES, FadConfig, Variant, adapter_forward, init_adapter, param_count
from .backbone import BackboneConfig, backbone_forward, init_backbone
from .episodes import (
    SamplerConfig, band_energy_profile, default_source_spec, default_target_spec,
    make_shift_pair, sample_episode, synth_domain_generate,
)
from .spectral import BandThresholds, band_decompose, band_masks, dft2, idft2, kernel_transfer_function
from .tensor_core import ConvKernelSet, add, conv2d_same
from .train import (
    AdadeltaState, StopRule, adadelta_step, finetune_episode, gradient_check, mean_ci, ncc_logits,
)

SIZES = [(1, 4, 4), (2, 5, 6), (3, 7, 7), (1, 8, 9), (4, 16, 16), (8, 16, 16), (2, 9, 12), (5, 6, 11)]


@dataclass
class Check:
    module: str
    name: str
    fn: object
    greater: bool = False


@dataclass
class Outcome:
    module: str
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float
    error: str = ""

    def as_dict(self) -> dict:
        return self.__dict__.copy()


def _seeded(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


# --------------------------------------------------------------------------- #
# tensor_core


def conv_linearity():
    x, y = _seeded((3, 7, 7), 1), _seeded((3, 7, 7), 2)
    w = _seeded((4, 3, 3, 3), 3)
    lhs = conv2d_same(2.5 * x - 0.7 * y, w)
    rhs = 2.5 * conv2d_same(x, w) - 0.7 * conv2d_same(y, w)
    return float(np.max(np.abs(lhs - rhs))), 1e-12


def conv_delta_identity():
    worst = 0.0
    for k in (1, 3, 5):
        x = _seeded((2, 8, 8), k)
        w = np.zeros((2, 2, k, k))
        for c in range(2):
            w[c, c, k // 2, k // 2] = 1.0
        worst = max(worst, float(np.max(np.abs(conv2d_same(x, w) - x))))
    return worst, 0.0


def conv_direct_sum():
    x, w, b = _seeded((2, 5, 5), 4), _seeded((3, 2, 3, 3), 5), _seeded(3, 6)
    return float(np.max(np.abs(conv2d_same(x, w, b) - oracles.naive_conv2d(x, w, b)))), 1e-12


def add_exact():
    a, b, c = _seeded((3, 4, 4), 7), _seeded((3, 4, 4), 8), _seeded((3, 4, 4), 9)
    comm = np.max(np.abs(add(a, b) - add(b, a)))
    # associativity holds exactly for values that add without rounding
    ai, bi, ci = (np.round(t * 64) for t in (a, b, c))
    assoc = np.max(np.abs(add(add(ai, bi), ci) - add(ai, add(bi, ci))))
    return float(max(comm, assoc)), 0.0


# --------------------------------------------------------------------------- #
# spectral


def round_trip():
    worst = 0.0
    for i in range(50):
        shape = SIZES[i % len(SIZES)]
        h = _seeded(shape, 100 + i) * (1 + i)
        rec, res = idft2(dft2(h))
        scale = max(1.0, float(np.max(np.abs(h))))
        worst = max(worst, float(np.max(np.abs(rec - h))) / scale, res / scale)
    return worst, 1e-10


def parseval():
    worst = 0.0
    for i in range(50):
        shape = SIZES[i % len(SIZES)]
        h = _seeded(shape, 200 + i)
        H, W = shape[-2:]
        lhs = float(np.sum(h * h))
        rhs = float(np.sum(np.abs(dft2(h)) ** 2)) / (H * W)
        worst = max(worst, abs(lhs - rhs) / lhs)
    return worst, 1e-10


def naive_dft_equivalence():
    worst = 0.0
    for shape in ((4, 4), (5, 6), (7, 8), (8, 8), (3, 5)):
        h = _seeded(shape, sum(shape))
        F = dft2(h)
        worst = max(worst, float(np.max(np.abs(F - oracles.center(oracles.naive_dft2(h))))))
        rec, _ = idft2(F)
        naive = oracles.naive_idft2(oracles.uncenter(F)).real
        worst = max(worst, float(np.max(np.abs(rec - naive))))
    return worst, 1e-10


def mask_partition():
    bad = 0
    for H, W in ((2, 2), (4, 4), (8, 8), (9, 9), (7, 12), (16, 16), (5, 3)):
        for t in (BandThresholds(), BandThresholds(0.1, 0.5), BandThresholds(0.3, 0.7), BandThresholds(0.2, 1.4)):
            lo, mid, hi = (m.values for m in band_masks(H, W, t))
            binary = all(np.all((m == 0) | (m == 1)) for m in (lo, mid, hi))
            disjoint = not np.any(lo * mid) and not np.any(lo * hi) and not np.any(mid * hi)
            unity = np.array_equal(lo + mid + hi, np.ones((H, W)))
            bad += not (binary and disjoint and unity)
    return float(bad), 0.0


def mask_mirror_symmetry():
    worst = 0.0
    for H, W in ((4, 4), (5, 5), (8, 9), (9, 8), (7, 12), (16, 16)):
        for m in band_masks(H, W, BandThresholds()):
            worst = max(worst, float(np.max(np.abs(m.values - m.mirror()))))
        h = _seeded((2, H, W), H * W)
        F = dft2(h)
        for m in band_masks(H, W, BandThresholds()):
            _, res = idft2(spectral.apply_mask(F, m))
            worst = max(worst, res)
    return worst, 1e-9


def band_completeness():
    worst = 0.0
    thresholds = (BandThresholds(), BandThresholds(0.1, 0.5), BandThresholds(0.4, 0.7), BandThresholds(0.2, 0.4))
    for i in range(50):
        shape = SIZES[i % len(SIZES)]
        if min(shape[-2:]) < 2:
            continue
        h = _seeded(shape, 300 + i)
        parts = band_decompose(h, thresholds[i % len(thresholds)])
        worst = max(worst, float(np.max(np.abs(sum(parts) - h))))
    return worst, 1e-9


def flat_response():
    worst = 0.0
    rng = np.random.default_rng(11)
    for w in rng.standard_normal(20):
        T = kernel_transfer_function(np.array([[w]]), 16, 16)
        mag, phase = np.abs(T), np.angle(T * np.sign(w))
        worst = max(worst, float(np.ptp(mag)), float(np.ptp(phase)))
    return worst, 1e-12


def random_3x3_spread():
    k = np.random.default_rng(0).standard_normal((3, 3))
    return float(np.ptp(np.abs(kernel_transfer_function(k, 16, 16)))), 1e-3


# --------------------------------------------------------------------------- #
# adapter


def _random_adapter(c_in, c_out, config, variant, seed):
    a = init_adapter(c_in, config, variant, out_channels=c_out)
    rng = np.random.default_rng(seed)
    return a.replace_arrays({n: rng.standard_normal(v.shape) * 0.3 for n, v in a.arrays().items()})


def fad_linearity():
    cfg = FadConfig()
    a = _random_adapter(3, 3, cfg, Variant.FAD, 1)
    x, y = _seeded((3, 8, 8), 2), _seeded((3, 8, 8), 3)
    lhs = adapter_forward(1.5 * x - 2.0 * y, a, cfg)
    rhs = 1.5 * adapter_forward(x, a, cfg) - 2.0 * adapter_forward(y, a, cfg)
    return float(np.max(np.abs(lhs - rhs))), 1e-10


def branch_routing():
    cfg = FadConfig()
    a = _random_adapter(2, 2, cfg, Variant.FAD, 4)
    arrays = a.arrays()
    for b in ("mid", "high"):
        arrays[f"{b}.weight"] = np.zeros_like(arrays[f"{b}.weight"])
    a = a.replace_arrays(arrays)
    h_low = band_decompose(_seeded((2, 8, 8), 5), cfg.thresholds)[0]
    out = adapter_forward(h_low, a, cfg)
    return float(np.max(np.abs(out - conv2d_same(h_low, arrays["low.weight"])))), 1e-9


def budget_parity():
    diffs = 0
    for c in (1, 4, 8):
        for cfg in (FadConfig(), FadConfig(k_low=1, k_mid=1, k_high=1), FadConfig(k_low=5, use_bias=True)):
            fad = param_count(init_adapter(c, cfg, Variant.FAD))
            bw = param_count(init_adapter(c, cfg, Variant.BANDWISE_SPATIAL))
            diffs += fad != bw
    return float(diffs), 0.0


def adapter_shape():
    bad = 0
    for variant in Variant:
        for shape in ((3, 8, 8), (2, 3, 7, 9)):
            a = _random_adapter(shape[-3], shape[-3], FadConfig(), variant, 6)
            bad += adapter_forward(_seeded(shape, 7), a, FadConfig()).shape != shape
    return float(bad), 0.0


# --------------------------------------------------------------------------- #
# backbone and training

_SMALL = BackboneConfig(2, (4, 6), (1, 16, 16))


def _small_setup(seed=0):
    src_spec = default_source_spec(size=16)
    tgt_spec = default_target_spec(size=16)
    _, pool = make_shift_pair(src_spec, tgt_spec, seed, 4, 4, 6, 12)
    params = init_backbone(_SMALL, seed).freeze()
    ep = sample_episode(pool, SamplerConfig(way_min=3, way_max=4, query_per_class=3, seed=seed), 0)
    return params, ep


def embedding_norm():
    params, ep = _small_setup()
    emb = backbone_forward(ep.query_images, params)
    return float(np.max(np.abs(np.linalg.norm(emb, axis=1) - 1.0))), 1e-12


def zero_adapter_noop():
    params, ep = _small_setup()
    base = backbone_forward(ep.support_images, params)
    worst = 0.0
    for variant in Variant:
        adapters = [init_adapter(ci, FadConfig(), variant, out_channels=co) for ci, co, _ in _SMALL.block_io()]
        worst = max(worst, float(np.max(np.abs(backbone_forward(ep.support_images, params, adapters) - base))))
    return worst, 0.0


def backbone_immutability():
    params, ep = _small_setup()
    before = [a.copy() for a in params.arrays()]
    finetune_episode(ep, params, Variant.FAD, FadConfig(k_high=3), stop=StopRule(max_steps=3), lr=5.0)
    return float(sum(not np.array_equal(a, b) for a, b in zip(before, params.arrays()))), 0.0


def gradient_correctness():
    params, ep = _small_setup(1)
    cfg = FadConfig(k_high=3, use_bias=True)
    adapters = [
        _random_adapter(ci, co, cfg, Variant.FAD, 10 + i) for i, (ci, co, _) in enumerate(_SMALL.block_io())
    ]
    errs = gradient_check(ep, params, adapters, cfg, coords_per_leaf=4)
    return max(errs.values()), 1e-4


def adadelta_oracle():
    xs, x = [], {"x": np.array(1.0)}
    state = AdadeltaState()
    for _ in range(10):
        x, state = adadelta_step(x, {"x": 2.0 * x["x"]}, state)
        xs.append(float(x["x"]))
    ref = oracles.adadelta_recurrence(1.0, lambda v: 2.0 * v, 10)
    return float(np.max(np.abs(np.array(xs) - ref))), 1e-12


def adadelta_noop():
    p = {"w": _seeded((3, 3), 1)}
    zero_grad, _ = adadelta_step(p, {"w": np.zeros((3, 3))}, AdadeltaState())
    lr0, _ = adadelta_step(p, {"w": _seeded((3, 3), 2)}, AdadeltaState(lr=0.0))
    return float(max(np.max(np.abs(zero_grad["w"] - p["w"])), np.max(np.abs(lr0["w"] - p["w"])))), 0.0


def ncc_argmax_invariance():
    s, q = _seeded((12, 8), 1), _seeded((9, 8), 2)
    labels = np.arange(12) % 4
    base = np.argmax(ncc_logits(s, labels, q), axis=1)
    bad = sum(
        not np.array_equal(base, np.argmax(ncc_logits(s, labels, q, temperature=t), axis=1))
        for t in (0.1, 1.0, 3.0, 100.0)
    )
    return float(bad), 0.0


def finetune_determinism():
    params, ep = _small_setup(2)
    runs = [
        finetune_episode(ep, params, Variant.FAD, FadConfig(k_high=3), stop=StopRule(max_steps=3), lr=5.0)
        for _ in range(2)
    ]
    same = runs[0].query_accuracy == runs[1].query_accuracy and all(
        np.array_equal(x, y)
        for a, b in zip(runs[0].adapters, runs[1].adapters)
        for x, y in zip(a.arrays().values(), b.arrays().values())
    )
    return float(not same), 0.0


# --------------------------------------------------------------------------- #
# episodes and harness


def episode_validity():
    _, pool = make_shift_pair(default_source_spec(size=16), default_target_spec(size=16), 0, 2, 2, 8, 20)
    bad = 0
    for mode in ("varying_varying", "varying_fiveshot"):
        cfg = SamplerConfig(mode=mode, seed=3)
        for i in range(50):
            ep = sample_episode(pool, cfg, i)
            present = set(ep.support_labels.tolist()) == set(range(ep.way))
            disjoint = not set(ep.support_ids.tolist()) & set(ep.query_ids.tolist())
            labels_ok = set(ep.query_labels.tolist()) <= set(range(ep.way))
            bad += not (present and disjoint and labels_ok)
    return float(bad), 0.0


def generator_determinism():
    spec = default_target_spec(size=16)
    a = synth_domain_generate(spec, 3, 4, 9)
    b = synth_domain_generate(spec, 3, 4, 9)
    return float(not (np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels))), 0.0


def band_energy_separation():
    src, tgt = make_shift_pair(default_source_spec(), default_target_spec(), 0, 8, 10, 12, 10)
    ratio = band_energy_profile(tgt.images)[2] / band_energy_profile(src.images)[2]
    return float(ratio), 2.0


def _tiny_run_config():
    from .config import from_dict
    return from_dict({
        "backbone": {"num_blocks": 2, "channels": [4, 6], "input_shape": [1, 16, 16]},
        "source": {"size": 16}, "target": {"size": 16},
        "data": {"source_classes": 2, "source_per_class": 2, "target_classes": 6, "target_per_class": 12},
        "fad": {"k_high": 3},
        "sampler": {"way_max": 4, "query_per_class": 3},
        "stop": {"max_steps": 2},
        "episodes": 3,
    })


def _tiny_rows(cells_axis):
    from . import harness
    cfg = _tiny_run_config()
    _, pool = harness.domains(cfg)
    backbone = init_backbone(harness.backbone_config(cfg), 0).freeze()
    return harness.run_cells(cfg, harness.ablation_cells(cells_axis, cfg), pool, backbone)


def ablation_seed_sharing():
    rows = _tiny_rows("components")
    keys = [[(e["episode"], e["seed"], e["way"]) for e in r["episodes"]] for r in rows]
    return float(sum(k != keys[0] for k in keys)), 0.0


def csv_byte_stability():
    from . import harness
    first = harness.episodes_csv(_tiny_rows("blocks")) + harness.summary_csv(_tiny_rows("blocks"))
    second = harness.episodes_csv(_tiny_rows("blocks")) + harness.summary_csv(_tiny_rows("blocks"))
    return float(first != second), 0.0


def ci_formula():
    vals = [0.5, 0.75, 1.0, 0.25]
    _, half = mean_ci(vals)
    ref = 1.96 * math.sqrt(sum((v - 0.625) ** 2 for v in vals) / 4) / 2.0
    return abs(half - ref), 1e-15


CHECKS = [
    Check("tensor_core", "conv_linearity", conv_linearity),
    Check("tensor_core", "conv_delta_identity", conv_delta_identity),
    Check("tensor_core", "conv_direct_sum_oracle", conv_direct_sum),
    Check("tensor_core", "add_commutative_associative", add_exact),
    Check("spectral", "round_trip", round_trip),
    Check("spectral", "parseval", parseval),
    Check("spectral", "naive_dft_equivalence", naive_dft_equivalence),
    Check("spectral", "mask_partition", mask_partition),
    Check("spectral", "band_completeness", band_completeness),
    Check("spectral", "mask_mirror_symmetry", mask_mirror_symmetry),
    Check("spectral", "flat_response", flat_response),
    Check("spectral", "random_3x3_spread", random_3x3_spread, greater=True),
    Check("fad_adapter", "fad_linearity", fad_linearity),
    Check("fad_adapter", "branch_routing", branch_routing),
    Check("fad_adapter", "budget_parity", budget_parity),
    Check("fad_adapter", "adapter_shape", adapter_shape),
    Check("backbone", "embedding_norm", embedding_norm),
    Check("backbone", "zero_adapter_noop", zero_adapter_noop),
    Check("backbone", "freezing", backbone_immutability),
    Check("adapt_train", "backbone_immutability", backbone_immutability),
    Check("adapt_train", "gradient_correctness", gradient_correctness),
    Check("adapt_train", "adadelta_oracle", adadelta_oracle),
    Check("adapt_train", "adadelta_lr0_identity", adadelta_noop),
    Check("adapt_train", "ncc_argmax_temperature_invariance", ncc_argmax_invariance),
    Check("adapt_train", "determinism", finetune_determinism),
    Check("episodes", "episode_validity", episode_validity),
    Check("episodes", "generator_determinism", generator_determinism),
    Check("episodes", "band_energy_separation", band_energy_separation, greater=True),
    Check("cli_harness", "ablation_seed_sharing", ablation_seed_sharing),
    Check("cli_harness", "csv_byte_stability", csv_byte_stability),
    Check("cli_harness", "ci_formula", ci_formula),
]


@contextlib.contextmanager
def mutated(mutations):
    """Temporarily inject known faults (test-only); ``idft_sign`` negates
    the inverse-transform normalization."""
    saved = spectral._IDFT_NORM_SIGN
    try:
        if "idft_sign" in mutations:
            spectral._IDFT_NORM_SIGN = -1.0
        yield
    finally:
        spectral._IDFT_NORM_SIGN = saved


def run(mutations=(), only=None) -> list[Outcome]:
    outcomes = []
    with mutated(set(mutations)):
        for check in CHECKS:
            if only and check.name not in only:
                continue
            t0 = time.perf_counter()
            try:
                measured, tol = check.fn()
                ok = measured > tol if check.greater else measured <= tol
                outcomes.append(Outcome(check.module, check.name, float(measured), float(tol), bool(ok),
                                        time.perf_counter() - t0))
            except Exception as exc:  # a crashing check is a failing check
                outcomes.append(Outcome(check.module, check.name, math.nan, math.nan, False,
                                        time.perf_counter() - t0, f"{type(exc).__name__}: {exc}"))
    return outcomes
