import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fad import oracles, spectral
from fad.spectral import (
    BandMask, BandThresholds, SymmetryError, apply_mask, band_decompose, band_masks, dft2, idft2,
    kernel_transfer_function, radial_mask,
)

shapes = st.tuples(st.integers(1, 3), st.integers(2, 16), st.integers(2, 16))
thresholds = st.tuples(st.floats(0.05, 0.9), st.floats(0.05, 0.5)).map(
    lambda t: BandThresholds(t[0], min(t[0] + t[1], math.sqrt(2))))


def test_constant_input_is_dc_only():
    F = dft2(np.full((1, 4, 4), 1.5))
    expected = np.zeros((1, 4, 4), complex)
    expected[0, 2, 2] = 1.5 * 16
    np.testing.assert_allclose(F, expected, atol=1e-12)


def test_impulse_has_flat_spectrum():
    h = np.zeros((1, 4, 4))
    h[0, 0, 0] = 1.0
    np.testing.assert_allclose(np.abs(dft2(h)), 1.0, atol=1e-15)


def test_dft_matches_direct_sum():
    h = np.random.default_rng(7).standard_normal((2, 5, 6))
    F = dft2(h)
    for c in range(2):
        np.testing.assert_allclose(F[c], oracles.center(oracles.naive_dft2(h[c])), atol=1e-10)
    # centered DC of channel 0, frozen from the direct sum
    assert F[0, 2, 3].real == pytest.approx(-12.422090782481233, abs=1e-10)


def test_zero_spectrum():
    rec, res = idft2(np.zeros((2, 4, 5), complex))
    assert np.array_equal(rec, np.zeros((2, 4, 5))) and res == 0.0


def test_idft_matches_direct_sum_on_symmetric_spectrum(rng):
    for shape in [(4, 4), (5, 6), (7, 7), (8, 8)]:
        F = dft2(rng.standard_normal(shape)) * 0.5  # spectra of real signals are conjugate-symmetric
        rec, res = idft2(F)
        naive = oracles.naive_idft2(oracles.uncenter(F))
        np.testing.assert_allclose(rec, naive.real, atol=1e-10)
        assert res <= 1e-10 and np.max(np.abs(naive.imag)) <= 1e-10


def test_imag_residual_reports_asymmetry():
    F = np.zeros((4, 4), complex)
    F[0, 1] = 1.0  # no mirror partner
    _, res = idft2(F)
    assert res > 1e-3


@settings(max_examples=60, deadline=None)
@given(shapes, st.floats(0.01, 100.0), st.integers(0, 2**31))
def test_round_trip_and_parseval(shape, amp, seed):
    h = np.random.default_rng(seed).standard_normal(shape) * amp
    rec, res = idft2(dft2(h))
    bound = 1e-10 * max(1.0, np.max(np.abs(h)))
    assert np.max(np.abs(rec - h)) <= bound and res <= bound
    H, W = shape[-2:]
    energy = np.sum(h * h)
    assert abs(energy - np.sum(np.abs(dft2(h)) ** 2) / (H * W)) <= 1e-10 * energy


def test_mask_conventions():
    low = radial_mask(8, 8, 0.0, 0.3, "low")
    assert low.values[4, 4] == 1.0
    high = radial_mask(8, 8, 0.5, math.inf, "high")
    assert high.values[0, 0] == 1.0
    assert spectral.normalized_distance(8, 8)[0, 0] == pytest.approx(math.sqrt(2))


@pytest.mark.parametrize("H,W,counts", [(8, 8, (5, 8, 51)), (9, 9, (5, 8, 68)), (7, 12, (3, 14, 67))])
def test_masks_match_pointwise_oracle(H, W, counts):
    masks = band_masks(H, W, BandThresholds(0.3, 0.5))
    for kind, m in zip(("low", "mid", "high"), masks):
        ref = np.array([[oracles.pointwise_band(H, W, u, v, 0.3, 0.5) == kind for v in range(W)]
                        for u in range(H)], dtype=float)
        assert np.array_equal(m.values, ref)
    assert tuple(m.popcount for m in masks) == counts


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 20), st.integers(2, 20), thresholds)
def test_partition_and_mirror_symmetry(H, W, t):
    masks = band_masks(H, W, t)
    vals = [m.values for m in masks]
    for v in vals:
        assert set(np.unique(v)) <= {0.0, 1.0}
    assert not np.any(vals[0] * vals[1]) and not np.any(vals[0] * vals[2]) and not np.any(vals[1] * vals[2])
    assert np.array_equal(sum(vals), np.ones((H, W)))
    for m in masks:
        assert np.array_equal(m.values, m.mirror())


def test_mask_values_read_only():
    m = band_masks(8, 8, BandThresholds())[0]
    with pytest.raises(ValueError):
        m.values[0, 0] = 1.0
    assert isinstance(m, BandMask) and m.band_kind == "low"


def test_degenerate_grid_rejected():
    with pytest.raises(ValueError):
        radial_mask(1, 8, 0.0, 0.3, "low")
    with pytest.raises(ValueError):
        band_masks(8, 1, BandThresholds())


@pytest.mark.parametrize("r1,r2", [(0.0, 0.5), (0.5, 0.5), (0.6, 0.4), (0.3, 1.5)])
def test_invalid_thresholds(r1, r2):
    with pytest.raises(ValueError):
        BandThresholds(r1, r2)


def test_apply_mask(rng):
    F = dft2(rng.standard_normal((2, 6, 6)))
    ones = BandMask(6, 6, 0.0, math.inf, "low", np.ones((6, 6)))
    assert np.array_equal(apply_mask(F, ones), F)
    zeros = BandMask(6, 6, 0.0, math.inf, "low", np.zeros((6, 6)))
    assert not np.any(apply_mask(F, zeros))
    low = band_masks(6, 6, BandThresholds())[0]
    ref = np.empty_like(F)
    for c in range(2):
        for u in range(6):
            for v in range(6):
                ref[c, u, v] = F[c, u, v] * low.values[u, v]
    assert np.array_equal(apply_mask(F, low), ref)
    with pytest.raises(Exception):
        apply_mask(F, band_masks(5, 6, BandThresholds())[0])


def test_band_decompose_constant():
    lo, mid, hi = band_decompose(np.full((2, 6, 6), 3.0))
    np.testing.assert_allclose(lo, 3.0, atol=1e-12)
    assert np.max(np.abs(mid)) <= 1e-12 and np.max(np.abs(hi)) <= 1e-12


def test_band_decompose_matches_naive_pipeline():
    h = np.random.default_rng(8).standard_normal((1, 8, 8))
    parts = band_decompose(h, BandThresholds(0.3, 0.5))
    ref = oracles.naive_band_decompose(h[0], 0.3, 0.5)
    for p, kind in zip(parts, ("low", "mid", "high")):
        np.testing.assert_allclose(p[0], ref[kind], atol=1e-9)
    # band energies frozen from the naive pipeline
    energies = [float(np.sum(p * p)) for p in parts]
    assert energies == pytest.approx([1.5764609135077337, 8.707598865531164, 70.62564554211247], abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(shapes, thresholds, st.integers(0, 2**31))
def test_band_completeness(shape, t, seed):
    h = np.random.default_rng(seed).standard_normal(shape)
    assert np.max(np.abs(sum(band_decompose(h, t)) - h)) <= 1e-9


def test_symmetry_guard(monkeypatch):
    monkeypatch.setattr(spectral, "_mirror", lambda v: v)
    monkeypatch.setattr(spectral, "band_masks", lambda H, W, t: (BandMask(H, W, 0, 1, "low", _lopsided(H, W)),) * 3)
    with pytest.raises(SymmetryError):
        band_decompose(np.random.default_rng(0).standard_normal((1, 6, 6)))


def _lopsided(H, W):
    m = np.zeros((H, W))
    m[0, 1] = 1.0
    return m


@pytest.mark.parametrize("w", [1.0, -2.5, 0.3])
def test_1x1_transfer_is_flat(w):
    T = kernel_transfer_function(np.array([[w]]), 16, 16)
    np.testing.assert_allclose(T, w, atol=1e-12)
    assert np.ptp(np.abs(T)) <= 1e-12


def test_centered_delta_transfer():
    k = np.zeros((3, 3))
    k[1, 1] = 1.0
    T = kernel_transfer_function(k, 8, 8)
    np.testing.assert_allclose(np.abs(T), 1.0, atol=1e-15)
    np.testing.assert_allclose(np.angle(T), 0.0, atol=1e-15)


def test_random_3x3_transfer_matches_naive_dft():
    k = np.random.default_rng(0).standard_normal((3, 3))
    T = kernel_transfer_function(k, 16, 16)
    assert np.ptp(np.abs(T)) > 1e-3
    # correlation by k equals convolution by its flip, whose impulse response sits at offsets -a, -b
    grid = np.zeros((16, 16))
    for a in range(-1, 2):
        for b in range(-1, 2):
            grid[(-a) % 16, (-b) % 16] = k[a + 1, b + 1]
    np.testing.assert_allclose(T, oracles.center(oracles.naive_dft2(grid)), atol=1e-10)


def test_transfer_function_is_conv_eigenvalue(rng):
    # DFT of a circular correlation equals transfer function times DFT of the input
    k = rng.standard_normal((3, 3))
    x = rng.standard_normal((8, 8))
    circ = np.zeros_like(x)
    for a in range(3):
        for b in range(3):
            circ += k[a, b] * np.roll(x, (1 - a, 1 - b), axis=(0, 1))
    np.testing.assert_allclose(dft2(circ), kernel_transfer_function(k, 8, 8) * dft2(x), atol=1e-10)


def test_transfer_function_errors():
    with pytest.raises(ValueError):
        kernel_transfer_function(np.zeros((2, 2)), 8, 8)
    with pytest.raises(ValueError):
        kernel_transfer_function(np.zeros((5, 5)), 4, 4)
