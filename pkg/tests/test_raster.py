import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumepipe.errors import BandCountMismatch, CountMismatch, EmptySelection, NoValidPixels, WavelengthMismatch
from plumepipe.raster import BandSelection, BandStats, HyperCube, band_stats, normalize, select_bands

from conftest import random_cube


def sensor_like_cube(bands=285, start=381.0, step=7.4):
    wl = start + step * np.arange(bands)
    return HyperCube(np.zeros((2, 2, bands), np.float32), wl)


def test_select_bands_matches_wavelength_scan_oracle():
    cube = sensor_like_cube()
    ranges = [(1573.0, 1699.0), (2004.0, 2478.0)]
    rgb = [462.0, 550.0, 640.0]
    keep = set()
    for i, w in enumerate(cube.wavelengths_nm):
        for lo, hi in ranges:
            if lo <= w <= hi:
                keep.add(i)
    for target in rgb:
        best = None
        for i, w in enumerate(cube.wavelengths_nm):
            if best is None or abs(w - target) < abs(cube.wavelengths_nm[best] - target):
                best = i
        keep.add(best)
    out = select_bands(cube, BandSelection(tuple(ranges), tuple(rgb)))
    assert out.bands == len(keep)
    np.testing.assert_array_equal(out.wavelengths_nm, cube.wavelengths_nm[sorted(keep)])


def test_select_bands_all_inside_keeps_order():
    cube = HyperCube(np.arange(8, dtype=np.float32).reshape(2, 2, 2), [1600.0, 1650.0])
    out = select_bands(cube, BandSelection(((1573, 1699),), ()))
    assert out.bands == 2
    np.testing.assert_array_equal(out.data, cube.data)


def test_select_bands_all_outside_raises():
    cube = HyperCube(np.zeros((1, 1, 2), np.float32), [900.0, 1000.0])
    with pytest.raises(EmptySelection):
        select_bands(cube, BandSelection(((1573, 1699),), ()))


def test_select_bands_bounds_inclusive_and_rgb_deduplicated():
    cube = HyperCube(np.zeros((1, 1, 4), np.float32), [1573.0, 1600.0, 1699.0, 1700.0])
    out = select_bands(cube, BandSelection(((1573, 1699),), (1600.0, 1601.0)))
    np.testing.assert_array_equal(out.wavelengths_nm, [1573.0, 1600.0, 1699.0])


def test_select_bands_count_check():
    cube = sensor_like_cube()
    n = select_bands(cube, BandSelection()).bands
    assert select_bands(cube, BandSelection(expected_count=n)).bands == n
    with pytest.raises(CountMismatch) as exc:
        select_bands(cube, BandSelection(expected_count=86))
    assert exc.value.expected == 86 and exc.value.actual == n


def test_band_selection_rejects_bad_intervals():
    with pytest.raises(ValueError):
        BandSelection(((10, 5),))
    with pytest.raises(ValueError):
        BandSelection(((1, 5), (4, 8)))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(400, 2500), min_size=1, max_size=40, unique=True),
       st.lists(st.tuples(st.floats(400, 2500), st.floats(0, 300)), max_size=3))
def test_select_bands_idempotent(wls, raw_ranges):
    wl = np.array(sorted(wls))
    if np.any(np.diff(wl) <= 0):
        return
    ranges = []
    for lo, width in sorted(raw_ranges):
        if ranges and lo <= ranges[-1][1]:
            continue
        ranges.append((lo, lo + width))
    sel = BandSelection(tuple(ranges), (550.0,))
    cube = HyperCube(np.random.default_rng(0).random((2, 3, wl.size)).astype(np.float32), wl)
    once = select_bands(cube, sel)
    twice = select_bands(once, sel)
    np.testing.assert_array_equal(once.wavelengths_nm, twice.wavelengths_nm)
    np.testing.assert_array_equal(once.data, twice.data)


def test_invalid_pixels_hold_fill_value():
    data = np.ones((2, 2, 3), np.float32)
    valid = np.array([[True, False], [True, True]])
    cube = HyperCube(data, [1, 2, 3], valid)
    assert np.isnan(cube.data[0, 1]).all()
    assert data[0, 1, 0] == 1.0  # caller's array untouched


def test_band_stats_two_points():
    cube = HyperCube(np.array([[[1.0], [3.0]]], np.float32), [1000.0])
    s = band_stats([cube])
    assert s.mean[0] == 2.0 and s.std[0] == 1.0 and s.pixel_count == 2


def test_band_stats_constant_band():
    cube = HyperCube(np.full((3, 3, 1), 7.5, np.float32), [1000.0])
    s = band_stats([cube])
    assert s.mean[0] == 7.5 and s.std[0] == 0.0


def test_band_stats_matches_flat_loop_oracle(rng):
    cubes = [random_cube(rng, rows=int(rng.integers(1, 6)), cols=int(rng.integers(1, 6))) for _ in range(100)]
    n = 0
    acc = [0.0] * 4
    for c in cubes:
        for r in range(c.rows):
            for k in range(c.cols):
                if c.valid_mask[r, k]:
                    n += 1
                    for b in range(4):
                        acc[b] += float(c.data[r, k, b])
    mean = [a / n for a in acc]
    var = [0.0] * 4
    for c in cubes:
        for r in range(c.rows):
            for k in range(c.cols):
                if c.valid_mask[r, k]:
                    for b in range(4):
                        var[b] += (float(c.data[r, k, b]) - mean[b]) ** 2
    std = [(v / n) ** 0.5 for v in var]
    s = band_stats(cubes)
    assert s.pixel_count == n
    np.testing.assert_allclose(s.mean, mean, rtol=1e-5)
    np.testing.assert_allclose(s.std, std, rtol=1e-5)


def test_band_stats_permutation_invariant(rng):
    cubes = [random_cube(rng) for _ in range(12)]
    a = band_stats(cubes)
    b = band_stats([cubes[i] for i in rng.permutation(len(cubes))])
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.std, b.std)


def test_band_stats_errors():
    empty = HyperCube(np.zeros((2, 2, 1), np.float32), [1.0], np.zeros((2, 2), bool))
    with pytest.raises(NoValidPixels):
        band_stats([empty])
    with pytest.raises(WavelengthMismatch):
        band_stats([HyperCube(np.zeros((1, 1, 1)), [1.0]), HyperCube(np.zeros((1, 1, 1)), [2.0])])


def test_normalize_scalar_case():
    cube = HyperCube(np.full((1, 1, 1), 5.0, np.float32), [1.0])
    out = normalize(cube, BandStats(np.array([3.0]), np.array([2.0]), 1))
    assert out.data[0, 0, 0] == 1.0


def test_normalize_zero_std_guard():
    cube = HyperCube(np.array([[[4.0]]], np.float32), [1.0])
    out = normalize(cube, BandStats(np.array([3.0]), np.array([0.0]), 1), eps=1e-6)
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data[0, 0, 0], 1e6, rtol=1e-6)


def test_normalize_twice_gives_unit_moments(rng):
    cubes = [random_cube(rng, rows=20, cols=20) for _ in range(3)]
    first = [normalize(c, band_stats(cubes)) for c in cubes]
    second = [normalize(c, band_stats(first)) for c in first]
    s = band_stats(second)
    np.testing.assert_allclose(s.mean, 0.0, atol=1e-5)
    np.testing.assert_allclose(s.std, 1.0, atol=1e-5)


def test_normalize_preserves_mask_and_fill(rng):
    cube = random_cube(rng, invalid_frac=0.4)
    out = normalize(cube, band_stats([cube]))
    np.testing.assert_array_equal(out.valid_mask, cube.valid_mask)
    assert np.isnan(out.data[~cube.valid_mask]).all()


def test_normalize_band_count_mismatch(rng):
    cube = random_cube(rng)
    with pytest.raises(BandCountMismatch):
        normalize(cube, BandStats(np.zeros(2), np.ones(2), 1))


def test_band_stats_json_round_trip(rng):
    s = band_stats([random_cube(rng)])
    r = BandStats.from_dict(s.to_dict())
    np.testing.assert_array_equal(r.mean, s.mean)
    np.testing.assert_array_equal(r.std, s.std)
