import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from plumepipe.errors import NoSeedPixels, OutOfRangeEntry, ShapeMismatch
from plumepipe.geometry import (
    CombineRule,
    Glt,
    SparseRaster,
    back_sample,
    nearest_seed,
    nn_fill,
    orthorectify,
    source_footprint,
    unorthorectify,
)
from plumepipe.raster import HyperCube
from plumepipe.synth import Distortion, SceneSpec, gen_glt, random_bijective_glt

from conftest import brute_nearest


def random_glt(rng, orows, ocols, srows, scols, unmapped=0.2):
    sample = rng.integers(0, scols, (orows, ocols))
    line = rng.integers(0, srows, (orows, ocols))
    off = rng.random((orows, ocols)) < unmapped
    sample[off] = -1
    line[off] = -1
    return Glt(sample, line, srows, scols)


def test_identity_orthorectify_is_exact(rng):
    img = rng.random((7, 9)).astype(np.float32)
    np.testing.assert_array_equal(orthorectify(img, Glt.identity(7, 9)), img)
    cube = HyperCube(rng.random((7, 9, 3)), [1, 2, 3])
    out = orthorectify(cube, Glt.identity(7, 9))
    np.testing.assert_array_equal(out.data, cube.data)
    assert out.valid_mask.all()


def test_all_sentinel_glt_gives_invalid_output(rng):
    glt = Glt(-np.ones((4, 4), int), -np.ones((4, 4), int), 3, 3)
    cube = HyperCube(rng.random((3, 3, 2)), [1, 2])
    out = orthorectify(cube, glt)
    assert not out.valid_mask.any()
    assert np.isnan(orthorectify(rng.random((3, 3)), glt)).all()


def test_orthorectify_matches_per_pixel_lookup(rng):
    for _ in range(20):
        glt = random_glt(rng, 8, 8, 8, 8)
        src = rng.random((8, 8))
        expected = np.full((8, 8), np.nan)
        for y in range(8):
            for x in range(8):
                s, l = glt.sample[y, x], glt.line[y, x]
                if s >= 0:
                    expected[y, x] = src[l, s]
        np.testing.assert_array_equal(orthorectify(src, glt), expected)


def test_orthorectify_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        orthorectify(rng.random((3, 4)), Glt.identity(4, 3))


def test_glt_rejects_out_of_range_entries():
    with pytest.raises(OutOfRangeEntry):
        Glt(np.array([[3]]), np.array([[0]]), 2, 2)
    with pytest.raises(OutOfRangeEntry):
        Glt(np.array([[0]]), np.array([[-1]]), 2, 2)


def test_bijective_back_sample_round_trip(rng):
    glt = random_bijective_glt(6, 7, rng)
    ortho = rng.random((6, 7))
    sparse = back_sample(ortho, glt, CombineRule.FIRST)
    assert sparse.set_mask.all()
    np.testing.assert_array_equal(orthorectify(sparse.values, glt), ortho)


def test_union_ors_colliding_mask_pixels():
    sample = np.full((2, 2), -1)
    line = np.full((2, 2), -1)
    sample[0, 0] = sample[1, 1] = 3
    line[0, 0] = line[1, 1] = 3
    mask = np.array([[False, False], [False, True]])
    out = back_sample(mask, Glt(sample, line, 5, 5), CombineRule.UNION)
    assert out.values[3, 3] and out.set_mask[3, 3]
    assert out.set_mask.sum() == 1


def test_max_rule_matches_collision_scan(rng):
    for _ in range(10):
        glt = random_glt(rng, 16, 16, 9, 9, unmapped=0.1)
        ortho = rng.random((16, 16)) * 1000
        expected = np.full((9, 9), -np.inf)
        for y in range(16):
            for x in range(16):
                s, l = glt.sample[y, x], glt.line[y, x]
                if s >= 0:
                    expected[l, s] = max(expected[l, s], ortho[y, x])
        got = back_sample(ortho, glt, CombineRule.MAX)
        written = np.isfinite(expected)
        np.testing.assert_array_equal(got.set_mask, written)
        np.testing.assert_array_equal(got.values[written], expected[written])
        assert np.isnan(got.values[~written]).all()


def test_first_rule_keeps_row_major_first_writer(rng):
    glt = random_glt(rng, 12, 12, 5, 5, unmapped=0.0)
    ortho = rng.random((12, 12))
    expected = {}
    for y in range(12):
        for x in range(12):
            expected.setdefault((glt.line[y, x], glt.sample[y, x]), ortho[y, x])
    got = back_sample(ortho, glt, "first")
    for (l, s), v in expected.items():
        assert got.values[l, s] == v


def test_back_sample_multiband_cube_skips_invalid_ortho(rng):
    valid = np.ones((3, 3), bool)
    valid[0, 0] = False
    cube = HyperCube(rng.random((3, 3, 2)), [1, 2], valid)
    out = back_sample(cube, Glt.identity(3, 3))
    assert not out.set_mask[0, 0] and out.set_mask.sum() == 8
    np.testing.assert_array_equal(out.values[1, 1], cube.data[1, 1])


def test_union_is_conservative(rng):
    for _ in range(20):
        glt = random_glt(rng, 20, 20, 10, 10)
        mask = rng.random((20, 20)) < 0.3
        out = back_sample(mask, glt, CombineRule.UNION)
        assert out.values.sum() <= mask.sum()


def test_nn_fill_single_seed():
    values = np.full((3, 3), np.nan)
    values[1, 1] = 4.0
    set_mask = ~np.isnan(values)
    out = nn_fill(SparseRaster(values, set_mask))
    assert (out.values == 4.0).all() and out.set_mask.all()


def test_nn_fill_tie_goes_to_smaller_column():
    values = np.full((1, 3), np.nan)
    values[0, 0], values[0, 2] = 1.0, 2.0
    out = nn_fill(SparseRaster(values, ~np.isnan(values)))
    assert out.values[0, 1] == 1.0


def test_nn_fill_tie_goes_to_smaller_row():
    values = np.full((3, 3), np.nan)
    values[0, 2], values[2, 0] = 1.0, 2.0  # (1,1) is equidistant from both
    out = nn_fill(SparseRaster(values, ~np.isnan(values)))
    assert out.values[1, 1] == 1.0


def test_nn_fill_respects_region_and_is_idempotent(rng):
    values = np.full((10, 10), np.nan)
    set_mask = rng.random((10, 10)) < 0.1
    set_mask[5, 5] = True
    values[set_mask] = rng.random(set_mask.sum())
    region = np.zeros((10, 10), bool)
    region[2:8, 1:9] = True
    once = nn_fill(SparseRaster(values, set_mask), region)
    outside = ~region & ~set_mask
    assert np.isnan(once.values[outside]).all()
    np.testing.assert_array_equal(once.values[set_mask], values[set_mask])
    twice = nn_fill(once, region)
    np.testing.assert_array_equal(twice.values, once.values)
    np.testing.assert_array_equal(twice.set_mask, once.set_mask)


def test_nn_fill_requires_seed_inside_region():
    values = np.zeros((4, 4))
    set_mask = np.zeros((4, 4), bool)
    set_mask[0, 0] = True
    region = np.zeros((4, 4), bool)
    region[2:, 2:] = True
    with pytest.raises(NoSeedPixels):
        nn_fill(SparseRaster(values, set_mask), region)


@settings(max_examples=200, deadline=None)
@given(hnp.arrays(bool, st.tuples(st.integers(1, 24), st.integers(1, 24))))
def test_nearest_seed_matches_exhaustive_oracle(seeds):
    if not seeds.any():
        seeds = seeds.copy()
        seeds[-1, -1] = True
    got = nearest_seed(seeds)
    exp = brute_nearest(seeds)
    np.testing.assert_array_equal(got[0], exp[0])
    np.testing.assert_array_equal(got[1], exp[1])


@pytest.mark.parametrize("step", [2, 3, 4, 7])
def test_nearest_seed_lattice_ties(step):
    seeds = np.zeros((33, 29), bool)
    seeds[::step, ::step] = True
    got = nearest_seed(seeds)
    exp = brute_nearest(seeds)
    np.testing.assert_array_equal(got[0], exp[0])
    np.testing.assert_array_equal(got[1], exp[1])


def test_unorthorectify_identity(rng):
    img = rng.random((11, 13))
    np.testing.assert_array_equal(unorthorectify(img, Glt.identity(11, 13)), img)
    cube = HyperCube(rng.random((11, 13, 2)), [1, 2])
    out = unorthorectify(cube, Glt.identity(11, 13))
    np.testing.assert_array_equal(out.data, cube.data)


def test_unorthorectify_all_sentinel_raises():
    glt = Glt(-np.ones((3, 3), int), -np.ones((3, 3), int), 3, 3)
    with pytest.raises(NoSeedPixels):
        unorthorectify(np.ones((3, 3)), glt)


def test_unorthorectify_keeps_every_plume_pixel_under_skew():
    spec = SceneSpec(rows=40, cols=30, distortion=Distortion(skew=0.35, wobble_amplitude=2.5,
                                                             wobble_period=17, scale=1.3, pad=2))
    glt = gen_glt(spec)
    rng = np.random.default_rng(5)
    src_mask = rng.random((40, 30)) < 0.15
    ortho_mask = orthorectify(src_mask, glt)
    back = unorthorectify(ortho_mask, glt, CombineRule.UNION)
    m = glt.mapped & ortho_mask
    assert back[glt.line[m], glt.sample[m]].all()


def test_unorthorectify_fills_unreferenced_samples_inside_swath():
    spec = SceneSpec(rows=12, cols=20, distortion=Distortion(scale=1.5))
    glt = gen_glt(spec)
    ref = glt.referenced()
    assert not ref.all()
    fp = source_footprint(glt)
    img = np.arange(glt.ortho_rows * glt.ortho_cols, dtype=float).reshape(glt.ortho_shape)
    out = unorthorectify(img, glt)
    assert np.isfinite(out[fp]).all()
    assert np.isnan(out[~fp]).all()


def test_source_footprint_modes_and_margin():
    sample = np.array([[1, 3]])
    line = np.array([[2, 2]])
    glt = Glt(sample, line, 5, 5)
    ref = source_footprint(glt, mode="referenced")
    assert ref.sum() == 2
    span = source_footprint(glt, mode="span")
    assert span[2, 1:4].all() and span.sum() == 3
    grown = source_footprint(glt, margin=1, mode="span")
    assert grown[1, 2] and grown[2, 0] and not grown[0, 0]


def test_round_trip_with_bijective_random_glts(rng):
    for _ in range(20):
        r, c = (int(v) for v in rng.integers(1, 20, 2))
        glt = random_bijective_glt(r, c, rng)
        img = rng.random((r, c))
        np.testing.assert_array_equal(orthorectify(unorthorectify(img, glt), glt), img)


def test_operations_are_deterministic(rng):
    glt = random_glt(rng, 30, 30, 25, 25)
    img = rng.random((30, 30))
    a = unorthorectify(img, glt, CombineRule.MAX)
    b = unorthorectify(img.copy(), glt, CombineRule.MAX)
    assert a.tobytes() == b.tobytes()
