import hashlib
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plumepipe.dataset import (
    LabeledImage,
    SplitManifest,
    jitter_tiles,
    max_enhancement,
    read_manifest,
    split_images,
    split_sizes,
    strong_flag,
    tile_label,
    tile_origins,
    tile_raster,
    write_tileset,
)
from plumepipe.errors import BadStride, OffsetTooLarge, TooFewImages
from plumepipe.io import decode_hsc
from plumepipe.raster import HyperCube


def make_image(rows, cols, valid=None, mask=None, enh=None, image_id="img", bands=2):
    data = np.arange(rows * cols * bands, dtype=np.float32).reshape(rows, cols, bands)
    cube = HyperCube(data, np.arange(bands) + 1.0, valid)
    mask = np.zeros((rows, cols), bool) if mask is None else mask
    enh = np.zeros((rows, cols)) if enh is None else enh
    return LabeledImage(image_id, cube, mask, enh)


def test_full_tiles_of_256_square():
    tiles = tile_raster(make_image(256, 256), size=128)
    assert sorted(t.origin for t in tiles) == [(0, 0), (0, 128), (128, 0), (128, 128)]


def test_exactly_min_fraction_is_dropped():
    valid = np.zeros((10, 10), bool)
    valid.flat[:80] = True
    assert tile_raster(make_image(10, 10, valid), size=10) == []
    valid.flat[80] = True
    assert len(tile_raster(make_image(10, 10, valid), size=10)) == 1


def test_slightly_above_min_fraction_is_kept():
    valid = np.zeros((128, 128), bool)
    valid.flat[:13222] = True  # 80.7 %
    tiles = tile_raster(make_image(128, 128, valid))
    assert len(tiles) == 1
    assert tiles[0].valid_frac == pytest.approx(13222 / 16384)


def test_edge_origins_are_clamped():
    assert tile_origins(300, 128, 128) == [0, 128, 172]
    assert tile_origins(256, 128, 128) == [0, 128]
    assert tile_origins(100, 128, 128) == []
    assert tile_origins(128, 128, 64) == [0]


def oracle_tiles(valid, size, stride, frac_num=4, frac_den=5):
    rows, cols = valid.shape
    out = []

    def starts(n):
        if n < size:
            return []
        s = list(range(0, n - size + 1, stride))
        if s[-1] + size != n:
            s.append(n - size)
        return s

    for r in starts(rows):
        for c in starts(cols):
            count = sum(valid[r + i, c + j] for i in range(size) for j in range(size))
            if count * frac_den > frac_num * size * size:
                out.append((r, c))
    return out


def test_tiling_matches_enumeration_oracle():
    rng = np.random.default_rng(8)
    for _ in range(30):
        rows, cols = (int(v) for v in rng.integers(5, 40, 2))
        size = int(rng.integers(2, 12))
        stride = int(rng.integers(1, size + 1))
        valid = rng.random((rows, cols)) > rng.uniform(0, 0.4)
        got = [t.origin for t in tile_raster(make_image(rows, cols, valid), size=size, stride=stride)]
        assert got == oracle_tiles(valid, size, stride)


def test_bad_stride():
    with pytest.raises(BadStride):
        tile_raster(make_image(8, 8), size=4, stride=0)
    with pytest.raises(BadStride):
        tile_raster(make_image(8, 8), size=4, stride=5)


def test_invalid_pixels_never_grow_tile_set():
    rng = np.random.default_rng(9)
    valid = rng.random((64, 64)) > 0.1
    before = {t.origin for t in tile_raster(make_image(64, 64, valid), size=16)}
    valid2 = valid & (rng.random((64, 64)) > 0.05)
    after = {t.origin for t in tile_raster(make_image(64, 64, valid2), size=16)}
    assert after <= before


def test_labels_and_strong_flag():
    mask = np.zeros((8, 8), bool)
    enh = np.zeros((8, 8))
    mask[1, 1] = True
    enh[1, 1] = 900.0
    enh[6, 6] = 5000.0  # outside the mask, ignored
    tiles = tile_raster(make_image(8, 8, mask=mask, enh=enh), size=4)
    by = {t.origin: t for t in tiles}
    assert by[(0, 0)].label and by[(0, 0)].strong
    assert by[(0, 0)].max_enhancement_ppm_m == 900.0
    assert not by[(4, 4)].label and not by[(4, 4)].strong
    assert tile_label(mask) and not tile_label(np.zeros(3, bool))
    assert not strong_flag(np.array([899.999]))
    assert strong_flag(np.array([900.0]))
    assert max_enhancement(np.array([np.nan, 3.0])) == 3.0
    assert max_enhancement(np.array([5.0]), np.array([False])) == 0.0


def test_jitter_zero_offset_is_identity():
    mask = np.zeros((64, 64), bool)
    mask[10, 10] = True
    tiles = tile_raster(make_image(64, 64, mask=mask), size=32)
    out = jitter_tiles(tiles, offsets=[(0, 0)])
    assert [t.key for t in out] == [t.key for t in tiles]


def test_jitter_out_of_bounds_is_skipped():
    mask = np.ones((64, 64), bool)
    tiles = tile_raster(make_image(64, 64, mask=mask), size=32)
    out = jitter_tiles(tiles, offsets=[(-16, 0)])
    new = out[len(tiles):]
    assert {t.origin for t in new} == {(32, 0), (32, 32)}
    for t in new:
        assert t.top_left == (16, t.origin[1])
        np.testing.assert_array_equal(t.cube.data, t.image.cube.data[16:48, t.origin[1]:t.origin[1] + 32])


def test_jitter_recomputes_labels():
    mask = np.zeros((64, 64), bool)
    mask[31, 31] = True
    tiles = tile_raster(make_image(64, 64, mask=mask), size=32)
    out = jitter_tiles(tiles, offsets=[(16, 16)])
    shifted = [t for t in out if t.jitter == (16, 16)]
    assert len(shifted) == 1 and shifted[0].top_left == (16, 16) and shifted[0].label
    assert shifted[0].mask.sum() == 1


def test_jitter_only_positive_tiles_by_default():
    mask = np.zeros((64, 64), bool)
    mask[5, 5] = True
    tiles = tile_raster(make_image(64, 64, mask=mask), size=32)
    out = jitter_tiles(tiles, offsets=[(1, 1)])
    assert {t.origin for t in out[len(tiles):]} == {(0, 0)}
    out = jitter_tiles(tiles, offsets=[(1, 1), (-1, -1)], include_negatives=True)
    # (0, 0) fits only (1, 1), (32, 32) only (-1, -1), the others neither
    assert sorted(t.top_left for t in out[len(tiles):]) == [(1, 1), (31, 31)]


def test_jitter_offset_limit():
    tiles = tile_raster(make_image(64, 64, mask=np.ones((64, 64), bool)), size=32)
    with pytest.raises(OffsetTooLarge):
        jitter_tiles(tiles, offsets=[(17, 0)])
    with pytest.raises(OffsetTooLarge):
        jitter_tiles(tiles, max_offset=17)


def test_jitter_is_deterministic():
    mask = np.ones((96, 96), bool)
    tiles = tile_raster(make_image(96, 96, mask=mask), size=32)

    def digest(seed):
        keys = [t.key for t in jitter_tiles(tiles, rng_seed=seed, max_offset=16)]
        return hashlib.sha256(repr(keys).encode()).hexdigest(), keys

    a, keys = digest(3)
    assert digest(3)[0] == a
    assert digest(4)[0] != a
    assert len(set(keys)) == len(keys)
    # independent of tile order
    rev = jitter_tiles(tiles[::-1], rng_seed=3, max_offset=16)
    assert {t.key for t in rev} == set(keys)


def test_test_split_not_augmented():
    mask = np.ones((64, 64), bool)
    tiles = tile_raster(make_image(64, 64, mask=mask), size=32, split="test")
    assert len(jitter_tiles(tiles, offsets=[(1, 1)])) == len(tiles)


def test_split_sizes_reference_cases():
    assert split_sizes(100) == (80, 15, 5)
    assert split_sizes(3) == (1, 1, 1)
    assert sum(split_sizes(7)) == 7


def integer_split_oracle(n):
    # fractions 80/15/5: test = ceil(n/20), train = round(rest * 16/19)
    test = (n + 19) // 20
    rest = n - test
    train = (32 * rest + 19) // 38
    train = max(1, min(train, rest - 1))
    return train, rest - train, test


@settings(max_examples=300, deadline=None)
@given(st.integers(3, 10_000))
def test_split_sizes_match_integer_oracle(n):
    assert split_sizes(n) == integer_split_oracle(n)


def test_flat_mode():
    assert split_sizes(100, mode="flat") == (80, 15, 5)
    assert split_sizes(10, mode="flat") == (8, 1, 1)


def test_split_images_deterministic_and_disjoint():
    ids = [f"im{i:03d}" for i in range(100)]
    a = split_images(ids, seed=1)
    b = split_images(reversed(ids), seed=1)
    assert a == b
    assert (len(a.train_image_ids), len(a.val_image_ids), len(a.test_image_ids)) == (80, 15, 5)
    sets = [set(a.train_image_ids), set(a.val_image_ids), set(a.test_image_ids)]
    for x, y in itertools.combinations(sets, 2):
        assert not x & y
    assert set().union(*sets) == set(ids)
    assert SplitManifest.from_dict(a.to_dict()) == a
    tests = {split_images(ids, seed=s).test_image_ids for s in range(20)}
    assert len(tests) == 20


def test_split_requires_three_images():
    with pytest.raises(TooFewImages):
        split_images(["a", "b"], seed=0)


def test_no_leakage_across_splits():
    ids = [f"s{i}" for i in range(10)]
    manifest = split_images(ids, seed=2)
    tiles = []
    for i in ids:
        tiles += tile_raster(make_image(32, 32, mask=np.ones((32, 32), bool), image_id=i), size=16,
                             split=manifest.split_of(i))
    tiles = jitter_tiles(tiles, offsets=[(4, 4)])
    seen = {}
    for t in tiles:
        seen.setdefault(t.image_id, set()).add(t.split)
    assert all(len(v) == 1 for v in seen.values())


def test_write_tileset_round_trip(tmp_path):
    mask = np.zeros((32, 32), bool)
    mask[3, 4] = True
    enh = np.zeros((32, 32))
    enh[3, 4] = 1200.0
    tiles = tile_raster(make_image(32, 32, mask=mask, enh=enh, image_id="a/b"), size=16)
    manifest = write_tileset(tiles, tmp_path)
    records = read_manifest(manifest)
    assert len(records) == 4
    for t, rec in zip(tiles, records):
        buf = (tmp_path / rec["cube_path"]).read_bytes()
        cube, _, end = decode_hsc(buf, rec["cube_offset"])
        assert end - rec["cube_offset"] == rec["cube_nbytes"]
        np.testing.assert_array_equal(cube.data, t.cube.data)
        mbuf = (tmp_path / rec["mask_path"]).read_bytes()
        m, _, _ = decode_hsc(mbuf, rec["mask_offset"])
        np.testing.assert_array_equal(m.data[..., 0] > 0, t.mask)
    assert records[0]["strong"] and records[0]["label"]
