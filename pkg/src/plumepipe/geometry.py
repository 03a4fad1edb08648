"""Orthorectification through a geometric lookup table and its approximate inverse.

The forward map is a plain lookup: ortho pixel ``(y, x)`` takes the value of
source pixel ``(line[y, x], sample[y, x])``. The inverse scatters ortho values
back onto the source plane, resolving collisions with a :class:`CombineRule`,
then fills source pixels that received nothing with their nearest written
neighbour (Euclidean distance, ties to the smaller row, then smaller column).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import NoSeedPixels, OutOfRangeEntry, ShapeMismatch
from .raster import HyperCube

__all__ = [
    "Glt",
    "SparseRaster",
    "CombineRule",
    "orthorectify",
    "back_sample",
    "nn_fill",
    "nearest_seed",
    "source_footprint",
    "unorthorectify",
]

UNMAPPED = -1


class CombineRule(str, enum.Enum):
    FIRST = "first"
    UNION = "union"
    MAX = "max"


@dataclass(frozen=True)
class Glt:
    """Per-ortho-pixel source indices (zero-based); ``-1`` marks "no mapping"."""

    sample: np.ndarray
    line: np.ndarray
    src_rows: int
    src_cols: int

    def __post_init__(self) -> None:
        sample = np.asarray(self.sample, dtype=np.int64)
        line = np.asarray(self.line, dtype=np.int64)
        if sample.ndim != 2 or sample.shape != line.shape:
            raise ShapeMismatch("sample and line tables must be equal 2-D arrays", module="geometry")
        unmapped_s = sample == UNMAPPED
        unmapped_l = line == UNMAPPED
        if np.any(unmapped_s != unmapped_l):
            raise OutOfRangeEntry("half-mapped GLT entry (one index unmapped)")
        m = ~unmapped_s
        if np.any((sample[m] < 0) | (sample[m] >= self.src_cols)):
            raise OutOfRangeEntry(f"sample index outside [0, {self.src_cols})")
        if np.any((line[m] < 0) | (line[m] >= self.src_rows)):
            raise OutOfRangeEntry(f"line index outside [0, {self.src_rows})")
        sample.setflags(write=False)
        line.setflags(write=False)
        object.__setattr__(self, "sample", sample)
        object.__setattr__(self, "line", line)
        object.__setattr__(self, "src_rows", int(self.src_rows))
        object.__setattr__(self, "src_cols", int(self.src_cols))

    @property
    def ortho_rows(self) -> int:
        return int(self.sample.shape[0])

    @property
    def ortho_cols(self) -> int:
        return int(self.sample.shape[1])

    @property
    def ortho_shape(self) -> tuple[int, int]:
        return self.ortho_rows, self.ortho_cols

    @property
    def src_shape(self) -> tuple[int, int]:
        return self.src_rows, self.src_cols

    @property
    def mapped(self) -> np.ndarray:
        return self.sample != UNMAPPED

    @classmethod
    def identity(cls, rows: int, cols: int) -> Glt:
        line, sample = np.indices((rows, cols))
        return cls(sample, line, rows, cols)

    def referenced(self) -> np.ndarray:
        """Boolean source-plane image of pixels named by at least one entry."""
        out = np.zeros(self.src_shape, dtype=bool)
        m = self.mapped
        out[self.line[m], self.sample[m]] = True
        return out


@dataclass
class SparseRaster:
    """Source-plane raster where only ``set_mask`` pixels carry data."""

    values: np.ndarray
    set_mask: np.ndarray
    fill: object = np.nan

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.set_mask.shape)


def _fill_for(dtype: np.dtype):
    if dtype == np.bool_:
        return False
    if np.issubdtype(dtype, np.floating):
        return np.nan
    return 0


def _as_array(raster) -> tuple[np.ndarray, np.ndarray | None]:
    if isinstance(raster, HyperCube):
        return raster.data, raster.valid_mask
    return np.asarray(raster), None


def _default_valid(values: np.ndarray) -> np.ndarray:
    if np.issubdtype(values.dtype, np.floating):
        nan = np.isnan(values)
        return ~(nan.any(axis=tuple(range(2, values.ndim))) if values.ndim > 2 else nan)
    return np.ones(values.shape[:2], dtype=bool)


def orthorectify(src, glt: Glt, fill=None):
    """Apply the lookup table: ``out[y, x] = src[line[y, x], sample[y, x]]``.

    ``src`` may be a :class:`HyperCube` (result is a cube whose invalid pixels
    are unmapped ortho pixels or pixels mapped onto invalid source pixels) or a
    2-D/3-D array (unmapped pixels get ``fill``: NaN, False or 0 by dtype).
    """
    values, valid = _as_array(src)
    if values.shape[:2] != glt.src_shape:
        raise ShapeMismatch(
            f"source raster {values.shape[:2]} does not match GLT source extent {glt.src_shape}",
            module="geometry",
        )
    mapped = glt.mapped
    sample = np.where(mapped, glt.sample, 0)
    line = np.where(mapped, glt.line, 0)
    out = values[line, sample]
    if isinstance(src, HyperCube):
        out_valid = mapped & valid[line, sample]
        return HyperCube(out, src.wavelengths_nm, out_valid, src.fill_value, dict(src.attrs))
    out = out.copy()
    out[~mapped] = _fill_for(out.dtype) if fill is None else fill
    return out


def back_sample(ortho, glt: Glt, combine: CombineRule | str = CombineRule.FIRST,
                valid: np.ndarray | None = None) -> SparseRaster:
    """Scatter ortho pixels back to the source plane.

    Collisions (several ortho pixels naming one source pixel) resolve by
    ``combine``: FIRST keeps the row-major first writer, UNION ORs binary
    values, MAX keeps the largest value. Ortho pixels outside ``valid``
    (default: cube mask, or non-NaN for float arrays) do not contribute.
    """
    combine = CombineRule(combine)
    values, cube_valid = _as_array(ortho)
    if values.shape[:2] != glt.ortho_shape:
        raise ShapeMismatch(
            f"ortho raster {values.shape[:2]} does not match GLT extent {glt.ortho_shape}",
            module="geometry",
        )
    if valid is None:
        valid = cube_valid if cube_valid is not None else _default_valid(values)
    contrib = glt.mapped & np.asarray(valid, dtype=bool)
    flat_idx = np.flatnonzero(contrib)  # row-major order
    targets = glt.line.reshape(-1)[flat_idx] * glt.src_cols + glt.sample.reshape(-1)[flat_idx]
    band_shape = values.shape[2:]
    vals = values.reshape((-1,) + band_shape)[flat_idx]

    if combine is CombineRule.UNION:
        vals = vals != 0
        dtype = np.dtype(bool)
    else:
        dtype = values.dtype
    fill = _fill_for(dtype)
    n_src = glt.src_rows * glt.src_cols
    out = np.full((n_src,) + band_shape, fill, dtype=dtype)
    set_flat = np.zeros(n_src, dtype=bool)
    if flat_idx.size:
        order = np.argsort(targets, kind="stable")
        t_sorted = targets[order]
        starts = np.flatnonzero(np.r_[True, t_sorted[1:] != t_sorted[:-1]])
        uniq = t_sorted[starts]
        v_sorted = vals[order]
        if combine is CombineRule.FIRST:
            # stable sort keeps row-major order inside each collision group
            out[uniq] = v_sorted[starts]
        else:
            out[uniq] = np.maximum.reduceat(v_sorted, starts, axis=0)
        set_flat[uniq] = True
    shape2 = glt.src_shape
    return SparseRaster(out.reshape(shape2 + band_shape), set_flat.reshape(shape2), fill)


def nearest_seed(seeds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row and column of the nearest seed for every pixel.

    Exact squared-Euclidean distance; among equidistant seeds the one with the
    smaller row wins, then the smaller column. Two separable passes: a 1-D
    nearest-seed scan down each column, then, per row, the lower envelope of
    the parabolas ``(x - q)**2 + g_q**2`` over candidate columns ``q``. Ties are
    folded into the envelope by comparing ``(distance, row, col)``
    lexicographically, which still switches winners at most once per pair.
    """
    seeds = np.asarray(seeds, dtype=bool)
    R, C = seeds.shape
    if not seeds.any():
        raise NoSeedPixels("no seed pixels")

    # pass 1: nearest seed row per column, ties to the upper seed
    idx = np.arange(R)[:, None]
    prev = np.maximum.accumulate(np.where(seeds, idx, -1), axis=0)
    nxt = np.minimum.accumulate(np.where(seeds, idx, 2 * R + 1)[::-1], axis=0)[::-1]
    d_prev = np.where(prev >= 0, idx - prev, 4 * R + 4)
    d_next = nxt - idx
    take_prev = d_prev <= d_next
    near_row = np.where(take_prev, prev, nxt)
    g2 = np.where(take_prev, d_prev, d_next).astype(np.int64) ** 2

    cand = np.flatnonzero(seeds.any(axis=0))
    # original linear index of the candidate: the (row, col) tie key
    lin = near_row[:, cand].astype(np.int64) * C + cand[None, :]
    g2 = g2[:, cand]
    n = cand.size

    # pass 2: lower envelope per row, all rows advanced together
    stack = np.zeros((R, n), dtype=np.int64)  # positions into cand
    start = np.zeros((R, n), dtype=np.int64)  # first x where the entry wins
    start[:, 0] = np.iinfo(np.int64).min
    top = np.zeros(R, dtype=np.int64)
    rows = np.arange(R)

    def crossing(r, p, j):
        # smallest integer x at which candidate j beats candidate p (p < j)
        qp = cand[p]
        qj = cand[j]
        a = 2 * (qj - qp)
        b = qj * qj - qp * qp + g2[r, j] - g2[r, p]
        x = b // a + 1
        tie_win = (b % a == 0) & (lin[r, j] < lin[r, p])
        return np.where(tie_win, b // a, x)

    for j in range(1, n):
        s = crossing(rows, stack[rows, top], j)
        pending = np.flatnonzero(s <= start[rows, top])
        while pending.size:
            top[pending] -= 1
            s_p = crossing(pending, stack[pending, top[pending]], j)
            s[pending] = s_p
            pending = pending[s_p <= start[pending, top[pending]]]
        top += 1
        stack[rows, top] = j
        start[rows, top] = s

    # query: x in [0, C); clip starts into [-1, C] and search all rows at once
    width = C + 2
    valid = np.arange(n)[None, :] <= top[:, None]
    zz = np.where(valid, np.clip(start, -1, C), C) + (rows * width)[:, None]
    xs = np.arange(C)[None, :] + (rows * width)[:, None]
    pos = np.searchsorted(zz.ravel(), xs.ravel(), side="right") - 1
    k = pos.reshape(R, C) - (rows * n)[:, None]
    win = stack[rows[:, None], k]
    out_lin = lin[rows[:, None], win]
    return out_lin // C, out_lin % C


def nn_fill(sparse: SparseRaster, within: np.ndarray | None = None) -> SparseRaster:
    """Give every unset pixel inside ``within`` the value of its nearest set pixel.

    Set pixels are returned unchanged and pixels outside ``within`` stay at the
    fill value. The result's ``set_mask`` marks every defined pixel, so filling
    twice is the same as filling once.
    """
    set_mask = np.asarray(sparse.set_mask, dtype=bool)
    region = np.ones_like(set_mask) if within is None else np.asarray(within, dtype=bool)
    if region.shape != set_mask.shape:
        raise ShapeMismatch("validity region does not match raster", module="geometry")
    if not (set_mask & region).any():
        raise NoSeedPixels("no set pixel inside the validity region")
    values = sparse.values.copy()
    todo = region & ~set_mask
    outside = ~region & ~set_mask
    if outside.any():
        values[outside] = sparse.fill
    if todo.any():
        nr, nc = nearest_seed(set_mask)
        values[todo] = sparse.values[nr[todo], nc[todo]]
    return SparseRaster(values, set_mask | region, sparse.fill)


def source_footprint(glt: Glt, margin: float = 0, mode: str = "span") -> np.ndarray:
    """Source-plane region the sensor swath covers inside the ortho product.

    ``mode="referenced"`` is exactly the set of pixels some entry names;
    ``mode="span"`` also includes, per source line, every sample between the
    first and last referenced one (a pushbroom line is contiguous). The region
    is then grown by ``margin`` pixels (Euclidean).
    """
    ref = glt.referenced()
    if mode == "span":
        cols = np.arange(glt.src_cols)
        any_ref = ref.any(axis=1)
        first = np.where(any_ref, ref.argmax(axis=1), glt.src_cols)
        last = np.where(any_ref, glt.src_cols - 1 - ref[:, ::-1].argmax(axis=1), -1)
        fp = (cols[None, :] >= first[:, None]) & (cols[None, :] <= last[:, None])
    elif mode == "referenced":
        fp = ref
    else:
        raise ValueError(f"unknown footprint mode {mode!r}")
    if margin > 0 and fp.any():
        fp = ndimage.distance_transform_edt(~fp) <= margin
    return fp


def unorthorectify(ortho, glt: Glt, combine: CombineRule | str = CombineRule.FIRST,
                   margin: float = 0, footprint: str = "span"):
    """Approximate inverse orthorectification: nearest fill of the back-sampled raster.

    Arrays come back as arrays (fill value outside the footprint); cubes come
    back as cubes whose ``valid_mask`` is the footprint.
    """
    sparse = back_sample(ortho, glt, combine)
    region = source_footprint(glt, margin, footprint)
    filled = nn_fill(sparse, region)
    if isinstance(ortho, HyperCube):
        return HyperCube(filled.values, ortho.wavelengths_nm, filled.set_mask,
                         ortho.fill_value, dict(ortho.attrs))
    return filled.values
