"""Core raster types, methane band subset selection and per-band normalization."""

from __future__ import annotations

import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import (
    BandCountMismatch,
    CountMismatch,
    EmptySelection,
    NoValidPixels,
    WavelengthMismatch,
)

__all__ = [
    "HyperCube",
    "BandSelection",
    "BandStats",
    "METHANE_RANGES_NM",
    "RGB_TARGETS_NM",
    "select_bands",
    "band_stats",
    "normalize",
]

# SWIR windows bracketing the CH4 absorption features plus the visible bands.
METHANE_RANGES_NM: tuple[tuple[float, float], ...] = ((1573.0, 1699.0), (2004.0, 2478.0))
RGB_TARGETS_NM: tuple[float, ...] = (462.0, 550.0, 640.0)
DEFAULT_EPS = 1e-6


@dataclass
class HyperCube:
    """A ``rows x cols x bands`` radiance raster in band-interleaved-by-pixel order.

    Pixels outside ``valid_mask`` hold ``fill_value`` in every band. The mask,
    not the fill value, is authoritative for validity.
    """

    data: np.ndarray
    wavelengths_nm: np.ndarray
    valid_mask: np.ndarray | None = None
    fill_value: float = math.nan
    attrs: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3:
            raise ValueError("HyperCube.data must be (rows, cols, bands)")
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64).reshape(-1)
        if wl.shape[0] != data.shape[2]:
            raise WavelengthMismatch(
                f"{wl.shape[0]} wavelengths for {data.shape[2]} bands"
            )
        if wl.size > 1 and not np.all(np.diff(wl) > 0):
            raise WavelengthMismatch("wavelengths must be strictly increasing")
        if self.valid_mask is None:
            mask = np.ones(data.shape[:2], dtype=bool)
        else:
            mask = np.asarray(self.valid_mask, dtype=bool)
            if mask.shape != data.shape[:2]:
                raise ValueError("valid_mask shape must be (rows, cols)")
        fill = np.float32(self.fill_value)
        if not mask.all():
            invalid = data[~mask]
            already = np.isnan(invalid).all() if np.isnan(fill) else (invalid == fill).all()
            if not already:
                data = data.copy()
                data[~mask] = fill
        self.data = data
        self.wavelengths_nm = wl
        self.valid_mask = mask
        self.fill_value = float(self.fill_value)

    @property
    def rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def cols(self) -> int:
        return int(self.data.shape[1])

    @property
    def bands(self) -> int:
        return int(self.data.shape[2])

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.rows, self.cols, self.bands

    def crop(self, row: int, col: int, height: int, width: int) -> HyperCube:
        return HyperCube(
            self.data[row : row + height, col : col + width],
            self.wavelengths_nm,
            self.valid_mask[row : row + height, col : col + width],
            self.fill_value,
            dict(self.attrs),
        )

    def replace(self, data: np.ndarray | None = None, valid_mask: np.ndarray | None = None,
                wavelengths_nm: np.ndarray | None = None) -> HyperCube:
        return HyperCube(
            self.data if data is None else data,
            self.wavelengths_nm if wavelengths_nm is None else wavelengths_nm,
            self.valid_mask if valid_mask is None else valid_mask,
            self.fill_value,
            dict(self.attrs),
        )


@dataclass(frozen=True)
class BandSelection:
    """Inclusive wavelength windows plus nearest-band RGB targets."""

    ranges_nm: tuple[tuple[float, float], ...] = METHANE_RANGES_NM
    rgb_wavelengths_nm: tuple[float, ...] = RGB_TARGETS_NM
    expected_count: int | None = None

    def __post_init__(self) -> None:
        ranges = tuple(sorted((float(lo), float(hi)) for lo, hi in self.ranges_nm))
        for lo, hi in ranges:
            if lo > hi:
                raise ValueError(f"interval [{lo}, {hi}] has lower > upper")
        for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
            if lo <= hi:
                raise ValueError("wavelength intervals overlap")
        object.__setattr__(self, "ranges_nm", ranges)
        object.__setattr__(
            self, "rgb_wavelengths_nm", tuple(float(w) for w in self.rgb_wavelengths_nm)
        )

    def indices(self, wavelengths_nm: np.ndarray) -> np.ndarray:
        wl = np.asarray(wavelengths_nm, dtype=np.float64)
        keep = np.zeros(wl.shape, dtype=bool)
        for lo, hi in self.ranges_nm:
            keep |= (wl >= lo) & (wl <= hi)
        if wl.size:
            for target in self.rgb_wavelengths_nm:
                # argmin returns the first (shorter) band on an exact tie
                keep[int(np.argmin(np.abs(wl - target)))] = True
        return np.flatnonzero(keep)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ranges_nm": [list(r) for r in self.ranges_nm],
            "rgb_wavelengths_nm": list(self.rgb_wavelengths_nm),
            "expected_count": self.expected_count,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BandSelection:
        return cls(
            tuple(tuple(r) for r in d.get("ranges_nm", METHANE_RANGES_NM)),
            tuple(d.get("rgb_wavelengths_nm", RGB_TARGETS_NM)),
            d.get("expected_count"),
        )


def select_bands(cube: HyperCube, sel: BandSelection) -> HyperCube:
    """Keep the bands inside ``sel.ranges_nm`` and the band nearest each RGB target.

    Band order stays ascending in wavelength.
    """
    idx = sel.indices(cube.wavelengths_nm)
    if idx.size == 0:
        raise EmptySelection("no band falls inside the requested windows")
    if sel.expected_count is not None and idx.size != sel.expected_count:
        raise CountMismatch(sel.expected_count, int(idx.size))
    return cube.replace(data=cube.data[:, :, idx], wavelengths_nm=cube.wavelengths_nm[idx])


@dataclass(frozen=True)
class BandStats:
    mean: np.ndarray
    std: np.ndarray
    pixel_count: int

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean": [float(v) for v in self.mean],
            "std": [float(v) for v in self.std],
            "pixel_count": int(self.pixel_count),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> BandStats:
        return cls(np.asarray(d["mean"], float), np.asarray(d["std"], float), int(d["pixel_count"]))


def band_stats(cubes: Sequence[HyperCube]) -> BandStats:
    """Per-band mean and population standard deviation over valid pixels.

    Per-cube partial sums are combined with ``math.fsum`` so the result does
    not depend on the order of ``cubes``.
    """
    cubes = list(cubes)
    if not cubes:
        raise NoValidPixels("no cubes given")
    wl = cubes[0].wavelengths_nm
    for c in cubes[1:]:
        if c.wavelengths_nm.shape != wl.shape or not np.array_equal(c.wavelengths_nm, wl):
            raise WavelengthMismatch("cubes do not share a wavelength grid")
    pixels = [c.data[c.valid_mask].astype(np.float64) for c in cubes]
    n = sum(p.shape[0] for p in pixels)
    if n == 0:
        raise NoValidPixels("no valid pixels across the given cubes")
    bands = wl.shape[0]
    sums = np.array([p.sum(axis=0) for p in pixels if p.shape[0]])
    mean = np.array([math.fsum(sums[:, b]) for b in range(bands)]) / n
    sq = np.array([((p - mean) ** 2).sum(axis=0) for p in pixels if p.shape[0]])
    var = np.array([math.fsum(sq[:, b]) for b in range(bands)]) / n
    return BandStats(mean=mean, std=np.sqrt(var), pixel_count=int(n))


def normalize(cube: HyperCube, stats: BandStats, eps: float = DEFAULT_EPS) -> HyperCube:
    """Standardize valid pixels per band; invalid pixels keep the fill value."""
    if stats.mean.shape[0] != cube.bands or stats.std.shape[0] != cube.bands:
        raise BandCountMismatch(f"stats have {stats.mean.shape[0]} bands, cube has {cube.bands}")
    scale = np.maximum(stats.std, eps)
    out = cube.data.copy()
    m = cube.valid_mask
    out[m] = ((cube.data[m].astype(np.float64) - stats.mean) / scale).astype(np.float32)
    return cube.replace(data=out)
