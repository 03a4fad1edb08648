"""Synthetic scenes with known geometry, background statistics and plumes.

Everything random comes from ``numpy.random.default_rng(seed)``: the PCG64
bit generator seeded through ``SeedSequence``, with numpy's ziggurat normal
sampler. Identical specs therefore give bitwise-identical scenes. Reference
vectors pinned by the test suite:

* ``PCG64(0).random_raw(3)`` = ``0xa30febcfd9c2825f, 0x4510bdf882d9d721, 0x0a7d3da94ecde8b8``
* ``default_rng(0).standard_normal(3)`` = ``0.1257302210933933, -0.1321048632913019, 0.6404226504432821``
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

from .errors import DistortionOutOfRange, InvalidCovariance
from .geometry import UNMAPPED, Glt
from .matched_filter import CH4_LINES_NM, TargetSignature, synthetic_signature
from .raster import HyperCube

__all__ = [
    "Plume",
    "Distortion",
    "SceneSpec",
    "gen_glt",
    "gen_scene",
    "scene_signature",
    "concentration_field",
    "detection_snr",
    "scale_covariance_for_snr",
    "random_bijective_glt",
]

# Largest ortho grid accepted, as a multiple of the source pixel count.
_MAX_ORTHO_GROWTH = 64


@dataclass(frozen=True)
class Plume:
    row: float
    col: float
    sigma: float
    peak: float

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError("plume sigma must be > 0")
        if not self.peak >= 0:
            raise ValueError("plume peak must be >= 0")


@dataclass(frozen=True)
class Distortion:
    """Off-nadir pushbroom distortion of the source plane.

    Line ``l`` lands shifted across-track by
    ``col_shift + skew * l + wobble_amplitude * sin(2 pi l / wobble_period)``
    ortho columns, and ``scale`` source samples cover one ortho column
    (``scale > 1`` leaves source samples unreferenced, ``scale < 1`` makes
    several ortho pixels share one source pixel). ``pad`` adds empty ortho
    border on every side.
    """

    skew: float = 0.0
    wobble_amplitude: float = 0.0
    wobble_period: float = 64.0
    col_shift: float = 0.0
    scale: float = 1.0
    pad: int = 0

    def offsets(self, rows: int) -> np.ndarray:
        lines = np.arange(rows, dtype=np.float64)
        off = self.col_shift + self.skew * lines
        if self.wobble_amplitude:
            off = off + self.wobble_amplitude * np.sin(2.0 * np.pi * lines / self.wobble_period)
        return off


@dataclass
class SceneSpec:
    rows: int = 128
    cols: int = 128
    bands: int = 32
    wavelength_start_nm: float = 2005.0
    wavelength_step_nm: float = 15.0
    background_mean: list[float] | None = None
    background_cov: list[list[float]] | None = None
    noise_frac: float = 0.01
    band_correlation: float = 0.6
    plumes: list[Plume] = field(default_factory=list)
    distortion: Distortion = field(default_factory=Distortion)
    injection: str = "linear"
    mask_threshold: float = 500.0
    signature_depth: float = 1e-4
    signature_width_nm: float = 12.0
    seed: int = 0
    image_id: str = "scene"

    def __post_init__(self) -> None:
        self.plumes = [p if isinstance(p, Plume) else Plume(**p) for p in self.plumes]
        if not isinstance(self.distortion, Distortion):
            self.distortion = Distortion(**self.distortion)
        if self.injection not in ("linear", "exponential"):
            raise ValueError(f"unknown injection model {self.injection!r}")
        if min(self.rows, self.cols, self.bands) < 1:
            raise ValueError("rows, cols and bands must be positive")

    @property
    def wavelengths_nm(self) -> np.ndarray:
        return self.wavelength_start_nm + self.wavelength_step_nm * np.arange(self.bands)

    def mean_spectrum(self) -> np.ndarray:
        if self.background_mean is not None:
            mu = np.asarray(self.background_mean, dtype=np.float64)
            if mu.shape != (self.bands,):
                raise InvalidCovariance(f"background_mean needs {self.bands} entries")
            return mu
        k = np.arange(self.bands)
        return 10.0 * (1.0 + 0.2 * np.sin(2.0 * np.pi * k / max(self.bands, 2)) - 0.3 * k / self.bands)

    def covariance(self) -> np.ndarray:
        """Background covariance; checked symmetric positive semi-definite."""
        if self.background_cov is not None:
            cov = np.asarray(self.background_cov, dtype=np.float64)
        else:
            sd = self.noise_frac * self.mean_spectrum()
            k = np.arange(self.bands)
            cov = np.outer(sd, sd) * self.band_correlation ** np.abs(k[:, None] - k[None, :])
        if cov.shape != (self.bands, self.bands):
            raise InvalidCovariance(f"covariance must be {self.bands}x{self.bands}")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-12 * max(1.0, np.abs(cov).max())):
            raise InvalidCovariance("covariance is not symmetric")
        ev = np.linalg.eigvalsh(cov)
        if ev.min() < -1e-10 * max(1.0, ev.max()):
            raise InvalidCovariance("covariance is not positive semi-definite")
        return cov

    def signature(self) -> TargetSignature:
        return synthetic_signature(self.wavelengths_nm, CH4_LINES_NM,
                                   self.signature_width_nm, self.signature_depth)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SceneSpec:
        d = dict(d)
        d["plumes"] = [Plume(**p) for p in d.get("plumes", [])]
        d["distortion"] = Distortion(**d.get("distortion", {}))
        return cls(**d)


def _check_distortion(spec: SceneSpec) -> None:
    dist = spec.distortion
    params = [dist.skew, dist.wobble_amplitude, dist.wobble_period, dist.col_shift, dist.scale]
    if not all(math.isfinite(float(p)) for p in params):
        raise DistortionOutOfRange("distortion parameters must be finite")
    if dist.scale <= 0:
        raise DistortionOutOfRange("scale must be > 0")
    if dist.pad < 0 or int(dist.pad) != dist.pad:
        raise DistortionOutOfRange("pad must be a non-negative integer")
    if dist.wobble_amplitude and dist.wobble_period <= 0:
        raise DistortionOutOfRange("wobble period must be > 0")


def gen_glt(spec: SceneSpec) -> Glt:
    """Lookup table for the scene's distortion; zero distortion gives the identity."""
    _check_distortion(spec)
    dist = spec.distortion
    rows, cols = spec.rows, spec.cols
    pad = int(dist.pad)
    off = dist.offsets(rows)
    base = -min(0.0, float(off.min()))
    span = base + float(off.max()) + (cols - 1) / dist.scale
    ortho_rows = rows + 2 * pad
    ortho_cols = int(math.floor(span + 1e-9)) + 1 + 2 * pad
    if ortho_rows * ortho_cols > _MAX_ORTHO_GROWTH * rows * cols:
        raise DistortionOutOfRange(f"ortho grid {ortho_rows}x{ortho_cols} is implausibly large")

    y, x = np.indices((ortho_rows, ortho_cols))
    line = y - pad
    in_rows = (line >= 0) & (line < rows)
    off_y = np.where(in_rows, off[np.clip(line, 0, rows - 1)], 0.0)
    u = (x - pad - base - off_y) * dist.scale
    sample = np.floor(u + 0.5).astype(np.int64)
    ok = in_rows & (sample >= 0) & (sample < cols)
    sample = np.where(ok, sample, UNMAPPED)
    line = np.where(ok, line, UNMAPPED)
    if np.any(sample[ok] >= cols) or np.any(line[ok] >= rows):
        raise DistortionOutOfRange("distortion produced an out-of-range source index")
    return Glt(sample, line, rows, cols)


def concentration_field(rows: int, cols: int, plumes) -> np.ndarray:
    """Sum of isotropic Gaussian plumes in ppm m, evaluated at pixel centres."""
    r, c = np.indices((rows, cols), dtype=np.float64)
    field_ = np.zeros((rows, cols))
    for p in plumes:
        field_ += p.peak * np.exp(-((r - p.row) ** 2 + (c - p.col) ** 2) / (2.0 * p.sigma ** 2))
    return field_


def _sqrt_factor(cov: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(cov)
        return v * np.sqrt(np.clip(w, 0.0, None))[None, :]


def gen_scene(spec: SceneSpec) -> tuple[HyperCube, np.ndarray, np.ndarray]:
    """Source-plane radiance cube, enhancement map (ppm m) and binary plume mask."""
    mu = spec.mean_spectrum()
    cov = spec.covariance()
    rng = np.random.default_rng(spec.seed)
    z = rng.standard_normal((spec.rows * spec.cols, spec.bands))
    background = (mu[None, :] + z @ _sqrt_factor(cov).T).reshape(spec.rows, spec.cols, spec.bands)
    conc = concentration_field(spec.rows, spec.cols, spec.plumes)
    t = spec.signature().t
    absorb = conc[:, :, None] * t[None, None, :]
    if spec.injection == "linear":
        radiance = background * (1.0 - absorb)
    else:
        radiance = background * np.exp(-absorb)
    cube = HyperCube(radiance.astype(np.float32), spec.wavelengths_nm,
                     attrs={"image_id": spec.image_id})
    mask = conc >= spec.mask_threshold
    return cube, conc, mask


def scene_signature(spec: SceneSpec) -> TargetSignature:
    return spec.signature()


def detection_snr(mean, cov, t, peak: float) -> float:
    """Peak enhancement over the per-pixel matched-filter noise standard deviation."""
    mean = np.asarray(mean, dtype=np.float64)
    q = mean * np.asarray(t, dtype=np.float64)
    w = np.linalg.solve(np.asarray(cov, dtype=np.float64), q)
    return float(peak * math.sqrt(q @ w))


def scale_covariance_for_snr(mean, cov, t, peak: float, snr: float) -> np.ndarray:
    """Rescale ``cov`` so that :func:`detection_snr` equals ``snr``."""
    current = detection_snr(mean, cov, t, peak)
    return np.asarray(cov, dtype=np.float64) * (current / snr) ** 2


def random_bijective_glt(rows: int, cols: int, rng: np.random.Generator) -> Glt:
    """A random permutation lookup between two equal ``rows x cols`` grids."""
    perm = rng.permutation(rows * cols)
    return Glt((perm % cols).reshape(rows, cols), (perm // cols).reshape(rows, cols), rows, cols)
