"""Linear matched filter for methane enhancement (the classical baseline).

Per background group ``g`` (a pushbroom column, or the whole scene) with mean
``mu`` and covariance ``S``::

    alpha(x) = (x - mu)^T S^-1 q / (q^T S^-1 q)

with ``q = mu * t`` (mean-scaled target, alpha in ppm m) or ``q = t``. An
absorbing plume gives negative alpha; :func:`alpha_to_enhancement` flips the
sign so plumes are positive.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .errors import ShapeMismatch, SingularCovariance, TooFewPixels
from .raster import HyperCube

__all__ = [
    "TargetSignature",
    "ColumnStats",
    "synthetic_signature",
    "estimate_background",
    "matched_filter",
    "alpha_to_enhancement",
    "threshold_alpha",
]

logger = logging.getLogger(__name__)

DEFAULT_SHRINKAGE = 1e-4
DEFAULT_MASK_THRESHOLD = 500.0
# Approximate centres of the strongest CH4 features between 2.1 and 2.45 um.
CH4_LINES_NM = (2215.0, 2270.0, 2320.0, 2355.0, 2370.0, 2420.0)
_COLUMN_CHUNK = 64


@dataclass(frozen=True)
class TargetSignature:
    """Unit absorption coefficient per band (per ppm m) on its wavelength grid."""

    wavelengths_nm: np.ndarray
    t: np.ndarray
    source: str = "synthetic"

    def __post_init__(self) -> None:
        wl = np.asarray(self.wavelengths_nm, dtype=np.float64).reshape(-1)
        t = np.asarray(self.t, dtype=np.float64).reshape(-1)
        if wl.shape != t.shape:
            raise ShapeMismatch("signature wavelengths and coefficients differ in length", module="mf")
        if not np.any(t != 0):
            raise ValueError("target signature is all zeros")
        object.__setattr__(self, "wavelengths_nm", wl)
        object.__setattr__(self, "t", t)

    def align(self, wavelengths_nm: np.ndarray) -> np.ndarray:
        """Coefficients on ``wavelengths_nm``; linear interpolation if the grids differ."""
        wl = np.asarray(wavelengths_nm, dtype=np.float64)
        if wl.shape == self.wavelengths_nm.shape and np.allclose(wl, self.wavelengths_nm, rtol=0, atol=1e-6):
            return self.t
        if wl.min() < self.wavelengths_nm.min() - 1e-6 or wl.max() > self.wavelengths_nm.max() + 1e-6:
            raise ShapeMismatch("cube wavelengths fall outside the signature grid", module="mf")
        return np.interp(wl, self.wavelengths_nm, self.t)


def synthetic_signature(
    wavelengths_nm,
    centers_nm=CH4_LINES_NM,
    width_nm: float = 12.0,
    depth: float = 1e-4,
) -> TargetSignature:
    """Sum of Gaussian absorption lines, ``depth`` per ppm m at each line centre."""
    wl = np.asarray(wavelengths_nm, dtype=np.float64)
    t = np.zeros_like(wl)
    for c in centers_nm:
        t += depth * np.exp(-0.5 * ((wl - c) / width_nm) ** 2)
    return TargetSignature(wl, t, "synthetic")


@dataclass(frozen=True)
class ColumnStats:
    """Background mean and loaded covariance per group, with Cholesky factors.

    ``group_index[c]`` is the group used for image column ``c``.
    """

    mean: np.ndarray  # (groups, bands)
    cov: np.ndarray  # (groups, bands, bands), loading included
    chol: np.ndarray  # lower factors of ``cov``
    group_index: np.ndarray  # (cols,)
    shrinkage: float
    grouping: str
    counts: np.ndarray

    @property
    def bands(self) -> int:
        return int(self.mean.shape[1])

    @classmethod
    def from_known(cls, mean, cov, cols: int, shrinkage: float = 0.0) -> ColumnStats:
        """Global statistics from a known background model (test oracles, simulations)."""
        mean = np.asarray(mean, dtype=np.float64)[None, :]
        cov = np.asarray(cov, dtype=np.float64)[None, :, :]
        loaded, chol = _load_and_factor(cov, shrinkage)
        return cls(mean, loaded, chol, np.zeros(cols, dtype=np.int64), shrinkage, "known",
                   np.zeros(1, dtype=np.int64))


def _load_and_factor(cov: np.ndarray, shrinkage: float) -> tuple[np.ndarray, np.ndarray]:
    bands = cov.shape[-1]
    diag_mean = np.trace(cov, axis1=1, axis2=2) / bands
    # a zero-variance group still gets a unit-scale load so lambda > 0 suffices
    scale = np.where(diag_mean > 0, diag_mean, 1.0)
    loaded = cov + (shrinkage * scale)[:, None, None] * np.eye(bands)[None]
    loaded = 0.5 * (loaded + np.swapaxes(loaded, 1, 2))
    chol = np.empty_like(loaded)
    for g in range(loaded.shape[0]):
        try:
            chol[g] = linalg.cholesky(loaded[g], lower=True, check_finite=True)
        except (linalg.LinAlgError, ValueError) as exc:
            raise SingularCovariance(
                f"covariance of group {g} is not positive definite after loading "
                f"(shrinkage={shrinkage}); increase the shrinkage"
            ) from exc
    return loaded, chol


def _column_moments(x: np.ndarray, valid: np.ndarray):
    """Per-column pixel count, mean and divisor-N covariance over valid pixels."""
    rows, cols, bands = x.shape
    counts = valid.sum(axis=0).astype(np.int64)
    mean = np.zeros((cols, bands))
    cov = np.zeros((cols, bands, bands))
    for c0 in range(0, cols, _COLUMN_CHUNK):
        c1 = min(cols, c0 + _COLUMN_CHUNK)
        v = valid[:, c0:c1]
        xs = np.where(v[..., None], x[:, c0:c1], 0.0)
        n = np.maximum(counts[c0:c1], 1)
        mu = xs.sum(axis=0) / n[:, None]
        d = np.where(v[..., None], xs - mu[None], 0.0)
        cov[c0:c1] = np.einsum("rcb,rcd->cbd", d, d, optimize=False) / n[:, None, None]
        mean[c0:c1] = mu
    return counts, mean, cov


def estimate_background(cube: HyperCube, grouping: str = "column",
                        shrinkage: float = DEFAULT_SHRINKAGE) -> ColumnStats:
    """Background statistics per pushbroom column (default) or for the whole scene.

    Columns with fewer than ``bands + 1`` valid pixels fall back to the global
    statistics. Loading adds ``shrinkage * mean(diag(cov))`` to the diagonal.
    """
    if grouping not in ("column", "global"):
        raise ValueError(f"unknown grouping {grouping!r}")
    x = cube.data.astype(np.float64)
    valid = cube.valid_mask
    bands = cube.bands
    n_all = int(valid.sum())

    def global_moments():
        if n_all < bands + 1:
            raise TooFewPixels(f"{n_all} valid pixels, need at least {bands + 1}")
        px = x[valid]
        mu = px.mean(axis=0)
        d = px - mu
        return mu, np.einsum("nb,nd->bd", d, d, optimize=False) / n_all

    if grouping == "global":
        mu, cov = global_moments()
        loaded, chol = _load_and_factor(cov[None], shrinkage)
        return ColumnStats(mu[None], loaded, chol, np.zeros(cube.cols, dtype=np.int64),
                           shrinkage, "global", np.array([n_all]))

    counts, mean, cov = _column_moments(x, valid)
    short = counts < bands + 1
    group_index = np.arange(cube.cols, dtype=np.int64)
    if short.any():
        used = short & (counts > 0)
        if used.any():
            logger.warning("%d columns have fewer than %d valid pixels; using global statistics",
                           int(used.sum()), bands + 1)
        mu, gcov = global_moments()
        mean[short] = mu
        cov[short] = gcov
    loaded, chol = _load_and_factor(cov, shrinkage)
    return ColumnStats(mean, loaded, chol, group_index, shrinkage, "column", counts)


def matched_filter(cube: HyperCube, stats: ColumnStats, signature: TargetSignature,
                   mode: str = "mean-scaled") -> np.ndarray:
    """Per-pixel alpha map; invalid pixels are NaN."""
    if mode not in ("mean-scaled", "raw"):
        raise ValueError(f"unknown mode {mode!r}")
    t = signature.align(cube.wavelengths_nm)
    if stats.bands != cube.bands or t.shape[0] != cube.bands:
        raise ShapeMismatch(
            f"band counts differ: cube {cube.bands}, stats {stats.bands}, signature {t.shape[0]}",
            module="mf",
        )
    if stats.group_index.shape[0] != cube.cols:
        raise ShapeMismatch("statistics were estimated for a different column count", module="mf")
    q = stats.mean * t[None, :] if mode == "mean-scaled" else np.broadcast_to(t, stats.mean.shape)
    w = np.empty_like(stats.mean)
    for g in range(stats.mean.shape[0]):
        w[g] = linalg.cho_solve((stats.chol[g], True), q[g])
    norm = np.einsum("gb,gb->g", q, w)
    gi = stats.group_index
    x = cube.data.astype(np.float64)
    dev = x - stats.mean[gi][None, :, :]
    alpha = np.einsum("rcb,cb->rc", dev, w[gi], optimize=False) / norm[gi][None, :]
    alpha[~cube.valid_mask] = np.nan
    return alpha


def alpha_to_enhancement(alpha: np.ndarray) -> np.ndarray:
    return -np.asarray(alpha)


def threshold_alpha(enhancement: np.ndarray, threshold: float = DEFAULT_MASK_THRESHOLD,
                    valid: np.ndarray | None = None) -> np.ndarray:
    """Binary plume mask ``enhancement >= threshold`` restricted to valid pixels."""
    if np.isnan(threshold):
        raise ValueError("threshold must not be NaN")
    enhancement = np.asarray(enhancement, dtype=np.float64)
    if valid is None:
        valid = ~np.isnan(enhancement)
    with np.errstate(invalid="ignore"):
        return (enhancement >= threshold) & valid
