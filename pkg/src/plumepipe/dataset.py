"""ML-ready tile sets: validity-filtered tiling, spatial jitter, image-level splits."""

from __future__ import annotations

import json
import math
import zlib
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

import numpy as np

from .errors import BadStride, OffsetTooLarge, ShapeMismatch, TooFewImages
from .io import dumps_json, write_hsc, write_raster
from .raster import HyperCube

__all__ = [
    "LabeledImage",
    "Tile",
    "SplitManifest",
    "STRONG_PLUME_PPM_M",
    "tile_origins",
    "tile_raster",
    "jitter_tiles",
    "split_images",
    "split_sizes",
    "tile_label",
    "strong_flag",
    "max_enhancement",
    "write_tileset",
    "read_manifest",
]

STRONG_PLUME_PPM_M = 900.0
TILE_SIZE = 128
MIN_VALID_FRAC = 0.8
DEFAULT_FRACTIONS = (0.80, 0.15, 0.05)
SPLITS = ("train", "val", "test")
UNASSIGNED = "unassigned"


def tile_label(mask_crop: np.ndarray) -> bool:
    """A tile shows a plume iff at least one pixel is positive."""
    return bool(np.any(np.asarray(mask_crop)))


def max_enhancement(enhancement_crop: np.ndarray, mask_crop: np.ndarray | None = None) -> float:
    """Largest enhancement over mask-positive pixels (all pixels if no mask); 0 if none."""
    enh = np.asarray(enhancement_crop, dtype=np.float64)
    if mask_crop is not None:
        enh = enh[np.asarray(mask_crop, dtype=bool)]
    enh = enh[~np.isnan(enh)]
    return float(enh.max()) if enh.size else 0.0


def strong_flag(enhancement_crop: np.ndarray, threshold: float = STRONG_PLUME_PPM_M,
                mask_crop: np.ndarray | None = None) -> bool:
    """Strong plume iff the maximum enhancement reaches ``threshold`` (inclusive)."""
    return max_enhancement(enhancement_crop, mask_crop) >= threshold


@dataclass
class LabeledImage:
    """A cube with its plume annotation and enhancement map on the same grid."""

    image_id: str
    cube: HyperCube
    mask: np.ndarray
    enhancement: np.ndarray

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=bool)
        self.enhancement = np.asarray(self.enhancement, dtype=np.float64)
        shape = (self.cube.rows, self.cube.cols)
        if self.mask.shape != shape or self.enhancement.shape != shape:
            raise ShapeMismatch(
                f"cube {shape}, mask {self.mask.shape}, enhancement {self.enhancement.shape}",
                module="dataset",
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.cube.rows, self.cube.cols


@dataclass
class Tile:
    image: LabeledImage = field(repr=False, compare=False)
    origin: tuple[int, int]
    size: int
    jitter: tuple[int, int] = (0, 0)
    split: str = UNASSIGNED
    label: bool = False
    strong: bool = False
    max_enhancement_ppm_m: float = 0.0
    valid_frac: float = 1.0

    @property
    def image_id(self) -> str:
        return self.image.image_id

    @property
    def top_left(self) -> tuple[int, int]:
        return self.origin[0] + self.jitter[0], self.origin[1] + self.jitter[1]

    @property
    def key(self) -> tuple[str, int, int, int]:
        r, c = self.top_left
        return self.image_id, r, c, self.size

    def _window(self) -> tuple[slice, slice]:
        r, c = self.top_left
        return slice(r, r + self.size), slice(c, c + self.size)

    @property
    def cube(self) -> HyperCube:
        r, c = self.top_left
        return self.image.cube.crop(r, c, self.size, self.size)

    @property
    def mask(self) -> np.ndarray:
        return self.image.mask[self._window()] & self.valid

    @property
    def enhancement(self) -> np.ndarray:
        return self.image.enhancement[self._window()]

    @property
    def valid(self) -> np.ndarray:
        return self.image.cube.valid_mask[self._window()]

    def record(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "origin": list(self.origin),
            "jitter": list(self.jitter),
            "size": self.size,
            "split": self.split,
            "label": self.label,
            "strong": self.strong,
            "max_enhancement_ppm_m": self.max_enhancement_ppm_m,
            "valid_frac": self.valid_frac,
        }


def tile_origins(n: int, size: int, stride: int) -> list[int]:
    """Origins ``0, stride, 2*stride, ...`` with the last tile clamped to the edge."""
    if n < size:
        return []
    origins = list(range(0, n - size + 1, stride))
    if origins[-1] + size < n:
        origins.append(n - size)
    return origins


def _keep(valid_count: int, total: int, min_valid_frac: float) -> bool:
    # strict "over" comparison in exact rational arithmetic
    frac = Fraction(repr(float(min_valid_frac)))
    return valid_count * frac.denominator > frac.numerator * total


def _make_tile(image: LabeledImage, origin, size, jitter, min_valid_frac, threshold, split):
    r, c = origin[0] + jitter[0], origin[1] + jitter[1]
    rows, cols = image.shape
    if r < 0 or c < 0 or r + size > rows or c + size > cols:
        return None
    valid = image.cube.valid_mask[r : r + size, c : c + size]
    n_valid = int(valid.sum())
    if not _keep(n_valid, size * size, min_valid_frac):
        return None
    mask = image.mask[r : r + size, c : c + size] & valid
    peak = max_enhancement(image.enhancement[r : r + size, c : c + size], mask)
    return Tile(
        image=image,
        origin=(int(origin[0]), int(origin[1])),
        size=int(size),
        jitter=(int(jitter[0]), int(jitter[1])),
        split=split,
        label=tile_label(mask),
        strong=peak >= threshold,
        max_enhancement_ppm_m=peak,
        valid_frac=n_valid / (size * size),
    )


def tile_raster(
    cube: HyperCube | LabeledImage,
    mask: np.ndarray | None = None,
    enhancement: np.ndarray | None = None,
    size: int = TILE_SIZE,
    stride: int | None = None,
    min_valid_frac: float = MIN_VALID_FRAC,
    image_id: str = "",
    strong_threshold: float = STRONG_PLUME_PPM_M,
    split: str = UNASSIGNED,
) -> list[Tile]:
    """Cut ``size x size`` tiles, keeping those with strictly more than
    ``min_valid_frac`` valid pixels."""
    if isinstance(cube, LabeledImage):
        image = cube
    else:
        if mask is None:
            mask = np.zeros((cube.rows, cube.cols), dtype=bool)
        if enhancement is None:
            enhancement = np.zeros((cube.rows, cube.cols))
        image = LabeledImage(image_id or str(cube.attrs.get("image_id", "")), cube, mask, enhancement)
    stride = size if stride is None else stride
    if not 0 < stride <= size:
        raise BadStride(f"stride must satisfy 0 < stride <= size, got {stride} for size {size}")
    rows, cols = image.shape
    tiles = []
    for r in tile_origins(rows, size, stride):
        for c in tile_origins(cols, size, stride):
            t = _make_tile(image, (r, c), size, (0, 0), min_valid_frac, strong_threshold, split)
            if t is not None:
                tiles.append(t)
    return tiles


def _tile_rng(seed: int, tile: Tile) -> np.random.Generator:
    # per-tile stream: independent of tile order and of worker scheduling
    key = zlib.crc32(tile.image_id.encode("utf-8"))
    return np.random.default_rng([int(seed), key, tile.origin[0], tile.origin[1]])


def jitter_tiles(
    tiles: Sequence[Tile],
    offsets: Iterable[tuple[int, int]] | None = None,
    rng_seed: int = 0,
    samples_per_tile: int = 4,
    max_offset: int = 32,
    include_negatives: bool = False,
    augment_splits: Iterable[str] = ("train", "val", UNASSIGNED),
    min_valid_frac: float = MIN_VALID_FRAC,
    strong_threshold: float = STRONG_PLUME_PPM_M,
) -> list[Tile]:
    """Originals plus shifted re-crops of plume tiles.

    With explicit ``offsets`` every offset is tried on every eligible tile;
    otherwise ``samples_per_tile`` offsets are drawn uniformly from
    ``[-max_offset, max_offset]^2`` per tile. A shifted crop is kept only if it
    stays in bounds, passes the validity rule and does not duplicate a tile
    already present. Labels of shifted crops are recomputed from the crop.
    """
    explicit = None if offsets is None else [(int(a), int(b)) for a, b in offsets]
    augment_splits = set(augment_splits)
    out = list(tiles)
    seen = {t.key for t in out}
    for t in tiles:
        limit = t.size / 2
        if explicit is not None:
            cand = explicit
        else:
            if max_offset > limit:
                raise OffsetTooLarge(f"max_offset {max_offset} exceeds half the tile size ({limit:g})")
            draws = _tile_rng(rng_seed, t).integers(-max_offset, max_offset + 1, size=(samples_per_tile, 2))
            cand = [(int(a), int(b)) for a, b in draws]
        for d in cand:
            if abs(d[0]) > limit or abs(d[1]) > limit:
                raise OffsetTooLarge(f"offset {d} exceeds half the tile size ({limit:g})")
        if t.split not in augment_splits or t.jitter != (0, 0):
            continue
        if not (t.label or include_negatives):
            continue
        for d in cand:
            j = _make_tile(t.image, t.origin, t.size, d, min_valid_frac, strong_threshold, t.split)
            if j is None or j.key in seen:
                continue
            seen.add(j.key)
            out.append(j)
    return out


@dataclass(frozen=True)
class SplitManifest:
    train_image_ids: tuple[str, ...]
    val_image_ids: tuple[str, ...]
    test_image_ids: tuple[str, ...]
    seed: int
    fractions: tuple[float, float, float]

    @property
    def assignments(self) -> dict[str, str]:
        out = {}
        for name, ids in zip(SPLITS, (self.train_image_ids, self.val_image_ids, self.test_image_ids)):
            for i in ids:
                out[i] = name
        return dict(sorted(out.items()))

    def split_of(self, image_id: str) -> str:
        return self.assignments.get(image_id, UNASSIGNED)

    def to_dict(self) -> dict[str, Any]:
        return {"seed": self.seed, "fractions": list(self.fractions), "assignments": self.assignments}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SplitManifest:
        by = {s: [] for s in SPLITS}
        for image_id, s in sorted(d["assignments"].items()):
            by[s].append(image_id)
        return cls(tuple(by["train"]), tuple(by["val"]), tuple(by["test"]),
                   int(d["seed"]), tuple(float(f) for f in d["fractions"]))


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def split_sizes(n: int, fractions=DEFAULT_FRACTIONS, mode: str = "holdout") -> tuple[int, int, int]:
    """(train, val, test) image counts.

    ``holdout``: test takes ``ceil(f_test * n)`` images and train/val divide the
    rest in proportion ``f_train : f_val``. ``flat``: train ``round(f_train*n)``,
    test ``ceil(f_test*n)``, val the remainder. Every split with a positive
    fraction keeps at least one image.
    """
    f_train, f_val, f_test = (Fraction(repr(float(f))) for f in fractions)
    n_test = math.ceil(f_test * n)
    rest = n - n_test
    if mode == "holdout":
        n_train = _round_half_up(rest * f_train / (f_train + f_val)) if f_train + f_val else 0
    elif mode == "flat":
        n_train = _round_half_up(f_train * n)
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    if f_val > 0:
        n_train = min(n_train, rest - 1)
    if f_train > 0:
        n_train = max(n_train, 1)
    n_train = min(max(n_train, 0), rest)
    return n_train, rest - n_train, n_test


def split_images(image_ids: Iterable[str], seed: int, fractions=DEFAULT_FRACTIONS,
                 mode: str = "holdout") -> SplitManifest:
    """Seeded image-level split; the same ids and seed always give the same manifest."""
    ids = sorted(set(image_ids))
    if len(ids) < 3:
        raise TooFewImages(f"need at least 3 images, got {len(ids)}")
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    n_train, n_val, n_test = split_sizes(len(ids), fractions, mode)
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    test = shuffled[:n_test]
    train = shuffled[n_test : n_test + n_train]
    val = shuffled[n_test + n_train :]
    return SplitManifest(tuple(sorted(train)), tuple(sorted(val)), tuple(sorted(test)), int(seed), fractions)


def write_tileset(tiles: Sequence[Tile], out_dir: str | Path, manifest_name: str = "tiles.jsonl") -> Path:
    """Write tile payloads into per-image HSC shards and a JSON-lines manifest.

    Each shard is a concatenation of HSC records; manifest paths are relative to
    ``out_dir`` and carry the byte offset and length of every record.
    """
    out_dir = Path(out_dir)
    shard_dir = out_dir / "shards"
    shard_dir.mkdir(parents=True, exist_ok=True)
    by_image: dict[str, list[Tile]] = {}
    for t in tiles:
        by_image.setdefault(t.image_id, []).append(t)
    records: dict[int, dict[str, Any]] = {}
    position = {id(t): i for i, t in enumerate(tiles)}
    for image_id, group in by_image.items():
        stem = _safe_name(image_id)
        paths = {k: shard_dir / f"{stem}.{k}.hsc" for k in ("cube", "mask", "enhancement")}
        offsets = dict.fromkeys(paths, 0)
        with open(paths["cube"], "wb") as fc, open(paths["mask"], "wb") as fm, open(paths["enhancement"], "wb") as fe:
            for t in group:
                rec = t.record()
                sizes = {
                    "cube": write_hsc(fc, t.cube, {"image_id": image_id}),
                    "mask": write_raster(fm, t.mask.astype(np.float32), t.valid, {"image_id": image_id}),
                    "enhancement": write_raster(fe, t.enhancement, t.valid,
                                                {"image_id": image_id, "units": "ppm_m"}),
                }
                for k in paths:
                    rec[f"{k}_path"] = paths[k].relative_to(out_dir).as_posix()
                    rec[f"{k}_offset"] = offsets[k]
                    rec[f"{k}_nbytes"] = sizes[k]
                    offsets[k] += sizes[k]
                records[position[id(t)]] = rec
    manifest = out_dir / manifest_name
    with open(manifest, "w", encoding="utf-8") as fh:
        for i in range(len(tiles)):
            fh.write(dumps_json(records[i]) + "\n")
    return manifest


def read_manifest(path: str | Path) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _safe_name(s: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in s) or "image"
