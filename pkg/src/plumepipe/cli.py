"""``plumepipe`` command line: synthetic scenes to evaluation reports.

Stages read and write a small JSON index per stage under the output root::

    synth/index.json      scenes: native radiance, GLT, ortho annotations
    ortho/index.json      dataset: orthorectified radiance + ortho annotations
    unortho/index.json    dataset: native radiance + back-projected annotations
    bands/, normalize/    dataset with transformed cubes
    split/split.json      image-level train/val/test assignment
    stats/stats.json      per-band mean and population std
    tile/, jitter/        tiles.jsonl manifest + HSC shards
    mf/index.json         matched-filter enhancement and masks
    eval/report.{json,csv}, report/improvements.{json,csv}

Every stage writes ``provenance.json`` (config hash, sha256 of inputs and
outputs, tool version). A stage whose provenance still matches its config and
files is skipped unless ``--force`` is given.

Settings come from built-in defaults, then the ``--config`` JSON file (one
section per stage), then command-line flags. Relative paths in the config are
taken relative to the working directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .dataset import (
    LabeledImage,
    SplitManifest,
    Tile,
    _safe_name,
    jitter_tiles,
    read_manifest,
    split_images,
    strong_flag,
    tile_raster,
    write_tileset,
)
from .errors import ConfigError, IoError, PlumepipeError
from .geometry import CombineRule, orthorectify, source_footprint, unorthorectify
from .io import (
    dumps_json,
    read_glt,
    read_hsc,
    read_raster,
    read_signature,
    write_glt,
    write_hsc,
    write_raster,
    write_signature,
)
from .matched_filter import (
    TargetSignature,
    alpha_to_enhancement,
    estimate_background,
    matched_filter,
    threshold_alpha,
)
from .metrics import (
    improvements_to_csv,
    pixel_metrics,
    reports_to_csv,
    table_improvements,
    tile_metrics,
)
from .raster import BandSelection, BandStats, HyperCube, band_stats, normalize, select_bands
from .synth import Distortion, Plume, SceneSpec, gen_glt, gen_scene, scale_covariance_for_snr

logger = logging.getLogger("plumepipe")

SUBCOMMANDS = ("synth", "ortho", "unortho", "bands", "tile", "jitter", "split",
               "stats", "normalize", "mf", "eval", "report")
_HSC_STRUCTURAL = {"rows", "cols", "bands", "dtype", "interleave", "wavelengths_nm", "fill_value", "has_mask"}
_IMAGE_PATH_KEYS = ("cube", "glt", "mask", "enhancement", "truth_mask", "truth_enhancement",
                    "spec", "signature")


# ---------------------------------------------------------------- config


@dataclass
class PathParams:
    index: str | None = None
    split: str | None = None
    stats: str | None = None
    tiles: str | None = None
    pred: str | None = None
    table: str | None = None
    signature: str | None = None


@dataclass
class SynthParams:
    count: int = 4
    rows: int = 128
    cols: int = 128
    bands: int = 32
    plumes_per_scene: int = 2
    peak_range: list[float] = field(default_factory=lambda: [300.0, 2500.0])
    sigma_range: list[float] = field(default_factory=lambda: [3.0, 10.0])
    skew_range: list[float] = field(default_factory=lambda: [0.0, 0.4])
    scale_range: list[float] = field(default_factory=lambda: [0.8, 1.25])
    wobble_amplitude: float = 1.5
    wobble_period: float = 48.0
    pad: int = 2
    snr: float | None = 20.0
    snr_reference_ppm_m: float = 1000.0
    injection: str = "linear"
    scenes: list[dict[str, Any]] | None = None


@dataclass
class UnorthoParams:
    mask_combine: str = "union"
    enhancement_combine: str = "max"
    radiance: str = "native"  # or "reconstruct"
    margin: float = 0.0
    footprint: str = "span"


@dataclass
class BandParams:
    ranges_nm: list[list[float]] = field(default_factory=lambda: [[1573.0, 1699.0], [2004.0, 2478.0]])
    rgb_wavelengths_nm: list[float] = field(default_factory=lambda: [462.0, 550.0, 640.0])
    expected_count: int | None = None


@dataclass
class TileParams:
    size: int = 128
    stride: int | None = None
    min_valid_frac: float = 0.8


@dataclass
class JitterParams:
    samples_per_tile: int = 4
    max_offset: int = 32
    include_negatives: bool = False
    augment_splits: list[str] = field(default_factory=lambda: ["train", "val", "unassigned"])


@dataclass
class SplitParams:
    fractions: list[float] = field(default_factory=lambda: [0.8, 0.15, 0.05])
    mode: str = "holdout"


@dataclass
class StatsParams:
    split: str | None = "train"
    eps: float = 1e-6


@dataclass
class MfParams:
    grouping: str = "column"
    shrinkage: float = 1e-4
    mode: str = "mean-scaled"
    mask_threshold_ppm_m: float = 500.0


@dataclass
class EvalParams:
    strata: list[str] = field(default_factory=lambda: ["all", "strong"])
    aggregate: str = "micro"
    model: str = "matched-filter"
    split: str | None = None


@dataclass
class PipelineConfig:
    out: str = "plumepipe-out"
    seed: int = 0
    workers: int = 0
    threshold_ppm_m: float = 900.0
    paths: PathParams = field(default_factory=PathParams)
    synth: SynthParams = field(default_factory=SynthParams)
    unortho: UnorthoParams = field(default_factory=UnorthoParams)
    bands: BandParams = field(default_factory=BandParams)
    tile: TileParams = field(default_factory=TileParams)
    jitter: JitterParams = field(default_factory=JitterParams)
    split: SplitParams = field(default_factory=SplitParams)
    stats: StatsParams = field(default_factory=StatsParams)
    mf: MfParams = field(default_factory=MfParams)
    eval: EvalParams = field(default_factory=EvalParams)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> PipelineConfig:
        return _build(cls, d, "config")

    def effective_workers(self) -> int:
        return self.workers if self.workers > 0 else (os.cpu_count() or 1)


def _build(cls, d: Any, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for name, value in d.items():
        default = fields[name].default_factory if fields[name].default_factory is not dataclasses.MISSING else None
        sub = default() if default is not None else None
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path: str | None) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return PipelineConfig.from_dict(raw)


def apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    """Flags win over the config file."""
    top = {k: getattr(args, k) for k in ("out", "seed", "workers", "threshold_ppm_m")
           if getattr(args, k, None) is not None}
    cfg = dataclasses.replace(cfg, **top)
    paths = {k: getattr(args, k) for k in ("index", "split", "stats", "tiles", "pred", "signature")
             if getattr(args, k, None) is not None}
    if paths:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, **paths))
    if cfg.workers < 0:
        raise ConfigError("workers must be >= 0")
    return cfg


# ---------------------------------------------------------------- runs


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class StageRun:
    """Tracks files read and written by one stage and its provenance record."""

    def __init__(self, stage: str, base: Path, prov_path: Path, settings: dict[str, Any]):
        self.stage = stage
        self.base = base
        self.prov_path = prov_path
        self.inputs: set[Path] = set()
        self.outputs: set[Path] = set()
        self._lock = threading.Lock()
        self.config_hash = hashlib.sha256(
            dumps_json({"stage": stage, "version": __version__, "settings": settings}).encode()
        ).hexdigest()

    def _rel(self, p: Path) -> str:
        return Path(os.path.relpath(Path(p).resolve(), self.base.resolve())).as_posix()

    def read(self, p: str | Path) -> Path:
        p = Path(p)
        if not p.exists():
            raise IoError(f"input file {p} does not exist")
        with self._lock:
            self.inputs.add(p)
        return p

    def wrote(self, p: str | Path) -> Path:
        with self._lock:
            self.outputs.add(Path(p))
        return Path(p)

    def up_to_date(self) -> bool:
        if not self.prov_path.exists():
            return False
        try:
            prov = json.loads(self.prov_path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            return False
        if prov.get("config_hash") != self.config_hash or not prov.get("outputs"):
            return False
        for section in ("inputs", "outputs"):
            for rel, digest in prov.get(section, {}).items():
                p = self.base / rel
                if not p.is_file() or sha256_file(p) != digest:
                    return False
        return True

    def record(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "tool": "plumepipe",
            "version": __version__,
            "config_hash": self.config_hash,
            "inputs": {self._rel(p): sha256_file(p) for p in sorted(self.inputs)},
            "outputs": {self._rel(p): sha256_file(p) for p in sorted(self.outputs)},
        }

    def finish(self) -> None:
        self.prov_path.parent.mkdir(parents=True, exist_ok=True)
        self.prov_path.write_text(dumps_json(self.record()) + "\n", encoding="utf-8")


def pmap(fn: Callable, items: list, workers: int) -> list:
    """Ordered map over a bounded thread pool; ``workers <= 1`` runs inline."""
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def _write_json(run: StageRun, path: Path, obj: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_json(obj) + "\n", encoding="utf-8")
    return run.wrote(path)


def _write_text(run: StageRun, path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return run.wrote(path)


def load_index(path: Path, run: StageRun | None = None) -> dict[str, Any]:
    """Read an index file; image paths come back absolute."""
    if run is not None:
        run.read(path)
    try:
        index = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise IoError(f"cannot read index {path}: {exc}") from exc
    root = Path(path).parent
    for img in index.get("images", []):
        for k in _IMAGE_PATH_KEYS:
            if img.get(k) is not None:
                img[k] = (root / img[k]).resolve()
    return index


def write_index(run: StageRun, path: Path, kind: str, images: list[dict[str, Any]]) -> Path:
    root = path.parent
    out = []
    for img in sorted(images, key=lambda e: e["image_id"]):
        e = dict(img)
        for k in _IMAGE_PATH_KEYS:
            if e.get(k) is not None:
                e[k] = Path(os.path.relpath(Path(e[k]).resolve(), root.resolve())).as_posix()
        out.append(e)
    return _write_json(run, path, {"kind": kind, "images": out})


def _require(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} {p} does not exist")
    return p


def _default_or(cfg_path: str | None, fallback: Path, what: str, required: bool = True) -> Path | None:
    if cfg_path is not None:
        return _require(cfg_path, what)
    if fallback.exists():
        return fallback
    if required:
        raise ConfigError(f"no {what} given and {fallback} does not exist")
    return None


def _read_mask(run: StageRun, path: Path) -> tuple[np.ndarray, np.ndarray]:
    values, valid, _ = read_raster(run.read(path))
    return (values > 0.5) & valid, valid


def _read_enhancement(run: StageRun, path: Path) -> np.ndarray:
    values, valid, _ = read_raster(run.read(path))
    out = values.astype(np.float64)
    out[~valid] = np.nan
    return out


def _load_labeled(run: StageRun, img: dict[str, Any]) -> LabeledImage:
    cube, _ = read_hsc(run.read(img["cube"]))
    mask, mask_valid = _read_mask(run, img["mask"])
    enh = _read_enhancement(run, img["enhancement"])
    valid = cube.valid_mask & mask_valid
    if not np.array_equal(valid, cube.valid_mask):
        cube = cube.replace(valid_mask=valid)
    return LabeledImage(img["image_id"], cube, mask & valid, np.where(valid, enh, np.nan))


def _signature_for(run: StageRun, cfg: PipelineConfig, img: dict[str, Any]) -> TargetSignature:
    path = cfg.paths.signature or img.get("signature")
    if path is None:
        raise ConfigError(f"no target signature for image {img['image_id']}")
    wl, t = read_signature(run.read(path))
    return TargetSignature(wl, t, str(path))


def _extra(header: dict[str, Any]) -> dict[str, Any]:
    return {k: v for k, v in header.items() if k not in _HSC_STRUCTURAL}


# ---------------------------------------------------------------- stages


def scene_specs(p: SynthParams, seed: int) -> list[SceneSpec]:
    """Scene specs from explicit ``scenes`` or drawn from the parameter ranges."""
    if p.scenes:
        return [SceneSpec.from_dict(d) for d in p.scenes]
    specs = []
    for i in range(p.count):
        rng = np.random.default_rng([seed, i])
        plumes = [
            Plume(
                row=float(rng.uniform(0.15, 0.85) * p.rows),
                col=float(rng.uniform(0.15, 0.85) * p.cols),
                sigma=float(rng.uniform(*p.sigma_range)),
                peak=float(rng.uniform(*p.peak_range)),
            )
            for _ in range(p.plumes_per_scene)
        ]
        dist = Distortion(
            skew=float(rng.uniform(*p.skew_range)),
            wobble_amplitude=p.wobble_amplitude,
            wobble_period=p.wobble_period,
            scale=float(rng.uniform(*p.scale_range)),
            pad=p.pad,
        )
        spec = SceneSpec(rows=p.rows, cols=p.cols, bands=p.bands, plumes=plumes, distortion=dist,
                         injection=p.injection, seed=int(rng.integers(2**31)), image_id=f"scene{i:03d}")
        if p.snr:
            cov = scale_covariance_for_snr(spec.mean_spectrum(), spec.covariance(), spec.signature().t,
                                           p.snr_reference_ppm_m, p.snr)
            spec.background_cov = cov.tolist()
        specs.append(spec)
    return specs


def stage_synth(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    specs = scene_specs(cfg.synth, cfg.seed)
    ids = [s.image_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ConfigError("scene image_ids must be unique")

    def one(spec: SceneSpec) -> dict[str, Any]:
        cube, conc, mask = gen_scene(spec)
        glt = gen_glt(spec)
        d = stage_dir / _safe_name(spec.image_id)
        d.mkdir(parents=True, exist_ok=True)
        meta = {"image_id": spec.image_id}
        e = {"image_id": spec.image_id}
        _write_json(run, d / "spec.json", spec.to_dict())
        e["spec"] = d / "spec.json"
        write_hsc(d / "radiance.hsc", cube, meta)
        e["cube"] = run.wrote(d / "radiance.hsc")
        write_glt(d / "glt.glt", glt)
        e["glt"] = run.wrote(d / "glt.glt")
        write_raster(d / "truth_mask.hsc", mask.astype(np.float32), None, meta)
        e["truth_mask"] = run.wrote(d / "truth_mask.hsc")
        write_raster(d / "truth_enhancement.hsc", conc, None, {**meta, "units": "ppm_m"})
        e["truth_enhancement"] = run.wrote(d / "truth_enhancement.hsc")
        mapped = glt.mapped
        write_raster(d / "annotation_mask.hsc", orthorectify(mask, glt).astype(np.float32), mapped, meta)
        e["mask"] = run.wrote(d / "annotation_mask.hsc")
        write_raster(d / "annotation_enhancement.hsc", orthorectify(conc, glt), mapped, {**meta, "units": "ppm_m"})
        e["enhancement"] = run.wrote(d / "annotation_enhancement.hsc")
        sig = spec.signature()
        write_signature(d / "signature.txt", sig.wavelengths_nm, sig.t, "unit absorption per ppm m")
        e["signature"] = run.wrote(d / "signature.txt")
        return e

    images = pmap(one, specs, cfg.effective_workers())
    write_index(run, stage_dir / "index.json", "scenes", images)


def stage_ortho(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    index = load_index(_default_or(cfg.paths.index, Path(cfg.out) / "synth" / "index.json", "scene index"), run)

    def one(img: dict[str, Any]) -> dict[str, Any]:
        cube, header = read_hsc(run.read(img["cube"]))
        glt = read_glt(run.read(img["glt"]))
        out = stage_dir / f"{_safe_name(img['image_id'])}.cube.hsc"
        write_hsc(out, orthorectify(cube, glt), _extra(header))
        e = {k: img.get(k) for k in ("image_id", "mask", "enhancement", "signature")}
        e["cube"] = run.wrote(out)
        for k in ("mask", "enhancement", "signature"):
            if e[k] is not None:
                run.read(e[k])
        return e

    images = pmap(one, index["images"], cfg.effective_workers())
    write_index(run, stage_dir / "index.json", "dataset", images)


def stage_unortho(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    p = cfg.unortho
    index = load_index(_default_or(cfg.paths.index, Path(cfg.out) / "synth" / "index.json", "scene index"), run)

    def one(img: dict[str, Any]) -> dict[str, Any]:
        glt = read_glt(run.read(img["glt"]))
        name = _safe_name(img["image_id"])
        meta = {"image_id": img["image_id"]}
        region = source_footprint(glt, p.margin, p.footprint)
        mask, _ = _read_mask(run, img["mask"])
        back_mask = unorthorectify(mask, glt, p.mask_combine, p.margin, p.footprint)
        write_raster(stage_dir / f"{name}.mask.hsc", np.asarray(back_mask, dtype=np.float32), region, meta)
        enh = _read_enhancement(run, img["enhancement"])
        back_enh = unorthorectify(enh, glt, p.enhancement_combine, p.margin, p.footprint)
        write_raster(stage_dir / f"{name}.enhancement.hsc", back_enh, region, {**meta, "units": "ppm_m"})
        e = {"image_id": img["image_id"], "signature": img.get("signature"),
             "mask": run.wrote(stage_dir / f"{name}.mask.hsc"),
             "enhancement": run.wrote(stage_dir / f"{name}.enhancement.hsc")}
        if p.radiance == "native":
            e["cube"] = run.read(img["cube"])
        elif p.radiance == "reconstruct":
            cube, header = read_hsc(run.read(img["cube"]))
            rec = unorthorectify(orthorectify(cube, glt), glt, CombineRule.FIRST, p.margin, p.footprint)
            write_hsc(stage_dir / f"{name}.cube.hsc", rec, _extra(header))
            e["cube"] = run.wrote(stage_dir / f"{name}.cube.hsc")
        else:
            raise ConfigError(f"unortho.radiance must be 'native' or 'reconstruct', got {p.radiance!r}")
        if e["signature"] is not None:
            run.read(e["signature"])
        return e

    images = pmap(one, index["images"], cfg.effective_workers())
    write_index(run, stage_dir / "index.json", "dataset", images)


def _dataset_index(cfg: PipelineConfig, run: StageRun) -> dict[str, Any]:
    index = load_index(_default_or(cfg.paths.index, Path(cfg.out) / "unortho" / "index.json", "dataset index"), run)
    if index.get("kind") != "dataset":
        raise ConfigError(f"expected a dataset index, got kind {index.get('kind')!r}")
    return index


def _passthrough(run: StageRun, img: dict[str, Any], keys=("mask", "enhancement", "signature")) -> dict[str, Any]:
    e = {"image_id": img["image_id"]}
    for k in keys:
        if img.get(k) is not None:
            e[k] = run.read(img[k])
    return e


def _band_selection(cfg: PipelineConfig) -> BandSelection:
    b = cfg.bands
    return BandSelection(tuple(tuple(r) for r in b.ranges_nm), tuple(b.rgb_wavelengths_nm), b.expected_count)


def stage_bands(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    index = _dataset_index(cfg, run)
    sel = _band_selection(cfg)

    def one(img):
        cube, header = read_hsc(run.read(img["cube"]))
        out = stage_dir / f"{_safe_name(img['image_id'])}.cube.hsc"
        write_hsc(out, select_bands(cube, sel), _extra(header))
        e = _passthrough(run, img)
        e["cube"] = run.wrote(out)
        return e

    write_index(run, stage_dir / "index.json", "dataset", pmap(one, index["images"], cfg.effective_workers()))


def stage_split(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    index = load_index(_default_or(cfg.paths.index, Path(cfg.out) / "unortho" / "index.json", "index"), run)
    manifest = split_images([img["image_id"] for img in index["images"]], cfg.seed,
                            cfg.split.fractions, cfg.split.mode)
    _write_json(run, stage_dir / "split.json", {**manifest.to_dict(), "mode": cfg.split.mode})


def _load_split(cfg: PipelineConfig, run: StageRun) -> SplitManifest | None:
    path = _default_or(cfg.paths.split, Path(cfg.out) / "split" / "split.json", "split manifest", required=False)
    if path is None:
        return None
    d = json.loads(run.read(path).read_text(encoding="utf-8"))
    d.pop("mode", None)
    return SplitManifest.from_dict(d)


def stage_stats(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    index = _dataset_index(cfg, run)
    manifest = _load_split(cfg, run)
    images = index["images"]
    if manifest is not None and cfg.stats.split is not None:
        images = [img for img in images if manifest.split_of(img["image_id"]) == cfg.stats.split]
    cubes = pmap(lambda img: read_hsc(run.read(img["cube"]))[0], images, cfg.effective_workers())
    stats = band_stats(cubes)
    _write_json(run, stage_dir / "stats.json", {
        **stats.to_dict(),
        "wavelengths_nm": [float(w) for w in cubes[0].wavelengths_nm] if cubes else [],
        "image_ids": [img["image_id"] for img in images],
    })


def _load_stats(cfg: PipelineConfig, run: StageRun) -> BandStats:
    path = _default_or(cfg.paths.stats, Path(cfg.out) / "stats" / "stats.json", "band statistics")
    return BandStats.from_dict(json.loads(run.read(path).read_text(encoding="utf-8")))


def stage_normalize(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    index = _dataset_index(cfg, run)
    stats = _load_stats(cfg, run)

    def one(img):
        cube, header = read_hsc(run.read(img["cube"]))
        out = stage_dir / f"{_safe_name(img['image_id'])}.cube.hsc"
        write_hsc(out, normalize(cube, stats, cfg.stats.eps), _extra(header))
        e = _passthrough(run, img)
        e["cube"] = run.wrote(out)
        return e

    write_index(run, stage_dir / "index.json", "dataset", pmap(one, index["images"], cfg.effective_workers()))


def stage_tile(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    index = _dataset_index(cfg, run)
    manifest = _load_split(cfg, run)
    t = cfg.tile

    def one(img):
        image = _load_labeled(run, img)
        split = manifest.split_of(image.image_id) if manifest is not None else "unassigned"
        return tile_raster(image, size=t.size, stride=t.stride, min_valid_frac=t.min_valid_frac,
                           strong_threshold=cfg.threshold_ppm_m, split=split)

    tiles = [tile for group in pmap(one, index["images"], cfg.effective_workers()) for tile in group]
    _finish_tileset(run, stage_dir, tiles)


def _finish_tileset(run: StageRun, stage_dir: Path, tiles: list[Tile]) -> None:
    manifest = write_tileset(tiles, stage_dir)
    run.wrote(manifest)
    for rec in read_manifest(manifest):
        for k in ("cube", "mask", "enhancement"):
            run.wrote(stage_dir / rec[f"{k}_path"])


def _tiles_from_manifest(run: StageRun, path: Path, images: dict[str, LabeledImage]) -> list[Tile]:
    tiles = []
    for rec in read_manifest(run.read(path)):
        if rec["image_id"] not in images:
            raise ConfigError(f"tile manifest references unknown image {rec['image_id']!r}")
        tiles.append(Tile(
            image=images[rec["image_id"]],
            origin=tuple(rec["origin"]),
            size=int(rec["size"]),
            jitter=tuple(rec["jitter"]),
            split=rec["split"],
            label=bool(rec["label"]),
            strong=bool(rec["strong"]),
            max_enhancement_ppm_m=float(rec["max_enhancement_ppm_m"]),
            valid_frac=float(rec["valid_frac"]),
        ))
    return tiles


def _labeled_images(cfg: PipelineConfig, run: StageRun, index: dict[str, Any]) -> dict[str, LabeledImage]:
    loaded = pmap(lambda img: _load_labeled(run, img), index["images"], cfg.effective_workers())
    return {im.image_id: im for im in loaded}


def stage_jitter(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    index = _dataset_index(cfg, run)
    images = _labeled_images(cfg, run, index)
    tiles_path = _default_or(cfg.paths.tiles, Path(cfg.out) / "tile" / "tiles.jsonl", "tile manifest")
    tiles = _tiles_from_manifest(run, tiles_path, images)
    j = cfg.jitter
    out = jitter_tiles(tiles, rng_seed=cfg.seed, samples_per_tile=j.samples_per_tile, max_offset=j.max_offset,
                       include_negatives=j.include_negatives, augment_splits=j.augment_splits,
                       min_valid_frac=cfg.tile.min_valid_frac, strong_threshold=cfg.threshold_ppm_m)
    _finish_tileset(run, stage_dir, out)


def stage_mf(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    index = _dataset_index(cfg, run)
    m = cfg.mf

    def one(img):
        cube, _ = read_hsc(run.read(img["cube"]))
        enh, mask = _run_mf(cube, _signature_for(run, cfg, img), m)
        name = _safe_name(img["image_id"])
        meta = {"image_id": img["image_id"]}
        valid = ~np.isnan(enh)
        write_raster(stage_dir / f"{name}.enhancement.hsc", enh, valid, {**meta, "units": "ppm_m"})
        write_raster(stage_dir / f"{name}.mask.hsc", mask.astype(np.float32), valid, meta)
        return {"image_id": img["image_id"],
                "enhancement": run.wrote(stage_dir / f"{name}.enhancement.hsc"),
                "mask": run.wrote(stage_dir / f"{name}.mask.hsc")}

    write_index(run, stage_dir / "index.json", "prediction", pmap(one, index["images"], cfg.effective_workers()))


def _run_mf(cube: HyperCube, sig: TargetSignature, m: MfParams) -> tuple[np.ndarray, np.ndarray]:
    stats = estimate_background(cube, m.grouping, m.shrinkage)
    enh = alpha_to_enhancement(matched_filter(cube, stats, sig, m.mode))
    return enh, threshold_alpha(enh, m.mask_threshold_ppm_m)


def stage_eval(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    gt_index = _dataset_index(cfg, run)
    pred_path = _default_or(cfg.paths.pred, Path(cfg.out) / "mf" / "index.json", "prediction index")
    pred_index = load_index(pred_path, run)
    images = _labeled_images(cfg, run, gt_index)
    preds = {}
    for img in pred_index["images"]:
        mask, _ = _read_mask(run, img["mask"])
        preds[img["image_id"]] = mask
    tiles_path = _default_or(cfg.paths.tiles, Path(cfg.out) / "tile" / "tiles.jsonl", "tile manifest",
                             required=False)
    if tiles_path is not None:
        tiles = _tiles_from_manifest(run, tiles_path, images)
    else:
        t = cfg.tile
        tiles = [tile for im in images.values()
                 for tile in tile_raster(im, size=t.size, stride=t.stride, min_valid_frac=t.min_valid_frac,
                                         strong_threshold=cfg.threshold_ppm_m)]
    if cfg.eval.split is not None:
        tiles = [t for t in tiles if t.split == cfg.eval.split]
    pred_masks, gt_masks, valids, strong = [], [], [], []
    for t in tiles:
        if t.image_id not in preds:
            raise ConfigError(f"no prediction for image {t.image_id!r}")
        r, c = t.top_left
        valid = t.valid
        pred_masks.append(preds[t.image_id][r : r + t.size, c : c + t.size] & valid)
        gt_masks.append(t.mask)
        valids.append(valid)
        strong.append(bool(strong_flag(t.enhancement, cfg.threshold_ppm_m, t.mask)))
    e = cfg.eval
    reports = [tile_metrics(pred_masks, gt_masks, strong, s, e.model) for s in e.strata]
    reports += [pixel_metrics(pred_masks, gt_masks, valids, strong, s, e.aggregate, e.model) for s in e.strata]
    _write_json(run, stage_dir / "report.json", {
        "threshold_ppm_m": cfg.threshold_ppm_m,
        "tile_count": len(tiles),
        "strong_tile_count": int(sum(strong)),
        "aggregate": e.aggregate,
        "reports": [r.to_dict() for r in reports],
    })
    _write_text(run, stage_dir / "report.csv", reports_to_csv(reports, cfg.threshold_ppm_m))


def stage_report(cfg: PipelineConfig, run: StageRun, stage_dir: Path) -> None:
    path = _require(cfg.paths.table, "results table")
    try:
        raw = json.loads(run.read(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"results table {path} is not valid JSON: {exc}") from exc
    rows = raw["rows"] if isinstance(raw, dict) else raw
    items = table_improvements(rows)
    _write_json(run, stage_dir / "improvements.json", {"improvements": items})
    _write_text(run, stage_dir / "improvements.csv", improvements_to_csv(items))


STAGES: dict[str, Callable[[PipelineConfig, StageRun, Path], None]] = {
    "synth": stage_synth,
    "ortho": stage_ortho,
    "unortho": stage_unortho,
    "bands": stage_bands,
    "tile": stage_tile,
    "jitter": stage_jitter,
    "split": stage_split,
    "stats": stage_stats,
    "normalize": stage_normalize,
    "mf": stage_mf,
    "eval": stage_eval,
    "report": stage_report,
}

# config sections whose values can change a stage's outputs
_STAGE_SECTIONS = {
    "synth": ("synth",), "ortho": (), "unortho": ("unortho",), "bands": ("bands",),
    "tile": ("tile",), "jitter": ("jitter", "tile"), "split": ("split",), "stats": ("stats",),
    "normalize": ("stats",), "mf": ("mf",), "eval": ("eval", "tile"), "report": (),
}


def _stage_settings(cfg: PipelineConfig, stage: str, base: Path) -> dict[str, Any]:
    d = cfg.to_dict()
    paths = {k: (None if v is None else os.path.relpath(Path(v).resolve(), base.resolve()))
             for k, v in d["paths"].items()}
    return {"seed": cfg.seed, "threshold_ppm_m": cfg.threshold_ppm_m, "paths": paths,
            **{s: d[s] for s in _STAGE_SECTIONS[stage]}}


def run_stage(name: str, cfg: PipelineConfig, force: bool = False) -> Path:
    """Run one index-mode stage under ``cfg.out``; returns the stage directory."""
    stage_dir = Path(cfg.out) / name
    run = StageRun(name, stage_dir, stage_dir / "provenance.json", _stage_settings(cfg, name, stage_dir))
    if not force and run.up_to_date():
        logger.info("%s: up to date, skipping", name)
        return stage_dir
    stage_dir.mkdir(parents=True, exist_ok=True)
    STAGES[name](cfg, run, stage_dir)
    run.finish()
    return stage_dir


# ---------------------------------------------------------------- single-file mode


def run_single(name: str, cfg: PipelineConfig, args: argparse.Namespace) -> Path:
    """Transform one file: ``--input`` (plus ``--glt``) to ``--output``."""
    if name not in ("ortho", "unortho", "bands", "normalize", "mf"):
        raise ConfigError(f"{name} has no single-file mode")
    src = _require(args.input, "input")
    if args.output is None:
        raise ConfigError("--output is required with --input")
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    settings = _stage_settings(cfg, name, out.parent)
    settings["combine"] = args.combine
    run = StageRun(name, out.parent, out.with_name(out.name + ".prov.json"), settings)
    cube, header = read_hsc(run.read(src))
    extra = _extra(header)
    if name in ("ortho", "unortho"):
        glt = read_glt(run.read(_require(args.glt, "GLT")))
        if name == "ortho":
            result = orthorectify(cube, glt)
        else:
            combine = args.combine or "first"
            p = cfg.unortho
            if combine == "union":
                if cube.bands != 1:
                    raise ConfigError("union combines single-band masks only")
                mask = (cube.data[:, :, 0] > 0.5) & cube.valid_mask
                back = unorthorectify(mask, glt, combine, p.margin, p.footprint)
                region = source_footprint(glt, p.margin, p.footprint)
                result = HyperCube(np.asarray(back, np.float32), cube.wavelengths_nm, region)
            else:
                result = unorthorectify(cube, glt, combine, p.margin, p.footprint)
        write_hsc(out, result, extra)
    elif name == "bands":
        write_hsc(out, select_bands(cube, _band_selection(cfg)), extra)
    elif name == "normalize":
        write_hsc(out, normalize(cube, _load_stats(cfg, run), cfg.stats.eps), extra)
    else:
        if cfg.paths.signature is None:
            raise ConfigError("mf on a single file needs --signature")
        enh, _ = _run_mf(cube, _signature_for(run, cfg, {"image_id": str(src)}), cfg.mf)
        write_raster(out, enh, ~np.isnan(enh), {**extra, "units": "ppm_m"})
    run.wrote(out)
    run.finish()
    return out


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with one section per stage")
    common.add_argument("--seed", type=int, help="global seed (splits, jitter, synthetic scenes)")
    common.add_argument("--workers", type=int, help="worker threads; 0 means one per logical CPU")
    common.add_argument("--threshold-ppm-m", type=float, dest="threshold_ppm_m",
                        help="strong-plume threshold on max enhancement, inclusive (default 900)")
    common.add_argument("--out", help="output root directory")
    common.add_argument("--index", help="input index.json (default: previous stage under --out)")
    common.add_argument("--split", help="split manifest")
    common.add_argument("--stats", help="band statistics JSON")
    common.add_argument("--tiles", help="tile manifest (tiles.jsonl)")
    common.add_argument("--pred", help="prediction index for eval")
    common.add_argument("--signature", help="target signature file (wavelength_nm, t)")
    common.add_argument("--input", help="single-file mode input (HSC) or results table for report")
    common.add_argument("--glt", help="single-file mode lookup table")
    common.add_argument("--output", help="single-file mode output")
    common.add_argument("--combine", choices=[r.value for r in CombineRule],
                        help="collision rule for single-file unortho")
    common.add_argument("--force", action="store_true", help="rerun even if provenance matches")

    parser = argparse.ArgumentParser(
        prog="plumepipe",
        description="Unorthorectified methane dataset pipeline. Band statistics use the population "
                    "(divisor N) standard deviation. Log level comes from PLUMEPIPE_LOG.",
    )
    parser.add_argument("--version", action="version", version=f"plumepipe {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "generate synthetic scenes with known geometry and plumes",
        "ortho": "orthorectify native cubes through their GLTs",
        "unortho": "project ortho annotations back to sensor geometry",
        "bands": "keep methane windows and RGB bands",
        "tile": "cut 128x128 tiles with the validity rule",
        "jitter": "add shifted re-crops of plume tiles",
        "split": "seeded image-level train/val/test split",
        "stats": "per-band mean and std over the training split",
        "normalize": "standardize cubes with band statistics",
        "mf": "matched-filter enhancement and masks",
        "eval": "tile and pixel metrics, all and strong strata",
        "report": "improvements derived from a results table",
    }
    for name in SUBCOMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _setup_logging() -> None:
    level = os.environ.get("PLUMEPIPE_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _error_line(command: str | None, code: str, message: str) -> None:
    sys.stderr.write(dumps_json({"error": code, "message": message, "subcommand": command}) + "\n")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        if args.command == "report":
            if args.input is not None:
                cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, table=args.input))
            run_stage("report", cfg, args.force)
        elif args.input is not None:
            run_single(args.command, cfg, args)
        else:
            run_stage(args.command, cfg, args.force)
    except PlumepipeError as exc:
        _error_line(args.command, exc.code, str(exc))
        return 2 if isinstance(exc, ConfigError) else 1
    except OSError as exc:
        _error_line(args.command, IoError.module + "." + IoError.__name__, str(exc))
        return 1
    except (KeyError, json.JSONDecodeError) as exc:
        _error_line(args.command, "io.FormatError", f"malformed input: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
