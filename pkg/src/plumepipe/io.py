"""Binary raster (HSC), lookup-table (GLT) and signature file formats.

HSC layout, all integers little-endian::

    b"HSCUBE01" | u32 header_len | UTF-8 JSON header | f32le payload (BIP) | [u8 mask]

The optional trailing mask holds one byte per pixel, row-major, and is present
iff the header carries ``"has_mask": true``.

GLT layout::

    b"HSGLT001" | u32 header_len | UTF-8 JSON header | i32le pairs (sample+1, line+1)

A zero pair marks an ortho pixel with no source pixel.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from .errors import FormatError
from .geometry import Glt
from .raster import HyperCube

__all__ = [
    "HSC_MAGIC",
    "GLT_MAGIC",
    "encode_hsc",
    "decode_hsc",
    "write_hsc",
    "read_hsc",
    "read_hsc_header",
    "write_raster",
    "read_raster",
    "encode_glt",
    "decode_glt",
    "write_glt",
    "read_glt",
    "read_signature",
    "write_signature",
    "dumps_json",
]

HSC_MAGIC = b"HSCUBE01"
GLT_MAGIC = b"HSGLT001"
_U32 = struct.Struct("<I")


def dumps_json(obj: Any) -> str:
    """Canonical JSON used for every header, manifest and report we write."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _encode_header(magic: bytes, header: dict[str, Any]) -> bytes:
    raw = dumps_json(header).encode("utf-8")
    return magic + _U32.pack(len(raw)) + raw


def _decode_header(buf: bytes | memoryview, offset: int, magic: bytes) -> tuple[dict, int]:
    end_magic = offset + len(magic)
    if bytes(buf[offset:end_magic]) != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    if len(buf) < end_magic + 4:
        raise FormatError("truncated header length")
    (n,) = _U32.unpack_from(buf, end_magic)
    start = end_magic + 4
    if len(buf) < start + n:
        raise FormatError("truncated header")
    try:
        header = json.loads(bytes(buf[start : start + n]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from exc
    return header, start + n


def encode_hsc(cube: HyperCube, extra: dict[str, Any] | None = None) -> bytes:
    fill = cube.fill_value
    header: dict[str, Any] = dict(extra or {})
    has_mask = not bool(cube.valid_mask.all())
    header.update(
        rows=cube.rows,
        cols=cube.cols,
        bands=cube.bands,
        dtype="f32le",
        interleave="bip",
        wavelengths_nm=[float(w) for w in cube.wavelengths_nm],
        fill_value="nan" if math.isnan(fill) else fill,
        has_mask=has_mask,
    )
    parts = [_encode_header(HSC_MAGIC, header), np.ascontiguousarray(cube.data, dtype="<f4").tobytes()]
    if has_mask:
        parts.append(cube.valid_mask.astype(np.uint8).tobytes())
    return b"".join(parts)


def decode_hsc(buf: bytes | memoryview, offset: int = 0) -> tuple[HyperCube, dict[str, Any], int]:
    """Decode one HSC record starting at ``offset``; returns (cube, header, end offset)."""
    header, pos = _decode_header(buf, offset, HSC_MAGIC)
    if header.get("dtype") != "f32le" or header.get("interleave") != "bip":
        raise FormatError("only f32le/bip payloads are supported")
    try:
        rows, cols, bands = int(header["rows"]), int(header["cols"]), int(header["bands"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"missing extent in header: {exc}") from exc
    n = rows * cols * bands
    end = pos + 4 * n
    if len(buf) < end:
        raise FormatError("truncated payload")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32)
    data = data.reshape(rows, cols, bands)
    mask = None
    if header.get("has_mask"):
        mend = end + rows * cols
        if len(buf) < mend:
            raise FormatError("truncated mask section")
        mask = np.frombuffer(buf, dtype=np.uint8, count=rows * cols, offset=end).reshape(rows, cols) != 0
        end = mend
    fill = header.get("fill_value", "nan")
    fill = math.nan if fill == "nan" else float(fill)
    wl = header.get("wavelengths_nm") or [float(i) for i in range(bands)]
    cube = HyperCube(data, wl, mask, fill)
    return cube, header, end


def write_hsc(target: str | Path | BinaryIO, cube: HyperCube, extra: dict[str, Any] | None = None) -> int:
    """Write ``cube``; ``target`` may be a path or an open binary file. Returns bytes written."""
    raw = encode_hsc(cube, extra)
    if hasattr(target, "write"):
        target.write(raw)
    else:
        Path(target).write_bytes(raw)
    return len(raw)


def read_hsc(path: str | Path, offset: int = 0) -> tuple[HyperCube, dict[str, Any]]:
    buf = Path(path).read_bytes()
    cube, header, _ = decode_hsc(buf, offset)
    return cube, header


def read_hsc_header(path: str | Path) -> dict[str, Any]:
    with open(path, "rb") as fh:
        head = fh.read(12)
        if len(head) < 12:
            raise FormatError("truncated header")
        (n,) = _U32.unpack_from(head, 8)
        header, _ = _decode_header(head + fh.read(n), 0, HSC_MAGIC)
    return header


def write_raster(
    target: str | Path | BinaryIO,
    values: np.ndarray,
    valid: np.ndarray | None = None,
    extra: dict[str, Any] | None = None,
) -> int:
    """Write a single-band raster (masks as 0.0/1.0, enhancement maps in ppm m)."""
    values = np.asarray(values)
    data = values.astype(np.float32)[:, :, None]
    return write_hsc(target, HyperCube(data, [0.0], valid), extra)


def read_raster(path: str | Path, offset: int = 0) -> tuple[np.ndarray, np.ndarray, dict[str, Any]]:
    cube, header = read_hsc(path, offset)
    if cube.bands != 1:
        raise FormatError(f"expected a single-band raster, got {cube.bands} bands")
    return cube.data[:, :, 0], cube.valid_mask, header


def encode_glt(glt: Glt) -> bytes:
    header = {
        "ortho_rows": glt.ortho_rows,
        "ortho_cols": glt.ortho_cols,
        "src_rows": glt.src_rows,
        "src_cols": glt.src_cols,
        "sentinel": 0,
    }
    pairs = np.stack([glt.sample + 1, glt.line + 1], axis=-1).astype("<i4")
    return _encode_header(GLT_MAGIC, header) + pairs.tobytes()


def decode_glt(buf: bytes) -> Glt:
    header, pos = _decode_header(buf, 0, GLT_MAGIC)
    if header.get("sentinel", 0) != 0:
        raise FormatError("only sentinel 0 is supported")
    try:
        orows, ocols = int(header["ortho_rows"]), int(header["ortho_cols"])
        srows, scols = int(header["src_rows"]), int(header["src_cols"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"missing extent in GLT header: {exc}") from exc
    n = orows * ocols * 2
    if len(buf) < pos + 4 * n:
        raise FormatError("truncated GLT payload")
    pairs = np.frombuffer(buf, dtype="<i4", count=n, offset=pos).reshape(orows, ocols, 2)
    return Glt(pairs[..., 0].astype(np.int64) - 1, pairs[..., 1].astype(np.int64) - 1, srows, scols)


def write_glt(path: str | Path, glt: Glt) -> int:
    raw = encode_glt(glt)
    Path(path).write_bytes(raw)
    return len(raw)


def read_glt(path: str | Path) -> Glt:
    return decode_glt(Path(path).read_bytes())


def read_signature(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Two whitespace-separated columns (wavelength_nm, t); ``#`` starts a comment."""
    arr = np.loadtxt(path, comments="#", dtype=np.float64, ndmin=2, encoding="utf-8")
    if arr.shape[1] != 2:
        raise FormatError(f"signature file needs 2 columns, found {arr.shape[1]}")
    return arr[:, 0].copy(), arr[:, 1].copy()


def write_signature(path: str | Path, wavelengths_nm: np.ndarray, t: np.ndarray, comment: str = "") -> None:
    lines = [f"# {c}" for c in comment.splitlines()] if comment else []
    lines.append("# wavelength_nm t")
    lines += [f"{float(w)!r} {float(v)!r}" for w, v in zip(wavelengths_nm, t)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
