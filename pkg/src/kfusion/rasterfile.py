"""MRF1 raster files and CSV manifests.

An MRF1 file is one ASCII header line::

    MRF1 rows=<r> cols=<c> bands=<b> dtype=float32 layout=band-major endian=little

followed by exactly ``rows * cols * bands`` little-endian float32 samples,
band-major then row-major. NaN marks masked samples.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RasterIOError

MAGIC = "MRF1"
_MAX_HEADER = 256
_FIXED = {"dtype": "float32", "layout": "band-major", "endian": "little"}
MANIFEST_FIELDS = ("step", "modality", "raster_path", "quality_path")


def _header(rows: int, cols: int, bands: int) -> bytes:
    return (
        f"{MAGIC} rows={rows} cols={cols} bands={bands} dtype=float32 "
        f"layout=band-major endian=little\n"
    ).encode("ascii")


def write_raster(path, data) -> None:
    """Write a (bands, rows, cols) or (rows, cols) array."""
    a = np.asarray(data)
    if a.ndim == 2:
        a = a[None]
    if a.ndim != 3:
        raise RasterIOError(f"{path}: expected a (bands, rows, cols) array, got shape {a.shape}")
    bands, rows, cols = a.shape
    payload = np.ascontiguousarray(a, dtype="<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_header(rows, cols, bands))
        fh.write(payload)


def read_raster(path) -> np.ndarray:
    """Return the samples as a float32 array of shape (bands, rows, cols)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise RasterIOError(f"{path}: cannot read raster ({exc.strerror})") from exc
    end = raw.find(b"\n", 0, _MAX_HEADER)
    if end < 0:
        raise RasterIOError(f"{path}: missing MRF1 header line")
    try:
        fields = raw[:end].decode("ascii").split()
    except UnicodeDecodeError as exc:
        raise RasterIOError(f"{path}: header is not ASCII") from exc
    if not fields or fields[0] != MAGIC:
        raise RasterIOError(f"{path}: bad magic, expected {MAGIC}")
    try:
        meta = dict(f.split("=", 1) for f in fields[1:])
        rows, cols, bands = int(meta["rows"]), int(meta["cols"]), int(meta["bands"])
    except (ValueError, KeyError) as exc:
        raise RasterIOError(f"{path}: malformed header {raw[:end]!r}") from exc
    for key, value in _FIXED.items():
        if meta.get(key) != value:
            raise RasterIOError(f"{path}: unsupported {key}={meta.get(key)!r}")
    payload = raw[end + 1:]
    expected = rows * cols * bands * 4
    if len(payload) != expected:
        raise RasterIOError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(bands, rows, cols).copy()


@dataclass(frozen=True)
class ManifestRow:
    step: int
    modality: str
    raster_path: Path
    quality_path: Path | None


def read_manifest(path) -> list[ManifestRow]:
    """Rows with paths resolved relative to the manifest's directory."""
    path = Path(path)
    base = path.parent
    try:
        text = path.read_text()
    except OSError as exc:
        raise RasterIOError(f"{path}: cannot read manifest ({exc.strerror})") from exc
    reader = csv.DictReader(io.StringIO(text, newline=""))
    missing = set(MANIFEST_FIELDS[:3]) - set(reader.fieldnames or ())
    if missing:
        raise RasterIOError(f"{path}: missing columns {sorted(missing)}")
    rows = []
    for line, rec in enumerate(reader, start=2):
        try:
            step = int(rec["step"])
        except (TypeError, ValueError) as exc:
            raise RasterIOError(f"{path}:{line}: bad step {rec['step']!r}") from exc
        q = (rec.get("quality_path") or "").strip()
        rows.append(ManifestRow(
            step, rec["modality"].strip(), base / rec["raster_path"].strip(),
            base / q if q else None,
        ))
    return rows


def write_manifest(path, rows) -> None:
    """``rows`` are (step, modality, raster_path, quality_path) with paths relative to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for step, modality, raster, quality in rows:
            w.writerow([step, modality, str(raster), "" if quality is None else str(quality)])
