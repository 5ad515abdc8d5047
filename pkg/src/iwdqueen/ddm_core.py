"""Delay-Doppler map records, quality filtering and water-mask utilities.

A DDM is held as a plain ``(17, 11)`` float64 array: rows are delay bins,
columns are Doppler bins.  Records carry the geolocation and the quality
metadata needed by :func:`passes_filter`.

Water masks are stored south-west-origin: ``labels[r, c]`` covers latitudes
``[origin_lat + r*cell, origin_lat + (r+1)*cell)`` and the analogous
longitude band.  PGM export flips rows so north is at the top of the image.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from .errors import DataError, DomainError

DDM_SHAPE = (17, 11)
# Fixed 3x5 window around the nominal specular bin.
CENTRAL_ROWS = slice(7, 10)
CENTRAL_COLS = slice(3, 8)
OTSU_BINS = 256


def check_ddm(ddm) -> np.ndarray:
    """Return *ddm* as a validated float64 array or raise :class:`DomainError`."""
    arr = np.asarray(ddm, dtype=np.float64)
    if arr.shape != DDM_SHAPE:
        raise DomainError(f"DDM must have shape {DDM_SHAPE}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("DDM contains non-finite values")
    if np.any(arr < 0):
        raise DomainError("DDM contains negative power values")
    return arr


@dataclass(frozen=True)
class FilterPolicy:
    max_inc_angle_deg: float = 65.0
    min_ant_gain_db: float = 0.0
    min_snr_db: float = 2.0
    require_clean_flags: bool = True

    def __post_init__(self):
        if not math.isfinite(self.min_snr_db):
            raise DomainError("min_snr_db must be finite")
        if not self.max_inc_angle_deg > 0:
            raise DomainError("max_inc_angle_deg must be positive")


@dataclass(frozen=True, eq=False)
class DdmRecord:
    id: str
    lat: float
    lon: float
    time: datetime
    sp_inc_angle_deg: float
    ant_gain_db: float
    quality_flags: int
    noise_avg: float
    ddm: np.ndarray = field(repr=False)
    label: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "ddm", check_ddm(self.ddm))
        if not -90.0 <= self.lat <= 90.0 or not -180.0 <= self.lon <= 180.0:
            raise DomainError(f"record {self.id}: coordinates out of range")
        if not self.noise_avg > 0:
            raise DomainError(f"record {self.id}: noise_avg must be positive")
        if self.sp_inc_angle_deg < 0:
            raise DomainError(f"record {self.id}: negative incidence angle")
        if self.quality_flags < 0:
            raise DomainError(f"record {self.id}: quality_flags must be unsigned")
        if self.label is not None and self.label not in (0, 1):
            raise DomainError(f"record {self.id}: label must be 0 or 1")
        if self.time.tzinfo is None:
            object.__setattr__(self, "time", self.time.replace(tzinfo=timezone.utc))

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "lat": float(self.lat),
            "lon": float(self.lon),
            "time": format_time(self.time),
            "sp_inc_angle_deg": float(self.sp_inc_angle_deg),
            "ant_gain_db": float(self.ant_gain_db),
            "quality_flags": int(self.quality_flags),
            "noise_avg": float(self.noise_avg),
            "ddm": self.ddm.tolist(),
        }
        if self.label is not None:
            out["label"] = int(self.label)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DdmRecord":
        try:
            return cls(
                id=str(obj["id"]),
                lat=float(obj["lat"]),
                lon=float(obj["lon"]),
                time=parse_time(obj["time"]),
                sp_inc_angle_deg=float(obj["sp_inc_angle_deg"]),
                ant_gain_db=float(obj["ant_gain_db"]),
                quality_flags=int(obj["quality_flags"]),
                noise_avg=float(obj["noise_avg"]),
                ddm=np.asarray(obj["ddm"], dtype=np.float64),
                label=None if obj.get("label") is None else int(obj["label"]),
            )
        except KeyError as exc:
            raise DataError(f"record missing field {exc.args[0]!r}") from None


def format_time(t: datetime) -> str:
    t = t.astimezone(timezone.utc)
    return t.isoformat(timespec="milliseconds").replace("+00:00", "Z")


def parse_time(text: str) -> datetime:
    t = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if t.tzinfo is None:
        t = t.replace(tzinfo=timezone.utc)
    return t.astimezone(timezone.utc)


# --- signal quality -------------------------------------------------------

def snr_db(ddm, noise_avg: float) -> float:
    """Peak-to-noise ratio in dB; ``-inf`` when the map carries no signal."""
    if not noise_avg > 0:
        raise DomainError("noise_avg must be positive")
    peak = float(np.max(check_ddm(ddm)))
    if peak == 0.0:
        return float("-inf")
    return 10.0 * math.log10(peak / noise_avg)


def filter_reasons(record: DdmRecord, policy: FilterPolicy = FilterPolicy()) -> list[str]:
    """Names of every policy rule *record* violates (empty list = accepted)."""
    reasons = []
    if policy.require_clean_flags and record.quality_flags != 0:
        reasons.append("quality_flags")
    if not record.sp_inc_angle_deg <= policy.max_inc_angle_deg:
        reasons.append("inc_angle")
    if not record.ant_gain_db >= policy.min_ant_gain_db:
        reasons.append("ant_gain")
    snr = snr_db(record.ddm, record.noise_avg)
    if snr == float("-inf"):
        reasons.append("no_signal")
    elif not snr >= policy.min_snr_db:
        reasons.append("snr")
    return reasons


def passes_filter(record: DdmRecord, policy: FilterPolicy = FilterPolicy()) -> bool:
    return not filter_reasons(record, policy)


def central_region(ddm) -> np.ndarray:
    """Flattened 3x5 block at delay rows 7-9, Doppler columns 3-7."""
    return check_ddm(ddm)[CENTRAL_ROWS, CENTRAL_COLS].reshape(-1).copy()


def normalize(ddm) -> np.ndarray:
    arr = check_ddm(ddm)
    peak = arr.max()
    if peak == 0:
        raise DomainError("empty DDM")
    return arr / peak


# --- Otsu and water masks -------------------------------------------------

def cell_index(coord: float, origin: float, size: float) -> int:
    """Floor binning with half-open cells; exact edges go to the higher cell.

    The quotient is rounded to 9 decimals first so that e.g. ``0.03 / 0.01``
    lands on 3 rather than 2.9999999999999996.
    """
    return math.floor(round((coord - origin) / size, 9))


def _otsu_histogram(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise DomainError("empty input")
    if np.any(~np.isfinite(v)) or np.any(v < 0) or np.any(v > 1):
        raise DomainError("Otsu input must lie in [0, 1]")
    bins = np.minimum((v * OTSU_BINS).astype(np.int64), OTSU_BINS - 1)
    return np.bincount(bins, minlength=OTSU_BINS).astype(np.float64)


def otsu_threshold(values) -> float:
    """Otsu threshold on a 256-bin histogram of values in ``[0, 1]``.

    Returns the lower edge ``t/256`` of the first foreground bin; values
    ``>= threshold`` belong to the upper class.  Among thresholds whose
    between-class variance equals the maximum (to 1e-12 relative), the
    smallest wins.
    """
    hist = _otsu_histogram(values)
    if np.count_nonzero(hist) < 2:
        raise DomainError("degenerate histogram")
    centers = np.arange(OTSU_BINS) + 0.5
    total = hist.sum()
    w0 = np.cumsum(hist)[:-1]
    s0 = np.cumsum(hist * centers)[:-1]
    w1 = total - w0
    s1 = (hist * centers).sum() - s0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = w0 * w1 * (s0 / w0 - s1 / w1) ** 2 / total**2
    between = np.where((w0 > 0) & (w1 > 0), between, -1.0)
    best = between.max()
    t = int(np.flatnonzero(between >= best * (1 - 1e-12))[0]) + 1
    return t / OTSU_BINS


def widths_to_gray(widths) -> np.ndarray:
    """River width (m) to grayscale: w/100 on [1, 100], 1 above, 0 below 1 m."""
    w = np.asarray(widths, dtype=np.float64)
    if np.any(~np.isfinite(w)) or np.any(w < 0):
        raise DomainError("widths must be finite and non-negative")
    return np.where(w < 1.0, 0.0, np.minimum(w, 100.0) / 100.0)


@dataclass
class WaterMask:
    origin_lat: float
    origin_lon: float
    cell_size_deg: float
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2 or self.labels.size == 0:
            raise DomainError("mask labels must be a non-empty 2-D array")
        if np.any(self.labels > 1):
            raise DomainError("mask labels must be 0 or 1")
        if not self.cell_size_deg > 0:
            raise DomainError("cell_size_deg must be positive")

    @property
    def rows(self) -> int:
        return self.labels.shape[0]

    @property
    def cols(self) -> int:
        return self.labels.shape[1]

    def cell_of(self, lat: float, lon: float) -> Optional[tuple[int, int]]:
        r = cell_index(lat, self.origin_lat, self.cell_size_deg)
        c = cell_index(lon, self.origin_lon, self.cell_size_deg)
        if 0 <= r < self.rows and 0 <= c < self.cols:
            return r, c
        return None

    def label_at(self, lat: float, lon: float) -> Optional[int]:
        cell = self.cell_of(lat, lon)
        return None if cell is None else int(self.labels[cell])

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        lat = self.origin_lat + (np.arange(self.rows) + 0.5) * self.cell_size_deg
        lon = self.origin_lon + (np.arange(self.cols) + 0.5) * self.cell_size_deg
        return np.meshgrid(lat, lon, indexing="ij")


def width_to_mask(widths, origin_lat: float, origin_lon: float, cell_size_deg: float) -> WaterMask:
    widths = np.asarray(widths, dtype=np.float64)
    if widths.size == 0:
        raise DomainError("empty raster")
    gray = widths_to_gray(widths)
    threshold = otsu_threshold(gray)
    labels = (gray >= threshold).astype(np.uint8)
    if labels.ndim == 1:
        labels = labels[None, :]
    return WaterMask(origin_lat, origin_lon, cell_size_deg, labels)


# --- file formats ---------------------------------------------------------

def write_jsonl(records: Iterable[DdmRecord], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), separators=(",", ":")))
            fh.write("\n")
            n += 1
    return n


def iter_jsonl(path) -> Iterator[DdmRecord]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield DdmRecord.from_json(json.loads(line))
            except (json.JSONDecodeError, DomainError, DataError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc


def read_jsonl(path) -> list[DdmRecord]:
    return list(iter_jsonl(path))


def _sidecar(path) -> Path:
    return Path(os.fspath(path)).with_suffix(".json")


def write_mask_pgm(mask: WaterMask, path) -> None:
    """Binary P5 PGM (255 = water, north up) plus a JSON georeference sidecar."""
    img = (mask.labels[::-1] * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{mask.cols} {mask.rows}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    meta = {
        "origin_lat": mask.origin_lat,
        "origin_lon": mask.origin_lon,
        "cell_size_deg": mask.cell_size_deg,
    }
    _sidecar(path).write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_mask_pgm(path) -> WaterMask:
    try:
        data = Path(path).read_bytes()
        meta = json.loads(_sidecar(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    tokens, pos = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    cols, rows, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise DataError(f"{path}: 16-bit PGM not supported")
    img = np.frombuffer(data[pos:pos + rows * cols], dtype=np.uint8)
    if img.size != rows * cols:
        raise DataError(f"{path}: truncated raster")
    labels = (img.reshape(rows, cols)[::-1] >= 128).astype(np.uint8)
    return WaterMask(float(meta["origin_lat"]), float(meta["origin_lon"]),
                     float(meta["cell_size_deg"]), labels)
