"""Classification metrics, 0.01-degree grid aggregation and detection rates.

Metrics whose formula has a zero denominator are returned as ``None``
("undefined") instead of 0, so averaging over subregions cannot silently
absorb them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Iterable, Optional

import numpy as np

from .ddm_core import WaterMask, cell_index
from .errors import DomainError

UNDEFINED = "undefined"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DomainError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_labels(cls, predicted, truth) -> "ConfusionCounts":
        p = np.asarray(predicted).astype(bool)
        t = np.asarray(truth).astype(bool)
        if p.shape != t.shape:
            raise DomainError(f"prediction/label shapes differ: {p.shape} vs {t.shape}")
        return cls(tp=int(np.sum(p & t)), fp=int(np.sum(p & ~t)),
                   tn=int(np.sum(~p & ~t)), fn=int(np.sum(~p & t)))

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


@dataclass(frozen=True)
class Metrics:
    recall: Optional[float]
    precision: Optional[float]
    f1: Optional[float]
    oa: Optional[float]
    pe: Optional[float]
    kappa: Optional[float]

    def as_dict(self, undefined=UNDEFINED) -> dict:
        return {k: (undefined if v is None else v) for k, v in asdict(self).items()}


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def metrics(c: ConfusionCounts) -> Metrics:
    n = c.total
    if n == 0:
        raise DomainError("metrics need at least one sample")
    recall = _ratio(c.tp, c.tp + c.fn)
    precision = _ratio(c.tp, c.tp + c.fp)
    f1 = None
    if recall is not None and precision is not None:
        f1 = _ratio(2 * precision * recall, precision + recall)
    oa = (c.tp + c.tn) / n
    pe = ((c.tp + c.fp) * (c.tp + c.fn) + (c.fn + c.tn) * (c.fp + c.tn)) / n**2
    kappa = _ratio(oa - pe, 1 - pe)
    return Metrics(recall, precision, f1, oa, pe, kappa)


def metrics_from_labels(predicted, truth) -> Metrics:
    return metrics(ConfusionCounts.from_labels(predicted, truth))


# --- grid aggregation ---------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Region of interest split into ``rows x cols`` cells from the SW corner."""

    origin_lat: float
    origin_lon: float
    rows: int
    cols: int
    cell_size_deg: float = 0.01

    @classmethod
    def from_bounds(cls, lat_min, lat_max, lon_min, lon_max, cell_size_deg=0.01) -> "GridSpec":
        rows = max(1, int(round((lat_max - lat_min) / cell_size_deg)))
        cols = max(1, int(round((lon_max - lon_min) / cell_size_deg)))
        return cls(lat_min, lon_min, rows, cols, cell_size_deg)

    @classmethod
    def from_mask(cls, mask: WaterMask) -> "GridSpec":
        return cls(mask.origin_lat, mask.origin_lon, mask.rows, mask.cols, mask.cell_size_deg)

    def cell_of(self, lat: float, lon: float) -> Optional[tuple[int, int]]:
        i = cell_index(lat, self.origin_lat, self.cell_size_deg)
        j = cell_index(lon, self.origin_lon, self.cell_size_deg)
        if 0 <= i < self.rows and 0 <= j < self.cols:
            return i, j
        return None


@dataclass
class GridCell:
    lat_index: int
    lon_index: int
    sum_p: float = 0.0
    n: int = 0
    gt_sum: float = 0.0
    gt_n: int = 0

    @property
    def mean_p(self) -> Optional[float]:
        return self.sum_p / self.n if self.n else None

    @property
    def gt_mean(self) -> Optional[float]:
        return self.gt_sum / self.gt_n if self.gt_n else None


@dataclass
class GridAggregate:
    grid: GridSpec
    cells: dict = field(default_factory=dict)
    skipped: int = 0
    total: int = 0
    gt_skipped: int = 0

    def _cell(self, key) -> GridCell:
        cell = self.cells.get(key)
        if cell is None:
            cell = self.cells[key] = GridCell(*key)
        return cell

    def add(self, lat: float, lon: float, p: float) -> bool:
        self.total += 1
        key = self.grid.cell_of(lat, lon)
        if key is None:
            self.skipped += 1
            return False
        cell = self._cell(key)
        cell.sum_p += p
        cell.n += 1
        return True

    def add_truth(self, lat: float, lon: float, value: float) -> bool:
        key = self.grid.cell_of(lat, lon)
        if key is None:
            self.gt_skipped += 1
            return False
        cell = self._cell(key)
        cell.gt_sum += value
        cell.gt_n += 1
        return True

    def add_mask(self, mask: WaterMask) -> None:
        """Aggregate a mask's cell-centre labels as ground-truth samples."""
        lat, lon = mask.cell_centers()
        for a, b, v in zip(lat.ravel(), lon.ravel(), mask.labels.ravel()):
            self.add_truth(float(a), float(b), float(v))

    def merge(self, other: "GridAggregate") -> "GridAggregate":
        if other.grid != self.grid:
            raise DomainError("cannot merge aggregates over different grids")
        out = GridAggregate(self.grid, skipped=self.skipped + other.skipped,
                            total=self.total + other.total,
                            gt_skipped=self.gt_skipped + other.gt_skipped)
        for src in (self, other):
            for key, c in src.cells.items():
                cell = out._cell(key)
                cell.sum_p += c.sum_p
                cell.n += c.n
                cell.gt_sum += c.gt_sum
                cell.gt_n += c.gt_n
        return out

    @property
    def binned(self) -> int:
        return self.total - self.skipped

    def scored_cells(self, threshold: float = 0.5) -> list[tuple[GridCell, int, int]]:
        """Cells holding both predictions and truth, with binary (pred, gt)."""
        out = []
        for key in sorted(self.cells):
            c = self.cells[key]
            if c.n and c.gt_n:
                out.append((c, int(c.mean_p >= threshold), int(c.gt_mean >= threshold)))
        return out

    def confusion(self, threshold: float = 0.5) -> ConfusionCounts:
        scored = self.scored_cells(threshold)
        pred = [p for _, p, _ in scored]
        gt = [g for _, _, g in scored]
        return ConfusionCounts.from_labels(pred, gt)

    def prediction_raster(self, threshold: float = 0.5) -> np.ndarray:
        img = np.zeros((self.grid.rows, self.grid.cols), dtype=np.uint8)
        for (i, j), c in self.cells.items():
            if c.n and c.mean_p >= threshold:
                img[i, j] = 1
        return img


def grid_aggregate(samples: Iterable, grid: GridSpec) -> GridAggregate:
    """Bin ``(lat, lon, p)`` samples into *grid*; out-of-region samples are counted and skipped."""
    agg = GridAggregate(grid)
    for lat, lon, p in samples:
        agg.add(float(lat), float(lon), float(p))
    return agg


def write_grid_report(agg: GridAggregate, path, threshold: float = 0.5) -> None:
    g = agg.grid
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lat_min", "lon_min", "n", "mean_p", "pred", "gt", "agree"])
        for key in sorted(agg.cells):
            c = agg.cells[key]
            if not c.n:
                continue
            pred = int(c.mean_p >= threshold)
            gt = "" if c.gt_n == 0 else int(c.gt_mean >= threshold)
            agree = "" if gt == "" else int(pred == gt)
            w.writerow([repr(g.origin_lat + c.lat_index * g.cell_size_deg),
                        repr(g.origin_lon + c.lon_index * g.cell_size_deg),
                        c.n, repr(c.mean_p), pred, gt, agree])


# --- detection rate -----------------------------------------------------------

@dataclass(frozen=True)
class BBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    def __post_init__(self):
        if not (self.lat_min <= self.lat_max and self.lon_min <= self.lon_max):
            raise DomainError("bounding box bounds are not ordered")

    def contains(self, lat: float, lon: float) -> bool:
        return self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max


@dataclass(frozen=True)
class DetectionRate:
    detected: int
    total: int

    @property
    def rate(self) -> Optional[float]:
        return _ratio(self.detected, self.total)

    def as_dict(self) -> dict:
        r = self.rate
        return {"detected": self.detected, "total": self.total,
                "rate": UNDEFINED if r is None else r}


def detection_rate(observations: Iterable, bbox: Optional[BBox] = None,
                   start: Optional[datetime] = None, end: Optional[datetime] = None) -> DetectionRate:
    """Detected points over total observations inside *bbox* and ``[start, end)``.

    *observations* yields ``(lat, lon, time, cls)`` with ``cls`` in {0, 1}.
    """
    detected = total = 0
    for lat, lon, t, cls in observations:
        if bbox is not None and not bbox.contains(lat, lon):
            continue
        if start is not None and t < start:
            continue
        if end is not None and t >= end:
            continue
        total += 1
        detected += int(cls == 1)
    return DetectionRate(detected, total)


def write_summary(path, per_region: dict) -> None:
    """Write ``{region: Metrics | dict}`` as JSON with undefined values spelled out."""
    out = {}
    for name, m in per_region.items():
        out[name] = m.as_dict() if isinstance(m, Metrics) else m
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
