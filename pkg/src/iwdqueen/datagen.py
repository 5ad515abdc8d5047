"""Procedural river scenes, specular-point tracks and synthetic DDMs.

A stand-in for real reflectometry data at desk scale.  Water DDMs get a
compact peak in the central block; land DDMs get a broader, delay-skewed
ridge whose Doppler spread widens with delay.  ``separation`` in
``DdmSynthParams`` interpolates the land shape toward the water shape to
make the task harder.  Every output is a pure function of the scene/seed.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Optional

import numpy as np

from .ddm_core import (DDM_SHAPE, DdmRecord, WaterMask, format_time, parse_time,
                       passes_filter, width_to_mask, write_jsonl, write_mask_pgm)
from .errors import ConfigError, DataError, DomainError

KM_PER_DEG = 111.32
TRACK_SPACING_DEG = 0.03
SAMPLE_INTERVAL_S = 0.5
# Nominal specular bin; the central 3x5 block is centred on it.
PEAK_ROW, PEAK_COL = 8.0, 5.0


@dataclass(frozen=True)
class DdmSynthParams:
    coherent_snr_db: tuple = (11.0, 20.0)
    incoherent_snr_db: tuple = (3.5, 11.0)
    peak_spread: tuple = (0.7, 0.9)          # delay, Doppler sigma (bins)
    incoherent_spread_mult: float = 2.6
    tail_skew: float = 2.5                   # delay e-folding of the land tail (bins)
    peak_jitter: float = 0.5                 # +- bins of peak position
    diffuse_fraction: tuple = (0.0, 0.15)    # weak diffuse component on water
    noise_avg: tuple = (800.0, 1200.0)       # per-bin noise level (arbitrary units)
    noise_rel_sigma: float = 0.03
    inc_angle_deg: tuple = (5.0, 60.0)
    ant_gain_db: tuple = (0.5, 14.0)
    violation_fraction: float = 0.05
    separation: float = 1.0
    land_coherent_fraction: float = 0.0      # smooth land that scatters like water

    def __post_init__(self):
        if min(self.peak_spread) <= 0 or self.incoherent_spread_mult <= 1:
            raise ConfigError("spreads must be positive and coherent spread < incoherent spread")
        if not 0.0 <= self.separation <= 1.0:
            raise ConfigError("separation must lie in [0, 1]")
        for name in ("violation_fraction", "land_coherent_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "DdmSynthParams":
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown DDM synthesis keys: {sorted(bad)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass(frozen=True)
class SceneSpec:
    name: str = "scene"
    lat_min: float = -4.0
    lat_max: float = -2.5
    lon_min: float = -66.0
    lon_max: float = -64.5
    cell_size_deg: float = 0.01
    trunk: tuple = ()                    # ((lat, lon), ...) control points
    trunk_width_m: float = 4000.0
    branch_depth: int = 2
    branches_per_river: int = 4
    width_decay: float = 0.5
    length_decay: float = 0.5
    meander_deg: float = 0.03
    n_tracks: int = 150
    track_heading_deg: tuple = (-35.0, 35.0)
    start_time: str = "2021-01-04T00:00:00Z"
    seed: int = 7
    ddm: DdmSynthParams = field(default_factory=DdmSynthParams)

    def __post_init__(self):
        if not (self.lat_min < self.lat_max and self.lon_min < self.lon_max):
            raise ConfigError("scene bounds are not well ordered")
        if not self.cell_size_deg > 0 or not self.trunk_width_m > 0:
            raise ConfigError("cell size and river widths must be positive")

    @property
    def rows(self) -> int:
        return int(round((self.lat_max - self.lat_min) / self.cell_size_deg))

    @property
    def cols(self) -> int:
        return int(round((self.lon_max - self.lon_min) / self.cell_size_deg))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown scene keys: {sorted(bad)}")
        if "ddm" in d:
            d["ddm"] = DdmSynthParams.from_dict(d["ddm"])
        if "trunk" in d:
            d["trunk"] = tuple(tuple(p) for p in d["trunk"])
        for k in ("track_heading_deg",):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


def load_scene(path) -> SceneSpec:
    try:
        return SceneSpec.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def bundled_scene(name: str = "default") -> SceneSpec:
    return load_scene(Path(__file__).with_name("scenes") / f"{name}.json")


# --- rivers and masks -------------------------------------------------------

@dataclass(frozen=True)
class River:
    points: np.ndarray      # (n, 2) lat, lon
    width_m: float


def _meander(rng, start, heading, length, n_seg, jitter):
    d = np.array([math.cos(heading), math.sin(heading)])
    normal = np.array([-d[1], d[0]])
    t = np.linspace(0.0, length, n_seg + 1)
    offs = np.concatenate([[0.0], rng.normal(0.0, jitter, n_seg)])
    return np.asarray(start) + t[:, None] * d + offs[:, None] * normal


def river_network(scene: SceneSpec) -> list[River]:
    """Trunk polyline plus seeded tributaries, ``branch_depth`` levels deep."""
    if not scene.trunk:
        return []
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 1]))
    rivers = [River(np.asarray(scene.trunk, dtype=float), scene.trunk_width_m)]
    parents = list(rivers)
    for _ in range(scene.branch_depth):
        children = []
        for parent in parents:
            pts = parent.points
            seg_len = np.linalg.norm(np.diff(pts, axis=0), axis=1)
            total = float(seg_len.sum())
            for _ in range(scene.branches_per_river):
                s = rng.uniform(0.1, 0.9) * total
                i = int(np.searchsorted(np.cumsum(seg_len), s))
                i = min(i, len(seg_len) - 1)
                frac = (s - (np.cumsum(seg_len)[i] - seg_len[i])) / seg_len[i]
                origin = pts[i] + frac * (pts[i + 1] - pts[i])
                base = math.atan2(pts[i + 1][1] - pts[i][1], pts[i + 1][0] - pts[i][0])
                turn = rng.uniform(math.radians(35), math.radians(75)) * rng.choice([-1.0, 1.0])
                length = total * scene.length_decay * rng.uniform(0.6, 1.0)
                path = _meander(rng, origin, base + turn, length, 6, scene.meander_deg)
                children.append(River(path, parent.width_m * scene.width_decay))
        rivers.extend(children)
        parents = children
    return rivers


def _segment_distance_km(lat, lon, a, b, coslat):
    p = np.stack([(lat - a[0]) * KM_PER_DEG, (lon - a[1]) * KM_PER_DEG * coslat], axis=-1)
    v = np.array([(b[0] - a[0]) * KM_PER_DEG, (b[1] - a[1]) * KM_PER_DEG * coslat])
    vv = float(v @ v)
    t = np.clip((p @ v) / vv, 0.0, 1.0) if vv > 0 else np.zeros(p.shape[:-1])
    return np.linalg.norm(p - t[..., None] * v, axis=-1)


def render_widths(scene: SceneSpec, rivers: Optional[list] = None) -> np.ndarray:
    """River-width raster (m) on the scene grid, south row first."""
    rivers = river_network(scene) if rivers is None else rivers
    cs = scene.cell_size_deg
    lat = scene.lat_min + (np.arange(scene.rows) + 0.5) * cs
    lon = scene.lon_min + (np.arange(scene.cols) + 0.5) * cs
    glat, glon = np.meshgrid(lat, lon, indexing="ij")
    coslat = math.cos(math.radians(0.5 * (scene.lat_min + scene.lat_max)))
    # Half the cell diagonal keeps rasterised lines 8-connected.
    min_half_km = cs * KM_PER_DEG * math.sqrt(2) / 2
    widths = np.zeros((scene.rows, scene.cols))
    for river in rivers:
        half = max(river.width_m / 2000.0, min_half_km)
        for a, b in zip(river.points[:-1], river.points[1:]):
            near = _segment_distance_km(glat, glon, a, b, coslat) <= half
            widths[near] = np.maximum(widths[near], river.width_m)
    return widths


def render_mask(scene: SceneSpec) -> tuple[WaterMask, np.ndarray]:
    """Binary water mask (width raster -> grayscale -> Otsu) and the width raster."""
    widths = render_widths(scene)
    if not np.any(widths > 0):
        return WaterMask(scene.lat_min, scene.lon_min, scene.cell_size_deg,
                         np.zeros(widths.shape, dtype=np.uint8)), widths
    mask = width_to_mask(widths, scene.lat_min, scene.lon_min, scene.cell_size_deg)
    return mask, widths


# --- tracks -------------------------------------------------------------------

@dataclass(frozen=True)
class TrackPoint:
    track: int
    index: int
    lat: float
    lon: float
    time: datetime


def sample_tracks(scene: SceneSpec, n_tracks: Optional[int] = None,
                  seed: Optional[int] = None) -> list[TrackPoint]:
    """Straight specular-point tracks, 0.03 deg apart along track, sampled at 2 Hz."""
    n_tracks = scene.n_tracks if n_tracks is None else n_tracks
    if n_tracks <= 0:
        raise DomainError("n_tracks must be positive")
    seed = scene.seed if seed is None else seed
    start = parse_time(scene.start_time)
    out = []
    children = np.random.SeedSequence([seed, 2]).spawn(n_tracks)
    span = max(scene.lat_max - scene.lat_min, scene.lon_max - scene.lon_min)
    kmax = int(math.ceil(2 * span / TRACK_SPACING_DEG)) + 1
    for ti, ss in enumerate(children):
        rng = np.random.default_rng(ss)
        heading = math.radians(rng.uniform(*scene.track_heading_deg))
        if rng.random() < 0.5:
            heading += math.pi      # descending pass
        anchor = (rng.uniform(scene.lat_min, scene.lat_max), rng.uniform(scene.lon_min, scene.lon_max))
        d = (math.cos(heading) * TRACK_SPACING_DEG, math.sin(heading) * TRACK_SPACING_DEG)
        k = np.arange(-kmax, kmax + 1)
        lat = anchor[0] + k * d[0]
        lon = anchor[1] + k * d[1]
        inside = ((lat > scene.lat_min) & (lat < scene.lat_max)
                  & (lon > scene.lon_min) & (lon < scene.lon_max))
        t0 = start + timedelta(hours=6 * ti + float(rng.uniform(0, 6)))
        t0 = t0.replace(microsecond=0)
        for j, (a, b) in enumerate(zip(lat[inside], lon[inside])):
            out.append(TrackPoint(ti, j, float(a), float(b), t0 + timedelta(seconds=SAMPLE_INTERVAL_S * j)))
    return out


# --- DDM synthesis --------------------------------------------------------------

_ROWS = np.arange(DDM_SHAPE[0])[:, None].astype(float)
_COLS = np.arange(DDM_SHAPE[1])[None, :].astype(float)


def coherent_shape(r0, c0, sd, sf) -> np.ndarray:
    return np.exp(-0.5 * ((_ROWS - r0) / sd) ** 2 - 0.5 * ((_COLS - c0) / sf) ** 2)


def incoherent_shape(r0, c0, sd, sf, tail) -> np.ndarray:
    """Horseshoe-like ridge: Gaussian rise, exponential delay tail, Doppler
    spread growing with delay."""
    dr = _ROWS - r0
    delay = np.where(dr < 0, np.exp(-0.5 * (dr / sd) ** 2), np.exp(-dr / tail))
    sf_r = sf * np.sqrt(1.0 + np.maximum(dr, 0.0) / 2.0)
    return delay * np.exp(-0.5 * ((_COLS - c0) / sf_r) ** 2)


def _lerp(a, b, t):
    return a + (b - a) * t


def synth_signal(label: int, params: DdmSynthParams, rng: np.random.Generator,
                 snr_override_db: Optional[float] = None) -> tuple[np.ndarray, float]:
    """One synthetic DDM and its per-bin noise level.

    Land records get a ridge interpolated toward the water peak by
    ``1 - separation``; a ``land_coherent_fraction`` of them look like water.
    """
    noise = rng.uniform(*params.noise_avg)
    ddm = noise * (1.0 + params.noise_rel_sigma * rng.standard_normal(DDM_SHAPE))
    ddm = np.maximum(ddm, 0.0)
    r0 = PEAK_ROW + rng.uniform(-params.peak_jitter, params.peak_jitter)
    c0 = PEAK_COL + rng.uniform(-params.peak_jitter, params.peak_jitter)
    sd, sf = params.peak_spread
    s = params.separation
    # Draw unconditionally so the stream does not depend on the branch taken.
    smooth_land = rng.random() < params.land_coherent_fraction
    if label == 1 or smooth_land:
        snr = rng.uniform(*params.coherent_snr_db)
        shape = coherent_shape(r0, c0, sd, sf)
        diffuse = rng.uniform(*params.diffuse_fraction)
        m = params.incoherent_spread_mult
        shape = shape + diffuse * incoherent_shape(r0, c0, sd * m, sf * m, params.tail_skew)
    else:
        lo = _lerp(params.coherent_snr_db[0], params.incoherent_snr_db[0], s)
        hi = _lerp(params.coherent_snr_db[1], params.incoherent_snr_db[1], s)
        snr = rng.uniform(lo, hi)
        m = _lerp(1.0, params.incoherent_spread_mult, s)
        shape = _lerp(coherent_shape(r0, c0, sd, sf),
                      incoherent_shape(r0, c0, sd * m, sf * m, params.tail_skew), s)
    if snr_override_db is not None:
        snr = snr_override_db
    amp = noise * max(10.0 ** (snr / 10.0) - 1.0, 0.0)
    ddm = ddm + amp * shape / shape.max()
    return ddm, noise


VIOLATIONS = ("inc_angle", "ant_gain", "quality_flags", "snr")


def synth_ddm(label: int, params: DdmSynthParams, rng: np.random.Generator,
              *, rec_id: str = "synthetic", lat: float = 0.0, lon: float = 0.0,
              time: Optional[datetime] = None) -> DdmRecord:
    """Synthetic labelled record; a ``violation_fraction`` of them fail one filter rule.

    Metadata (angle, gain, flags, violation kind) is drawn independently of the label.
    """
    inc = rng.uniform(*params.inc_angle_deg)
    gain = rng.uniform(*params.ant_gain_db)
    flags = 0
    snr_override = None
    if rng.random() < params.violation_fraction:
        kind = VIOLATIONS[int(rng.integers(len(VIOLATIONS)))]
        if kind == "inc_angle":
            inc = rng.uniform(66.0, 80.0)
        elif kind == "ant_gain":
            gain = rng.uniform(-6.0, -0.5)
        elif kind == "quality_flags":
            flags = 1 << int(rng.integers(0, 16))
        else:
            snr_override = rng.uniform(-3.0, 1.0)
    ddm, noise = synth_signal(label, params, rng, snr_override)
    return DdmRecord(id=rec_id, lat=lat, lon=lon, time=time or datetime(2021, 1, 1),
                     sp_inc_angle_deg=float(inc), ant_gain_db=float(gain), quality_flags=flags,
                     noise_avg=float(noise), ddm=ddm, label=int(label))


# --- datasets -----------------------------------------------------------------

@dataclass
class Dataset:
    scene: SceneSpec
    mask: WaterMask
    widths: np.ndarray
    records: list


def _synth_track(scene: SceneSpec, mask: WaterMask, ti: int, pts: list, ss) -> list:
    rng = np.random.default_rng(ss)
    return [synth_ddm(mask.label_at(p.lat, p.lon), scene.ddm, rng,
                      rec_id=f"{scene.name}-t{ti:04d}-{p.index:04d}", lat=p.lat, lon=p.lon, time=p.time)
            for p in pts]


def generate(scene: SceneSpec, workers: int = 1) -> Dataset:
    """In-memory scene -> mask -> tracks -> labelled records.

    Tracks carry their own derived seeds, so ``workers`` changes speed only.
    """
    mask, widths = render_mask(scene)
    by_track: dict[int, list] = {}
    for p in sample_tracks(scene):
        by_track.setdefault(p.track, []).append(p)
    seeds = np.random.SeedSequence([scene.seed, 3]).spawn(len(by_track))
    jobs = [(ti, pts, ss) for (ti, pts), ss in zip(sorted(by_track.items()), seeds)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            chunks = list(pool.map(lambda j: _synth_track(scene, mask, *j), jobs))
    else:
        chunks = [_synth_track(scene, mask, *j) for j in jobs]
    return Dataset(scene, mask, widths, [r for c in chunks for r in c])


def manifest(ds: Dataset) -> dict:
    labels = np.array([r.label for r in ds.records])
    passing = sum(passes_filter(r) for r in ds.records)
    n = len(ds.records)
    return {
        "scene": ds.scene.to_dict(),
        "seed": ds.scene.seed,
        "counts": {
            "records": n,
            "water": int(labels.sum()),
            "land": int(n - labels.sum()),
            "passing_filter": int(passing),
            "filter_violating": int(n - passing),
            "tracks": len({r.id.rsplit("-", 1)[0] for r in ds.records}),
            "mask_water_cells": int(ds.mask.labels.sum()),
        },
        "water_fraction": float(labels.mean()) if n else 0.0,
        "violation_fraction_observed": float((n - passing) / n) if n else 0.0,
    }


def emit_dataset(ds: Dataset, out_dir) -> dict:
    """Write ``dataset.jsonl``, ``mask.pgm`` (+ ``mask.json``) and ``manifest.json``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(ds.records, out / "dataset.jsonl")
        write_mask_pgm(ds.mask, out / "mask.pgm")
        man = manifest(ds)
        (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{exc.filename or out}: {exc.strerror}") from exc
    return man
