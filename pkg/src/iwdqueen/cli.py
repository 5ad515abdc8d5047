"""Command-line front end: ``gen``, ``train``, ``infer``, ``eval`` and ``bench``.

Each subcommand accepts ``--config FILE`` holding ``key = value`` lines
(``#`` starts a comment).  Keys are the long option names with dashes
replaced by underscores; unknown keys are errors.  Explicit flags win over
the file.  The fully resolved settings are echoed next to the outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import datagen
from .ddm_core import (FilterPolicy, WaterMask, filter_reasons, format_time, iter_jsonl, parse_time,
                       read_jsonl, read_mask_pgm, write_mask_pgm)
from .errors import ConfigError, DataError, DomainError, NumericalError, ShapeError
from .evaluation import (BBox, GridAggregate, GridSpec, detection_rate, metrics,
                         write_grid_report, write_summary)
from .models import build_model, classify, load_checkpoint, predict_batch, save_checkpoint
from .training import TrainConfig, split_by_id, train

log = logging.getLogger("iwdqueen")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
REFERENCE_MS = 6.0
CONFIG_ECHO = "resolved_config.txt"
PRED_COLUMNS = ["id", "lat", "lon", "p", "class", "time"]


# --- config handling ----------------------------------------------------------

def _to_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


# Per-command settings: name -> (parser, default).  ``None`` defaults mean
# "required" unless listed in OPTIONAL.
SETTINGS = {
    "gen": {
        "scene": (str, "default"),
        "out": (str, None),
        "seed": (int, None),
        "workers": (int, 1),
    },
    "train": {
        "data": (str, None),
        "model": (str, "queen"),
        "no_se": (_to_bool, False),
        "out": (str, None),
        "epochs": (int, 150),
        "batch_size": (int, 100),
        "lr": (float, 1e-3),
        "seed": (int, 0),
        "val_fraction": (float, 0.2),
        "kappa_form": (str, "printed"),
        "kappa_weight": (float, 1.0),
        "bce_weight": (float, 1.0),
        "dropout": (float, 0.1),
        "max_inc_angle": (float, 65.0),
        "min_gain": (float, 0.0),
        "min_snr": (float, 2.0),
    },
    "infer": {
        "ckpt": (str, None),
        "data": (str, None),
        "out": (str, None),
        "skip_log": (str, None),
        "workers": (int, 1),
        "batch_size": (int, 256),
        "max_inc_angle": (float, 65.0),
        "min_gain": (float, 0.0),
        "min_snr": (float, 2.0),
    },
    "eval": {
        "pred": (str, None),
        "mask": (str, None),
        "out": (str, None),
        "bbox": (str, None),
        "from_": (str, None),
        "to": (str, None),
        "threshold": (float, 0.5),
    },
    "bench": {
        "ckpt": (str, None),
        "n": (int, 200),
        "warmup": (int, 10),
        "workers": (int, 0),
        "seed": (int, 0),
        "out": (str, None),
    },
}
OPTIONAL = {"gen": {"seed"}, "infer": {"skip_log"}, "eval": {"bbox", "from_", "to"},
            "bench": {"out"}}


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _key(name: str) -> str:
    return "from_" if name == "from" else name


def resolve(command: str, file_values: dict, flag_values: dict) -> dict:
    """Defaults <- config file <- explicit flags, with type coercion."""
    spec = SETTINGS[command]
    resolved = {k: d for k, (_, d) in spec.items()}
    for key, raw in file_values.items():
        k = _key(key)
        if k not in spec:
            raise ConfigError(f"unknown config key {key!r} for '{command}'; "
                              f"allowed: {sorted(s.rstrip('_') for s in spec)}")
        try:
            resolved[k] = spec[k][0](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    for k, v in flag_values.items():
        if v is not None:
            resolved[k] = v
    missing = [k for k, v in resolved.items()
               if v is None and k not in OPTIONAL.get(command, set())]
    if missing:
        raise ConfigError(f"'{command}' needs: {', '.join('--' + m.rstrip('_').replace('_', '-') for m in missing)}")
    return resolved


def echo_config(command: str, resolved: dict, path) -> None:
    lines = [f"# iwdqueen {command}"]
    for k in sorted(resolved):
        v = resolved[k]
        lines.append(f"{k.rstrip('_')} = {'' if v is None else v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _policy(cfg: dict) -> FilterPolicy:
    try:
        return FilterPolicy(max_inc_angle_deg=cfg["max_inc_angle"], min_ant_gain_db=cfg["min_gain"],
                            min_snr_db=cfg["min_snr"])
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc


def _dataset_path(path: str) -> Path:
    p = Path(path)
    return p / "dataset.jsonl" if p.is_dir() else p


def _outdir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"{p}: {exc.strerror}") from exc
    return p


# --- commands ---------------------------------------------------------------

def cmd_gen(cfg: dict) -> int:
    scene_arg = cfg["scene"]
    if Path(scene_arg).is_file():
        scene = datagen.load_scene(scene_arg)
    elif scene_arg in ("default", "hard"):
        scene = datagen.bundled_scene(scene_arg)
    else:
        raise DataError(f"{scene_arg}: no such scene file")
    if cfg["seed"] is not None:
        scene = replace(scene, seed=cfg["seed"])
    out = _outdir(cfg["out"])
    ds = datagen.generate(scene, workers=cfg["workers"])
    man = datagen.emit_dataset(ds, out)
    echo_config("gen", cfg, out / CONFIG_ECHO)
    c = man["counts"]
    print(f"wrote {c['records']} records ({c['water']} water, {c['filter_violating']} filter-violating) to {out}")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    out = _outdir(cfg["out"])
    records = read_jsonl(_dataset_path(cfg["data"]))
    policy = _policy(cfg)
    kept = [r for r in records if not filter_reasons(r, policy)]
    if not kept:
        raise DataError(f"{cfg['data']}: no records pass the quality filter")
    tr, va = split_by_id(kept, cfg["val_fraction"])
    if not tr:
        raise DataError("training split is empty")
    tc = TrainConfig(batch_size=cfg["batch_size"], epochs=cfg["epochs"], lr=cfg["lr"], seed=cfg["seed"],
                     bce_weight=cfg["bce_weight"], kappa_weight=cfg["kappa_weight"],
                     kappa_form=cfg["kappa_form"])
    try:
        model = build_model(cfg["model"], cfg["seed"], use_se=not cfg["no_se"], dropout_rate=cfg["dropout"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    echo_config("train", cfg, out / CONFIG_ECHO)
    print(f"train {len(tr)} / val {len(va)} records ({len(records) - len(kept)} filtered)")

    def report(row):
        print(f"epoch {row['epoch']:>3}  loss {row['train_loss']:.4f}  val_f1 {_fmt(row.get('val_f1'))}"
              f"  val_kappa {_fmt(row.get('val_kappa_metric'))}", flush=True)

    train(model, tr, tc, va or None, metrics_csv=out / "metrics.csv", on_epoch=report)
    save_checkpoint(model, out / "checkpoint.json")
    print(f"checkpoint written to {out / 'checkpoint.json'}")
    return EXIT_OK


def _fmt(v) -> str:
    return "undefined" if v is None else f"{v:.4f}"


def cmd_infer(cfg: dict) -> int:
    model = load_checkpoint(cfg["ckpt"])
    policy = _policy(cfg)
    out = Path(cfg["out"])
    skip_path = Path(cfg["skip_log"]) if cfg["skip_log"] else out.with_name(out.stem + ".skipped.csv")
    kept, skipped = [], []
    for r in iter_jsonl(_dataset_path(cfg["data"])):
        reasons = filter_reasons(r, policy)
        (skipped if reasons else kept).append((r, reasons))
    bs = max(1, cfg["batch_size"])
    chunks = [kept[i:i + bs] for i in range(0, len(kept), bs)]

    def run(chunk):
        return predict_batch(model, [r.ddm for r, _ in chunk])

    if cfg["workers"] > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(cfg["workers"]) as pool:
            probs = list(pool.map(run, chunks))
    else:
        probs = [run(c) for c in chunks]
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PRED_COLUMNS)
            for chunk, ps in zip(chunks, probs):
                for (r, _), p in zip(chunk, ps):
                    w.writerow([r.id, repr(r.lat), repr(r.lon), repr(float(p)),
                                classify(float(p), model.threshold), format_time(r.time)])
        with open(skip_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "lat", "lon", "reasons"])
            for r, reasons in skipped:
                w.writerow([r.id, repr(r.lat), repr(r.lon), ";".join(reasons)])
    except OSError as exc:
        raise DataError(f"{exc.filename}: {exc.strerror}") from exc
    echo_config("infer", cfg, out.with_name(out.stem + ".config.txt"))
    print(f"{len(kept)} predictions -> {out}; {len(skipped)} skipped -> {skip_path}")
    return EXIT_OK


def read_predictions(path) -> list[tuple]:
    """``(id, lat, lon, p, class, time)`` rows from an infer CSV."""
    rows = []
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            missing = set(PRED_COLUMNS[:5]) - set(reader.fieldnames or [])
            if missing:
                raise DataError(f"{path}: missing columns {sorted(missing)}")
            for n, row in enumerate(reader, 2):
                try:
                    t = parse_time(row["time"]) if row.get("time") else None
                    rows.append((row["id"], float(row["lat"]), float(row["lon"]), float(row["p"]),
                                 int(row["class"]), t))
                except (ValueError, DomainError) as exc:
                    raise DataError(f"{path}:{n}: {exc}") from exc
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    return rows


def parse_bboxes(text: Optional[str]) -> dict[str, BBox]:
    """``name:lat_min,lat_max,lon_min,lon_max`` entries separated by ``;``."""
    out = {}
    if not text:
        return out
    for i, part in enumerate(p for p in text.split(";") if p.strip()):
        name, _, coords = part.rpartition(":")
        name = name.strip() or f"bbox{i}"
        try:
            vals = [float(v) for v in coords.split(",")]
        except ValueError:
            raise ConfigError(f"bad bbox {part!r}") from None
        if len(vals) != 4:
            raise ConfigError(f"bbox {part!r} needs lat_min,lat_max,lon_min,lon_max")
        try:
            out[name] = BBox(*vals)
        except DomainError as exc:
            raise ConfigError(f"bbox {part!r}: {exc}") from exc
    return out


def _region_metrics(rows, mask: WaterMask, grid: GridSpec, threshold: float):
    agg = GridAggregate(grid)
    for _, lat, lon, p, _, _ in rows:
        agg.add(lat, lon, p)
    agg.add_mask(mask)
    c = agg.confusion(threshold)
    return agg, (metrics(c).as_dict() if c.total else {"cells": 0}) | {"cells": c.total, "points": agg.binned}


def cmd_eval(cfg: dict) -> int:
    out = _outdir(cfg["out"])
    rows = read_predictions(cfg["pred"])
    mask = read_mask_pgm(cfg["mask"])
    grid = GridSpec.from_mask(mask)
    try:
        start = parse_time(cfg["from_"]) if cfg["from_"] else None
        end = parse_time(cfg["to"]) if cfg["to"] else None
    except (ValueError, DomainError) as exc:
        raise ConfigError(f"bad date: {exc}") from exc
    if start and end and end <= start:
        raise ConfigError("--to must be after --from")
    if (start or end) and any(r[5] is None for r in rows):
        raise DataError(f"{cfg['pred']}: date filtering needs a time column")
    rows = [r for r in rows if (start is None or r[5] >= start) and (end is None or r[5] < end)]
    boxes = parse_bboxes(cfg["bbox"])
    th = cfg["threshold"]

    agg, summary = _region_metrics(rows, mask, grid, th)
    regions = {"region": summary}
    obs = [(lat, lon, t, cls) for _, lat, lon, _, cls, t in rows]
    detection = {"region": detection_rate(obs).as_dict()}
    for name, box in boxes.items():
        inside = [r for r in rows if box.contains(r[1], r[2])]
        regions[name] = _region_metrics(inside, mask, grid, th)[1]
        detection[name] = detection_rate(obs, box).as_dict()
    write_grid_report(agg, out / "grid.csv", th)
    write_summary(out / "metrics.json", regions)
    meta = {"from": cfg["from_"], "to": cfg["to"], "records": len(rows), "regions": detection}
    (out / "detection.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_mask_pgm(WaterMask(grid.origin_lat, grid.origin_lon, grid.cell_size_deg,
                             agg.prediction_raster(th)), out / "map.pgm")
    echo_config("eval", cfg, out / CONFIG_ECHO)
    r = regions["region"]
    print(f"{len(rows)} points, {r['cells']} scored cells; F1 {r.get('f1', 'undefined')}  kappa {r.get('kappa', 'undefined')}")
    return EXIT_OK


def fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "platform": platform.platform(),
        "machine": platform.machine(),
        "processor": platform.processor() or "unknown",
        "cpu_count": os.cpu_count(),
    }


def _latency_stats(samples_s: list[float]) -> dict:
    ms = np.asarray(samples_s) * 1e3
    return {"mean_ms": float(ms.mean()), "median_ms": float(statistics.median(ms)),
            "p95_ms": float(np.percentile(ms, 95)), "n": int(ms.size)}


def run_bench(model, n: int, warmup: int = 10, workers: int = 0, seed: int = 0) -> dict:
    """Single-record eval-mode forward latency, sequential and from a thread pool."""
    if n < 1:
        raise ConfigError("--n must be >= 1")
    rng = np.random.default_rng(seed)
    params = datagen.DdmSynthParams(violation_fraction=0.0)
    ddms = [datagen.synth_ddm(int(rng.integers(2)), params, rng).ddm for _ in range(n)]
    for d in ddms[:warmup]:
        predict_batch(model, [d])

    def one(d):
        t0 = time.perf_counter()
        predict_batch(model, [d])
        return time.perf_counter() - t0

    single = [one(d) for d in ddms]
    workers = workers or os.cpu_count() or 1
    t0 = time.perf_counter()
    with ThreadPoolExecutor(workers) as pool:
        parallel = list(pool.map(one, ddms))
    wall = time.perf_counter() - t0
    res = {
        "single_thread": _latency_stats(single),
        "parallel": _latency_stats(parallel) | {"workers": workers, "throughput_per_s": n / wall},
        "reference_ms": REFERENCE_MS,
        "environment": fingerprint(),
    }
    res["ratio_to_reference"] = res["single_thread"]["median_ms"] / REFERENCE_MS
    return res


def cmd_bench(cfg: dict) -> int:
    model = load_checkpoint(cfg["ckpt"])
    res = run_bench(model, cfg["n"], cfg["warmup"], cfg["workers"], cfg["seed"])
    s, p = res["single_thread"], res["parallel"]
    env = res["environment"]
    print(f"environment: python {env['python']}, numpy {env['numpy']}, {env['platform']}, {env['cpu_count']} CPUs")
    print(f"single thread: mean {s['mean_ms']:.3f} ms  median {s['median_ms']:.3f} ms  p95 {s['p95_ms']:.3f} ms  (n={s['n']})")
    print(f"parallel x{p['workers']}: mean {p['mean_ms']:.3f} ms  median {p['median_ms']:.3f} ms  "
          f"p95 {p['p95_ms']:.3f} ms  throughput {p['throughput_per_s']:.1f}/s")
    verdict = "faster than" if s["median_ms"] <= REFERENCE_MS else "slower than"
    print(f"reference: {REFERENCE_MS:.1f} ms per DDM; median is {res['ratio_to_reference']:.2f}x ({verdict} reference)")
    if cfg["out"]:
        out = Path(cfg["out"])
        try:
            out.parent.mkdir(parents=True, exist_ok=True)
            out.write_text(json.dumps(res, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"{out}: {exc.strerror}") from exc
        echo_config("bench", cfg, out.with_name(out.stem + ".config.txt"))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "bench": cmd_bench}


# --- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="iwdqueen", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text, argument_default=None)
        p.add_argument("--config", help="key = value settings file")
        return p

    p = add("gen", "generate a synthetic scene: dataset.jsonl, mask.pgm, manifest.json")
    p.add_argument("--scene", help="scene JSON file, or 'default' / 'hard' for the bundled scenes")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int, help="override the scene seed")
    p.add_argument("--workers", type=int)

    p = add("train", "train a model; writes checkpoint.json and metrics.csv")
    p.add_argument("--data", help="dataset directory or JSONL file")
    p.add_argument("--model", choices=["queen", "transformer"])
    p.add_argument("--no-se", dest="no_se", action="store_const", const=True,
                   help="drop the entangling stage of the quantum heads")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--kappa-form", dest="kappa_form", choices=["printed", "cohen"])
    p.add_argument("--kappa-weight", dest="kappa_weight", type=float)
    p.add_argument("--bce-weight", dest="bce_weight", type=float)
    p.add_argument("--dropout", type=float)
    _filter_flags(p)

    p = add("infer", "predict water probability per record")
    p.add_argument("--ckpt", help="checkpoint JSON")
    p.add_argument("--data", help="dataset directory or JSONL file")
    p.add_argument("--out", help="prediction CSV")
    p.add_argument("--skip-log", dest="skip_log", help="CSV of filtered records (default: <out>.skipped.csv)")
    p.add_argument("--workers", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    _filter_flags(p)

    p = add("eval", "grid metrics, detection rates and a PGM map from predictions")
    p.add_argument("--pred", help="prediction CSV from infer")
    p.add_argument("--mask", help="ground-truth mask PGM (with .json sidecar)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--bbox", help="[name:]lat_min,lat_max,lon_min,lon_max; separate several with ';'")
    p.add_argument("--from", dest="from_", help="inclusive start time (ISO 8601)")
    p.add_argument("--to", help="exclusive end time (ISO 8601)")
    p.add_argument("--threshold", type=float)

    p = add("bench", "single-record forward latency")
    p.add_argument("--ckpt", help="checkpoint JSON")
    p.add_argument("--n", type=int, help="number of timed records")
    p.add_argument("--warmup", type=int)
    p.add_argument("--workers", type=int, help="thread pool size (default: all CPUs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="optional JSON report")
    return ap


def _filter_flags(p):
    p.add_argument("--max-inc-angle", dest="max_inc_angle", type=float)
    p.add_argument("--min-gain", dest="min_gain", type=float)
    p.add_argument("--min-snr", dest="min_snr", type=float)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(args.command, file_values, flags)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DomainError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
