import csv
import json
from dataclasses import replace

import pytest

from iwdqueen import cli, datagen
from iwdqueen.errors import NumericalError

SCENE = datagen.SceneSpec(name="tiny", lat_min=0.0, lat_max=0.4, lon_min=10.0, lon_max=10.4,
                          trunk=((0.2, 10.0), (0.25, 10.4)), trunk_width_m=3000.0,
                          branch_depth=1, branches_per_river=2, n_tracks=10, seed=5)


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = root / "scene.json"
    scene.write_text(json.dumps(SCENE.to_dict()))
    for tag in ("a", "b"):
        d = root / tag
        assert run("gen", "--scene", scene, "--out", d / "data") == 0
        assert run("train", "--data", d / "data", "--model", "queen", "--out", d / "run",
                   "--epochs", 2, "--batch-size", 50) == 0
        assert run("infer", "--ckpt", d / "run" / "checkpoint.json", "--data", d / "data",
                   "--out", d / "pred.csv") == 0
        assert run("eval", "--pred", d / "pred.csv", "--mask", d / "data" / "mask.pgm",
                   "--out", d / "eval") == 0
    return root


def test_round_trip_emits_all_artifacts(pipeline):
    a = pipeline / "a"
    for rel in ("data/dataset.jsonl", "data/mask.pgm", "data/mask.json", "data/manifest.json",
                "data/resolved_config.txt", "run/checkpoint.json", "run/metrics.csv",
                "run/resolved_config.txt", "pred.csv", "pred.skipped.csv", "pred.config.txt",
                "eval/grid.csv", "eval/metrics.json", "eval/detection.json", "eval/map.pgm",
                "eval/resolved_config.txt"):
        assert (a / rel).is_file(), rel


def test_runs_are_byte_identical(pipeline):
    for rel in ("data/dataset.jsonl", "data/mask.pgm", "run/checkpoint.json", "run/metrics.csv",
                "pred.csv", "eval/grid.csv", "eval/metrics.json", "eval/map.pgm"):
        assert (pipeline / "a" / rel).read_bytes() == (pipeline / "b" / rel).read_bytes(), rel


def test_infer_accounts_for_every_record(pipeline):
    a = pipeline / "a"
    n_in = sum(1 for _ in open(a / "data" / "dataset.jsonl"))
    pred = list(csv.DictReader(open(a / "pred.csv")))
    skipped = list(csv.DictReader(open(a / "pred.skipped.csv")))
    assert len(pred) + len(skipped) == n_in
    assert skipped and all(r["reasons"] for r in skipped)
    assert list(pred[0])[:5] == ["id", "lat", "lon", "p", "class"]
    assert all(int(r["class"]) == int(float(r["p"]) >= 0.5) for r in pred)


def test_infer_parallel_matches_sequential(pipeline, tmp_path):
    a = pipeline / "a"
    assert run("infer", "--ckpt", a / "run" / "checkpoint.json", "--data", a / "data",
               "--out", tmp_path / "p.csv", "--workers", 3, "--batch-size", 17) == 0
    assert (tmp_path / "p.csv").read_bytes() == (a / "pred.csv").read_bytes()


def test_bbox_covering_region_equals_no_bbox(pipeline, tmp_path):
    a = pipeline / "a"
    assert run("eval", "--pred", a / "pred.csv", "--mask", a / "data" / "mask.pgm", "--out", tmp_path,
               "--bbox", "whole:0,0.4,10,10.4") == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    d = json.loads((tmp_path / "detection.json").read_text())
    assert m["whole"] == m["region"]
    assert d["regions"]["whole"] == d["regions"]["region"]
    assert m["region"] == json.loads((a / "eval" / "metrics.json").read_text())["region"]


def test_date_window_filters_points(pipeline, tmp_path):
    a = pipeline / "a"
    assert run("eval", "--pred", a / "pred.csv", "--mask", a / "data" / "mask.pgm", "--out", tmp_path,
               "--from", "2030-01-01", "--to", "2030-02-01") == 0
    d = json.loads((tmp_path / "detection.json").read_text())
    assert d["records"] == 0 and d["regions"]["region"]["rate"] == "undefined"


def test_config_file_and_flag_precedence(pipeline, tmp_path):
    a = pipeline / "a"
    cfg = tmp_path / "train.cfg"
    cfg.write_text(f"# comment\ndata = {a / 'data'}\nepochs = 1\nbatch-size = 60\nmodel = transformer\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "r", "--epochs", 0) == 0
    echo = (tmp_path / "r" / "resolved_config.txt").read_text()
    assert "epochs = 0" in echo and "batch_size = 60" in echo and "model = transformer" in echo


def test_unknown_config_key_is_exit_2(tmp_path, capsys):
    cfg = tmp_path / "x.cfg"
    cfg.write_text("scene = default\nflavour = mint\n")
    assert run("gen", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "flavour" in capsys.readouterr().err


def test_missing_required_setting_is_exit_2(tmp_path):
    assert run("train", "--data", tmp_path) == 2


def test_bad_bbox_is_exit_2(pipeline, tmp_path):
    a = pipeline / "a"
    assert run("eval", "--pred", a / "pred.csv", "--mask", a / "data" / "mask.pgm", "--out", tmp_path,
               "--bbox", "1,2,3") == 2


def test_missing_data_is_exit_3(tmp_path):
    assert run("train", "--data", tmp_path / "nope.jsonl", "--out", tmp_path / "o") == 3
    assert run("gen", "--scene", tmp_path / "nope.json", "--out", tmp_path / "o") == 3


def test_numerical_abort_is_exit_4(pipeline, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise NumericalError("non-finite loss at epoch 1 batch 0")
    monkeypatch.setattr(cli, "train", boom)
    assert run("train", "--data", pipeline / "a" / "data", "--out", tmp_path) == 4


def test_bench_reports_latency_and_environment(pipeline, tmp_path, capsys):
    ckpt = pipeline / "a" / "run" / "checkpoint.json"
    assert run("bench", "--ckpt", ckpt, "--n", 20, "--warmup", 2, "--workers", 2,
               "--out", tmp_path / "b.json") == 0
    out = capsys.readouterr().out
    assert "median" in out and "ms" in out and "6.0 ms per DDM" in out and "numpy" in out
    rep = json.loads((tmp_path / "b.json").read_text())
    assert rep["single_thread"]["n"] == 20 and rep["parallel"]["workers"] == 2
    assert rep["environment"]["cpu_count"] >= 1


def test_gen_seed_override(tmp_path):
    scene = tmp_path / "s.json"
    scene.write_text(json.dumps(replace(SCENE, n_tracks=2).to_dict()))
    assert run("gen", "--scene", scene, "--out", tmp_path / "a", "--seed", 9) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["seed"] == 9
