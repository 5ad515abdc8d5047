"""Acceptance suite: one PASS/FAIL line per criterion (see the summary section).

The end-to-end and ablation checks train real models and take several
minutes; everything else runs in seconds.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from iwdqueen import cli, datagen, qsim
from iwdqueen.ddm_core import otsu_threshold, passes_filter
from iwdqueen.evaluation import ConfusionCounts, metrics
from iwdqueen.models import build_model, classify
from iwdqueen.training import TrainConfig, bce_loss, kappa_loss, predict_arrays, split_by_id, stack_records, train

import oracles as O
from test_models import fd_check_group


def unitary_of(fn):
    return np.stack([fn(np.eye(16, dtype=complex)[k]) for k in range(16)], axis=1)


def test_gate_correctness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst_form = 0.0
    for theta in (0.0, 0.5, -2.0, math.pi):
        for q in range(4):
            worst_form = max(worst_form, np.abs(unitary_of(lambda s: qsim.apply_rx(s, q, theta)) - O.RX(q, theta)).max(),
                             np.abs(unitary_of(lambda s: qsim.apply_ry(s, q, theta)) - O.RY(q, theta)).max())
        for a, b in ((0, 1), (2, 3)):
            worst_form = max(worst_form, np.abs(unitary_of(lambda s: qsim.apply_xx(s, a, b, theta)) - O.XX(a, b, theta)).max())
        for c, t in ((0, 1), (3, 2)):
            worst_form = max(worst_form, np.abs(unitary_of(lambda s: qsim.apply_crx(s, c, t, theta)) - O.CRX(c, t, theta)).max())
    worst_unit = 0.0
    kinds = ("rx", "ry", "xx", "crx")
    for i in range(1000):
        theta = rng.uniform(-4 * math.pi, 4 * math.pi)
        a, b = (int(v) for v in rng.choice(4, 2, replace=False))
        kind = kinds[i % 4]
        fn = {"rx": lambda s: qsim.apply_rx(s, a, theta), "ry": lambda s: qsim.apply_ry(s, a, theta),
              "xx": lambda s: qsim.apply_xx(s, a, b, theta), "crx": lambda s: qsim.apply_crx(s, a, b, theta)}[kind]
        u = unitary_of(fn)
        worst_unit = max(worst_unit, np.abs(u.conj().T @ u - np.eye(16)).max())
    psi = rng.normal(size=(10, 16)) + 1j * rng.normal(size=(10, 16))
    zero = np.zeros(qsim.N_ANGLES)
    identity = np.array_equal(qsim.run_se(qsim.run_fe(psi, zero), zero), psi)
    elapsed = time.perf_counter() - t0
    ok = worst_form < 1e-12 and worst_unit < 1e-12 and identity and elapsed < 1.0
    assert report("gate correctness", ok,
                  f"closed-form err {worst_form:.1e}, max|U^dag U - I| {worst_unit:.1e} over 1000 gates, "
                  f"zero-angle identity {identity}, {elapsed:.2f} s (< 1 s)")


def test_analytic_head_oracle(report):
    x = np.random.default_rng(101).uniform(-2 * math.pi, 2 * math.pi, (1000, 4))
    err = np.abs(qsim.run_head(x, np.zeros(qsim.N_ANGLES)) - np.cos(x[:, [0, 2]])).max()
    assert report("analytic head oracle", err < 1e-12, f"max err {err:.1e} over 1000 inputs (tol 1e-12)")


def test_dense_matrix_oracle(report):
    rng = np.random.default_rng(102)
    err = 0.0
    for _ in range(100):
        x = rng.uniform(-math.pi, math.pi, 4)
        p = rng.uniform(-math.pi, math.pi, qsim.N_ANGLES)
        err = max(err, np.abs(qsim.run_head(x, p) - O.head_output(x, p)).max())
    assert report("dense-matrix oracle", err < 1e-10, f"max err {err:.1e} over 100 draws (tol 1e-10)")


def test_gradient_triple_check(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(103)
    worst_q = 0.0
    for _ in range(20):
        x = rng.uniform(-math.pi, math.pi, 4)
        p = rng.uniform(-math.pi, math.pi, qsim.N_ANGLES)
        u = rng.normal(size=2)
        adj, _ = qsim.head_gradient(x, p, u)
        ps = qsim.parameter_shift_gradient(x, p, u)
        fd = O.central_fd(lambda v: float(u @ O.head_output(x, v)), p, h=1e-5)
        scale = np.maximum(np.abs(fd), 1e-3)
        worst_q = max(worst_q, (np.abs(adj - ps) / scale).max(), (np.abs(adj - fd) / scale).max(),
                      (np.abs(ps - fd) / scale).max())
    groups = {}
    for kind, names in (("queen", ("dat", "qfrb", "mlp")), ("transformer", ("cfeb",))):
        model = build_model(kind, 7)
        for g in names:
            groups[g] = fd_check_group(model, g, n=25, seed=11)
    elapsed = time.perf_counter() - t0
    ok = worst_q <= 1e-6 and max(groups.values()) <= 1e-4 and elapsed < 120
    detail = ", ".join(f"{g} {e:.1e}" for g, e in groups.items())
    assert report("gradient triple check", ok,
                  f"quantum adjoint/shift/FD rel err {worst_q:.1e} (tol 1e-6); model FD rel err {detail} "
                  f"(tol 1e-4); {elapsed:.1f} s (< 120 s)")


def test_loss_oracles(report):
    rng = np.random.default_rng(104)
    err_b = err_k = 0.0
    skips = 0
    for _ in range(1000):
        b = int(rng.integers(2, 101))
        p = rng.uniform(0, 1, b)
        y = rng.integers(0, 2, b).astype(float)
        err_b = max(err_b, abs(float(bce_loss(p, y).data) - O.bce_by_hand(p, y)))
        k = kappa_loss(p, y)
        if k is None:
            skips += 1
        else:
            err_k = max(err_k, abs(float(k.data) - O.printed_kappa_by_hand(p, y)))
    zero_skips = sum(kappa_loss(np.zeros(n), np.zeros(n)) is None for n in (2, 10, 100))
    ok = err_b < 1e-12 and err_k < 1e-12 and skips == 0 and zero_skips == 3
    assert report("loss oracles", ok,
                  f"BCE err {err_b:.1e}, kappa err {err_k:.1e} (tol 1e-12); skips on random batches {skips}, "
                  f"on all-zero batches {zero_skips}/3")


def test_metric_oracle(report):
    rng = np.random.default_rng(105)
    worst = 0.0
    mismatched_none = 0
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        pred = rng.integers(0, 2, n)
        truth = (rng.random(n) < rng.random()).astype(int)
        counts = O.recount(pred, truth)
        m = metrics(ConfusionCounts.from_labels(pred, truth))
        for got, want in zip((m.recall, m.precision, m.f1, m.oa, m.pe, m.kappa), O.metrics_by_hand(*counts)):
            if (got is None) != (want is None):
                mismatched_none += 1
            elif got is not None:
                worst = max(worst, abs(got - want))
    # Independent confirmation: oa = 0.97, pe = 0.04 * 0.05 + 0.96 * 0.95 = 0.914.
    by_hand = (0.97 - 0.914) / (1 - 0.914)
    kappa = metrics(ConfusionCounts(tp=3, fp=1, tn=94, fn=2)).kappa
    ok = worst < 1e-12 and mismatched_none == 0 and round(kappa, 4) == 0.6512 and abs(kappa - by_hand) < 1e-12
    assert report("metric oracle", ok,
                  f"max err {worst:.1e} over 1000 vectors, undefined mismatches {mismatched_none}; "
                  f"worked example kappa {kappa:.4f} (hand {by_hand:.4f})")


def test_otsu_oracle(report):
    rng = np.random.default_rng(106)
    agree = total = 0
    while total < 500:
        v = rng.random(int(rng.integers(2, 30))) ** rng.uniform(0.3, 3)
        if len(set(np.minimum((v * 256).astype(int), 255))) < 2:
            continue
        total += 1
        agree += otsu_threshold(v) == O.otsu_exhaustive(v)
    assert report("Otsu oracle", agree == total, f"{agree}/{total} thresholds equal exhaustive search")


def _train_and_score(kind, tr, va, seed=0, epochs=30, use_se=True):
    model = build_model(kind, seed, use_se=use_se)
    train(model, tr, TrainConfig(epochs=epochs, seed=seed))
    xv, yv = stack_records(va)
    m = metrics(ConfusionCounts.from_labels(classify(predict_arrays(model, xv)), yv))
    return m


@pytest.mark.slow
def test_synthetic_end_to_end(report):
    t0 = time.perf_counter()
    ds = datagen.generate(datagen.bundled_scene("default"))
    tr, va = split_by_id([r for r in ds.records if passes_filter(r)])
    q = _train_and_score("queen", tr, va)
    t = _train_and_score("transformer", tr, va)
    elapsed = time.perf_counter() - t0
    qk, tk = q.kappa or 0.0, t.kappa or 0.0
    ok = (len(tr) >= 5000 and len(va) >= 1000 and qk >= 0.8 and (q.f1 or 0.0) >= 0.9
          and qk >= tk - 0.02 and elapsed < 1800)
    assert report("synthetic end-to-end", ok,
                  f"train {len(tr)} / val {len(va)}; IWD-QUEEN kappa {qk:.4f} F1 {q.f1:.4f} "
                  f"(need >= 0.8 / 0.9); IWD-Transformer kappa {tk:.4f} (QUEEN >= {tk - 0.02:.4f}); "
                  f"{elapsed / 60:.1f} min (< 30)")


ABLATION_SEEDS = (0, 1, 2, 3, 4)
ABLATION_EPOCHS = 10


@pytest.mark.slow
def test_ablation_direction(report):
    ds = datagen.generate(datagen.bundled_scene("hard"))
    tr, va = split_by_id([r for r in ds.records if passes_filter(r)])
    with_se, without = [], []
    for seed in ABLATION_SEEDS:
        with_se.append(_train_and_score("queen", tr, va, seed, ABLATION_EPOCHS, True).kappa or 0.0)
        without.append(_train_and_score("queen", tr, va, seed, ABLATION_EPOCHS, False).kappa or 0.0)
    a, b = float(np.mean(with_se)), float(np.mean(without))
    spread = float(np.std(with_se + without))
    ok = a >= b
    assert report("ablation direction", ok,
                  f"mean val kappa with SE {a:.4f} vs without {b:.4f} over {len(ABLATION_SEEDS)} seeds "
                  f"(gap {a - b:+.4f}, seed spread {spread:.4f}); per seed SE {np.round(with_se, 4).tolist()} "
                  f"no-SE {np.round(without, 4).tolist()}")


def test_latency(report, capsys):
    model = build_model("queen", 0)
    res = cli.run_bench(model, n=300, warmup=20, workers=1)
    med = res["single_thread"]["median_ms"]
    ok = med <= 10.0
    line = (f"median {med:.3f} ms single-threaded (limit 10 ms; reference 6.0 ms per DDM, "
            f"ratio {res['ratio_to_reference']:.2f}); p95 {res['single_thread']['p95_ms']:.3f} ms")
    assert report("latency", ok, line)


def test_determinism(report, tmp_path):
    scene = replace(datagen.bundled_scene("default"), n_tracks=30)
    (tmp_path / "scene.json").write_text(json.dumps(scene.to_dict()))
    for tag in ("a", "b"):
        d = tmp_path / tag
        assert cli.main(["gen", "--scene", str(tmp_path / "scene.json"), "--out", str(d / "data")]) == 0
        assert cli.main(["train", "--data", str(d / "data"), "--out", str(d / "run"), "--epochs", "2"]) == 0
        assert cli.main(["infer", "--ckpt", str(d / "run" / "checkpoint.json"), "--data", str(d / "data"),
                         "--out", str(d / "pred.csv")]) == 0
    same = {rel: (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
            for rel in ("data/dataset.jsonl", "run/checkpoint.json", "pred.csv")}
    assert report("determinism", all(same.values()),
                  ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in same.items()))
