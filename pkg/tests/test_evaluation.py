import csv
import json
from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from iwdqueen.ddm_core import WaterMask
from iwdqueen.errors import DomainError
from iwdqueen.evaluation import (BBox, ConfusionCounts, GridAggregate, GridSpec, detection_rate,
                                 grid_aggregate, metrics, metrics_from_labels, write_grid_report,
                                 write_summary)

import oracles as O


def test_metrics_equal_brute_force_recount():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 60))
        pred = rng.integers(0, 2, n)
        truth = (rng.random(n) < rng.uniform(0, 1)).astype(int)
        c = ConfusionCounts.from_labels(pred, truth)
        assert (c.tp, c.fp, c.tn, c.fn) == O.recount(pred, truth)
        m = metrics(c)
        ref = O.metrics_by_hand(*O.recount(pred, truth))
        for got, want in zip((m.recall, m.precision, m.f1, m.oa, m.pe, m.kappa), ref):
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-12)


def test_worked_example():
    # oa = 0.97, pe = 0.04*0.05 + 0.96*0.95 = 0.914, kappa = 0.056 / 0.086
    m = metrics(ConfusionCounts(tp=3, fp=1, tn=94, fn=2))
    assert m.oa == pytest.approx(0.97)
    assert m.pe == pytest.approx(0.914)
    assert round(m.kappa, 4) == 0.6512
    assert m.recall == pytest.approx(0.6) and m.precision == pytest.approx(0.75)
    assert m.f1 == pytest.approx(2 * 0.6 * 0.75 / 1.35)


def test_undefined_metrics_are_none_and_spelled_out():
    m = metrics(ConfusionCounts(tn=10))
    assert m.recall is None and m.precision is None and m.f1 is None and m.kappa is None
    assert m.oa == 1.0
    assert m.as_dict()["kappa"] == "undefined"
    with pytest.raises(DomainError):
        metrics(ConfusionCounts())
    with pytest.raises(DomainError):
        ConfusionCounts(tp=-1)
    with pytest.raises(DomainError):
        metrics_from_labels([1, 0], [1])


def test_grid_binning_edges():
    g = GridSpec(0.0, 0.0, 10, 10, 0.01)
    assert g.cell_of(0.03, 0.0) == (3, 0)          # exact edge -> higher cell
    assert g.cell_of(0.0299999, 0.0) == (2, 0)
    assert g.cell_of(0.1, 0.05) is None            # north edge is outside
    assert g.cell_of(-1e-9, 0.05) is None
    agg = grid_aggregate([(0.005, 0.005, 0.2), (0.006, 0.004, 0.6), (5.0, 5.0, 1.0)], g)
    assert agg.total == 3 and agg.skipped == 1 and agg.binned == 2
    assert agg.cells[(0, 0)].mean_p == pytest.approx(0.4)


def test_grid_from_bounds():
    g = GridSpec.from_bounds(-4.0, -2.5, -66.0, -64.5)
    assert (g.rows, g.cols) == (150, 150)


def _random_samples(rng, n):
    return [(float(rng.uniform(0, 0.1)), float(rng.uniform(0, 0.1)), float(rng.random())) for _ in range(n)]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 60), st.integers(0, 60))
def test_merge_is_consistent_with_single_pass(seed, n, cut):
    rng = np.random.default_rng(seed)
    g = GridSpec(0.0, 0.0, 10, 10, 0.01)
    s = _random_samples(rng, n)
    cut = min(cut, n)
    whole = grid_aggregate(s, g)
    merged = grid_aggregate(s[:cut], g).merge(grid_aggregate(s[cut:], g))
    assert merged.total == whole.total and merged.skipped == whole.skipped
    assert set(merged.cells) == set(whole.cells)
    for k in whole.cells:
        assert merged.cells[k].n == whole.cells[k].n
        assert merged.cells[k].sum_p == pytest.approx(whole.cells[k].sum_p)


def test_merge_rejects_other_grids():
    with pytest.raises(DomainError):
        GridAggregate(GridSpec(0, 0, 2, 2)).merge(GridAggregate(GridSpec(0, 0, 3, 3)))


def test_confusion_and_raster_against_mask(tmp_path):
    mask = WaterMask(0.0, 0.0, 0.01, np.array([[1, 0], [0, 0]]))
    agg = GridAggregate(GridSpec.from_mask(mask))
    agg.add(0.005, 0.005, 0.9)     # water cell, predicted water
    agg.add(0.005, 0.015, 0.7)     # land cell, predicted water
    agg.add(0.015, 0.015, 0.1)     # land cell, predicted land
    agg.add_mask(mask)
    c = agg.confusion()
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 1, 0)   # the unvisited cell is not scored
    assert agg.prediction_raster().tolist() == [[1, 1], [0, 0]]
    write_grid_report(agg, tmp_path / "g.csv")
    rows = list(csv.DictReader(open(tmp_path / "g.csv")))
    assert [r["agree"] for r in rows] == ["1", "0", "1"]
    assert float(rows[1]["lon_min"]) == pytest.approx(0.01)


def test_detection_rate_windows():
    t0 = datetime(2021, 1, 1, tzinfo=timezone.utc)
    t1 = datetime(2021, 2, 1, tzinfo=timezone.utc)
    obs = [(0.0, 0.0, t0, 1), (1.0, 1.0, t0, 0), (1.0, 1.0, t1, 1), (2.0, 2.0, t0, 1)]
    assert detection_rate(obs).as_dict() == {"detected": 3, "total": 4, "rate": 0.75}
    box = BBox(0.0, 1.0, 0.0, 1.0)                       # closed on all sides
    assert detection_rate(obs, box).total == 3
    assert detection_rate(obs, box, start=t0, end=t1).total == 2   # end is exclusive
    assert detection_rate(obs, box, start=t1).detected == 1
    assert detection_rate([], box).as_dict()["rate"] == "undefined"
    with pytest.raises(DomainError):
        BBox(1.0, 0.0, 0.0, 1.0)


def test_write_summary(tmp_path):
    write_summary(tmp_path / "s.json", {"a": metrics(ConfusionCounts(tn=3)), "b": {"x": 1}})
    d = json.loads((tmp_path / "s.json").read_text())
    assert d["a"]["f1"] == "undefined" and d["b"] == {"x": 1}
