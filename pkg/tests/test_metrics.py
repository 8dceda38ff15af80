import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cadm.metrics import (
    CSV_HEADER,
    ConfusionCounts,
    append_metrics_csv,
    confusion,
    metrics_from_counts,
    per_tile_metrics,
    pooled_metrics,
)


def loop_confusion(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return ConfusionCounts(tp, fp, fn, tn)


def test_all_ones():
    x = np.ones((4, 5), dtype=np.uint8)
    assert confusion(x, x) == ConfusionCounts(20, 0, 0, 0)


def test_complement():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 2, (8, 8))
    c = confusion(1 - gt, gt)
    assert c.tp == 0 and c.tn == 0 and c.total == 64


def test_confusion_matches_pixel_loop():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = rng.integers(0, 2, (16, 16))
        g = rng.integers(0, 2, (16, 16))
        assert confusion(p, g) == loop_confusion(p, g)


def test_confusion_errors():
    with pytest.raises(ValueError):
        confusion(np.full((2, 2), 2), np.zeros((2, 2)))
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))


def test_worked_example():
    m = metrics_from_counts(ConfusionCounts(3, 1, 1, 5))
    assert m["precision"] == pytest.approx(0.75)
    assert m["recall"] == pytest.approx(0.75)
    assert m["f1"] == pytest.approx(0.75)
    assert m["iou"] == pytest.approx(0.6)
    assert m["oa"] == pytest.approx(0.8)


def test_perfect_prediction():
    assert all(v == 1.0 for v in metrics_from_counts(ConfusionCounts(7, 0, 0, 9)).values())


def test_degenerate_denominators():
    m = metrics_from_counts(ConfusionCounts(0, 0, 0, 10))
    assert m == {"precision": 0.0, "recall": 0.0, "f1": 0.0, "iou": 0.0, "oa": 1.0}
    m = metrics_from_counts(ConfusionCounts(0, 3, 0, 1))
    assert m["precision"] == 0.0 and m["recall"] == 0.0 and m["f1"] == 0.0


def test_algebraic_identities_random_counts():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        c = ConfusionCounts(*(int(v) for v in rng.integers(1, 10_000, 4)))
        m = metrics_from_counts(c)
        p, r = m["precision"], m["recall"]
        assert abs(m["f1"] - 2 * p * r / (p + r)) <= 1e-12
        assert abs(m["iou"] - m["f1"] / (2 - m["f1"])) <= 1e-12


@given(st.tuples(*[st.integers(0, 10**6)] * 4))
def test_metric_ranges(counts):
    c = ConfusionCounts(*counts)
    m = metrics_from_counts(c)
    assert all(0.0 <= v <= 1.0 for v in m.values())
    if c.total:
        assert (m["oa"] == 1.0) == (c.fp == 0 and c.fn == 0)


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    p = rng.integers(0, 2, 200)
    g = rng.integers(0, 2, 200)
    perm = rng.permutation(200)
    assert confusion(p, g) == confusion(p[perm], g[perm])


def test_pooling_is_micro_average():
    rng = np.random.default_rng(4)
    preds = [rng.integers(0, 2, (8, 8)) for _ in range(5)]
    gts = [rng.integers(0, 2, (8, 8)) for _ in range(5)]
    total = sum((confusion(p, g) for p, g in zip(preds, gts)), ConfusionCounts())
    assert pooled_metrics(preds, gts) == metrics_from_counts(total)
    assert confusion(np.stack(preds), np.stack(gts)) == total
    per = per_tile_metrics(preds, gts)
    assert per["f1"] == pytest.approx(np.mean([metrics_from_counts(confusion(p, g))["f1"] for p, g in zip(preds, gts)]))


def test_csv_column_order(tmp_path):
    path = tmp_path / "m.csv"
    append_metrics_csv(path, "synthetic", "test", "CADM", metrics_from_counts(ConfusionCounts(3, 1, 1, 5)))
    rows = list(csv.reader(open(path)))
    assert rows[0] == list(CSV_HEADER)
    assert rows[0][3:] == ["recall", "precision", "oa", "f1", "iou"]
    assert [float(v) for v in rows[1][3:]] == pytest.approx([0.75, 0.75, 0.8, 0.75, 0.6])
