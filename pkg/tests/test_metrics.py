import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pktids import metrics


def test_diagonal_and_empty():
    cm = metrics.confusion([0, 1, 2, 3], [0, 1, 2, 3], 4)
    assert (cm == np.eye(4, dtype=int)).all()
    assert not metrics.confusion([], [], 3).any()
    with pytest.raises(metrics.CodeOutOfRange):
        metrics.confusion([0, 4], [0, 1], 4)
    with pytest.raises(ValueError):
        metrics.confusion([0], [0, 1], 2)


def test_published_binary_cells():
    # normal row 508725 / 1, attack row 0 / 38883
    actual = np.repeat([0, 0, 1], [508725, 1, 38883])
    predicted = np.repeat([0, 1, 1], [508725, 1, 38883])
    cm = metrics.confusion(actual, predicted, 2)
    assert cm.tolist() == [[508725, 1], [0, 38883]]
    m = metrics.metrics_from_counts(*metrics.one_vs_rest(cm, 1))
    assert m.accuracy == Fraction(547608, 547609)
    assert m.precision == Fraction(38883, 38884)
    assert m.recall == 1
    assert round(float(m.accuracy), 6) == 0.999998


def test_metric_examples():
    m = metrics.metrics_from_counts(tp=1, tn=1, fp=0, fn=0)
    assert (m.accuracy, m.precision, m.recall, m.f1) == (1, 1, 1, 1)
    m = metrics.metrics_from_counts(tp=1, tn=0, fp=1, fn=0)
    assert (m.precision, m.recall, m.f1) == (Fraction(1, 2), 1, Fraction(2, 3))
    m = metrics.metrics_from_counts(tp=0, tn=5, fp=0, fn=0)
    assert m.precision == 0 and set(m.undefined) == {"precision", "recall", "f1"}
    m = metrics.metrics_from_counts(0, 0, 0, 0)
    assert m.accuracy == 0 and "accuracy" in m.undefined
    with pytest.raises(ValueError):
        metrics.metrics_from_counts(-1, 0, 0, 0)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), max_size=60))
def test_one_vs_rest_partitions_total(pairs):
    a = [p[0] for p in pairs]
    b = [p[1] for p in pairs]
    cm = metrics.confusion(a, b, 4)
    assert cm.sum() == len(pairs)
    for c in range(4):
        tp, tn, fp, fn = metrics.one_vs_rest(cm, c)
        assert tp + tn + fp + fn == len(pairs)
        m = metrics.metrics_from_counts(tp, tn, fp, fn)
        assert all(0 <= v <= 1 for v in m.as_floats().values())


def test_report_render_and_json(tmp_path):
    rep = metrics.evaluate([0, 0, 0, 1, 2, 3], [0, 0, 1, 1, 2, 3],
                           ["normal", "ddos", "dos", "theft"])
    assert rep.accuracy == Fraction(5, 6)
    text = rep.render()
    assert "66.667%" in text and "83.333%" in text
    rep.write_json(tmp_path / "r.json")
    d = json.loads((tmp_path / "r.json").read_text())
    assert d["confusion"][0] == [2, 1, 0, 0] and d["total"] == 6
    assert d["per_class"]["ddos"]["precision"] == 0.5
    b = metrics.evaluate([0, 1, 1], [0, 1, 0], ["normal", "attack"])
    assert (b.binary.tp, b.binary.tn, b.binary.fp, b.binary.fn) == (1, 1, 0, 1)
