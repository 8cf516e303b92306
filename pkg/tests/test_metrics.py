import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cascade_seg.errors import MissingPrediction, ShapeError
from cascade_seg.metrics import (
    ABLATION_ROWS,
    AblationReport,
    AblationRow,
    aggregate,
    confusion,
    dice,
    evaluate_cases,
    score_case,
)
from cascade_seg.phantom import LabeledCase
from cascade_seg.volume import Volume

from .oracles import dice_by_sets


def mask(n_on, size=400, offset=0):
    m = np.zeros(size, bool)
    m[offset:offset + n_on] = True
    return m


def test_identical_masks():
    assert dice(mask(10), mask(10)) == 1.0


def test_disjoint_masks():
    assert dice(mask(10), mask(10, offset=20)) == 0.0


def test_half_overlap():
    assert dice(mask(100), mask(100, offset=50)) == 0.5


def test_empty_conventions():
    assert dice(mask(0), mask(0)) == 1.0
    assert dice(mask(5), mask(0)) == 0.0
    assert dice(mask(0), mask(5)) == 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dice(np.zeros(3), np.zeros(4))


@settings(max_examples=100, deadline=None)
@given(arrays(np.bool_, (3, 4, 5)), arrays(np.bool_, (3, 4, 5)))
def test_dice_matches_set_arithmetic(p, g):
    assert dice(p, g) == dice_by_sets(p, g)


def test_confusion_counts():
    assert confusion(mask(10), mask(10, offset=5)) == (5, 5, 5)


def _scored(case_id, p, g):
    return score_case(case_id, g, g, p, g)


def test_mean_of_two_cases():
    g = mask(100)
    a = _scored("a", mask(100, offset=60), g)  # dice 0.4
    b = _scored("b", mask(100, offset=40), g)  # dice 0.6
    assert a.dice_lesion == pytest.approx(0.4) and b.dice_lesion == pytest.approx(0.6)
    assert aggregate([a, b]).mean_dice_lesion == pytest.approx(0.5)


def test_single_case_mean_equals_global():
    s = _scored("a", mask(30, offset=10), mask(50))
    agg = aggregate([s])
    assert agg.mean_dice_lesion == agg.global_dice_lesion == s.dice_lesion


def test_pooled_and_mean_differ_on_unequal_cases():
    small = _scored("s", mask(0), mask(10))                       # dice 0, counts (0, 0, 10)
    big = _scored("b", mask(100, offset=0), mask(100, offset=0))  # dice 1, counts (100, 0, 0)
    agg = aggregate([small, big])
    assert agg.mean_dice_lesion == pytest.approx(0.5)
    assert agg.global_dice_lesion == pytest.approx(200 / 210)
    assert agg.lesion_precision == 1.0


def test_missing_prediction():
    case = LabeledCase(Volume(np.zeros((1, 2, 2))), Volume(np.ones((1, 2, 2))),
                       Volume(np.zeros((1, 2, 2))), "c1")
    with pytest.raises(MissingPrediction):
        evaluate_cases([case], {})
    with pytest.raises(MissingPrediction):
        aggregate([])


def test_evaluate_cases_accepts_volumes():
    liver = np.zeros((1, 4, 4))
    liver[0, :2] = 1
    case = LabeledCase(Volume(liver), Volume(liver), Volume(np.zeros_like(liver)), "c")
    (score,) = evaluate_cases([case], {"c": (Volume(liver), np.zeros_like(liver))})
    assert score.dice_liver == 1.0 and score.dice_lesion == 1.0


def _report():
    g = mask(100)
    rows = []
    for k, name in enumerate(ABLATION_ROWS):
        s = [_scored("a", mask(100, offset=10 * k), g), _scored("b", mask(50), g)]
        rows.append(AblationRow(name, aggregate(s), s))
    return AblationReport(rows)


def test_report_csv_and_json():
    rep = _report()
    rows = list(csv.reader(io.StringIO(rep.to_csv())))
    assert rows[0] == ["config", "mean_dice_liver", "mean_dice_lesion", "global_dice_lesion"]
    assert [r[0] for r in rows[1:]] == list(ABLATION_ROWS)
    data = json.loads(rep.to_json())
    assert len(data["rows"]) == 4
    assert "lesion_precision" in data["rows"][0]["summary"]
    assert len(rep.table().splitlines()) == 5


def test_report_is_deterministic():
    assert _report().to_json() == _report().to_json()
    assert _report().to_csv() == _report().to_csv()
