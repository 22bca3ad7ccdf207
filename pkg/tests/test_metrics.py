import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from segqc.errors import BalanceError, DataError, ShapeMismatchError
from segqc.metrics import (EvalReport, QualityScore, balanced_subsample, bin_index, bin_scores,
                           classification_stats, dice, dice_all, mae_report)
from segqc.volgrid import LabelMap


def test_dice_hand_values():
    a = np.zeros((4, 4, 1), bool)
    b = np.zeros((4, 4, 1), bool)
    assert dice(a, b) == 1.0
    a[:2] = True          # 8 voxels
    assert dice(a, b) == 0.0
    b[1:3] = True         # 8 voxels, 4 shared
    assert dice(a, b) == 0.5
    with pytest.raises(ShapeMismatchError):
        dice(a, b[:3])


def test_dice_all_whole_heart_is_union():
    g = np.array([1, 2, 3, 0, 0, 0]).reshape(6, 1, 1)
    p = np.array([2, 3, 1, 0, 0, 0]).reshape(6, 1, 1)
    s = dice_all(LabelMap(p), LabelMap(g))
    assert isinstance(s, QualityScore)
    assert s.lvc == s.lvm == s.rvc == 0.0
    assert s.wh == 1.0 and s.bg == 1.0


@pytest.mark.parametrize("score,expected", [
    (0.0, 0), (0.05, 0), (0.1, 1), (0.2, 2), (0.3, 3), (0.6, 6), (0.7, 7),
    (0.8999999, 8), (0.9, 9), (1.0, 9),
])
def test_bin_index_edges(score, expected):
    assert int(bin_index([score])[0]) == expected


def test_bin_index_rejects_out_of_range():
    for bad in (-0.01, 1.0001, float("nan")):
        with pytest.raises(DataError):
            bin_index([bad])


def test_bin_scores_counts():
    h = bin_scores([0.0, 0.15, 0.15, 1.0, 0.95])
    assert h.counts.tolist() == [1, 2, 0, 0, 0, 0, 0, 0, 0, 2]
    assert h.edges[3] == 0.3


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=10, max_size=10), st.integers(0, 2**31 - 1))
def test_balanced_subsample_is_uniform(counts, seed):
    rng = np.random.default_rng(seed)
    scores = np.concatenate([rng.uniform(b / 10, (b + 1) / 10 - 1e-9, c) for b, c in enumerate(counts)])
    rng.shuffle(scores)
    idx = balanced_subsample(scores, seed)
    assert np.all(np.diff(idx) > 0)
    assert np.all(bin_scores(scores[idx]).counts == min(counts))
    assert np.array_equal(idx, balanced_subsample(scores, seed))


def test_balance_fails_on_empty_bin():
    with pytest.raises(BalanceError) as e:
        balanced_subsample([0.05, 0.15, 0.95], 0)
    assert e.value.empty_bins == [2, 3, 4, 5, 6, 7, 8]


def test_classification_stats_polarity():
    pred = [0.9, 0.8, 0.2, 0.75, 0.1]
    true = [0.95, 0.5, 0.1, 0.6, 0.8]
    s = classification_stats(pred, true, 0.7)
    assert (s.tp, s.fp, s.tn, s.fn) == (1, 2, 1, 1)
    assert s.tpr == 0.5 and s.fpr == pytest.approx(2 / 3) and s.accuracy == 0.4
    # exactly at threshold counts as good
    assert classification_stats([0.7], [0.7]).tp == 1


def test_mae_report_bands_and_population_sd():
    truths = np.array([[0.2] * 5, [0.4] * 5, [0.6] * 5, [0.9] * 5])
    preds = truths + np.array([[0.1], [-0.3], [0.0], [0.05]])
    r = mae_report(preds, truths)
    wh = r.classes["wh"]
    assert wh["all"].n == 4 and wh["all"].mae == pytest.approx(0.1125)
    assert wh["poor"].n == 2 and wh["poor"].mae == pytest.approx(0.2)
    assert wh["poor"].sd == pytest.approx(0.1)   # population SD of {0.1, 0.3}
    assert wh["good"].mae == pytest.approx(0.025)
    assert r.sd_kind == "population"


def test_report_serialization_and_empty_band():
    truths = np.full((3, 5), 0.8)
    r = mae_report(truths, truths)
    assert r.classes["lvc"]["poor"].n == 0 and r.classes["lvc"]["poor"].mae is None
    back = EvalReport.from_dict(json.loads(r.to_json()))
    assert back.to_json() == r.to_json()
    rows = list(csv.reader(io.StringIO(r.to_csv())))
    assert rows[0] == ["class", "band", "n", "mae", "sd"]
    assert len(rows) == 1 + 5 * 3
    assert ["bg", "poor", "0", "", ""] in rows
    assert r.classification.accuracy == 1.0


def test_mae_report_errors():
    with pytest.raises(DataError):
        mae_report([], [])
    with pytest.raises(ShapeMismatchError):
        mae_report(np.zeros((2, 5)), np.zeros((3, 5)))
