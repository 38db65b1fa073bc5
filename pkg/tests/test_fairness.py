import json
import statistics

import numpy as np
import pytest

from fairfader import fairness
from fairfader.fairness import EvalReport, PredictionRecord

TABLE = {
    "SimpleCNN": ([92.41, 91.56, 84.07, 90.93, 88.61], 11.26),
    "SimpleCNN-WL": ([89.84, 90.25, 83.64, 92.02, 88.27], 10.11),
    "FaderCNN": ([85.65, 86.08, 80.90, 87.66, 83.86], 6.66),
}


def preds_with_accuracies(accs, n):
    """``n`` predictions per class with exactly ``accs[k]`` percent correct."""
    out = []
    for k, a in enumerate(accs):
        good = round(a * n / 100)
        for i in range(n):
            truth = i % 2
            out.append(PredictionRecord(f"c{k}_{i}", truth if i < good else 1 - truth, truth, k))
    return out


@pytest.mark.parametrize("model", list(TABLE))
def test_table_variances(model):
    accs, expected = TABLE[model]
    v = fairness.accuracy_variance(accs)
    assert v == pytest.approx(statistics.variance(accs), abs=1e-12)
    assert abs(v - expected) <= 0.01


def test_fader_variance_drop_over_forty_percent():
    v = {m: fairness.accuracy_variance(a) for m, (a, _) in TABLE.items()}
    assert v["FaderCNN"] / v["SimpleCNN"] == pytest.approx(0.59, abs=0.01)


def test_variance_edge_cases():
    assert fairness.accuracy_variance([70.0, 70.0, 70.0]) == 0.0
    assert fairness.accuracy_variance([0.0, 100.0]) == 5000.0
    with pytest.raises(ValueError):
        fairness.accuracy_variance([50.0])


def test_stratified_accuracy_counts():
    preds = preds_with_accuracies([100, 50, 0], 4)
    per_class, overall = fairness.stratified_accuracy(preds, 3)
    assert per_class == [100.0, 50.0, 0.0]
    assert overall == 50.0


def test_stratified_accuracy_missing_class():
    with pytest.raises(ValueError, match="class 2"):
        fairness.stratified_accuracy(preds_with_accuracies([100, 50], 4), 3)


def test_balanced_test_overall_is_mean_of_classes():
    preds = preds_with_accuracies([91, 77, 64, 83, 70], 100)
    r = EvalReport.from_predictions(preds, 5)
    assert r.overall_accuracy == pytest.approx(np.mean(r.per_class_accuracy), abs=1e-9)


def test_random_predictions_near_half():
    rng = np.random.default_rng(0)
    preds = [PredictionRecord(str(i), int(rng.integers(2)), i % 2, i % 5) for i in range(5000)]
    per_class, _ = fairness.stratified_accuracy(preds, 5)
    assert all(40 <= a <= 60 for a in per_class)


def test_report_path_reproduces_table_from_predictions_file(tmp_path):
    accs, expected = TABLE["SimpleCNN"]
    path = tmp_path / "preds.csv"
    fairness.write_predictions(preds_with_accuracies(accs, 10000), path)
    r = EvalReport.from_predictions(fairness.read_predictions(path), 5, "SimpleCNN")
    np.testing.assert_allclose(r.per_class_accuracy, accs, atol=1e-9)
    assert abs(r.variance - expected) <= 0.01
    assert r.overall_accuracy == pytest.approx(np.mean(accs))


def test_report_json_is_canonical(tmp_path):
    accs, _ = TABLE["FaderCNN"]
    r = EvalReport.from_accuracies(accs, [474] * 5, "FaderCNN")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    fairness.emit_report(r, a)
    fairness.emit_report(EvalReport.from_accuracies(accs, [474] * 5, "FaderCNN"), b)
    assert a.read_bytes() == b.read_bytes()
    d = json.loads(a.read_text())
    assert list(d) == ["model_id", "per_class_accuracy", "overall_accuracy", "variance", "counts", "raw"]
    assert d["variance"] == 6.66
    assert d["overall_accuracy"] == 84.83
    back = fairness.read_report(a)
    assert back.variance == r.variance and back.counts == [474] * 5


def test_predictions_csv_rejects_wrong_columns(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("id,guess\nx,1\n")
    with pytest.raises(ValueError, match="columns"):
        fairness.read_predictions(p)


def test_balanced_accuracy_chance_is_uniform():
    labels = np.array([0] * 90 + [1] * 5 + [2] * 5)
    assert fairness.balanced_accuracy(np.zeros(100, int), labels, 3) == pytest.approx(100 / 3)
    assert fairness.balanced_accuracy(labels, labels, 3) == 100.0
