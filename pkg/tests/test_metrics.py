import math

import numpy as np
import pytest

from distill_influence.autodiff import ParamVector
from distill_influence.data import Dataset, make_gaussian_task
from distill_influence.errors import DataError
from distill_influence.influence import InfluenceRecord
from distill_influence.metrics import (
    METRICS_HEADER,
    FileSink,
    MemorySink,
    MetricsRow,
    accuracy,
    cohort_window_mean,
    entropy_gap,
    evaluate,
    influence_cohort_stats,
    read_metrics_csv,
)
from distill_influence.models import Classifier, ClassifierSpec, build_classifier


def linear(w, b):
    w, b = np.asarray(w, float), np.asarray(b, float)
    spec = ClassifierSpec(w.shape[0], (), w.shape[1])
    return Classifier(spec, ParamVector([("head.weight", w), ("head.bias", b)]))


@pytest.fixture
def five_rows():
    x = np.array([[2.0], [-1.0], [0.5], [-3.0], [0.0]])
    return Dataset(x, np.array([1, 0, 0, 0, 1]), np.arange(5), 2)


def test_accuracy_hand_count(five_rows):
    # class 1 iff x > 0, so predictions are 1, 0, 1, 0 and a tie at x = 0 resolves to class 0
    m = linear([[-1.0, 1.0]], [0.0, 0.0])
    assert accuracy(m, five_rows) == pytest.approx(3 / 5)


def test_accuracy_perfect(five_rows):
    ds = Dataset(five_rows.features, (five_rows.features[:, 0] > 0).astype(int), five_rows.ids, 2)
    assert accuracy(linear([[-5.0, 5.0]], [0.0, 0.0]), ds) == 1.0


def test_accuracy_constant_model():
    ds = make_gaussian_task(2, 3, 2.0, 0.0, 400, seed=0)
    assert accuracy(linear(np.zeros((3, 2)), [0.0, 1.0]), ds) == 0.5


def test_accuracy_empty():
    ds = Dataset(np.zeros((0, 1)), np.zeros(0, dtype=int), np.zeros(0, dtype=int), 2)
    with pytest.raises(DataError):
        accuracy(linear([[1.0, 0.0]], [0.0, 0.0]), ds)


def test_entropy_gap_identical_is_zero(five_rows):
    m = linear([[0.3, -0.2]], [0.1, 0.0])
    assert entropy_gap(m, m, five_rows) == 0.0


def test_entropy_gap_extremes(five_rows):
    uniform = linear([[0.0, 0.0]], [0.0, 0.0])
    saturated = linear([[0.0, 0.0]], [-60.0, 60.0])
    assert entropy_gap(saturated, uniform, five_rows) == pytest.approx(math.log(2), abs=1e-12)
    assert entropy_gap(uniform, saturated, five_rows) == pytest.approx(-math.log(2), abs=1e-12)
    assert entropy_gap(uniform, saturated, five_rows, absolute=True) == pytest.approx(math.log(2), abs=1e-12)


def test_evaluate_rows(five_rows):
    t, s = linear([[1.0, -1.0]], [0.0, 0.0]), linear([[0.2, 0.1]], [0.0, 0.0])
    rows = evaluate(7, t, s, {"train": five_rows, "val": five_rows})
    assert [(r.split, r.model) for r in rows] == [("train", "teacher"), ("train", "student"),
                                                  ("val", "teacher"), ("val", "student")]
    assert all(r.step == 7 and r.loss >= 0 and 0 <= r.accuracy <= 1 for r in rows)
    assert rows[0].entropy_gap is None and rows[1].entropy_gap is not None


def _rec(step, sid, v):
    return InfluenceRecord(step, sid, v, 0.5, 0.5)


def test_cohort_single_record():
    out = influence_cohort_stats([_rec(3, 1, -0.7)])
    assert out["all"][3]["mean"] == -0.7
    assert out["all"][3]["q0.5"] == -0.7


def test_cohort_zero_influences():
    out = influence_cohort_stats([_rec(s, i, 0.0) for s in range(3) for i in range(4)], {1})
    for cohort in ("all", "clean", "noisy"):
        for stats in out[cohort].values():
            assert stats["mean"] == 0.0 and stats["q0.1"] == 0.0 and stats["q0.9"] == 0.0
    assert out["noisy"][0]["n"] == 1 and out["clean"][0]["n"] == 3


def test_cohort_from_dataset_mask():
    ds = make_gaussian_task(2, 2, 1.0, 0.2, 10, seed=0)
    noisy = set(ds.ids[ds.noise_mask].tolist())
    recs = [_rec(0, int(i), -1.0 if int(i) in noisy else 1.0) for i in ds.ids]
    out = influence_cohort_stats(recs, ds)
    assert out["noisy"][0]["mean"] == -1.0 and out["clean"][0]["mean"] == 1.0


def test_cohort_empty():
    with pytest.raises(DataError):
        influence_cohort_stats([])


def test_cohort_window():
    recs = [_rec(s, i, float(s) * (-1 if i == 0 else 1)) for s in range(10) for i in range(3)]
    w = cohort_window_mean(recs, {0}, 3, 6)
    assert w["noisy"] == -4.0 and w["clean"] == 4.0
    assert w["n_noisy"] == 3 and w["n_clean"] == 6


def test_metrics_row_cells():
    assert MetricsRow(1, "val", "student", 0.5, 1.0).cells() == ["1", "val", "student", "0.5", "1.0", ""]


def test_file_sink_roundtrip(tmp_path):
    m, i = tmp_path / "metrics.csv", tmp_path / "influence.jsonl"
    sink = FileSink(m, i, flush_every=2, fingerprint="abc123")
    rows = [MetricsRow(0, "train", "teacher", 0.25, 0.75), MetricsRow(0, "train", "student", 0.1, 0.5, -0.125)]
    for r in rows:
        sink.write_metrics(r)
    sink.write_influence(_rec(1, 4, 0.5))
    sink.close()
    lines = m.read_text().splitlines()
    assert lines[0] == "# dataset_fingerprint=abc123"
    assert lines[1] == ",".join(METRICS_HEADER)
    assert read_metrics_csv(m) == rows
    assert i.read_text() == _rec(1, 4, 0.5).to_json() + "\n"


def test_memory_sink():
    sink = MemorySink()
    sink.write_metrics(MetricsRow(0, "val", "student", 0.1, 0.2))
    sink.write_influence(_rec(0, 0, 0.0))
    assert len(sink.metrics) == 1 and len(sink.influence) == 1


def test_evaluation_does_not_touch_models(five_rows):
    t = build_classifier(ClassifierSpec(1, (3,), 2), 0)
    s = build_classifier(ClassifierSpec(1, (2,), 2), 1)
    before = (t.params.flatten().copy(), s.params.flatten().copy())
    evaluate(0, t, s, {"val": five_rows})
    np.testing.assert_array_equal(t.params.flatten(), before[0])
    np.testing.assert_array_equal(s.params.flatten(), before[1])
