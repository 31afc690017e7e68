"""Metrics, the competition score, corpus filtering, and splits."""

import json
import math

import numpy as np
import pytest

from satfusion.errors import DataError, ParseError, SchemaError, ValidationError
from satfusion.evaluation import (
    CLOUD_COVER_LIMIT_PCT,
    DROP_REASON_BOX,
    DROP_REASON_CLOUD,
    MIN_BOX_DIM_PX,
    accuracy,
    confusion_matrix,
    evaluate_confusion,
    evaluate_pairs,
    filter_training_records,
    format_report_text,
    label_maps,
    macro_f1,
    per_class_metrics,
    read_labels_csv,
    score,
    split_false_detections,
    weighted_f1,
    write_confusion_csv,
    write_labels_csv,
    write_report_json,
)
from satfusion.metadata import BoundingBox

from conftest import make_metadata
from oracles import ReferencePcg32, metrics_from_pairs

TOY = np.array([[5, 1], [2, 2]])
TOY_PAIRS = [(0, 0)] * 5 + [(0, 1)] * 1 + [(1, 0)] * 2 + [(1, 1)] * 2


# ------------------------------------------------------------ confusion matrix

def test_confusion_rows_true_columns_predicted():
    m = confusion_matrix([(0, 1), (0, 1), (2, 0)], n_classes=3)
    assert m[0, 1] == 2 and m[2, 0] == 1
    assert m.sum() == 3


def test_confusion_toy_from_pairs():
    np.testing.assert_array_equal(confusion_matrix(TOY_PAIRS, n_classes=2), TOY)


def test_confusion_cites_record_position():
    with pytest.raises(ValidationError) as e:
        confusion_matrix([(0, 0), (0, 0), (0, 0), (0, 9)], n_classes=3)
    assert "record 3" in str(e.value)


def test_confusion_rejects_non_integer_classes():
    with pytest.raises(ValidationError):
        confusion_matrix([(0.5, 0)], n_classes=2)
    with pytest.raises(ValidationError):
        confusion_matrix([(0, 0)], n_classes=0)


# ------------------------------------------------------------------- metrics

def test_toy_matrix_hand_values():
    precision, recall, f1 = per_class_metrics(TOY)
    # identical arithmetic to the hand derivation, so equality is exact
    p0, r0 = 5 / 7, 5 / 6
    p1, r1 = 2 / 3, 1 / 2
    assert precision.tolist() == [p0, p1]
    assert recall.tolist() == [r0, r1]
    assert f1.tolist() == [2 * p0 * r0 / (p0 + r0), 2 * p1 * r1 / (p1 + r1)]
    assert f1[0] == pytest.approx(10 / 13, abs=1e-15)
    assert f1[1] == pytest.approx(4 / 7, abs=1e-15)
    assert f1[0] == pytest.approx(0.7692, abs=5e-5)
    assert f1[1] == pytest.approx(0.5714, abs=5e-5)
    assert accuracy(TOY) == 0.7


def test_zero_denominators_give_zero():
    m = np.array([[0, 0], [0, 5]])
    precision, recall, f1 = per_class_metrics(m)
    assert precision[0] == recall[0] == f1[0] == 0.0
    assert precision[1] == recall[1] == f1[1] == 1.0


def test_accuracy_empty_matrix():
    with pytest.raises(DataError):
        accuracy(np.zeros((3, 3), dtype=int))


def test_confusion_shape_checks():
    with pytest.raises(ValidationError):
        per_class_metrics(np.zeros((2, 3)))
    with pytest.raises(ValidationError):
        per_class_metrics(np.array([[1.5, 0], [0, 1]]))
    with pytest.raises(ValidationError):
        per_class_metrics(np.array([[-1, 0], [0, 1]]))


def test_macro_and_weighted_f1():
    _, _, f1 = per_class_metrics(TOY)
    assert macro_f1(f1) == (f1[0] + f1[1]) / 2.0
    assert weighted_f1(f1) == macro_f1(f1)
    assert weighted_f1(f1, [1.0, 1.0]) == macro_f1(f1)
    assert weighted_f1(f1, [3.0, 1.0]) == pytest.approx(
        (3 * f1[0] + f1[1]) / 4.0, rel=1e-15
    )
    with pytest.raises(ValidationError):
        weighted_f1(f1, [1.0])
    with pytest.raises(ValidationError):
        weighted_f1(f1, [1.0, 0.0])
    with pytest.raises(DataError):
        macro_f1([])


def test_score_examples():
    assert score(0.765663) == 765663
    assert score(61 / 91) == 670330  # the toy matrix's uniform weighted F1
    assert score(0.0) == 0
    assert score(1.0) == 1_000_000
    assert score(0.0000005) == 1  # half rounds up
    with pytest.raises(ValidationError):
        score(1.5)
    with pytest.raises(ValidationError):
        score(-0.1)


def test_evaluate_pairs_report():
    report, m = evaluate_pairs(TOY_PAIRS, n_classes=2)
    np.testing.assert_array_equal(m, TOY)
    assert report.n_records == 10
    assert report.accuracy == 0.7
    assert report.score == 670330
    assert evaluate_confusion(TOY) == report
    d = report.to_dict()
    assert set(d) == {"n_records", "accuracy", "macro_f1", "weighted_f1", "score", "per_class"}
    assert set(d["per_class"]) == {"precision", "recall", "f1"}
    assert len(d["per_class"]["f1"]) == 2


def test_metrics_match_oracle_small_instances():
    rng = np.random.default_rng(42)
    for trial in range(30):
        n = int(rng.integers(1, 300))
        k = int(rng.integers(2, 10))
        pairs = [(int(t), int(p)) for t, p in rng.integers(0, k, size=(n, 2))]
        report, m = evaluate_pairs(pairs, n_classes=k)
        want = metrics_from_pairs(pairs, k)
        np.testing.assert_array_equal(m, np.array(want["confusion"]))
        assert report.accuracy == pytest.approx(want["accuracy"], abs=1e-12)
        assert report.macro_f1 == pytest.approx(want["macro_f1"], abs=1e-12)
        np.testing.assert_allclose(report.precision, want["precision"], atol=1e-12)
        np.testing.assert_allclose(report.recall, want["recall"], atol=1e-12)
        np.testing.assert_allclose(report.f1, want["f1"], atol=1e-12)
        assert report.score == want["score"]


# ------------------------------------------------------------------ emitters

def test_report_json(tmp_path):
    report, _ = evaluate_pairs(TOY_PAIRS, n_classes=2)
    path = tmp_path / "report.json"
    write_report_json(path, report)
    text = path.read_text()
    assert text.endswith("\n")
    obj = json.loads(text)
    assert obj["score"] == 670330
    assert obj["accuracy"] == 0.7


def test_report_text():
    report, _ = evaluate_pairs(TOY_PAIRS, n_classes=2)
    text = format_report_text(report, class_labels=["cat", "dog"])
    assert "records      10" in text
    assert "accuracy     0.700000" in text
    assert "score        670330" in text
    assert text.splitlines()[-1].endswith("dog")
    with pytest.raises(ValidationError):
        format_report_text(report, class_labels=["only_one"])


def test_confusion_csv(tmp_path):
    path = tmp_path / "confusion.csv"
    write_confusion_csv(path, TOY, class_labels=["cat", "dog"])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "true\\predicted,cat,dog"
    assert lines[1] == "cat,5,1"
    assert lines[2] == "dog,2,2"
    with pytest.raises(ValidationError):
        write_confusion_csv(path, TOY, class_labels=["cat"])


# ------------------------------------------------------------- corpus filter

def test_filter_boundaries_are_kept():
    on_cloud_limit = make_metadata(image_id="a", cloud_cover_pct=CLOUD_COVER_LIMIT_PCT)
    on_box_limit = make_metadata(
        image_id="b", boxes=(BoundingBox(0, 0, 50, MIN_BOX_DIM_PX),)
    )
    kept, dropped = filter_training_records([on_cloud_limit, on_box_limit])
    assert [r.image_id for r in kept] == ["a", "b"]
    assert dropped == []


def test_filter_drops_with_reasons():
    too_cloudy = make_metadata(image_id="c", cloud_cover_pct=40.1)
    too_small = make_metadata(image_id="d", boxes=(BoundingBox(0, 0, 50, 4),))
    both = make_metadata(
        image_id="e", cloud_cover_pct=90.0, boxes=(BoundingBox(0, 0, 4, 4),)
    )
    fine = make_metadata(image_id="f")
    kept, dropped = filter_training_records([too_cloudy, too_small, both, fine])
    assert [r.image_id for r in kept] == ["f"]
    assert [(r.image_id, reason) for r, reason in dropped] == [
        ("c", DROP_REASON_CLOUD),
        ("d", DROP_REASON_BOX),
        ("e", DROP_REASON_CLOUD),  # cloud wins when both rules apply
    ]


def test_filter_uses_the_records_own_box():
    # only the indexed box matters, not the other boxes on the image
    rec = make_metadata(
        boxes=(BoundingBox(0, 0, 3, 3), BoundingBox(10, 10, 50, 50)), box_index=1
    )
    kept, dropped = filter_training_records([rec])
    assert kept == [rec] and dropped == []


# ------------------------------------------------------------------- splits

def test_split_sizes_11000():
    train, val = split_false_detections(list(range(11_000)), seed=7)
    assert len(train) == 9_900
    assert len(val) == 1_100
    assert sorted(train + val) == list(range(11_000))


def test_split_ceil_goes_to_train():
    train, val = split_false_detections(list(range(11)), seed=0)
    assert (len(train), len(val)) == (10, 1)  # ceil(9.9) = 10
    train, val = split_false_detections([1], seed=0)
    assert (train, val) == ([1], [])


def test_split_deterministic_and_seed_sensitive():
    a = split_false_detections(list(range(100)), seed=5)
    b = split_false_detections(list(range(100)), seed=5)
    c = split_false_detections(list(range(100)), seed=6)
    assert a == b
    assert a != c


def test_split_matches_reference_shuffle():
    items = list(range(40))
    train, val = split_false_detections(items, seed=9)

    ref = ReferencePcg32(9)

    def randrange(n):
        threshold = (2**32 - n) % n
        while True:
            r = ref.next_u32()
            if r >= threshold:
                return r % n

    expected = list(range(40))
    for i in range(39, 0, -1):
        j = randrange(i + 1)
        expected[i], expected[j] = expected[j], expected[i]
    cut = math.ceil(0.9 * 40)
    assert train == expected[:cut]
    assert val == expected[cut:]


# ------------------------------------------------------------------ labels CSV

def test_labels_csv_round_trip(tmp_path):
    rows = [("img_0", "seq_0", 5), ("img_1", "seq_0", 5), ("img_2", "seq_1", 62)]
    path = tmp_path / "labels.csv"
    assert write_labels_csv(path, rows) == 3
    assert read_labels_csv(path) == rows


def test_labels_csv_validation(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("image_id,true_class\nimg_0,5\n")
    with pytest.raises(SchemaError):
        read_labels_csv(path)
    path.write_text("image_id,sequence_id,true_class\nimg_0,seq_0,abc\n")
    with pytest.raises(ParseError):
        read_labels_csv(path)
    path.write_text("image_id,sequence_id,true_class\nimg_0,seq_0,63\n")
    with pytest.raises(ValidationError):
        read_labels_csv(path)
    path.write_text("image_id,sequence_id,true_class\n")
    with pytest.raises(DataError):
        read_labels_csv(path)


def test_label_maps():
    rows = [("img_0", "seq_0", 5), ("img_1", "seq_0", 5), ("img_2", "seq_1", 7)]
    class_of, sequence_of, seq_class = label_maps(rows)
    assert class_of == {"img_0": 5, "img_1": 5, "img_2": 7}
    assert sequence_of == {"img_0": "seq_0", "img_1": "seq_0", "img_2": "seq_1"}
    assert seq_class == {"seq_0": 5, "seq_1": 7}
    with pytest.raises(DataError):
        label_maps(rows + [("img_0", "seq_9", 1)])
    with pytest.raises(DataError):
        label_maps(rows + [("img_3", "seq_0", 6)])
