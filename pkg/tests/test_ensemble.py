"""Ensembling, thresholded classification, and sequence aggregation."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satfusion.ensemble import (
    PredictionRecord,
    SequenceRecord,
    aggregate_sequence,
    average_predictions,
    classify,
    classify_matrix,
    classify_with_threshold,
    ensemble_by_image,
    group_into_sequences,
    read_predictions_jsonl,
    write_classification_csv,
    write_predictions_jsonl,
)
from satfusion.errors import DataError, ParseError, SchemaError, ValidationError
from satfusion.metadata import FALSE_DETECTION_INDEX, N_CLASSES


def prob_vector(rng: np.random.Generator, n: int = N_CLASSES) -> np.ndarray:
    raw = rng.uniform(0.01, 1.0, size=n)
    return raw / raw.sum()


# ------------------------------------------------------------------ averaging

def test_average_toy_case():
    avg = average_predictions([[0.6, 0.4], [0.2, 0.8]])
    np.testing.assert_allclose(avg, [0.4, 0.6], atol=1e-15)
    assert classify(avg) == 1


def test_average_is_componentwise_mean():
    rng = np.random.default_rng(0)
    vectors = [prob_vector(rng) for _ in range(5)]
    np.testing.assert_allclose(
        average_predictions(vectors), np.stack(vectors).mean(axis=0), atol=1e-15
    )


def test_average_validation():
    with pytest.raises(DataError):
        average_predictions([])
    with pytest.raises(ValidationError):
        average_predictions([[0.5, 0.5], [0.3, 0.3, 0.4]])
    with pytest.raises(ValidationError):
        average_predictions([[0.9, 0.3]])  # sums to 1.2
    with pytest.raises(ValidationError):
        average_predictions([[1.1, -0.1]])
    with pytest.raises(ValidationError):
        average_predictions([[np.nan, 1.0]])


@settings(max_examples=60, deadline=None)
@given(
    st.lists(
        st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4),
        min_size=1,
        max_size=6,
    ),
    st.randoms(use_true_random=False),
)
def test_average_permutation_invariant(raws, pyrandom):
    vectors = [np.asarray(r) / np.sum(r) for r in raws]
    shuffled = list(vectors)
    pyrandom.shuffle(shuffled)
    np.testing.assert_allclose(
        average_predictions(vectors), average_predictions(shuffled), atol=1e-12
    )


# ---------------------------------------------------------------- classify

def test_classify_lowest_index_tie_break():
    assert classify([0.2, 0.4, 0.4]) == 1
    assert classify([0.5, 0.5]) == 0
    assert classify(np.full(63, 1.0 / 63.0)) == 0


def test_classify_scale_invariant():
    v = prob_vector(np.random.default_rng(1))
    assert classify(v) == classify(37.5 * v)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.0, 1.0), min_size=2, max_size=20), st.floats(0.1, 100.0))
def test_classify_scale_invariant_fuzz(values, scale):
    v = np.asarray(values)
    assert classify(v * scale) == classify(v)


def test_classify_validation():
    with pytest.raises(ValidationError):
        classify([[0.5, 0.5]])
    with pytest.raises(ValidationError):
        classify([0.5, -0.1])
    with pytest.raises(ValidationError):
        classify([np.inf, 0.0])


# ---------------------------------------------------------------- threshold

def test_threshold_is_strict():
    assert classify_with_threshold([0.7, 0.3], 0.7) == 1  # equal -> false detection
    assert classify_with_threshold([0.7, 0.3], 0.69) == 0
    assert classify_with_threshold([0.7, 0.3], 0.0) == 0


def test_threshold_default_false_detection_is_last_index():
    v = np.full(N_CLASSES, 0.5 / 62)
    v[10] = 0.5
    assert classify_with_threshold(v, 0.5) == FALSE_DETECTION_INDEX
    assert classify_with_threshold(v, 0.4) == 10


def test_threshold_custom_false_detection_index():
    assert classify_with_threshold([0.4, 0.3, 0.3], 0.9, false_detection_index=1) == 1


def test_threshold_validation():
    with pytest.raises(ValidationError):
        classify_with_threshold([0.5, 0.5], 1.5)
    with pytest.raises(ValidationError):
        classify_with_threshold([0.5, 0.5], 0.5, false_detection_index=2)


def test_classify_matrix_with_and_without_threshold():
    P = np.array([[0.8, 0.1, 0.1], [0.4, 0.35, 0.25], [0.2, 0.6, 0.2]])
    np.testing.assert_array_equal(classify_matrix(P), [0, 0, 1])
    np.testing.assert_array_equal(classify_matrix(P, threshold=0.5), [0, 2, 1])
    with pytest.raises(ValidationError):
        classify_matrix(P[0])
    with pytest.raises(ValidationError):
        classify_matrix(P, threshold=-0.1)


# ----------------------------------------------------------------- sequences

def test_sequence_toy_case():
    seq = SequenceRecord("seq_0", (np.array([0.6, 0.4]), np.array([0.2, 0.8])))
    assert aggregate_sequence(seq) == 1
    assert aggregate_sequence([np.array([0.6, 0.4]), np.array([0.2, 0.8])]) == 1


def test_sequence_equals_flattened_mean():
    rng = np.random.default_rng(2)
    vectors = [prob_vector(rng) for _ in range(7)]
    assert aggregate_sequence(SequenceRecord("s", tuple(vectors))) == classify(
        np.stack(vectors).mean(axis=0)
    )


def test_sequence_record_validation():
    with pytest.raises(DataError):
        SequenceRecord("s", ())
    with pytest.raises(ValidationError):
        SequenceRecord("s", (np.array([0.5, -0.5]),))


# ----------------------------------------------------------- ensemble_by_image

def make_records(n_images=4, models=("m0", "m1", "m2"), seed=3):
    rng = np.random.default_rng(seed)
    return [
        PredictionRecord(f"img_{i}", m, prob_vector(rng))
        for i in range(n_images)
        for m in models
    ]


def test_ensemble_by_image_averages_per_image():
    records = make_records()
    ids, mat, model_ids = ensemble_by_image(records)
    assert ids == [f"img_{i}" for i in range(4)]
    assert model_ids == ("m0", "m1", "m2")
    assert mat.shape == (4, 63)
    for i, image_id in enumerate(ids):
        own = np.stack([r.probs for r in records if r.image_id == image_id])
        np.testing.assert_allclose(mat[i], own.mean(axis=0), atol=1e-15)


def test_ensemble_order_is_first_seen():
    records = make_records()
    records.reverse()
    ids, _, _ = ensemble_by_image(records)
    assert ids == [f"img_{i}" for i in reversed(range(4))]


def test_ensemble_image_sequence_average_equals_flat_mean():
    # equal support means averaging per image and then across the sequence
    # is the same as one flat mean over every (model, image) vector
    records = make_records(n_images=5, seed=4)
    ids, mat, _ = ensemble_by_image(records)
    seq = SequenceRecord("s", tuple(mat[i] for i in range(len(ids))))
    flat = np.stack([r.probs for r in records]).mean(axis=0)
    assert aggregate_sequence(seq) == classify(flat)


def test_ensemble_rejects_duplicates_and_uneven_support():
    records = make_records()
    with pytest.raises(DataError):
        ensemble_by_image(records + [records[0]])
    with pytest.raises(DataError) as e:
        ensemble_by_image(records[:-1])  # img_3 missing model m2
    assert "img_3" in str(e.value)
    with pytest.raises(DataError):
        ensemble_by_image([])


def test_group_into_sequences():
    records = make_records(n_images=4, models=("m0",), seed=5)
    ids, mat, _ = ensemble_by_image(records)
    mapping = {"img_0": "s0", "img_1": "s1", "img_2": "s0", "img_3": "s1"}
    seqs = group_into_sequences(ids, mat, mapping)
    assert [s.sequence_id for s in seqs] == ["s0", "s1"]
    assert len(seqs[0].vectors) == 2
    np.testing.assert_array_equal(seqs[0].vectors[1], mat[2])
    with pytest.raises(DataError):
        group_into_sequences(ids, mat, {"img_0": "s0"})


# -------------------------------------------------------------------- JSONL IO

def test_predictions_jsonl_round_trip(tmp_path):
    records = make_records(n_images=2, models=("m0", "m1"), seed=6)
    path = tmp_path / "preds.jsonl"
    assert write_predictions_jsonl(path, records) == 4
    back = read_predictions_jsonl(path)
    assert [(r.image_id, r.model_id) for r in back] == [
        (r.image_id, r.model_id) for r in records
    ]
    for a, b in zip(back, records):
        np.testing.assert_array_equal(a.probs, b.probs)


def test_predictions_jsonl_malformed_line(tmp_path):
    path = tmp_path / "preds.jsonl"
    path.write_text('{"image_id": "a"\n')
    with pytest.raises(ParseError) as e:
        read_predictions_jsonl(path)
    assert "line 1" in str(e.value)


def test_predictions_jsonl_missing_field(tmp_path):
    path = tmp_path / "preds.jsonl"
    path.write_text(json.dumps({"image_id": "a", "probs": [1.0]}) + "\n")
    with pytest.raises(SchemaError) as e:
        read_predictions_jsonl(path)
    assert "model_id" in str(e.value)


def test_predictions_jsonl_wrong_width(tmp_path):
    path = tmp_path / "preds.jsonl"
    path.write_text(
        json.dumps({"image_id": "a", "model_id": "m", "probs": [0.5, 0.5]}) + "\n"
    )
    with pytest.raises(SchemaError):
        read_predictions_jsonl(path)


def test_predictions_jsonl_invalid_probs_cite_line(tmp_path):
    good = [1.0 / 63] * 63
    bad = [2.0 / 63] * 63
    path = tmp_path / "preds.jsonl"
    path.write_text(
        json.dumps({"image_id": "a", "model_id": "m", "probs": good}) + "\n"
        + json.dumps({"image_id": "b", "model_id": "m", "probs": bad}) + "\n"
    )
    with pytest.raises(ValidationError) as e:
        read_predictions_jsonl(path)
    assert ":2:" in str(e.value)


def test_prediction_record_validation():
    with pytest.raises(ValidationError):
        PredictionRecord("", "m", np.full(63, 1.0 / 63))
    with pytest.raises(ValidationError):
        PredictionRecord("a", "m", np.full(63, 2.0 / 63))
    rec = PredictionRecord("a", "m", np.full(63, 1.0 / 63))
    with pytest.raises(ValueError):
        rec.probs[0] = 0.5  # frozen storage


def test_classification_csv(tmp_path):
    path = tmp_path / "out.csv"
    n = write_classification_csv(path, [("img_0", 7, "port", 0.8125)])
    assert n == 1
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "id,predicted_class,predicted_label,max_prob"
    assert lines[1] == "img_0,7,port,0.8125"
