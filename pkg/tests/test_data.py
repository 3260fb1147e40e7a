import dataclasses

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from odegrud.data import (
    SYNTHETIC_PRESETS,
    DataError,
    SyntheticSpec,
    drop_empty_steps,
    generate_synthetic,
    load_labels,
    load_triplets,
    physionet_to_triplets,
    split,
    write_triplets,
)
from odegrud.missingness import TimeSeriesBatch, ValidationError
from odegrud.training import auc


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_same_time_rows_merge_into_one_step(tmp_path):
    f = write(tmp_path / "t.csv", "series_id,time,variable,value\na,1.0,hr,80\na,1.0,temp,37.5\n")
    b = load_triplets(f)
    assert b.lengths.tolist() == [1]
    assert b.mask[0, 0].tolist() == [1.0, 1.0]
    assert b.values[0, 0].tolist() == [80.0, 37.5]
    assert b.deltas[0, 0].tolist() == [0.0, 0.0]


def test_three_row_file_intervals(tmp_path):
    f = write(tmp_path / "t.csv", "series_id,time,variable,value\ns,0,a,1\ns,0.5,b,2\ns,1.5,a,3\n")
    b = load_triplets(f, vocabulary=["a", "b"])
    # a observed at 0 and 1.5; b only at 0.5
    assert b.times[0].tolist() == [0.0, 0.5, 1.5]
    assert b.deltas[0].tolist() == [[0.0, 0.0], [0.5, 0.5], [1.5, 1.0]]
    assert b.mask[0].tolist() == [[1, 0], [0, 1], [1, 0]]


def test_rows_are_sorted_by_time(tmp_path):
    f = write(tmp_path / "t.csv", "series_id,time,variable,value\ns,2,a,5\ns,1,a,4\n")
    assert load_triplets(f).values[0, :, 0].tolist() == [4.0, 5.0]


def test_loader_errors_name_line(tmp_path):
    f = write(tmp_path / "t.csv", "series_id,time,variable,value\ns,0,a,1\ns,1,zz,2\n")
    with pytest.raises(DataError, match=r":3: unknown variable 'zz'"):
        load_triplets(f, vocabulary=["a"])
    f = write(tmp_path / "u.csv", "series_id,time,variable,value\ns,0,a,1\ns,1,a,high\n")
    with pytest.raises(DataError, match=r":3: non-numeric value"):
        load_triplets(f)
    f = write(tmp_path / "v.csv", "id,time,var,value\n")
    with pytest.raises(DataError, match=":1:"):
        load_triplets(f)
    f = write(tmp_path / "w.csv", "series_id,time,variable,value\ns,-1,a,1\n")
    with pytest.raises(DataError, match="negative time"):
        load_triplets(f)


def test_labels_and_missing_label(tmp_path):
    f = write(tmp_path / "t.csv", "series_id,time,variable,value\ns,0,a,1\nq,0,a,2\n")
    lab = write(tmp_path / "l.csv", "series_id,label\ns,1\nq,0\n")
    assert load_triplets(f, labels_path=lab).labels.tolist() == [1.0, 0.0]
    write(lab, "series_id,label\ns,1\n")
    with pytest.raises(DataError, match="no label"):
        load_triplets(f, labels_path=lab)
    write(lab, "series_id,label\ns,3\n")
    with pytest.raises(DataError):
        load_labels(lab)


def test_max_length_truncates(tmp_path):
    rows = "".join(f"s,{t},a,{t}\n" for t in range(10))
    f = write(tmp_path / "t.csv", "series_id,time,variable,value\n" + rows)
    assert load_triplets(f, max_length=4).lengths.tolist() == [4]


def test_round_trip_is_exact(tmp_path):
    b = drop_empty_steps(generate_synthetic(SyntheticSpec(n_series=40, seed=5)))
    write_triplets(b, tmp_path / "t.csv", tmp_path / "l.csv")
    back = load_triplets(tmp_path / "t.csv", vocabulary=b.variables, labels_path=tmp_path / "l.csv")
    assert back.ids == b.ids
    assert np.array_equal(back.mask, b.mask) and np.array_equal(back.times, b.times)
    assert np.array_equal(back.values[back.mask > 0], b.values[b.mask > 0])
    assert np.array_equal(back.labels, b.labels)
    assert (tmp_path / "t.csv").read_bytes().count(b"\r") == 0


def test_physionet_conversion(tmp_path):
    rec = tmp_path / "set-a"
    rec.mkdir()
    write(rec / "132539.txt", "Time,Parameter,Value\n00:00,RecordID,132539\n00:00,Age,54\n00:00,Height,-1\n"
                              "00:07,HR,73\n01:37,HR,77\n01:37,Temp,36.8\n")
    write(tmp_path / "Outcomes-a.txt", "RecordID,SAPS-I,In-hospital_death\n132539,6,0\n")
    n = physionet_to_triplets(rec, tmp_path / "t.csv", tmp_path / "Outcomes-a.txt", tmp_path / "l.csv")
    assert n == 1
    b = load_triplets(tmp_path / "t.csv", labels_path=tmp_path / "l.csv")
    assert b.variables == ["Age", "HR", "Temp"]
    np.testing.assert_allclose(b.times[0], [0.0, 7 / 60, 1 + 37 / 60])
    assert b.labels.tolist() == [0.0]


# -- synthetic ----------------------------------------------------------------------------


def test_generator_is_deterministic():
    a = generate_synthetic(SyntheticSpec(n_series=30, seed=9))
    b = generate_synthetic(SyntheticSpec(n_series=30, seed=9))
    assert np.array_equal(a.values, b.values) and np.array_equal(a.mask, b.mask) and np.array_equal(a.times, b.times)


def test_zero_missing_rate_gives_full_mask():
    b = generate_synthetic(SyntheticSpec(n_series=20, missing_rates=(0.0, 0.0)))
    assert np.all(b.mask[b.step_valid() > 0] == 1)


def test_degenerate_specs_rejected():
    with pytest.raises(ValidationError):
        SyntheticSpec(n_series=0)
    with pytest.raises(ValidationError):
        SyntheticSpec(missing_rates=(0.2, 1.0))


def test_both_classes_and_valid_batch():
    b = generate_synthetic(SyntheticSpec(n_series=2, seed=1))
    assert sorted(b.labels.tolist()) == [0.0, 1.0]
    b.validate()


def _class_missing_rates(batch):
    valid = batch.step_valid()[:, :, None] * np.ones_like(batch.mask)
    return [1 - batch.mask[batch.labels == c].sum() / valid[batch.labels == c].sum() for c in (0, 1)]


def test_per_class_missing_rates_within_tolerance():
    b = generate_synthetic(SyntheticSpec(n_series=600, seed=2))
    r0, r1 = _class_missing_rates(b)
    assert abs(r0 - 0.2) <= 0.02 and abs(r1 - 0.7) <= 0.02
    flat = generate_synthetic(SyntheticSpec(n_series=600, informative=False, missing_rate=0.4, seed=2))
    assert all(abs(r - 0.4) <= 0.02 for r in _class_missing_rates(flat))


def test_mask_only_logistic_classifier_is_predictive():
    train_b, test_b = split(generate_synthetic(SyntheticSpec(n_series=600, seed=4)), (0.5, 0.5), seed=0)

    def features(b):
        valid = b.step_valid()[:, :, None]
        return (b.mask * valid).sum(axis=1) / valid.sum(axis=1)

    clf = LogisticRegression().fit(features(train_b), train_b.labels)
    assert auc(clf.decision_function(features(test_b)), test_b.labels) >= 0.8


# -- splitting --------------------------------------------------------------------------------


def _toy(labels):
    series = [(np.array([0.0]), np.array([[float(i)]]), np.ones((1, 1))) for i in range(len(labels))]
    return TimeSeriesBatch.from_series(series, labels=labels, ids=[str(i) for i in range(len(labels))])


def test_split_sizes_disjoint_and_exhaustive():
    parts = split(_toy([0, 1] * 5), (0.6, 0.2, 0.2), seed=0)
    assert [p.n_series for p in parts] == [6, 2, 2]
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids, key=int) == [str(i) for i in range(10)]
    unstrat = split(_toy([0, 1] * 5), (0.6, 0.2, 0.2), seed=0, stratified=False)
    assert [p.n_series for p in unstrat] == [6, 2, 2]


def test_split_is_deterministic():
    a = split(_toy([0, 1] * 10), (0.6, 0.2, 0.2), seed=3)
    b = split(_toy([0, 1] * 10), (0.6, 0.2, 0.2), seed=3)
    assert [p.ids for p in a] == [p.ids for p in b]


def test_stratified_split_keeps_positives_everywhere():
    parts = split(_toy([1] * 3 + [0] * 27), (0.6, 0.2, 0.2), seed=1)
    assert all(p.labels.sum() >= 1 for p in parts)


def test_split_errors():
    with pytest.raises(ValidationError):
        split(_toy([0, 1] * 5), (0.5, 0.2, 0.2))
    with pytest.raises(ValidationError, match="lacks a class"):
        split(_toy([1] + [0] * 9), (0.6, 0.2, 0.2))


def test_presets_are_valid():
    for name, spec in SYNTHETIC_PRESETS.items():
        small = dataclasses.replace(spec, n_series=20)
        generate_synthetic(small).validate()
