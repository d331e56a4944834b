import numpy as np
import pytest

from stepembed.data.datapipe import (
    TimeSeriesDataset, collate, load_dataset, load_grouping, make_batches, make_stay, save_dataset,
)
from stepembed.engine.errors import ConfigError, DataError, PartitionError


def _write(tmp_path, data, labels, splits, groups=None):
    paths = {}
    for name, text in (("data", data), ("labels", labels), ("splits", splits), ("groups", groups)):
        if text is None:
            continue
        path = tmp_path / f"{name}.csv"
        path.write_text(text, encoding="utf-8")
        paths[name] = path
    return paths


def _load(paths, **kw):
    return load_dataset(paths["data"], paths["labels"], paths["splits"], paths.get("groups"), **kw)


BASIC_DATA = "stay_id,time,a,b\ns1,0,1.0,2.0\ns1,1,3.0,4.0\n"
BASIC_LABELS = "stay_id,time,label\ns1,0,0\ns1,1,1\n"
BASIC_SPLITS = "stay_id,split\ns1,train\n"


# === load_dataset ===

def test_complete_stay_fully_observed(tmp_path):
    ds = _load(_write(tmp_path, BASIC_DATA, BASIC_LABELS, BASIC_SPLITS))
    stay = ds.stays[0]
    assert ds.feature_names == ["a", "b"]
    assert stay.T == 2
    assert stay.observed_mask.all()
    np.testing.assert_array_equal(stay.labels, [0.0, 1.0])
    assert stay.label_mask.all()


def test_empty_cell_is_unobserved(tmp_path):
    data = "stay_id,time,a,b\ns1,0,1.0,2.0\ns1,1,,4.0\n"
    stay = _load(_write(tmp_path, data, BASIC_LABELS, BASIC_SPLITS)).stays[0]
    assert not stay.observed_mask[1, 0]
    assert stay.observed_mask[1, 1]
    assert np.isnan(stay.X[1, 0])


def test_absent_rows_are_missing_steps(tmp_path):
    data = "stay_id,time,a,b\ns1,0,1.0,2.0\ns1,2,3.0,4.0\n"
    labels = "stay_id,time,label\ns1,2,1\n"
    stay = _load(_write(tmp_path, data, labels, BASIC_SPLITS)).stays[0]
    assert stay.T == 3
    assert not stay.observed_mask[1].any()
    np.testing.assert_array_equal(stay.label_mask, [False, False, True])


def test_groups_file_omitting_feature(tmp_path):
    paths = _write(tmp_path, BASIC_DATA, BASIC_LABELS, BASIC_SPLITS, "feature,group\na,g1\n")
    with pytest.raises(PartitionError) as err:
        _load(paths)
    assert err.value.missing == [1]


def test_groups_file_unknown_feature(tmp_path):
    paths = _write(tmp_path, BASIC_DATA, BASIC_LABELS, BASIC_SPLITS, "feature,group\na,g1\nb,g2\nzz,g2\n")
    with pytest.raises(PartitionError):
        _load(paths)


def test_groups_file_duplicated_feature(tmp_path):
    paths = _write(tmp_path, BASIC_DATA, BASIC_LABELS, BASIC_SPLITS, "feature,group\na,g1\nb,g2\na,g2\n")
    with pytest.raises(PartitionError) as err:
        _load(paths)
    assert err.value.duplicated == [0]


def test_groups_loaded_in_column_order(tmp_path):
    paths = _write(tmp_path, BASIC_DATA, BASIC_LABELS, BASIC_SPLITS, "feature,group\nb,lab\na,vital\n")
    ds = _load(paths)
    assert ds.grouping.group_names == ["vital", "lab"]
    assert [g.indices for g in ds.grouping.groups] == [[0], [1]]


def test_duplicate_row_rejected(tmp_path):
    data = BASIC_DATA + "s1,1,5.0,6.0\n"
    with pytest.raises(DataError, match="duplicata"):
        _load(_write(tmp_path, data, BASIC_LABELS, BASIC_SPLITS))


def test_non_monotone_time_rejected(tmp_path):
    data = "stay_id,time,a,b\ns1,1,1.0,2.0\ns1,0,3.0,4.0\n"
    with pytest.raises(DataError, match="monotono"):
        _load(_write(tmp_path, data, BASIC_LABELS, BASIC_SPLITS))


def test_label_for_unknown_stay(tmp_path):
    labels = BASIC_LABELS + "s9,0,1\n"
    with pytest.raises(DataError):
        _load(_write(tmp_path, BASIC_DATA, labels, BASIC_SPLITS))


def test_stay_without_split(tmp_path):
    with pytest.raises(DataError):
        _load(_write(tmp_path, BASIC_DATA, BASIC_LABELS, "stay_id,split\ns2,train\n"))


def test_invalid_split_name(tmp_path):
    with pytest.raises(DataError):
        _load(_write(tmp_path, BASIC_DATA, BASIC_LABELS, "stay_id,split\ns1,holdout\n"))


def test_label_beyond_last_step(tmp_path):
    labels = "stay_id,time,label\ns1,5,1\n"
    with pytest.raises(DataError):
        _load(_write(tmp_path, BASIC_DATA, labels, BASIC_SPLITS))


def test_per_stay_labels(tmp_path):
    labels = "stay_id,label\ns1,1\n"
    ds = _load(_write(tmp_path, BASIC_DATA, labels, BASIC_SPLITS), task="per_stay_binary")
    assert ds.per_stay
    np.testing.assert_array_equal(ds.stays[0].labels, [1.0])


def test_non_numeric_value_rejected(tmp_path):
    data = "stay_id,time,a,b\ns1,0,1.0,high\ns1,1,3.0,4.0\n"
    with pytest.raises(DataError):
        _load(_write(tmp_path, data, BASIC_LABELS, BASIC_SPLITS))


def test_missing_file(tmp_path):
    with pytest.raises(DataError, match="non trovato"):
        load_dataset(tmp_path / "nope.csv", tmp_path / "l.csv", tmp_path / "s.csv")


def test_unknown_task(tmp_path):
    with pytest.raises(ConfigError):
        _load(_write(tmp_path, BASIC_DATA, BASIC_LABELS, BASIC_SPLITS), task="survival")


def test_non_positive_step_hours():
    with pytest.raises(DataError):
        TimeSeriesDataset(stays=[], feature_names=["a"], step_hours=0.0)


def test_save_then_load_preserves_dataset(tmp_path, tiny_binary):
    dataset, _ = tiny_binary
    paths = save_dataset(dataset, tmp_path)
    loaded = load_dataset(paths["data"], paths["labels"], paths["splits"], paths["groups_true"],
                          task=dataset.task)
    assert loaded.feature_names == dataset.feature_names
    assert loaded.grouping.groups == dataset.grouping.groups
    assert [s.stay_id for s in loaded.stays] == [s.stay_id for s in dataset.stays]
    for a, b in zip(loaded.stays, dataset.stays):
        assert a.split == b.split
        np.testing.assert_array_equal(a.observed_mask, b.observed_mask)
        np.testing.assert_allclose(a.X[a.observed_mask], b.X[b.observed_mask], rtol=1e-9)
        np.testing.assert_array_equal(a.labels, b.labels)
    assert (tmp_path / "groups_interleaved.csv").exists()
    assert load_grouping(tmp_path / "groups_interleaved.csv", dataset.feature_names).n_groups == 2


# === batching ===

def _stay(sid, T, split="train", d=2):
    return make_stay(sid, np.ones((T, d)), np.zeros(T), np.ones(T, dtype=bool), split, per_stay=False)


def test_collate_pads_to_batch_max():
    batch = collate([_stay("a", 3), _stay("b", 5)], per_stay=False)
    assert batch.X.shape == (2, 5, 2)
    assert batch.step_mask.sum() == 8
    assert (~batch.step_mask).sum() == 2
    assert not batch.label_mask[0, 3:].any()
    np.testing.assert_array_equal(batch.lengths, [3, 5])


def test_batch_size_covering_split_gives_one_batch():
    ds = TimeSeriesDataset(stays=[_stay(f"s{i}", 2 + i) for i in range(4)], feature_names=["a", "b"])
    batches = make_batches(ds, "train", batch_size=10)
    assert len(batches) == 1
    assert batches[0].size == 4


def test_batch_order_is_deterministic_under_seed():
    ds = TimeSeriesDataset(stays=[_stay(f"s{i}", 2) for i in range(10)], feature_names=["a", "b"])
    a = [b.stay_ids for b in make_batches(ds, "train", 3, seed=4)]
    b = [b.stay_ids for b in make_batches(ds, "train", 3, seed=4)]
    assert a == b
    assert sum(len(ids) for ids in a) == 10


def test_batch_size_below_one_rejected():
    ds = TimeSeriesDataset(stays=[_stay("a", 2)], feature_names=["a", "b"])
    with pytest.raises(ConfigError):
        make_batches(ds, "train", 0)


def test_empty_split_rejected():
    ds = TimeSeriesDataset(stays=[_stay("a", 2)], feature_names=["a", "b"])
    with pytest.raises(DataError):
        make_batches(ds, "test", 4)
