import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st

from aqmeta import tasks
from aqmeta.tasks import Dataset, SyntheticSpec, sample_episode


def _toy(n_classes=6, per_class=10, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    classes = tuple(rng.normal(size=(per_class, dim)).astype(np.float32).astype(np.float64)
                    for _ in range(n_classes))
    return Dataset(tuple(range(n_classes)), classes)


# ---------------------------------------------------------------- episodes


def test_one_way_one_shot_one_query():
    ep = sample_episode(_toy(), 1, 1, 1, 0)
    assert ep.support_x.shape == (1, 3) and ep.query_x.shape == (1, 3)
    assert ep.support_y.tolist() == [0] and ep.query_y.tolist() == [0]
    assert not np.array_equal(ep.support_index, ep.query_index)


def test_identical_seeds_identical_episodes():
    a = sample_episode(_toy(), 3, 2, 4, 11)
    b = sample_episode(_toy(), 3, 2, 4, 11)
    np.testing.assert_array_equal(a.support_x, b.support_x)
    np.testing.assert_array_equal(a.query_x, b.query_x)
    assert a.class_ids == b.class_ids


def test_five_way_five_shot_counts(synthetic_split):
    ep = sample_episode(synthetic_split[0], 5, 5, 15, 3)
    assert ep.support_x.shape == (25, 16) and ep.query_x.shape == (75, 16)
    assert sorted(ep.support_y.tolist()) == sorted(list(range(5)) * 5)
    assert sorted(ep.query_y.tolist()) == sorted(list(range(5)) * 15)


def test_episode_errors():
    with pytest.raises(tasks.EpisodeError):
        sample_episode(_toy(n_classes=2), 3, 1, 1, 0)
    with pytest.raises(tasks.EpisodeError):
        sample_episode(_toy(per_class=4), 2, 3, 2, 0)


def test_support_query_disjoint_over_many_episodes():
    ds = _toy(n_classes=8, per_class=12)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        ep = sample_episode(ds, 4, 3, 5, rng)
        s = {tuple(p) for p in ep.support_index}
        q = {tuple(p) for p in ep.query_index}
        assert not s & q
        assert len(s) == 12 and len(q) == 20


@given(st.integers(0, 2**32 - 1))
def test_episode_labels_are_consistent_bijection(seed):
    ds = _toy(n_classes=7, per_class=9)
    ep = sample_episode(ds, 4, 2, 3, seed)
    mapping = {}
    for (pos, row), label, x in zip(ep.support_index, ep.support_y, ep.support_x):
        assert mapping.setdefault(label, pos) == pos
        np.testing.assert_array_equal(ds.classes[pos][row], x)
    for (pos, row), label, x in zip(ep.query_index, ep.query_y, ep.query_x):
        assert mapping[label] == pos
        np.testing.assert_array_equal(ds.classes[pos][row], x)
    assert len(set(mapping.values())) == 4
    assert tuple(ds.class_ids[mapping[i]] for i in range(4)) == ep.class_ids


# ---------------------------------------------------------------- synthetic


def test_degenerate_noise_stays_on_centers():
    spec = SyntheticSpec(n_classes=5, feature_dim=4, sigma=1e-9, per_class=20)
    ds = tasks.gen_synthetic(spec, 3)
    centers = tasks.class_centers(spec, 3)
    for c, arr in zip(centers, ds.classes):
        assert np.max(np.abs(arr - c)) < 1e-6


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(n_classes=4, feature_dim=3)
    assert tasks.gen_synthetic(spec, 5).equals(tasks.gen_synthetic(spec, 5))


def test_sample_mean_near_center():
    spec = SyntheticSpec(n_classes=10, feature_dim=8, sigma=0.15, per_class=400)
    ds = tasks.gen_synthetic(spec, 2)
    centers = tasks.class_centers(spec, 2)
    bound = 3 * spec.sigma / np.sqrt(spec.per_class)
    # 3-sigma per coordinate; allow the expected handful of excursions among 80 coordinates
    devs = np.abs(np.array([a.mean(axis=0) for a in ds.classes]) - centers)
    assert np.mean(devs <= bound) > 0.97


def test_centers_inside_ball():
    spec = SyntheticSpec(n_classes=200, feature_dim=5, radius=2.0)
    assert np.all(np.linalg.norm(tasks.class_centers(spec, 0), axis=1) <= 2.0)


def test_default_split_is_disjoint_and_normalized(synthetic_split):
    train, test = synthetic_split
    assert train.n_classes == 20 and test.n_classes == 10
    assert not set(train.class_ids) & set(test.class_ids)
    x = np.concatenate([train.as_arrays()[0], test.as_arrays()[0]])
    assert x.min() == 0.0 and x.max() == 1.0


# ---------------------------------------------------------------- FSDS


def test_fsds_round_trip(tmp_path):
    ds = _toy()
    tasks.write_fsds(ds, tmp_path / "d.fsds")
    back = tasks.load_fsds(tmp_path / "d.fsds")
    assert back.equals(ds)
    assert tasks.fsds_bytes(back) == tasks.fsds_bytes(ds)


def test_fsds_ragged_round_trip():
    ds = Dataset((0, 1), (np.ones((2, 2)), np.zeros((5, 2))))
    back = tasks.parse_fsds(tasks.fsds_bytes(ds))
    assert back.class_sizes() == [2, 5]


def test_fsds_hand_built_two_by_three():
    values = np.arange(12, dtype="<f4")
    buf = b"FSDS" + struct.pack("<IIII", 1, 2, 1, 2) + struct.pack("<I", 3) + values.tobytes()
    ds = tasks.parse_fsds(buf)
    assert ds.class_sizes() == [3, 3]
    np.testing.assert_array_equal(ds.classes[1], values[6:].reshape(3, 2))


@pytest.mark.parametrize("mutate, error", [
    (lambda b: b"NOPE" + b[4:], tasks.FSDSMagicError),
    (lambda b: b[:-5], tasks.FSDSTruncatedError),
    (lambda b: b + b"\0\0\0\0", tasks.FSDSLayoutError),
    (lambda b: b[:8] + struct.pack("<I", 0) + b[12:], tasks.FSDSLayoutError),
])
def test_fsds_errors_are_distinct(mutate, error):
    with pytest.raises(error):
        tasks.parse_fsds(mutate(tasks.fsds_bytes(_toy())))


# ---------------------------------------------------------------- CSV


def test_csv_groups_rows_by_label(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n1,2,0\n3,4,1\n5,6,0\n7,8,1\n")
    ds = tasks.load_csv(p, "label")
    assert ds.class_ids == (0, 1)
    assert ds.class_sizes() == [2, 2]
    np.testing.assert_array_equal(ds.classes[0], [[0.0, 0.0], [2 / 3, 2 / 3]])
    np.testing.assert_array_equal(ds.feature_min, [1.0, 2.0])


def test_csv_constant_column_scales_to_zero(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n1,9,x\n3,9,y\n")
    ds = tasks.load_csv(p, "label")
    assert all(np.all(c[:, 1] == 0.0) for c in ds.classes)


def test_csv_header_only_is_empty(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n")
    with pytest.raises(tasks.EmptyDatasetError):
        tasks.load_csv(p, "label")


@pytest.mark.parametrize("body, line", [("1,2,0\n1,x,1\n", 3), ("1,2,0\n1,1\n", 3)])
def test_csv_format_errors_name_the_line(tmp_path, body, line):
    p = tmp_path / "d.csv"
    p.write_text("a,b,label\n" + body)
    with pytest.raises(tasks.CSVFormatError, match=f":{line}:"):
        tasks.load_csv(p, "label")
