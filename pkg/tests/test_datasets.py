import json

import numpy as np
import pytest

from protocore import datasets as ds


def small_gaussians(seed=0):
    return ds.make_split_gaussians(n_classes=10, n_tasks=5, input_dim=16,
                                   n_per_class=20, separation=8.0, noise_sd=0.5,
                                   seed=seed)


def test_task_partition():
    seq = small_gaussians()
    assert seq.n_tasks == 5
    assert all(len(t.classes) == 2 for t in seq.tasks)
    union = set()
    for t in seq.tasks:
        assert union.isdisjoint(t.classes)
        union |= set(t.classes)
    assert union == set(range(10))


def test_indivisible_classes_rejected():
    with pytest.raises(ValueError, match="divisible"):
        ds.make_split_gaussians(10, 3, 8, 10, 4.0, 0.5, seed=0)


def test_same_seed_identical_bytes():
    a = json.dumps(ds.sequence_to_json(small_gaussians(3)), sort_keys=True)
    b = json.dumps(ds.sequence_to_json(small_gaussians(3)), sort_keys=True)
    assert a == b
    c = json.dumps(ds.sequence_to_json(small_gaussians(4)), sort_keys=True)
    assert a != c


def test_train_test_split_ratio():
    seq = small_gaussians()
    for t in seq.tasks:
        # 20 per class, 2 classes: 16 train + 4 test each
        assert len(t.train_y) == 32
        assert len(t.test_y) == 8


def test_nearest_centroid_oracle_accuracy():
    seq = ds.make_split_gaussians(n_classes=10, n_tasks=5, input_dim=16,
                                  n_per_class=100, separation=8.0, noise_sd=0.5,
                                  seed=1)
    assert ds.nearest_centroid_accuracy(seq) > 0.99


def test_ring_radii_strictly_increasing():
    seq = ds.make_split_rings(n_classes=4, n_tasks=2, n_per_class=40, seed=0)
    radii = ds.ring_radii(seq)
    assert all(a < b for a, b in zip(radii, radii[1:]))
    # every sample's norm is closest to its own class radius most of the time
    assert ds.nearest_ring_accuracy(seq) > 0.95


def test_rings_not_linearly_separable():
    seq = ds.make_split_rings(n_classes=4, n_tasks=2, n_per_class=60, seed=2)
    # least-squares linear probe on raw 2-D inputs vs radius oracle
    xs, ys = seq.all_train()
    onehot = np.eye(seq.n_classes)[ys]
    aug = np.hstack([xs, np.ones((len(xs), 1))])
    w, *_ = np.linalg.lstsq(aug, onehot, rcond=None)
    correct = 0
    total = 0
    for t in seq.tasks:
        aug_t = np.hstack([t.test_x, np.ones((len(t.test_x), 1))])
        pred = np.argmax(aug_t @ w, axis=1)
        correct += int(np.sum(pred == t.test_y))
        total += len(t.test_y)
    linear_acc = correct / total
    assert linear_acc < ds.nearest_ring_accuracy(seq)


def test_ring_same_seed_identical():
    a = ds.make_split_rings(4, 2, 20, seed=9)
    b = ds.make_split_rings(4, 2, 20, seed=9)
    for ta, tb in zip(a.tasks, b.tasks):
        assert np.array_equal(ta.train_x, tb.train_x)
        assert np.array_equal(ta.test_x, tb.test_x)


class TestIterate:
    def test_online_batch_sizes(self):
        seq = ds.make_split_gaussians(2, 1, 4, 50, 4.0, 0.3, seed=0)
        task = seq.tasks[0]  # 80 train samples... 2 classes x 40 train
        batches = list(ds.iterate(task, ds.StreamMode("online"), 32, seed=0))
        sizes = [len(y) for _, y in batches]
        assert sizes == [32, 32, 16]
        assert sum(sizes) == task.n_train

    def test_online_each_sample_once(self):
        seq = small_gaussians()
        task = seq.tasks[0]
        seen = np.concatenate([y for _, y in
                               ds.iterate(task, ds.StreamMode("online"), 7, seed=1)])
        assert len(seen) == task.n_train
        xs = np.concatenate([x for x, _ in
                             ds.iterate(task, ds.StreamMode("online"), 7, seed=1)])
        assert sorted(map(tuple, xs)) == sorted(map(tuple, task.train_x))

    def test_offline_epochs_repeat_each_sample(self):
        seq = small_gaussians()
        task = seq.tasks[0]
        mode = ds.StreamMode("offline", epochs=2)
        xs = np.concatenate([x for x, _ in ds.iterate(task, mode, 8, seed=0)])
        assert len(xs) == 2 * task.n_train
        counts = {}
        for row in map(tuple, xs):
            counts[row] = counts.get(row, 0) + 1
        assert set(counts.values()) == {2}

    def test_fixed_seed_fixed_permutation(self):
        seq = small_gaussians()
        task = seq.tasks[0]
        a = [y.tolist() for _, y in ds.iterate(task, ds.StreamMode("online"), 5, seed=3)]
        b = [y.tolist() for _, y in ds.iterate(task, ds.StreamMode("online"), 5, seed=3)]
        assert a == b

    def test_bad_batch_size_rejected(self):
        seq = small_gaussians()
        with pytest.raises(ValueError, match="batch_size"):
            list(ds.iterate(seq.tasks[0], ds.StreamMode("online"), 0, seed=0))


def test_sequence_json_roundtrip(tmp_path):
    seq = small_gaussians(5)
    path = tmp_path / "seq.json"
    ds.save_sequence(path, seq)
    loaded = ds.load_sequence(path)
    assert loaded.n_classes == seq.n_classes
    assert loaded.generator == seq.generator
    assert np.array_equal(loaded.centers, seq.centers)
    for ta, tb in zip(seq.tasks, loaded.tasks):
        assert ta.classes == tb.classes
        assert np.array_equal(ta.train_x, tb.train_x)
        assert np.array_equal(ta.train_y, tb.train_y)
        assert np.array_equal(ta.test_x, tb.test_x)


def test_label_outside_classes_rejected():
    with pytest.raises(ValueError, match="outside"):
        ds.Task(task_id=1, classes=(0,),
                train_x=np.zeros((2, 2)), train_y=np.array([0, 1]),
                test_x=np.zeros((1, 2)), test_y=np.array([0]))
