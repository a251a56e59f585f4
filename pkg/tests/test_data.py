import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from splitsim import data
from splitsim.data import LabeledDataset, PartitionSpec, gen_synthetic, load_csv, partition, save_csv
from splitsim.errors import FormatError, InputError


class TestGenSynthetic:
    def test_same_seed_identical(self):
        a_train, a_test = gen_synthetic(200, 8, 3, 4.0, seed=5)
        b_train, b_test = gen_synthetic(200, 8, 3, 4.0, seed=5)
        assert np.array_equal(a_train.features, b_train.features)
        assert np.array_equal(a_test.labels, b_test.labels)

    def test_zero_separation_collapses_class_means(self):
        train, _ = gen_synthetic(3000, 8, 3, 0.0, seed=1)
        idx = train.label_indices()
        means = [train.features[idx == k].mean(axis=0) for k in range(3)]
        for a in means:
            for b in means:
                assert np.linalg.norm(a - b) < 0.3  # sampling noise only

    def test_test_split_is_20_percent_and_balanced(self):
        train, test = gen_synthetic(3000, 16, 3, 6.0, seed=0)
        assert train.n + test.n == 3000
        assert test.n == 600
        counts = np.bincount(test.label_indices(), minlength=3)
        assert counts.max() - counts.min() <= 1

    def test_single_node_oracle_reaches_95_percent(self):
        # achievable-accuracy baseline for the default generator settings
        train, test = gen_synthetic(3000, 16, 3, 6.0, seed=0)
        clf = LogisticRegression(max_iter=2000).fit(train.features, train.label_indices())
        acc = clf.score(test.features, test.label_indices())
        assert acc >= 0.95

    def test_too_few_samples_rejected(self):
        with pytest.raises(InputError):
            gen_synthetic(2, 4, 3, 1.0, seed=0)


class TestCsv:
    def _write(self, tmp_path, text):
        path = tmp_path / "data.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def test_hand_written_file_parses_exactly(self, tmp_path):
        path = self._write(tmp_path, "a,b,label\n1.0,4.0,x\n2.0,5.0,y\n3.0,6.0,x\n")
        ds = load_csv(path, "label")
        raw = np.array([[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])
        expected = (raw - raw.mean(axis=0)) / raw.std(axis=0)
        assert np.allclose(ds.features, expected, atol=1e-12)
        assert ds.class_names == ("x", "y")
        assert np.array_equal(ds.labels, np.array([[1.0, 0], [0, 1], [1, 0]]))

    def test_constant_column_becomes_zeros(self, tmp_path):
        path = self._write(tmp_path, "a,b,label\n7.0,1.0,x\n7.0,2.0,y\n7.0,3.0,x\n")
        ds = load_csv(path, "label")
        assert np.all(ds.features[:, 0] == 0.0)

    def test_round_trip_is_exact(self, tmp_path):
        train, _ = gen_synthetic(60, 4, 3, 3.0, seed=2)
        # order rows so class names appear in the dataset's own order
        order = np.argsort(train.label_indices(), kind="stable")
        ds1 = train.subset(order)
        first = tmp_path / "once.csv"
        save_csv(ds1, first)
        loaded = load_csv(first, "label")
        second = tmp_path / "twice.csv"
        save_csv(loaded, second)
        again = load_csv(second, "label")
        assert np.array_equal(loaded.features, again.features)
        assert np.array_equal(loaded.labels, again.labels)
        assert loaded.class_names == again.class_names

    def test_missing_label_column(self, tmp_path):
        path = self._write(tmp_path, "a,b\n1,2\n")
        with pytest.raises(FormatError):
            load_csv(path, "label")

    def test_non_numeric_cell_names_the_row(self, tmp_path):
        path = self._write(tmp_path, "a,label\n1.0,x\noops,y\n")
        with pytest.raises(FormatError, match="row 2"):
            load_csv(path, "label")

    def test_standardization_invariants(self, tmp_path):
        train, _ = gen_synthetic(500, 6, 2, 3.0, seed=3)
        path = tmp_path / "d.csv"
        save_csv(train, path)
        ds = load_csv(path, "label")
        mean = np.abs(ds.features.mean(axis=0))
        var = ds.features.var(axis=0)
        assert mean.max() < 1e-9
        assert np.all((var > 1 - 1e-6) & (var < 1 + 1e-6))


class TestPartition:
    def test_one_class_with_matching_client_count(self):
        train, _ = gen_synthetic(300, 4, 3, 3.0, seed=4)
        parts = partition(train, PartitionSpec(3, "one-class", seed=0))
        for m, part in enumerate(parts):
            labels = part.label_indices()
            assert np.all(labels == m % 3)
        assert sum(p.n for p in parts) == train.n

    def test_one_class_label_matrix_has_single_nonzero_column(self):
        train, _ = gen_synthetic(240, 4, 3, 3.0, seed=5)
        for part in partition(train, PartitionSpec(6, "one-class", seed=0)):
            assert (part.labels.sum(axis=0) > 0).sum() == 1

    def test_iid_sizes_differ_by_at_most_one(self):
        train, _ = gen_synthetic(101, 4, 2, 3.0, seed=6)
        parts = partition(train, PartitionSpec(2, "iid", seed=0))
        assert abs(parts[0].n - parts[1].n) <= 1

    def test_disjoint_and_exhaustive_by_index(self):
        ds = LabeledDataset(
            np.arange(200.0).reshape(100, 2),
            np.eye(2)[np.arange(100) % 2],
            ("a", "b"),
        )
        parts = partition(ds, PartitionSpec(4, "one-class", seed=1))
        seen = []
        for part in parts:
            seen.extend(part.features[:, 0].tolist())
        assert sorted(seen) == ds.features[:, 0].tolist()

    def test_class_smaller_than_client_count_rejected(self):
        ds = LabeledDataset(
            np.arange(12.0).reshape(6, 2),
            np.eye(2)[[0, 0, 0, 0, 0, 1]],
            ("a", "b"),
        )
        with pytest.raises(InputError):
            partition(ds, PartitionSpec(4, "one-class", seed=0))

    def test_one_class_requires_enough_clients(self):
        train, _ = gen_synthetic(90, 4, 3, 3.0, seed=7)
        with pytest.raises(InputError):
            partition(train, PartitionSpec(2, "one-class", seed=0))
