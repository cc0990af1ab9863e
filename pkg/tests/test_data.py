import numpy as np
import pytest

from gradtree.data import (
    Dataset,
    OracleTreeSpec,
    apply_normalization,
    fit_apply_normalization,
    fit_normalization,
    gen_oracle_tree,
    load_csv,
    load_feature_csv,
    rmse,
    split,
)
from gradtree.errors import ConfigError, DataError


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadCsv:
    def test_header_and_last_column_label(self, tmp_path):
        p = write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n")
        ds = load_csv(p)
        assert ds.n == 3 and ds.dim == 2
        assert ds.labels.tolist() == [3.0, 6.0, 9.0]

    def test_label_by_name(self, tmp_path):
        p = write(tmp_path, "y,a\n1,10\n2,20\n")
        ds = load_csv(p, label_column="y")
        assert ds.labels.tolist() == [1.0, 2.0]
        assert ds.features.ravel().tolist() == [10.0, 20.0]

    def test_non_numeric_cell_names_row_and_column(self, tmp_path):
        p = write(tmp_path, "a,b\n1,2\n1,oops\n")
        with pytest.raises(DataError, match=r"row 3, column 2"):
            load_csv(p)

    def test_empty_file(self, tmp_path):
        with pytest.raises(DataError, match="empty"):
            load_csv(write(tmp_path, ""))

    def test_ragged_row(self, tmp_path):
        p = write(tmp_path, "a,b\n1,2\n1\n")
        with pytest.raises(DataError, match="fields"):
            load_csv(p)

    def test_no_header_index_label(self, tmp_path):
        p = write(tmp_path, "1,2\n3,4\n", name="raw.csv")
        ds = load_csv(p, label_column=0, has_header=False)
        assert ds.labels.tolist() == [1.0, 3.0]

    def test_feature_csv_with_drop(self, tmp_path):
        p = write(tmp_path, "a,b,y\n1,2,3\n")
        X = load_feature_csv(p, drop_column="y")
        assert X.tolist() == [[1.0, 2.0]]


class TestNormalization:
    def test_constant_column_centered_not_scaled(self):
        ds = Dataset(np.array([[5.0, 1.0], [5.0, 3.0]]), np.array([0.0, 1.0]))
        stats = fit_normalization(ds, "reg")
        out = apply_normalization(ds, stats)
        np.testing.assert_array_equal(out.features[:, 0], [0.0, 0.0])
        assert stats.feature_scale[0] == 1.0

    def test_target_min_max(self):
        ds = Dataset(np.zeros((2, 1)), np.array([0.0, 10.0]))
        stats = fit_normalization(ds, "reg")
        out = apply_normalization(ds, stats)
        assert out.labels.tolist() == [0.0, 1.0]
        assert stats.inverse_target(0.5) == 5.0

    def test_reapply_is_noop(self):
        ds = Dataset(np.array([[1.0], [2.0]]), np.array([0.0, 4.0]))
        norm, _, stats = fit_apply_normalization(ds, task="reg")
        again = apply_normalization(norm, stats)
        assert again is norm

    def test_target_round_trip(self, rng):
        y = rng.normal(size=100) * 7 + 3
        ds = Dataset(rng.normal(size=(100, 2)), y)
        stats = fit_normalization(ds, "reg")
        np.testing.assert_allclose(stats.inverse_target(stats.transform_target(y)), y, atol=1e-9)

    def test_degenerate_target(self):
        ds = Dataset(np.zeros((3, 1)), np.ones(3))
        with pytest.raises(DataError, match="degenerate"):
            fit_normalization(ds, "reg")

    def test_classification_labels_untouched(self):
        ds = Dataset(np.zeros((3, 1)), np.array([0, 1, 2]))
        _, _, stats = fit_apply_normalization(ds, task="clf")
        assert stats.target_min is None
        np.testing.assert_array_equal(stats.transform_target(ds.labels), ds.labels)

    def test_train_stats_applied_to_test(self, rng):
        train = Dataset(rng.normal(size=(50, 3)) + 5, rng.normal(size=50))
        test = Dataset(rng.normal(size=(20, 3)), rng.normal(size=20))
        _, [test_n], stats = fit_apply_normalization(train, [test], task="reg")
        np.testing.assert_allclose(
            test_n.features, (test.features - stats.feature_mean) / stats.feature_scale
        )


class TestSplit:
    def test_floor_based_sizes_with_remainder_to_train(self, rng):
        ds = Dataset(rng.normal(size=(10, 2)), rng.normal(size=10))
        tr, va, te = split(ds, (0.64, 0.16, 0.20), seed=7)
        assert (tr.n, va.n, te.n) == (7, 1, 2)

    def test_same_seed_same_split(self, rng):
        ds = Dataset(rng.normal(size=(30, 2)), np.arange(30.0))
        a = split(ds, (0.5, 0.25, 0.25), seed=3)
        b = split(ds, (0.5, 0.25, 0.25), seed=3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.labels, y.labels)

    def test_partition_covers_all_rows(self, rng):
        ds = Dataset(rng.normal(size=(57, 2)), np.arange(57.0))
        for seed in range(5):
            tr, va, te = split(ds, (0.6, 0.2, 0.2), seed=seed)
            got = np.sort(np.concatenate([tr.labels, va.labels, te.labels]))
            np.testing.assert_array_equal(got, np.arange(57.0))

    def test_empty_part_rejected(self, rng):
        ds = Dataset(np.zeros((3, 1)), np.zeros(3))
        with pytest.raises(DataError):
            split(ds, (0.9, 0.05, 0.05), seed=0)

    def test_bad_ratios(self, rng):
        ds = Dataset(np.zeros((10, 1)), np.zeros(10))
        with pytest.raises(ConfigError):
            split(ds, (0.5, 0.5, 0.5), seed=0)


class TestOracleTreeGenerator:
    def test_noiseless_self_score_is_zero(self):
        spec = OracleTreeSpec(height=2, input_dim=2)
        ds, tree = gen_oracle_tree(spec, 500, seed=1)
        preds = tree.predict_batch(ds.features)[:, 0]
        assert rmse(preds, ds.labels) == 0.0

    def test_noisy_self_score_matches_noise_level(self):
        spec = OracleTreeSpec(height=2, input_dim=2, noise=0.1)
        ds, tree = gen_oracle_tree(spec, 20000, seed=2)
        preds = tree.predict_batch(ds.features)[:, 0]
        assert rmse(preds, ds.labels) == pytest.approx(0.1, rel=0.05)

    def test_leaf_coverage(self):
        for seed in range(5):
            spec = OracleTreeSpec(height=3, input_dim=2)
            ds, tree = gen_oracle_tree(spec, 2000, seed=seed)
            counts = np.bincount(tree.route_batch(ds.features), minlength=8)
            assert counts.min() >= max(10, int(np.ceil(2000 / 2**5)))

    def test_regression_leaves_span_unit_interval(self):
        spec = OracleTreeSpec(height=2, input_dim=3)
        _, tree = gen_oracle_tree(spec, 300, seed=3)
        assert tree.leaves.min() == 0.0 and tree.leaves.max() == 1.0

    def test_classification_covers_all_classes(self):
        spec = OracleTreeSpec(height=2, input_dim=2, task="clf", num_classes=3)
        ds, tree = gen_oracle_tree(spec, 1000, seed=4)
        assert set(np.unique(ds.labels)) == {0, 1, 2}
        assert ds.labels.dtype.kind in "iu"

    def test_determinism(self):
        spec = OracleTreeSpec(height=2, input_dim=2)
        a, _ = gen_oracle_tree(spec, 100, seed=9)
        b, _ = gen_oracle_tree(spec, 100, seed=9)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
