import numpy as np
import pytest

from gradtree.batch import TrainConfig
from gradtree.data import Dataset, OracleTreeSpec, gen_oracle_tree, rmse
from gradtree.errors import ConfigError
from gradtree.forest import (
    ForestModel,
    bootstrap_sample,
    predict_forest,
    predict_forest_batch,
    train_forest,
)
from gradtree.trees import ObliqueTree


def small_cfg(**kw):
    kw.setdefault("epochs", 30)
    kw.setdefault("init_candidates", 2)
    kw.setdefault("pilot_epochs", 5)
    return TrainConfig(**kw)


class TestBootstrap:
    def test_count_contract(self, rng):
        ds = Dataset(rng.normal(size=(10, 2)), np.arange(10.0))
        assert bootstrap_sample(ds, 0.5, rng).n == 5
        assert bootstrap_sample(ds, 1.0, rng).n == 10

    def test_fixed_seed_identical(self, rng):
        ds = Dataset(rng.normal(size=(50, 2)), np.arange(50.0))
        a = bootstrap_sample(ds, 1.0, np.random.default_rng(9))
        b = bootstrap_sample(ds, 1.0, np.random.default_rng(9))
        np.testing.assert_array_equal(a.labels, b.labels)

    def test_unique_fraction_near_one_minus_inv_e(self):
        n = 1000
        ds = Dataset(np.zeros((n, 1)), np.arange(float(n)))
        rng = np.random.default_rng(123)
        fractions = []
        for _ in range(100):
            sample = bootstrap_sample(ds, 1.0, rng)
            fractions.append(np.unique(sample.labels).size / n)
        assert np.mean(fractions) == pytest.approx(1 - 1 / np.e, abs=0.03)

    def test_bad_fraction(self, rng):
        ds = Dataset(np.zeros((5, 1)), np.zeros(5))
        with pytest.raises(ConfigError):
            bootstrap_sample(ds, 0.0, rng)


def _tiny_forest_fixture(n_trees=3, seed=0):
    spec = OracleTreeSpec(height=2, input_dim=2)
    ds, oracle = gen_oracle_tree(spec, 600, seed=7)
    model = train_forest(ds, n_trees, height=2, cfg=small_cfg(seed=seed), seed=seed)
    return ds, model


class TestTrainForest:
    def test_single_member_equals_its_tree(self):
        ds, model = _tiny_forest_fixture(n_trees=1)
        x = ds.features[0]
        assert predict_forest(model, x) == model.members[0].predict(x)[0]

    def test_members_differ_across_bootstrap(self):
        _, model = _tiny_forest_fixture(n_trees=3)
        w0 = model.members[0].weights
        assert any(not np.array_equal(w0, m.weights) for m in model.members[1:])

    def test_determinism(self):
        _, m1 = _tiny_forest_fixture(n_trees=2, seed=5)
        _, m2 = _tiny_forest_fixture(n_trees=2, seed=5)
        for a, b in zip(m1.members, m2.members):
            np.testing.assert_array_equal(a.weights, b.weights)
            np.testing.assert_array_equal(a.leaves, b.leaves)

    def test_bad_tree_count(self, rng):
        ds = Dataset(rng.normal(size=(20, 2)), rng.normal(size=20))
        with pytest.raises(ConfigError):
            train_forest(ds, 0, height=1, cfg=small_cfg())


class TestPredictForest:
    def _manual_forest(self, leaf_values_list, task):
        members = []
        for vals in leaf_values_list:
            members.append(
                ObliqueTree(
                    height=1,
                    weights=np.array([[1.0]]),
                    biases=np.zeros(1),
                    leaves=np.asarray(vals, dtype=float),
                )
            )
        return ForestModel(tuple(members), task, tuple(range(len(members))), 1.0)

    def test_regression_average(self):
        model = self._manual_forest(
            [[[0.0], [1.0]], [[0.0], [2.0]], [[0.0], [3.0]]], "reg"
        )
        assert predict_forest(model, [1.0]) == pytest.approx(2.0)

    def test_vote_plurality_and_tie(self):
        model = self._manual_forest(
            [
                [[0, 0, 1], [0, 0, 1]],  # votes class 2
                [[0, 0, 1], [0, 0, 1]],  # votes class 2
                [[0, 1, 0], [0, 1, 0]],  # votes class 1
            ],
            "clf",
        )
        assert predict_forest(model, [0.5]) == 2
        tie = self._manual_forest(
            [[[0, 0, 1], [0, 0, 1]], [[0, 1, 0], [0, 1, 0]]], "clf"
        )
        assert predict_forest(tie, [0.5]) == 1  # tie -> lowest class index

    def test_member_order_invariance(self, rng):
        ds, model = _tiny_forest_fixture(n_trees=3)
        flipped = ForestModel(model.members[::-1], model.task,
                              model.member_seeds[::-1], model.sample_fraction)
        X = ds.features[:50]
        np.testing.assert_allclose(
            predict_forest_batch(model, X), predict_forest_batch(flipped, X)
        )

    def test_batch_matches_scalar(self):
        ds, model = _tiny_forest_fixture(n_trees=2)
        X = ds.features[:20]
        batch = predict_forest_batch(model, X)
        for i, x in enumerate(X):
            assert batch[i] == pytest.approx(predict_forest(model, x))
