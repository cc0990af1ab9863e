import math

import numpy as np
import pytest

from gradtree.bandit import (
    BanditConfig,
    DatasetOracle,
    QueryAudit,
    estimate_grad_classification,
    estimate_grad_one_point,
    estimate_grad_two_point,
    make_loss,
    sample_arm,
    train_bandit,
)
from gradtree.batch import init_params
from gradtree.data import OracleTreeSpec, gen_oracle_tree
from gradtree.errors import ConfigError
from gradtree.trees import build_path_tables


class FixedOracle:
    """Loss oracle wrapping a plain function of the prediction."""

    def __init__(self, fn):
        self.fn = fn
        self.calls = []

    def evaluate(self, prediction):
        self.calls.append(prediction)
        return float(self.fn(prediction))


class CoinRng:
    """Stand-in rng emitting a fixed head/tail sequence for u draws."""

    def __init__(self, bits):
        self.bits = list(bits)

    def integers(self, lo, hi):
        return self.bits.pop(0)


class TestOnePoint:
    def test_positive_direction_value(self):
        oracle = FixedOracle(lambda y: y * y)
        g = estimate_grad_one_point(oracle, 1.0, 0.5, CoinRng([1]))
        assert g == pytest.approx(4.5)  # loss(1.5)/0.5
        assert oracle.calls == [1.5]

    def test_negative_direction_value(self):
        oracle = FixedOracle(lambda y: y * y)
        g = estimate_grad_one_point(oracle, 1.0, 0.5, CoinRng([0]))
        assert g == pytest.approx(-0.5)  # -loss(0.5)/0.5

    def test_two_direction_average_is_central_difference(self):
        # algebraic identity: mean over u of loss(y+du)u/d == central diff
        oracle = FixedOracle(lambda y: math.sin(3 * y) + 2.0)
        y_hat, delta = 0.7, 0.31
        gp = estimate_grad_one_point(oracle, y_hat, delta, CoinRng([1]))
        gm = estimate_grad_one_point(oracle, y_hat, delta, CoinRng([0]))
        expected = (oracle.fn(y_hat + delta) - oracle.fn(y_hat - delta)) / (2 * delta)
        assert (gp + gm) / 2 == pytest.approx(expected, rel=1e-12)

    def test_zero_loss_gives_zero(self):
        oracle = FixedOracle(lambda y: 0.0)
        assert estimate_grad_one_point(oracle, 3.0, 2.0, CoinRng([1])) == 0.0

    def test_bad_delta(self):
        with pytest.raises(ConfigError):
            estimate_grad_one_point(FixedOracle(lambda y: 0.0), 0.0, 0.0, CoinRng([1]))


class TestTwoPoint:
    def test_quadratic_is_exact(self):
        oracle = FixedOracle(lambda y: y * y)
        assert estimate_grad_two_point(oracle, 1.0, 0.01) == pytest.approx(2.0, abs=1e-12)

    def test_constant_loss_gives_zero(self):
        oracle = FixedOracle(lambda y: 7.0)
        assert estimate_grad_two_point(oracle, 5.0, 0.3) == 0.0

    def test_huber_inside_quadratic_region(self):
        huber = make_loss("huber:2.0")
        target = 0.25
        oracle = FixedOracle(lambda y: huber(y, target))
        y_hat = 0.5  # |y_hat - target| well below the scale
        g = estimate_grad_two_point(oracle, y_hat, 0.01)
        assert g == pytest.approx(2 * (y_hat - target), abs=1e-12)

    def test_query_count_is_two(self):
        oracle = FixedOracle(lambda y: y)
        estimate_grad_two_point(oracle, 0.0, 1.0)
        assert len(oracle.calls) == 2


class TestSampleArm:
    def test_probability_vector(self, rng):
        scores = np.array([0.1, 0.2, 0.9, 0.3])
        _, probs = sample_arm(scores, 0.3, rng)
        np.testing.assert_allclose(probs, [0.075, 0.075, 0.775, 0.075])

    def test_full_exploration_is_uniform(self, rng):
        _, probs = sample_arm(np.zeros(5), 1.0, rng)
        np.testing.assert_allclose(probs, np.full(5, 0.2))

    def test_probs_sum_to_one(self, rng):
        for _ in range(20):
            k = int(rng.integers(2, 8))
            _, probs = sample_arm(rng.normal(size=k), float(rng.uniform(0.01, 1.0)), rng)
            assert probs.sum() == pytest.approx(1.0)
            assert probs.min() >= 0

    def test_argmax_tie_goes_to_lowest_index(self, rng):
        _, probs = sample_arm(np.array([1.0, 1.0, 0.0]), 0.3, rng)
        assert probs.argmax() == 0

    def test_needs_two_classes(self, rng):
        with pytest.raises(ConfigError):
            sample_arm(np.array([1.0]), 0.3, rng)


class TestClassificationEstimate:
    def test_worked_example(self):
        g = estimate_grad_classification(1.0, 1, np.array([0.5, 0.5]), np.array([0.3, 0.0]))
        # sigmoid(0) = 0.5: 2 * (1/0.5) * (1 - 0.5) * 0.5 * 0.5 = 0.5
        assert g[1] == pytest.approx(0.5)
        assert g[0] == 0.0

    def test_zero_residual_is_stationary(self):
        scores = np.array([0.7, -0.2, 0.1])
        s = 1.0 / (1.0 + math.exp(-scores[2]))
        g = estimate_grad_classification(1.0 - s, 2, np.full(3, 1 / 3), scores)
        np.testing.assert_allclose(g, 0.0, atol=1e-15)

    def test_support_is_pulled_arm_only(self, rng):
        for _ in range(20):
            k = int(rng.integers(2, 6))
            scores = rng.normal(size=k)
            arm = int(rng.integers(0, k))
            g = estimate_grad_classification(rng.uniform(), arm, np.full(k, 1 / k), scores)
            assert np.flatnonzero(g != 0).tolist() in ([], [arm])

    def test_zero_probability_arm_rejected(self):
        with pytest.raises(ConfigError):
            estimate_grad_classification(1.0, 0, np.array([0.0, 1.0]), np.zeros(2))


class TestLossNames:
    def test_squared(self):
        assert make_loss("squared")(2.0, 0.5) == pytest.approx(2.25)

    def test_zero_one(self):
        loss = make_loss("zero_one")
        assert loss(2, 2) == 0.0
        assert loss(1, 2) == 1.0

    def test_huber_regions(self):
        loss = make_loss("huber:1.0")
        assert loss(0.5, 0.0) == pytest.approx(0.25)  # quadratic region
        assert loss(3.0, 0.0) == pytest.approx(3.0 - 0.5)  # linear region

    def test_unknown_name(self):
        with pytest.raises(ConfigError):
            make_loss("hinge")


class TestQueryAudit:
    def test_counts_and_records(self):
        audit = QueryAudit(FixedOracle(lambda y: y + 1))
        audit.begin_round()
        audit.evaluate(1.0)
        audit.evaluate(2.0)
        assert audit.queries == 2
        assert audit.round_losses == [2.0, 3.0]

    def test_per_round_cap_enforced(self):
        audit = QueryAudit(FixedOracle(lambda y: 0.0), max_per_round=1)
        audit.begin_round()
        audit.evaluate(0.0)
        with pytest.raises(ConfigError):
            audit.evaluate(0.0)
        audit.begin_round()
        audit.evaluate(0.0)  # fresh round, allowed


class TestDatasetOracle:
    def test_stream_cycles_and_counts(self, rng):
        X = rng.normal(size=(5, 2))
        y = np.arange(5.0)
        oracle = DatasetOracle(X, y, "squared", seed=1)
        seen = list(oracle.stream(12))
        assert len(seen) == 12

    def test_loss_uses_current_label(self):
        X = np.array([[0.0], [1.0]])
        y = np.array([10.0, 20.0])
        oracle = DatasetOracle(X, y, "squared", seed=0)
        for x in oracle.stream(2):
            label = 10.0 if x[0] == 0.0 else 20.0
            assert oracle.evaluate(label) == 0.0

    def test_query_before_stream_rejected(self):
        oracle = DatasetOracle(np.zeros((2, 1)), np.zeros(2), "squared")
        with pytest.raises(ConfigError):
            oracle.evaluate(0.0)


class TestTrainBandit:
    def _setup(self, estimator="one_point", k=1, seed=0):
        rng = np.random.default_rng(seed)
        task = "reg" if k == 1 else "clf"
        init = init_params(2, 2, k, None, rng, task=task)
        tables = build_path_tables(2)
        cfg = BanditConfig(estimator=estimator, seed=seed)
        return init, tables, cfg

    def test_zero_loss_oracle_keeps_params(self):
        init, tables, cfg = self._setup()
        X = np.random.default_rng(3).normal(size=(40, 2))
        oracle = DatasetOracle(X, np.zeros(40), lambda pred, label: 0.0, seed=0)
        params, trace = train_bandit(oracle.stream(40), oracle, cfg, init, tables)
        for a, b in zip(init.layers, params.layers):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(init.leaves, params.leaves)
        assert trace.cumulative_loss[-1] == 0.0

    def test_one_point_query_accounting(self):
        init, tables, cfg = self._setup()
        X = np.random.default_rng(3).normal(size=(30, 2))
        oracle = DatasetOracle(X, np.ones(30), "squared", seed=0)
        _, trace = train_bandit(oracle.stream(77), oracle, cfg, init, tables)
        assert trace.queries == 77
        assert trace.cumulative_loss.shape == (77,)

    def test_two_point_query_accounting(self):
        init, tables, cfg = self._setup(estimator="two_point")
        X = np.random.default_rng(3).normal(size=(30, 2))
        oracle = DatasetOracle(X, np.ones(30), "squared", seed=0)
        _, trace = train_bandit(oracle.stream(50), oracle, cfg, init, tables)
        assert trace.queries == 100

    def test_classification_one_query_per_round(self):
        init, tables, cfg = self._setup(estimator="classification", k=3)
        X = np.random.default_rng(3).normal(size=(30, 2))
        labels = np.random.default_rng(4).integers(0, 3, size=30)
        oracle = DatasetOracle(X, labels, "zero_one", seed=0)
        _, trace = train_bandit(oracle.stream(60), oracle, cfg, init, tables)
        assert trace.queries == 60

    def test_estimator_task_mismatch(self):
        init, tables, _ = self._setup(k=3)
        with pytest.raises(ConfigError):
            train_bandit(iter([]), FixedOracle(lambda y: 0.0),
                         BanditConfig(estimator="one_point"), init, tables)
        init1, tables1, _ = self._setup(k=1)
        with pytest.raises(ConfigError):
            train_bandit(iter([]), FixedOracle(lambda y: 0.0),
                         BanditConfig(estimator="classification"), init1, tables1)

    def test_dense_update_touches_every_layer(self):
        # one round with an in-band activation must change all layer matrices
        rng = np.random.default_rng(5)
        from gradtree.batch import OverparamSpec

        init = init_params(2, 2, 1, OverparamSpec(2, (4,)), rng, task="reg")
        tables = build_path_tables(2)
        cfg = BanditConfig(estimator="one_point", accumulate=1, seed=0)
        X = np.zeros((1, 2))  # activations near bias scale, inside the band
        oracle = DatasetOracle(X, np.array([5.0]), "squared", seed=0)
        params, _ = train_bandit(oracle.stream(1), oracle, cfg, init, tables)
        for before, after in zip(init.layers, params.layers):
            assert np.any(before != after)

    def test_snapshots_recorded(self):
        init, tables, _ = self._setup()
        cfg = BanditConfig(estimator="one_point", snapshot_every=10, seed=0)
        X = np.random.default_rng(3).normal(size=(25, 2))
        oracle = DatasetOracle(X, np.ones(25), "squared", seed=0)
        _, trace = train_bandit(
            oracle.stream(35), oracle, cfg, init, tables, snapshot_fn=lambda p: 1.23
        )
        assert trace.snapshots == [(10, 1.23), (20, 1.23), (30, 1.23)]

    def test_delta_schedule_hook(self):
        init, tables, _ = self._setup()
        deltas = []

        class Probe:
            def evaluate(self, prediction):
                deltas.append(prediction)
                return 0.0

        cfg = BanditConfig(estimator="one_point", seed=0,
                           delta_schedule=lambda t: 1.0 / (t + 1))
        X = np.zeros((3, 2))
        probe = Probe()
        # leaf values init in [-0.1, 0.1]; perturbations shrink 1, 1/2, 1/3
        train_bandit(iter(X), probe, cfg, init, tables)
        spans = [abs(p) for p in deltas]
        assert spans[0] > spans[1] > spans[2]
