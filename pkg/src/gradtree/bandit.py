"""Online training from black-box loss feedback.

The learner sees a feature vector per round, deploys a prediction, and
observes a single scalar loss value for it; no labels, no loss formula.
Three gradient estimators are provided: a one-point randomized perturbation
and a two-point symmetric difference for scalar (regression) predictions,
and an importance-weighted sigmoid-calibrated estimate for sampled class
arms.  The estimate becomes the output gradient of the dense backward pass,
so every layer matrix is updated from every single query.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from .backprop import GradientSet, backprop
from .batch import OptimizerState, optimizer_step, regularizer_grad
from .errors import ConfigError, DataError
from .trees import PathTables, TreeParams, forward_hard


class LossOracle(Protocol):
    """Black-box scalar loss: asked at a prediction, answers a nonnegative
    value.  The internals (true label, loss shape) stay hidden."""

    def evaluate(self, prediction) -> float: ...


def make_loss(name: str) -> Callable[[float, float], float]:
    """Named losses for simulation harnesses: ``squared``, ``huber[:scale]``
    (quadratic within `scale` of the target, linear outside), ``zero_one``."""
    if name == "squared":
        return lambda pred, label: (float(pred) - float(label)) ** 2
    if name == "zero_one":
        return lambda pred, label: float(int(pred) != int(label))
    if name == "huber" or name.startswith("huber:"):
        xi = float(name.split(":", 1)[1]) if ":" in name else 1.0
        if xi <= 0:
            raise ConfigError("huber scale must be > 0")

        def huber(pred, label):
            r = abs(float(pred) - float(label))
            return r * r if r <= xi else xi * r - 0.5 * xi * xi

        return huber
    raise ConfigError(f"unknown loss {name!r}")


class DatasetOracle:
    """Simulation harness: labeled rows plus a named loss, exposed to the
    learner only as ``evaluate(prediction)`` against the current round's
    hidden label.  ``stream(rounds)`` yields shuffled feature vectors,
    reshuffling and cycling when rounds exceed the row count."""

    def __init__(self, features, labels, loss, seed: int = 0):
        self.features = np.asarray(features, dtype=float)
        self.labels = np.asarray(labels)
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("feature/label row counts differ")
        self._loss = make_loss(loss) if isinstance(loss, str) else loss
        self._seed = seed
        self._current = None

    def stream(self, rounds: int):
        rng = np.random.default_rng(self._seed)
        emitted = 0
        while emitted < rounds:
            for idx in rng.permutation(self.features.shape[0]):
                if emitted == rounds:
                    return
                self._current = idx
                emitted += 1
                yield self.features[idx]

    def evaluate(self, prediction) -> float:
        if self._current is None:
            raise ConfigError("oracle queried before the stream produced an example")
        return float(self._loss(prediction, self.labels[self._current]))


class QueryAudit:
    """Wraps a LossOracle; counts queries, enforces an optional per-round
    cap, and records each round's observed losses for the trace."""

    def __init__(self, oracle: LossOracle, max_per_round: int | None = None):
        self._oracle = oracle
        self.max_per_round = max_per_round
        self.queries = 0
        self.round_losses: list[float] = []

    def begin_round(self) -> None:
        self.round_losses = []

    def evaluate(self, prediction) -> float:
        if self.max_per_round is not None and len(self.round_losses) >= self.max_per_round:
            raise ConfigError(
                f"oracle query limit of {self.max_per_round} per round exceeded"
            )
        value = float(self._oracle.evaluate(prediction))
        self.queries += 1
        self.round_losses.append(value)
        return value


def estimate_grad_one_point(oracle: LossOracle, y_hat: float, delta: float, rng) -> float:
    """Derivative estimate from a single loss query at a randomly signed
    perturbation: ``loss(y_hat + delta * u) * u / delta`` with u in {-1, +1}.
    The deployed prediction that round is the perturbed point."""
    if delta <= 0:
        raise ConfigError("perturbation magnitude must be > 0")
    u = 1.0 if rng.integers(0, 2) else -1.0
    return oracle.evaluate(float(y_hat) + delta * u) * u / delta


def estimate_grad_two_point(oracle: LossOracle, y_hat: float, delta: float) -> float:
    """Central-difference derivative estimate from two symmetric queries;
    exact for quadratic losses at any spacing."""
    if delta <= 0:
        raise ConfigError("perturbation magnitude must be > 0")
    y_hat = float(y_hat)
    return (oracle.evaluate(y_hat + delta) - oracle.evaluate(y_hat - delta)) / (2.0 * delta)


def sample_arm(leaf_scores, delta_explore: float, rng):
    """Exploration-smoothed arm choice: the argmax class (ties to the lowest
    index) gets probability ``1 - delta``, and ``delta / K`` is spread over
    everything.  Returns ``(arm, probs)``."""
    scores = np.asarray(leaf_scores, dtype=float).ravel()
    k = scores.shape[0]
    if k < 2:
        raise ConfigError("need at least 2 classes to sample an arm")
    if not 0 < delta_explore <= 1:
        raise ConfigError("delta_explore must be in (0, 1]")
    probs = np.full(k, delta_explore / k)
    probs[int(scores.argmax())] += 1.0 - delta_explore
    arm = int(rng.choice(k, p=probs))
    return arm, probs


def _sigmoid(t: float) -> float:
    if t >= 0:
        return 1.0 / (1.0 + math.exp(-t))
    e = math.exp(t)
    return e / (1.0 + e)


def estimate_grad_classification(loss_value, arm, probs, leaf_scores) -> np.ndarray:
    """Importance-weighted gradient estimate at the leaf-score vector for a
    pulled arm, using a sigmoid calibration of the arm's score:
    ``2 / p(arm) * (loss - (1 - s)) * s * (1 - s)`` on the arm's coordinate,
    zero elsewhere, with ``s = sigmoid(score[arm])``.  Loss values are
    assumed to lie in [0, 1]."""
    scores = np.asarray(leaf_scores, dtype=float).ravel()
    p = float(probs[arm])
    if p <= 0:
        raise ConfigError("pulled arm has zero probability; cannot importance-weight")
    s = _sigmoid(float(scores[arm]))
    g = np.zeros_like(scores)
    g[arm] = 2.0 / p * (float(loss_value) - (1.0 - s)) * s * (1.0 - s)
    return g


@dataclass
class BanditConfig:
    estimator: str = "one_point"  # "one_point" | "two_point" | "classification"
    delta_explore: float = 0.3
    delta_perturb: float = 0.5
    learning_rate: float = 1e-3
    l1: float = 0.0
    l2: float = 0.0
    reg_leaves: bool = False
    accumulate: int = 4  # rounds averaged into one optimizer step
    momentum: float = 0.0
    rho: float = 0.99
    eps_opt: float = 1e-8
    optimizer: str = "rmsprop"  # no clipping or schedule in online mode
    snapshot_every: int = 1000
    strict_queries: bool = True
    seed: int = 0
    # optional round -> perturbation magnitude override (constant by default)
    delta_schedule: Callable[[int], float] | None = None

    def __post_init__(self):
        if self.estimator not in ("one_point", "two_point", "classification"):
            raise ConfigError(f"unknown estimator {self.estimator!r}")
        if not 0 < self.delta_explore <= 1:
            raise ConfigError("delta_explore must be in (0, 1]")
        if self.delta_perturb <= 0:
            raise ConfigError("delta_perturb must be > 0")
        if self.accumulate < 1:
            raise ConfigError("accumulate must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")


@dataclass
class RegretTrace:
    """Per-round cumulative observed loss, periodic held-out snapshots as
    ``(round, metric)`` pairs, and the audited oracle query count."""

    cumulative_loss: np.ndarray
    snapshots: list[tuple[int, float]] = field(default_factory=list)
    queries: int = 0


def _queries_per_round(estimator: str) -> int:
    return 2 if estimator == "two_point" else 1


def train_bandit(
    stream,
    oracle: LossOracle,
    cfg: BanditConfig,
    init: TreeParams,
    tables: PathTables,
    snapshot_fn: Callable[[TreeParams], float] | None = None,
):
    """Sequential online training over a feature stream.

    Per round: hard forward; deploy a prediction (the routed leaf value for
    regression, a sampled arm for classification); query the oracle through
    the estimator; push the estimate through the dense backward pass; fold
    the gradient into the accumulation window and step the optimizer when
    the window fills.  Returns ``(params, RegretTrace)``.
    """
    k = init.num_outputs
    if cfg.estimator == "classification":
        if k < 2:
            raise ConfigError("classification estimator needs num_outputs >= 2")
    elif k != 1:
        raise ConfigError(f"{cfg.estimator} estimator is for scalar regression (num_outputs == 1)")

    rng = np.random.default_rng(cfg.seed)
    audit = QueryAudit(
        oracle,
        max_per_round=_queries_per_round(cfg.estimator) if cfg.strict_queries else None,
    )
    params = init
    state = OptimizerState.zeros(params)
    acc: GradientSet | None = None
    acc_n = 0
    losses = []
    snapshots = []

    def apply_window():
        nonlocal params, state, acc, acc_n
        grads = acc.scale(1.0 / acc_n)
        if cfg.l1 or cfg.l2:
            grads = grads.add(regularizer_grad(params, cfg.l1, cfg.l2, cfg.reg_leaves))
        params, state = optimizer_step(
            params, state, grads, cfg.learning_rate,
            momentum=cfg.momentum, rho=cfg.rho, eps_opt=cfg.eps_opt,
            clip=None, kind=cfg.optimizer,
        )
        acc, acc_n = None, 0

    for t, x in enumerate(stream):
        audit.begin_round()
        _, pred = forward_hard(x, params, tables)
        delta = cfg.delta_schedule(t) if cfg.delta_schedule else cfg.delta_perturb

        if cfg.estimator == "classification":
            arm, probs = sample_arm(pred, cfg.delta_explore, rng)
            loss_value = audit.evaluate(arm)
            out_grad = estimate_grad_classification(loss_value, arm, probs, pred)
            round_loss = loss_value
        elif cfg.estimator == "one_point":
            g = estimate_grad_one_point(audit, pred[0], delta, rng)
            out_grad = np.array([g])
            round_loss = audit.round_losses[0]
        else:
            g = estimate_grad_two_point(audit, pred[0], delta)
            out_grad = np.array([g])
            round_loss = float(np.mean(audit.round_losses))

        grads = backprop(x, params, tables, out_grad)
        acc = grads if acc is None else acc.add(grads)
        acc_n += 1
        if acc_n == cfg.accumulate:
            apply_window()

        losses.append(round_loss)
        if snapshot_fn is not None and (t + 1) % cfg.snapshot_every == 0:
            snapshots.append((t + 1, float(snapshot_fn(params))))

    if acc_n:
        apply_window()

    trace = RegretTrace(
        cumulative_loss=np.cumsum(losses),
        snapshots=snapshots,
        queries=audit.queries,
    )
    return params, trace
