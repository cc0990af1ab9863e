"""Bagged forests of independently trained trees.

Members are trained on bootstrap resamples with per-member derived seeds,
collapsed to deployment form, and aggregated by averaging (regression) or
plurality vote (classification, ties to the lowest class index).
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .batch import OverparamSpec, TrainConfig, train_batch
from .data import Dataset
from .errors import ConfigError
from .trees import ObliqueTree, collapse


@dataclass(frozen=True)
class ForestModel:
    members: tuple[ObliqueTree, ...]
    task: str  # "reg" | "clf"
    member_seeds: tuple[int, ...]
    sample_fraction: float

    def __post_init__(self):
        if len(self.members) < 1:
            raise ConfigError("forest needs at least one member")
        d = self.members[0].input_dim
        k = self.members[0].num_outputs
        if any(m.input_dim != d or m.num_outputs != k for m in self.members):
            raise ConfigError("forest members disagree on input dim or output count")

    @property
    def n_trees(self) -> int:
        return len(self.members)


def bootstrap_sample(data: Dataset, fraction: float, rng) -> Dataset:
    """``ceil(fraction * n)`` rows drawn i.i.d. with replacement."""
    if not 0 < fraction <= 1:
        raise ConfigError("fraction must be in (0, 1]")
    if data.n == 0:
        raise ConfigError("cannot bootstrap an empty dataset")
    m = int(np.ceil(fraction * data.n))
    return data.take(rng.integers(0, data.n, size=m))


def _train_member(args):
    data, height, cfg, overparam, fraction, boot_seed, train_seed, num_outputs = args
    sample = bootstrap_sample(data, fraction, np.random.default_rng(boot_seed))
    params, _ = train_batch(
        sample, height, cfg, overparam=overparam, seed=train_seed, num_outputs=num_outputs
    )
    return collapse(params)


def train_forest(
    data: Dataset,
    n_trees: int,
    height: int,
    cfg: TrainConfig,
    overparam: OverparamSpec | None = None,
    fraction: float = 1.0,
    seed: int = 0,
    n_jobs: int = 1,
) -> ForestModel:
    """Train `n_trees` independent trees on independent bootstrap samples.

    Seeds are derived per member up front, so results are identical whether
    members train sequentially or on a worker pool.
    """
    if n_trees < 1:
        raise ConfigError("n_trees must be >= 1")
    task = "reg" if cfg.loss == "squared" else "clf"
    num_outputs = 1 if task == "reg" else int(np.max(data.labels)) + 1
    derived = np.random.SeedSequence(seed).generate_state(2 * n_trees)
    jobs = [
        (
            data, height, cfg, overparam, fraction,
            int(derived[2 * k]), int(derived[2 * k + 1]), num_outputs,
        )
        for k in range(n_trees)
    ]

    members = []
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            futures = [pool.submit(_train_member, job) for job in jobs]
            for k, fut in enumerate(futures):
                try:
                    members.append(fut.result())
                except Exception as exc:
                    raise type(exc)(f"forest member {k}: {exc}") from exc
    else:
        for k, job in enumerate(jobs):
            try:
                members.append(_train_member(job))
            except Exception as exc:
                raise type(exc)(f"forest member {k}: {exc}") from exc

    return ForestModel(
        members=tuple(members),
        task=task,
        member_seeds=tuple(int(s) for s in derived[1::2]),
        sample_fraction=fraction,
    )


def predict_forest(model: ForestModel, x):
    """Average of member scalar outputs (regression) or plurality vote over
    member argmax classes (classification, ties to the lowest index)."""
    if model.task == "reg":
        return float(np.mean([m.predict(x)[0] for m in model.members]))
    k = model.members[0].num_outputs
    votes = [int(m.predict(x).argmax()) for m in model.members]
    return int(np.bincount(votes, minlength=k).argmax())


def predict_forest_batch(model: ForestModel, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if model.task == "reg":
        preds = np.stack([m.predict_batch(X)[:, 0] for m in model.members])
        return preds.mean(axis=0)
    k = model.members[0].num_outputs
    votes = np.stack([m.predict_batch(X).argmax(axis=1) for m in model.members])
    tallies = np.apply_along_axis(np.bincount, 0, votes, minlength=k)
    return tallies.argmax(axis=0)
