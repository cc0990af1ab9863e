"""Fully supervised minibatch training and the optimizer stack.

The optimizer is an adaptive-RMS update with optional momentum, global-norm
gradient clipping, and a cosine learning-rate schedule with warm restarts.
A plain (non-adaptive) mode is available for closed-form verification and
for the online trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .backprop import GradientSet, backprop_batch, forward_cache
from .errors import ConfigError, NumericError
from .trees import PathTables, TreeParams, build_path_tables, descend_batch

# hidden-dimension presets for 3-layer overparameterization, keyed by height;
# the final layer dimension 2^h - 1 is implied
HIDDEN_DIM_PRESETS = {
    2: (240, 240),
    4: (600, 600),
    6: (1008, 1008),
    8: (1530, 1530),
    10: (2046, 2046),
}


@dataclass(frozen=True)
class OverparamSpec:
    """Layer-count and hidden dimensions ``d_1 .. d_{L-1}``; the last layer's
    row count ``2^h - 1`` is implied by the tree height."""

    num_layers: int = 1
    hidden_dims: tuple[int, ...] = ()

    def __post_init__(self):
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if len(self.hidden_dims) != self.num_layers - 1:
            raise ConfigError(
                f"{self.num_layers} layers need {self.num_layers - 1} hidden dims, "
                f"got {len(self.hidden_dims)}"
            )
        if any(d < 1 for d in self.hidden_dims):
            raise ConfigError("hidden dims must be >= 1")

    @classmethod
    def for_height(cls, height: int, num_layers: int = 3) -> "OverparamSpec":
        """Preset hidden dims for the given height (3-layer form)."""
        if num_layers == 1:
            return cls(1, ())
        if num_layers != 3 or height not in HIDDEN_DIM_PRESETS:
            raise ConfigError(
                f"no hidden-dim preset for height {height} with {num_layers} layers; "
                "pass hidden_dims explicitly"
            )
        return cls(3, HIDDEN_DIM_PRESETS[height])


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 1e-2
    momentum: float = 0.0
    rho: float = 0.99
    eps_opt: float = 1e-8
    restarts: int = 3
    clip: float | None = 1e-2
    clip_mode: str = "norm"  # "norm" (global L2) or "value" (per entry)
    l1: float = 0.0
    l2: float = 0.0
    reg_leaves: bool = False  # include leaf values in the penalty
    loss: str = "squared"  # "squared" or "cross_entropy"
    optimizer: str = "rmsprop"  # "rmsprop" or "sgd"
    keep_best: bool = False  # return best-validation params instead of final
    # routing topology commits in the first few epochs and is init-luck;
    # several candidate inits run a short pilot and the best train loss wins
    init_candidates: int = 12
    pilot_epochs: int | None = None  # None: max(10, epochs // 10)
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.clip is not None and self.clip <= 0:
            raise ConfigError("clip must be > 0 (or None to disable)")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must be in (0, 1)")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        if self.loss not in ("squared", "cross_entropy"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.clip_mode not in ("norm", "value"):
            raise ConfigError(f"unknown clip_mode {self.clip_mode!r}")
        if self.optimizer not in ("rmsprop", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.init_candidates < 1:
            raise ConfigError("init_candidates must be >= 1")
        if self.pilot_epochs is not None and self.pilot_epochs < 1:
            raise ConfigError("pilot_epochs must be >= 1")


def loss_and_grad(prediction, label, loss_kind: str):
    """Scalar loss and its gradient w.r.t. the prediction vector.

    squared: ``(y_hat - y)^2`` with gradient ``2 (y_hat - y)``;
    cross_entropy: softmax over the score vector, ``-log p[label]`` with
    gradient ``p - e_label``.
    """
    prediction = np.atleast_1d(np.asarray(prediction, dtype=float))
    if loss_kind == "squared":
        r = float(prediction[0]) - float(label)
        return r * r, np.array([2.0 * r])
    if loss_kind == "cross_entropy":
        y = int(label)
        if not 0 <= y < prediction.shape[0]:
            raise ConfigError(f"class index {y} out of range for {prediction.shape[0]} outputs")
        shifted = prediction - prediction.max()
        p = np.exp(shifted)
        p /= p.sum()
        grad = p.copy()
        grad[y] -= 1.0
        return float(-(shifted[y] - np.log(np.exp(shifted).sum()))), grad
    raise ConfigError(f"unknown loss {loss_kind!r}")


def _batch_loss_grads(preds, labels, loss_kind):
    # vectorized counterpart of loss_and_grad over a batch
    if loss_kind == "squared":
        r = preds[:, 0] - labels
        return r * r, (2.0 * r)[:, None]
    shifted = preds - preds.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    rows = np.arange(preds.shape[0])
    y = labels.astype(np.int64)
    losses = -np.log(p[rows, y])
    grads = p.copy()
    grads[rows, y] -= 1.0
    return losses, grads


def regularizer_grad(params: TreeParams, l1: float, l2: float, include_leaves: bool = False) -> GradientSet:
    """Gradient of ``l1 * |W|_1 + l2 * |W|_2^2`` over the layer matrices
    (subgradient sign(0) = 0); leaves excluded unless requested."""
    if l1 < 0 or l2 < 0:
        raise ConfigError("regularization strengths must be >= 0")
    layers = tuple(l1 * np.sign(w) + 2.0 * l2 * w for w in params.layers)
    if include_leaves:
        leaves = l1 * np.sign(params.leaves) + 2.0 * l2 * params.leaves
    else:
        leaves = np.zeros_like(params.leaves)
    return GradientSet(layers=layers, leaves=leaves)


def cosine_lr(step: int, total_steps: int, restarts: int, base_lr: float) -> float:
    """Cosine schedule over `restarts` equal cycles: resets to `base_lr` at
    each cycle start and anneals to 0 at the cycle end."""
    if total_steps < restarts or restarts < 1:
        raise ConfigError("need total_steps >= restarts >= 1")
    cycle_len = math.ceil(total_steps / restarts)
    t = step % cycle_len
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / cycle_len))


@dataclass
class OptimizerState:
    sq_avg: GradientSet
    momentum: GradientSet

    @classmethod
    def zeros(cls, params: TreeParams) -> "OptimizerState":
        return cls(GradientSet.zeros_like(params), GradientSet.zeros_like(params))


def clip_gradients(grads: GradientSet, threshold: float | None, mode: str = "norm") -> GradientSet:
    if threshold is None:
        return grads
    if mode == "value":
        return GradientSet(
            layers=tuple(np.clip(w, -threshold, threshold) for w in grads.layers),
            leaves=np.clip(grads.leaves, -threshold, threshold),
        )
    norm = grads.global_norm()
    if norm <= threshold:
        return grads
    return grads.scale(threshold / norm)


def optimizer_step(
    params: TreeParams,
    state: OptimizerState,
    grads: GradientSet,
    lr: float,
    momentum: float = 0.0,
    rho: float = 0.99,
    eps_opt: float = 1e-8,
    clip: float | None = None,
    clip_mode: str = "norm",
    kind: str = "rmsprop",
):
    """One update: clip, adapt, apply momentum, step.  ``grads`` should
    already include any regularizer contribution (it is clipped too).

    rmsprop: per-entry ``s <- rho s + (1-rho) g^2``, step ``g / sqrt(s + eps)``.
    sgd: step is the raw gradient (used where a closed-form update matters).
    Returns ``(new_params, new_state)``; inputs are not mutated.
    """
    if not grads.all_finite():
        raise NumericError("non-finite gradient; aborting epoch")
    g = clip_gradients(grads, clip, clip_mode)

    def update(p, g_arr, s, b):
        if kind == "rmsprop":
            s_new = rho * s + (1.0 - rho) * g_arr**2
            v = g_arr / np.sqrt(s_new + eps_opt)
        else:
            s_new = s
            v = g_arr
        b_new = momentum * b + v
        return p - lr * b_new, s_new, b_new

    new_layers, new_s_layers, new_b_layers = [], [], []
    for p, g_arr, s, b in zip(params.layers, g.layers, state.sq_avg.layers, state.momentum.layers):
        np_, ns, nb = update(p, g_arr, s, b)
        new_layers.append(np_)
        new_s_layers.append(ns)
        new_b_layers.append(nb)
    new_leaves, ns_leaves, nb_leaves = update(
        params.leaves, g.leaves, state.sq_avg.leaves, state.momentum.leaves
    )
    new_params = TreeParams(
        params.height, params.input_dim, params.num_outputs,
        tuple(new_layers), new_leaves,
    )
    new_state = OptimizerState(
        sq_avg=GradientSet(tuple(new_s_layers), ns_leaves),
        momentum=GradientSet(tuple(new_b_layers), nb_leaves),
    )
    return new_params, new_state


def init_params(
    height: int,
    input_dim: int,
    num_outputs: int,
    overparam: OverparamSpec | None,
    rng,
    task: str = "reg",
) -> TreeParams:
    """Random init: layer entries uniform in +-1/sqrt(fan_in) (keeps early
    activations inside the straight-through band), leaves uniform in
    [-0.1, 0.1] for regression and zero for classification."""
    overparam = overparam or OverparamSpec()
    dims = [input_dim + 1, *overparam.hidden_dims, 2**height - 1]
    layers = []
    for m in range(overparam.num_layers):
        fan_in = dims[m]
        bound = 1.0 / math.sqrt(fan_in)
        layers.append(rng.uniform(-bound, bound, size=(dims[m + 1], dims[m])))
    if task == "reg":
        leaves = rng.uniform(-0.1, 0.1, size=(2**height, num_outputs))
    else:
        leaves = np.zeros((2**height, num_outputs))
    return TreeParams(height, input_dim, num_outputs, tuple(layers), leaves)


def anchored_init(
    height: int,
    features,
    labels,
    num_outputs: int,
    rng,
    task: str = "reg",
    row_scale: float = 0.33,
) -> TreeParams:
    """Data-anchored random init for the single-layer model.

    Each node gets a random unit direction with its cut placed at a random
    near-median quantile of the training points that reach the node, so
    every node starts splitting its own region.  Regression leaves start at
    the mean label of their initial region; classification leaves at zero.
    The row scale keeps initial activations inside the straight-through
    band.
    """
    X = np.asarray(features, dtype=float)
    n_nodes = 2**height - 1
    d = X.shape[1]
    W = np.empty((n_nodes, d + 1))
    rows = {0: np.arange(X.shape[0])}
    for flat in range(n_nodes):
        reached = rows.pop(flat)
        w = rng.normal(size=d)
        w /= np.linalg.norm(w)
        if reached.size:
            proj = X[reached] @ w
            cut = float(np.quantile(proj, rng.uniform(0.4, 0.6)))
            right = proj >= cut
            rows[2 * flat + 1] = reached[~right]
            rows[2 * flat + 2] = reached[right]
        else:
            cut = 0.0
            rows[2 * flat + 1] = reached
            rows[2 * flat + 2] = reached
        W[flat] = row_scale * np.append(w, -cut)
    if task == "reg":
        y = np.asarray(labels, dtype=float)
        overall = float(y.mean()) if y.size else 0.0
        leaves = np.empty((2**height, num_outputs))
        for leaf_flat in range(n_nodes, 2 * n_nodes + 1):
            reached = rows.pop(leaf_flat)
            value = float(y[reached].mean()) if reached.size else overall
            leaves[leaf_flat - n_nodes] = value
        leaves += rng.uniform(-0.02, 0.02, size=leaves.shape)
    else:
        leaves = np.zeros((2**height, num_outputs))
    return TreeParams(height, d, num_outputs, (W,), leaves)


def anchored_init_layered(
    height: int,
    features,
    labels,
    num_outputs: int,
    overparam: OverparamSpec,
    rng,
    task: str = "reg",
    row_scale: float = 0.33,
) -> TreeParams:
    """Anchored init for the overparameterized model: inner layers random,
    outer layer solved by least squares so the collapsed product equals the
    anchored single-matrix init exactly."""
    flat = anchored_init(height, features, labels, num_outputs, rng, task, row_scale)
    if overparam.num_layers == 1:
        return flat
    target = flat.layers[0]
    d = target.shape[1] - 1
    dims = [d + 1, *overparam.hidden_dims]
    inner = []
    for m in range(overparam.num_layers - 1):
        bound = 1.0 / math.sqrt(dims[m])
        inner.append(rng.uniform(-bound, bound, size=(dims[m + 1], dims[m])))
    product = inner[0]
    for w in inner[1:]:
        product = w @ product
    outer = target @ np.linalg.pinv(product)
    return TreeParams(height, d, flat.num_outputs, (*inner, outer), flat.leaves)


def _num_outputs_for(data, cfg) -> int:
    if cfg.loss == "squared":
        return 1
    return int(np.max(data.labels)) + 1


def evaluate(params: TreeParams, tables: PathTables, data, loss_kind: str) -> float:
    """Held-out metric: RMSE of the scalar output for squared loss, error
    rate (1 - accuracy) for cross-entropy."""
    cache = forward_cache(data.features, params)
    leaf_idx = descend_batch(cache[-1], params.height)
    preds = params.leaves[leaf_idx]
    if loss_kind == "squared":
        return float(np.sqrt(np.mean((preds[:, 0] - data.labels) ** 2)))
    return float(np.mean(preds.argmax(axis=1) != data.labels.astype(np.int64)))


class _Run:
    """Mutable state of one training trajectory."""

    def __init__(self, params, rng, total_steps):
        self.params = params
        self.state = OptimizerState.zeros(params)
        self.rng = rng
        self.step = 0
        self.total_steps = total_steps
        self.log = []
        self.best_val = (math.inf, None)


def _run_epochs(run: _Run, data, tables, cfg: TrainConfig, n_epochs, val_data=None):
    """Advance a trajectory by `n_epochs`, appending per-epoch log records."""
    n = data.n
    height = run.params.height
    for _ in range(n_epochs):
        order = run.rng.permutation(n)
        epoch_loss = 0.0
        for b0 in range(0, n, cfg.batch_size):
            idx = order[b0 : b0 + cfg.batch_size]
            X, y = data.features[idx], data.labels[idx]
            cache = forward_cache(X, run.params)
            leaf_idx = descend_batch(cache[-1], height)
            losses, out_grads = _batch_loss_grads(run.params.leaves[leaf_idx], y, cfg.loss)
            if not np.all(np.isfinite(losses)):
                raise NumericError(f"non-finite loss at step {run.step}")
            epoch_loss += float(losses.sum())
            grads = backprop_batch(X, run.params, tables, out_grads, cache=cache)
            if cfg.l1 or cfg.l2:
                grads = grads.add(regularizer_grad(run.params, cfg.l1, cfg.l2, cfg.reg_leaves))
            lr = cosine_lr(run.step, run.total_steps, cfg.restarts, cfg.learning_rate)
            run.params, run.state = optimizer_step(
                run.params, run.state, grads, lr,
                momentum=cfg.momentum, rho=cfg.rho, eps_opt=cfg.eps_opt,
                clip=cfg.clip, clip_mode=cfg.clip_mode, kind=cfg.optimizer,
            )
            run.step += 1
        record = {
            "epoch": len(run.log),
            "step": run.step,
            "lr": cosine_lr(run.step - 1, run.total_steps, cfg.restarts, cfg.learning_rate),
            "train_loss": epoch_loss / n,
            "val_metric": None,
        }
        if val_data is not None:
            metric = evaluate(run.params, tables, val_data, cfg.loss)
            record["val_metric"] = metric
            if metric < run.best_val[0]:
                run.best_val = (metric, run.params)
        run.log.append(record)


def train_batch(
    data,
    height: int,
    cfg: TrainConfig,
    overparam: OverparamSpec | None = None,
    seed: int | None = None,
    val_data=None,
    num_outputs: int | None = None,
):
    """Minibatch training with the quantized forward / surrogate backward.

    Per batch, the per-example loss gradients are pushed through the batched
    backward pass (averaged), the regularizer gradient is added, and one
    optimizer step is applied at the scheduled learning rate.

    The routing topology tends to commit within the first few epochs and is
    sensitive to the initial predicates, so ``cfg.init_candidates``
    trajectories run a short pilot phase and the one with the lowest pilot
    train loss continues to the full epoch budget.  Everything derives from
    the seed, so results are reproducible.  Returns the final-epoch
    parameters of the selected trajectory (or the best-validation ones with
    ``cfg.keep_best``) plus its per-epoch log.
    """
    if data.n == 0:
        raise ConfigError("empty training set")
    tables = build_path_tables(height)
    k = num_outputs or _num_outputs_for(data, cfg)
    task = "reg" if cfg.loss == "squared" else "clf"
    if task == "clf" and np.max(data.labels) >= k:
        raise ConfigError("class label out of range for num_outputs")

    overparam = overparam or OverparamSpec()
    n_candidates = cfg.init_candidates
    pilot = cfg.pilot_epochs if cfg.pilot_epochs is not None else max(10, cfg.epochs // 10)
    pilot = min(pilot, cfg.epochs)
    total_steps = cfg.epochs * math.ceil(data.n / cfg.batch_size)

    seed_value = cfg.seed if seed is None else seed
    candidate_seeds = np.random.SeedSequence(seed_value).generate_state(n_candidates)
    row_scales = (0.33, 1.0)

    best: _Run | None = None
    best_score = math.inf
    for c in range(n_candidates):
        rng = np.random.default_rng(candidate_seeds[c])
        params = anchored_init_layered(
            height, data.features, data.labels, k, overparam, rng, task,
            row_scale=row_scales[c % len(row_scales)],
        )
        run = _Run(params, rng, total_steps)
        if n_candidates == 1:
            best = run
            break
        _run_epochs(run, data, tables, cfg, pilot)
        score = float(np.mean([r["train_loss"] for r in run.log[-3:]]))
        if score < best_score:
            best, best_score = run, score

    remaining = cfg.epochs - len(best.log)
    _run_epochs(best, data, tables, cfg, remaining, val_data=val_data)

    if cfg.keep_best and best.best_val[1] is not None:
        return best.best_val[1], best.log
    return best.params, best.log
