"""Command-line front end: train, eval, predict, bandit-sim, forest.

Exit codes: 0 success, 2 usage/configuration error, 3 data error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .bandit import BanditConfig, DatasetOracle, train_bandit
from .batch import OverparamSpec, TrainConfig, evaluate, init_params, train_batch
from .data import (Dataset, accuracy, apply_normalization, fit_normalization,
                   load_csv, load_feature_csv, rmse)
from .errors import ConfigError, DataError, NumericError
from .forest import ForestModel, predict_forest_batch, train_forest
from .model_io import load_model, save_model
from .trees import (ObliqueTree, TreeParams, build_path_tables, collapse,
                    forward_hard_batch, visit_counts)


def _parse_label_col(value):
    try:
        return int(value)
    except ValueError:
        return value


def _parse_hidden_dims(value):
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"--hidden-dims must be a comma list of integers, got {value!r}") from None


def _overparam(args) -> OverparamSpec:
    if args.layers == 1:
        return OverparamSpec(1, ())
    if args.hidden_dims:
        return OverparamSpec(args.layers, _parse_hidden_dims(args.hidden_dims))
    return OverparamSpec.for_height(args.height, args.layers)


def _load_labeled(args) -> Dataset:
    return load_csv(args.data, label_column=args.label_col, has_header=not args.no_header)


def _holdout(data: Dataset, fraction: float, seed: int):
    """Seeded shuffle, then (main, holdout) with ceil(fraction * n) held out."""
    if not 0 <= fraction < 1:
        raise ConfigError("holdout fraction must be in [0, 1)")
    if fraction == 0:
        return data, None
    order = np.random.default_rng(seed).permutation(data.n)
    n_hold = int(np.ceil(fraction * data.n))
    if n_hold >= data.n:
        raise DataError("holdout fraction leaves no training rows")
    return data.take(order[n_hold:]), data.take(order[:n_hold])


def _task_metric(task, preds, labels):
    if task == "reg":
        return "rmse", rmse(preds, labels)
    return "accuracy", 100.0 * accuracy(preds, labels)


def _num_outputs(task, labels) -> int:
    return 1 if task == "reg" else int(np.max(labels)) + 1


def _full_dim_chain(overparam: OverparamSpec, height: int):
    return [*overparam.hidden_dims, 2**height - 1]


def _predictions_original(task, model, X, stats):
    if isinstance(model, ForestModel):
        out = predict_forest_batch(model, X)
    elif isinstance(model, ObliqueTree):
        values = model.predict_batch(X)
        out = values[:, 0] if task == "reg" else values.argmax(axis=1)
    else:
        tables = build_path_tables(model.height)
        _, values = forward_hard_batch(X, model, tables)
        out = values[:, 0] if task == "reg" else values.argmax(axis=1)
    if task == "reg" and stats is not None:
        out = stats.inverse_target(out)
    return out


def cmd_train(args) -> int:
    data = _load_labeled(args)
    train_part, val_part = _holdout(data, args.val_fraction, args.seed)
    stats = fit_normalization(train_part, args.task)
    train_n = apply_normalization(train_part, stats)
    val_n = apply_normalization(val_part, stats) if val_part is not None else None

    overparam = _overparam(args)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
        momentum=args.momentum, restarts=args.restarts, clip=args.clip,
        l1=args.l1, l2=args.l2,
        loss="squared" if args.task == "reg" else "cross_entropy",
        seed=args.seed,
    )
    print(
        f"config: task={args.task} height={args.height} layers={overparam.num_layers} "
        f"epochs={cfg.epochs} batch={cfg.batch_size} lr={cfg.learning_rate} "
        f"clip={cfg.clip} restarts={cfg.restarts} momentum={cfg.momentum} "
        f"l1={cfg.l1} l2={cfg.l2} seed={cfg.seed}"
    )
    print(f"hidden_dims={_full_dim_chain(overparam, args.height)}")

    k = _num_outputs(args.task, data.labels)
    params, log = train_batch(
        train_n, args.height, cfg, overparam=overparam, val_data=val_n, num_outputs=k
    )
    if args.log_out:
        with open(args.log_out, "w", encoding="utf-8") as fh:
            for rec in log:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    model = params if args.keep_layers else collapse(params)
    save_model(
        args.model_out, model, task=args.task, normalization=stats,
        config={
            "height": args.height, "layers": overparam.num_layers,
            "hidden_dims": list(overparam.hidden_dims),
            "epochs": cfg.epochs, "batch": cfg.batch_size, "lr": cfg.learning_rate,
            "clip": cfg.clip, "restarts": cfg.restarts, "momentum": cfg.momentum,
            "l1": cfg.l1, "l2": cfg.l2,
        },
        seed=args.seed,
    )

    name, train_metric = _task_metric(
        args.task,
        _predictions_original(args.task, model, train_n.features, stats),
        train_part.labels,
    )
    line = f"final: train_{name}={train_metric:.6g}"
    if val_n is not None:
        _, val_metric = _task_metric(
            args.task,
            _predictions_original(args.task, model, val_n.features, stats),
            val_part.labels,
        )
        line += f" val_{name}={val_metric:.6g}"
    print(line)
    print(f"model written to {args.model_out}")
    return 0


def cmd_eval(args) -> int:
    loaded = load_model(args.model_in)
    data = _load_labeled(args)
    if loaded.task != args.task:
        raise ConfigError(f"model task {loaded.task!r} does not match --task {args.task!r}")
    stats = loaded.normalization
    X = stats.transform_features(data.features) if stats is not None else data.features
    preds = _predictions_original(args.task, loaded.model, X, stats)
    name, metric = _task_metric(args.task, preds, data.labels)
    print(f"rows={data.n} dim={data.dim}")
    print(f"{name}={metric:.6g}")

    if isinstance(loaded.model, (ObliqueTree, TreeParams)):
        tree = loaded.model if isinstance(loaded.model, ObliqueTree) else collapse(loaded.model)
        node_visits, leaf_visits = visit_counts(tree, X)
        print(f"leaf_visits={leaf_visits.tolist()}")
        print(
            f"reachable_nodes={int((node_visits > 0).sum())} "
            f"total_nodes={node_visits.shape[0]}"
        )
    return 0


def cmd_predict(args) -> int:
    loaded = load_model(args.model_in)
    if args.label_col is None:
        X = load_feature_csv(args.data, has_header=not args.no_header)
    else:
        X = load_feature_csv(
            args.data, has_header=not args.no_header, drop_column=args.label_col
        )
    stats = loaded.normalization
    Xn = stats.transform_features(X) if stats is not None else X
    preds = _predictions_original(loaded.task, loaded.model, Xn, stats)
    with open(args.predictions_out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["prediction"])
        for p in preds:
            writer.writerow([int(p) if loaded.task == "clf" else repr(float(p))])
    print(f"wrote {len(preds)} predictions to {args.predictions_out}")
    return 0


def cmd_bandit_sim(args) -> int:
    data = _load_labeled(args)
    stream_part, holdout = _holdout(data, args.holdout_fraction, args.seed)
    stats = fit_normalization(stream_part, args.task)
    stream_n = apply_normalization(stream_part, stats)
    holdout_n = apply_normalization(holdout, stats) if holdout is not None else None

    cfg = BanditConfig(
        estimator=args.estimator,
        delta_explore=args.delta_explore,
        delta_perturb=args.delta_perturb,
        learning_rate=args.lr,
        l1=args.l1, l2=args.l2,
        accumulate=args.accumulate,
        momentum=args.momentum,
        seed=args.seed,
    )
    if args.task == "clf" and cfg.estimator != "classification":
        raise ConfigError("classification task needs --estimator classification")
    if args.task == "reg" and cfg.estimator == "classification":
        raise ConfigError("regression task needs a one_point or two_point estimator")
    if args.task == "clf" and args.loss != "zero_one":
        raise ConfigError("classification simulation expects --loss zero_one")
    print(
        f"config: estimator={cfg.estimator} rounds={args.rounds} loss={args.loss} "
        f"delta_explore={cfg.delta_explore} delta_perturb={cfg.delta_perturb} "
        f"lr={cfg.learning_rate} accumulate={cfg.accumulate} seed={cfg.seed}"
    )

    overparam = _overparam(args)
    rng = np.random.default_rng(args.seed)
    k = _num_outputs(args.task, data.labels)
    init = init_params(args.height, data.dim, k, overparam, rng, task=args.task)
    tables = build_path_tables(args.height)
    oracle = DatasetOracle(stream_n.features, stream_n.labels, args.loss, seed=args.seed)

    snapshot_fn = None
    if holdout_n is not None:
        loss_kind = "squared" if args.task == "reg" else "cross_entropy"

        def snapshot_fn(p):
            metric = evaluate(p, tables, holdout_n, loss_kind)
            if args.task == "reg" and stats.target_min is not None:
                metric *= stats.target_max - stats.target_min  # original units
            return metric

    params, trace = train_bandit(
        oracle.stream(args.rounds), oracle, cfg, init, tables, snapshot_fn=snapshot_fn
    )

    qpr = 2 if cfg.estimator == "two_point" else 1
    if trace.queries != qpr * args.rounds:
        raise NumericError(
            f"query audit failed: {trace.queries} queries over {args.rounds} rounds"
        )
    if args.trace_out:
        snap = dict(trace.snapshots)
        with open(args.trace_out, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["round", "cumulative_loss", "queries", "heldout_metric"])
            for t in range(args.rounds):
                metric = snap.get(t + 1, "")
                writer.writerow([t + 1, repr(float(trace.cumulative_loss[t])), qpr * (t + 1), metric])
        print(f"trace written to {args.trace_out}")
    print(f"queries={trace.queries}")

    if args.model_out:
        model = params if args.keep_layers else collapse(params)
        save_model(
            args.model_out, model, task=args.task, normalization=stats,
            config={"estimator": cfg.estimator, "rounds": args.rounds, "loss": args.loss,
                    "lr": cfg.learning_rate, "accumulate": cfg.accumulate},
            seed=args.seed,
        )
        print(f"model written to {args.model_out}")
    return 0


def cmd_forest(args) -> int:
    data = _load_labeled(args)
    train_part, val_part = _holdout(data, args.val_fraction, args.seed)
    stats = fit_normalization(train_part, args.task)
    train_n = apply_normalization(train_part, stats)

    overparam = _overparam(args)
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, learning_rate=args.lr,
        momentum=args.momentum, restarts=args.restarts, clip=args.clip,
        l1=args.l1, l2=args.l2,
        loss="squared" if args.task == "reg" else "cross_entropy",
        seed=args.seed,
    )
    print(
        f"config: task={args.task} height={args.height} trees={args.trees} "
        f"fraction={args.fraction} epochs={cfg.epochs} batch={cfg.batch_size} "
        f"lr={cfg.learning_rate} seed={cfg.seed}"
    )
    model = train_forest(
        train_n, args.trees, args.height, cfg, overparam=overparam,
        fraction=args.fraction, seed=args.seed, n_jobs=args.jobs,
    )
    save_model(
        args.model_out, model, task=args.task, normalization=stats,
        config={"trees": args.trees, "fraction": args.fraction, "height": args.height},
        seed=args.seed,
    )
    name, train_metric = _task_metric(
        args.task,
        _predictions_original(args.task, model, train_n.features, stats),
        train_part.labels,
    )
    line = f"final: train_{name}={train_metric:.6g}"
    if val_part is not None:
        val_n = apply_normalization(val_part, stats)
        _, val_metric = _task_metric(
            args.task,
            _predictions_original(args.task, model, val_n.features, stats),
            val_part.labels,
        )
        line += f" val_{name}={val_metric:.6g}"
    print(line)
    print(f"model written to {args.model_out}")
    return 0


def _add_data_args(p, label=True):
    p.add_argument("--data", required=True, help="CSV dataset path")
    if label:
        p.add_argument("--label-col", type=_parse_label_col, default=-1,
                       help="label column index or name (default: last)")
    p.add_argument("--no-header", action="store_true", help="CSV has no header row")


def _add_model_shape_args(p):
    p.add_argument("--task", choices=("reg", "clf"), required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--layers", type=int, default=1, help="linear layer count")
    p.add_argument("--hidden-dims", default=None,
                   help="comma list of hidden dims (d_1..d_{L-1}); preset by height when omitted")


def _add_train_args(p):
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--batch", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--l1", type=float, default=0.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--clip", type=float, default=1e-2)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--val-fraction", type=float, default=0.2)


def _add_export_args(p):
    p.add_argument("--collapse", action="store_true",
                   help="export the collapsed form (the default)")
    p.add_argument("--keep-layers", action="store_true",
                   help="export the layered form for continued training")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gradtree",
        description="Gradient-trained hard oblique decision trees",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="supervised minibatch training")
    _add_data_args(p)
    _add_model_shape_args(p)
    _add_train_args(p)
    _add_export_args(p)
    p.add_argument("--model-out", required=True)
    p.add_argument("--log-out", default=None, help="JSONL per-epoch training log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a labeled CSV")
    _add_data_args(p)
    p.add_argument("--task", choices=("reg", "clf"), required=True)
    p.add_argument("--model-in", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write one prediction per row")
    p.add_argument("--data", required=True)
    p.add_argument("--label-col", type=_parse_label_col, default=None,
                   help="column to drop before predicting, if the file has labels")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--model-in", required=True)
    p.add_argument("--predictions-out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("bandit-sim", help="online training against a loss oracle")
    _add_data_args(p)
    _add_model_shape_args(p)
    p.add_argument("--loss", default="squared",
                   help="oracle loss: squared, huber[:scale], zero_one")
    p.add_argument("--estimator", choices=("one_point", "two_point", "classification"),
                   default="one_point")
    p.add_argument("--rounds", type=int, required=True)
    p.add_argument("--delta-explore", type=float, default=0.3)
    p.add_argument("--delta-perturb", type=float, default=0.5)
    p.add_argument("--accumulate", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--l1", type=float, default=0.0)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--holdout-fraction", type=float, default=0.2)
    _add_export_args(p)
    p.add_argument("--model-out", default=None)
    p.add_argument("--trace-out", default=None, help="CSV regret/metric trace")
    p.set_defaults(func=cmd_bandit_sim)

    p = sub.add_parser("forest", help="train a bagged forest")
    _add_data_args(p)
    _add_model_shape_args(p)
    _add_train_args(p)
    _add_export_args(p)
    p.add_argument("--trees", type=int, default=30)
    p.add_argument("--fraction", type=float, default=1.0,
                   help="bootstrap sample fraction (with replacement)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--model-out", required=True)
    p.set_defaults(func=cmd_forest)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
