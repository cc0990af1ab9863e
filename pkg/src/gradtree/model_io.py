"""Model file format: canonical JSON with full-precision decimal floats.

Loading then saving is byte-stable: keys are sorted, separators fixed, and
floats round-trip exactly through their shortest decimal representation.
The collapsed form is the deployment artifact; the layered form is kept for
continued training.  Forest files embed member tree payloads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import NormStats
from .errors import DataError
from .forest import ForestModel
from .trees import ObliqueTree, TreeParams

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelFile:
    kind: str  # "oblique" | "layered" | "forest"
    task: str  # "reg" | "clf"
    model: object
    normalization: NormStats | None = None
    config: dict | None = None
    seed: int | None = None


def _norm_to_dict(stats: NormStats | None):
    if stats is None:
        return None
    return {
        "feature_mean": stats.feature_mean.tolist(),
        "feature_scale": stats.feature_scale.tolist(),
        "target_min": stats.target_min,
        "target_max": stats.target_max,
    }


def _norm_from_dict(d):
    if d is None:
        return None
    return NormStats(
        feature_mean=np.asarray(d["feature_mean"], dtype=float),
        feature_scale=np.asarray(d["feature_scale"], dtype=float),
        target_min=d["target_min"],
        target_max=d["target_max"],
    )


def _oblique_payload(tree: ObliqueTree):
    return {
        "height": tree.height,
        "input_dim": tree.input_dim,
        "num_outputs": tree.num_outputs,
        "weights": tree.weights.tolist(),
        "biases": tree.biases.tolist(),
        "leaves": tree.leaves.tolist(),
    }


def _oblique_from_payload(p) -> ObliqueTree:
    return ObliqueTree(
        height=int(p["height"]),
        weights=np.asarray(p["weights"], dtype=float),
        biases=np.asarray(p["biases"], dtype=float),
        leaves=np.asarray(p["leaves"], dtype=float),
    )


def _layered_payload(params: TreeParams):
    return {
        "height": params.height,
        "input_dim": params.input_dim,
        "num_outputs": params.num_outputs,
        "layers": [w.tolist() for w in params.layers],
        "leaves": params.leaves.tolist(),
    }


def _layered_from_payload(p) -> TreeParams:
    return TreeParams(
        height=int(p["height"]),
        input_dim=int(p["input_dim"]),
        num_outputs=int(p["num_outputs"]),
        layers=tuple(np.asarray(w, dtype=float) for w in p["layers"]),
        leaves=np.asarray(p["leaves"], dtype=float),
    )


def save_model(path, model, task: str, normalization: NormStats | None = None,
               config: dict | None = None, seed: int | None = None) -> None:
    if isinstance(model, ObliqueTree):
        kind, payload = "oblique", _oblique_payload(model)
    elif isinstance(model, TreeParams):
        kind, payload = "layered", _layered_payload(model)
    elif isinstance(model, ForestModel):
        kind = "forest"
        payload = {
            "aggregation": "average" if model.task == "reg" else "vote",
            "sample_fraction": model.sample_fraction,
            "member_seeds": list(model.member_seeds),
            "members": [_oblique_payload(m) for m in model.members],
        }
    else:
        raise TypeError(f"cannot serialize model of type {type(model).__name__}")
    doc = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "task": task,
        "seed": seed,
        "config": config,
        "normalization": _norm_to_dict(normalization),
        "payload": payload,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_model(path) -> ModelFile:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not a valid model file: {exc}") from None
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version!r}")
    kind = doc["kind"]
    payload = doc["payload"]
    if kind == "oblique":
        model = _oblique_from_payload(payload)
    elif kind == "layered":
        model = _layered_from_payload(payload)
    elif kind == "forest":
        model = ForestModel(
            members=tuple(_oblique_from_payload(p) for p in payload["members"]),
            task=doc["task"],
            member_seeds=tuple(int(s) for s in payload["member_seeds"]),
            sample_fraction=float(payload["sample_fraction"]),
        )
    else:
        raise DataError(f"{path}: unknown model kind {kind!r}")
    return ModelFile(
        kind=kind,
        task=doc["task"],
        model=model,
        normalization=_norm_from_dict(doc.get("normalization")),
        config=doc.get("config"),
        seed=doc.get("seed"),
    )
