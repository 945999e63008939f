"""Checkpoint (de)serialization.

Format: a single JSON object with kind/version/dims, a flat `weights` map
(row-major nested lists; bilstm weights carry fwd_/bwd_ prefixes), the
per-series normalization bounds, the hyperparameters, and the validation
metrics. Round-trips are bit-exact (Python float repr is lossless).
"""
from __future__ import annotations

import json

import numpy as np

from ..datalake import Normalization
from ..errors import StorageError
from .nets import PARAM_NAMES, LstmParams
from .training import EvalMetrics, Hyper, TrainedModel


def _weights_out(p: LstmParams, prefix: str = "") -> dict:
    out = {}
    for name, arr in p.arrays():
        out[prefix + name] = arr.tolist()
    return out


def _weights_in(doc: dict, prefix: str = "") -> LstmParams:
    kw = {}
    for name in PARAM_NAMES:
        key = prefix + name
        if key not in doc:
            raise StorageError(f"checkpoint missing weight {key}")
        kw[name] = np.asarray(doc[key], dtype=float)
    kw["b_out"] = np.asarray(float(np.asarray(doc[prefix + "b_out"])))
    return LstmParams(**kw)


def checkpoint_to_dict(model: TrainedModel) -> dict:
    if model.kind == "lstm":
        weights = _weights_out(model.params[0])
    elif model.kind == "bilstm":
        weights = {**_weights_out(model.params[0], "fwd_"),
                   **_weights_out(model.params[1], "bwd_")}
    else:
        raise StorageError(f"unknown model kind {model.kind!r}")
    return {
        "kind": model.kind,
        "version": model.version,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "weights": weights,
        "norm": model.norm.to_json(),
        "hyper": model.hyper.to_json(),
        "val_metrics": model.val_metrics.to_json() if model.val_metrics else None,
    }


def checkpoint_from_dict(doc: dict) -> TrainedModel:
    try:
        kind = doc["kind"]
        weights = doc["weights"]
        if kind == "lstm":
            params = (_weights_in(weights),)
        elif kind == "bilstm":
            params = (_weights_in(weights, "fwd_"), _weights_in(weights, "bwd_"))
        else:
            raise StorageError(f"unknown model kind {kind!r}")
        model = TrainedModel(
            kind=kind,
            params=params,
            norm=Normalization.from_json(doc["norm"]),
            hyper=Hyper.from_json(doc["hyper"]),
            val_metrics=(EvalMetrics.from_json(doc["val_metrics"])
                         if doc.get("val_metrics") else None),
            version=doc.get("version", "v0"),
        )
    except StorageError:
        raise
    except Exception as exc:
        raise StorageError(f"corrupt checkpoint: {exc}") from exc
    if model.hidden_dim != doc.get("hidden_dim"):
        raise StorageError("hidden_dim does not match weight shapes")
    if model.input_dim != doc.get("input_dim"):
        raise StorageError("input_dim does not match weight shapes")
    return model


def save_checkpoint(model: TrainedModel, path) -> dict:
    doc = checkpoint_to_dict(model)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
    return doc


def load_checkpoint(path) -> TrainedModel:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise StorageError(f"cannot load checkpoint {path}: {exc}") from exc
    return checkpoint_from_dict(doc)
