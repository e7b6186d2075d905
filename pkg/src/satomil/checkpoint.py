"""Single-file model checkpoints: config echo plus all tensors.

JSON with a versioned header string; tensor data is row-major float64.
The "model" field is "sat" for the selective-aggregation model or the
baseline kind tag.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import Tensor
from .baselines import BaselineKind, BaselineModel
from .sat_model import SatConfig, SatModel

__all__ = ["CHECKPOINT_FORMAT", "save_checkpoint", "load_checkpoint"]

CHECKPOINT_FORMAT = "SATOMIL-CKPT-1"


def _model_tag(model):
    return "sat" if isinstance(model, SatModel) else model.kind.value


def save_checkpoint(model, path, provenance=None):
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model": _model_tag(model),
        "config": model.config.to_dict(),
        "tensors": {name: {"shape": list(p.data.shape),
                           "data": p.data.ravel().tolist()}
                    for name, p in model.parameters()},
    }
    if provenance:
        payload["provenance"] = provenance
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path):
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} checkpoint: {path}")
    config = SatConfig(**payload["config"])
    params = {}
    for name, spec in payload["tensors"].items():
        shape = tuple(spec["shape"])
        arr = np.asarray(spec["data"], dtype=np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
    tag = payload["model"]
    if tag == "sat":
        return SatModel(config, params=params)
    return BaselineModel(BaselineKind(tag), config, params=params)
