"""Selective aggregated transformer for max-label ordinal bags, with MIL
baselines, a K-rank ordinal codec, a synthetic bag generator, metrics, and
a training/evaluation toolkit. Everything runs on a small, hand-rolled
reverse-mode autodiff engine over float64 numpy matrices."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .baselines import BaselineKind, BaselineModel, instance_supervised_train_predict
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import (Bag, Dataset, GenSpec, generate, kfold, oversample,
                      read_dataset, stratified_holdout, write_dataset)
from .metrics import MetricsReport, accuracy_macro_f1, attention_selectivity, confusion, qwk
from .ordinal import decode, encode, rank_bce_loss
from .sat_model import AttentionRecord, SatConfig, SatModel
from .trainer import Adam, CVResult, TrainConfig, cross_validate, evaluate, preset, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "grad_check", "no_grad",
    "BaselineKind", "BaselineModel", "instance_supervised_train_predict",
    "load_checkpoint", "save_checkpoint",
    "Bag", "Dataset", "GenSpec", "generate", "kfold", "oversample",
    "read_dataset", "stratified_holdout", "write_dataset",
    "MetricsReport", "accuracy_macro_f1", "attention_selectivity", "confusion", "qwk",
    "decode", "encode", "rank_bce_loss",
    "AttentionRecord", "SatConfig", "SatModel",
    "Adam", "CVResult", "TrainConfig", "cross_validate", "evaluate", "preset", "train",
    "__version__",
]
