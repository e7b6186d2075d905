"""Command-line entry point.

Subcommands: gen (synthetic dataset), train, eval, cv (cross-validation),
attn (attention dumps + selectivity), gradcheck (finite-difference check of
the full model), bench (baseline zoo comparison). Progress goes to stderr;
stdout carries one machine-readable JSON object per run. Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .autodiff import grad_check
from .baselines import BaselineKind, BaselineModel, instances_as_bags
from .checkpoint import load_checkpoint, save_checkpoint
from .datagen import (Bag, GenSpec, generate, read_dataset, stratified_holdout,
                      write_dataset)
from .metrics import attention_selectivity
from .ordinal import rank_bce_loss, encode_batch
from .sat_model import SatConfig, SatModel
from .trainer import TrainConfig, cross_validate, evaluate, preset, train, write_history

__all__ = ["main"]

OBJECTIVES = ["sat"] + [k.value for k in BaselineKind]


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; argparse's default of 2 is reserved for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _progress(msg):
    print(msg, file=sys.stderr, flush=True)


def _emit(payload):
    print(json.dumps(payload), flush=True)


def _add_model_flags(p):
    p.add_argument("--model-dim", type=int, default=32)
    p.add_argument("--embed-hidden", type=int, default=32)
    p.add_argument("--mlp-hidden", type=int, default=32)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--mask-mode", choices=["strict", "literal"], default="strict")
    p.add_argument("--no-residual", action="store_true")


def _add_train_flags(p):
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--preset", choices=["paper-limuc"], default=None)


def _model_config(args, dataset):
    return SatConfig(
        k_classes=dataset.k_classes, input_dim=dataset.input_dim,
        model_dim=args.model_dim, embed_hidden=args.embed_hidden,
        mlp_hidden=args.mlp_hidden, blocks=args.blocks,
        mask_mode=args.mask_mode, residual=not args.no_residual,
        seed=args.seed)


def _train_config(args):
    overrides = {}
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    if args.patience is not None:
        overrides["early_stop_patience"] = args.patience
    if args.val_fraction is not None:
        overrides["val_fraction"] = args.val_fraction
    overrides["seed"] = args.seed
    overrides["objective"] = getattr(args, "objective", "sat")
    if args.preset:
        return preset(args.preset, **overrides)
    return TrainConfig(**overrides)


def _build_model(objective, config):
    if objective == "sat":
        return SatModel(config)
    return BaselineModel(BaselineKind(objective), config)


def _training_view(objective, dataset):
    # the instance-supervised baseline trains on exploded instance labels
    if objective == BaselineKind.INSTANCE_SUPERVISED_MAX.value:
        return instances_as_bags(dataset)
    return dataset


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args):
    spec = GenSpec(k_classes=args.k, input_dim=args.dim, class_sep=args.class_sep,
                   noise_sigma=args.sigma, bag_size_min=args.bag_min,
                   bag_size_max=args.bag_max, low_class_dist=args.low_dist,
                   geometric_rho=args.rho, n_bags_per_class=args.bags_per_class,
                   seed=args.seed)
    _progress(f"generating {spec.k_classes * spec.n_bags_per_class} bags ...")
    dataset = generate(spec)
    flags = vars(args).copy()
    flags.pop("func", None)
    write_dataset(dataset, args.out, provenance=flags)
    _emit({"written": args.out, "n_bags": len(dataset.bags),
           "k_classes": dataset.k_classes, "input_dim": dataset.input_dim,
           "flags": flags})
    return 0


def _cmd_train(args):
    dataset = read_dataset(args.data)
    config = _model_config(args, dataset)
    tconf = _train_config(args)
    model = _build_model(args.objective, config)
    _progress(f"training {args.objective} on {len(dataset.bags)} bags ...")
    t0 = time.time()
    history = train(model, _training_view(args.objective, dataset), tconf)
    flags = vars(args).copy()
    flags.pop("func", None)
    save_checkpoint(model, args.out, provenance=flags)
    if args.history:
        write_history(history, args.history)
    best = max(h["val_qwk"] for h in history)
    _progress(f"done in {time.time() - t0:.1f}s, best val QWK {best:.4f}")
    _emit({"checkpoint": args.out, "epochs_run": len(history),
           "best_val_qwk": best, "flags": flags})
    return 0


def _check_compatible(model, dataset):
    cfg = model.config
    if cfg.k_classes != dataset.k_classes or cfg.input_dim != dataset.input_dim:
        raise ValueError(
            f"checkpoint expects K={cfg.k_classes}, input_dim={cfg.input_dim}; "
            f"dataset has K={dataset.k_classes}, input_dim={dataset.input_dim}")


def _cmd_eval(args):
    model = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    _check_compatible(model, dataset)
    report = evaluate(model, dataset.bags, dataset.k_classes)
    _emit(report.to_dict())
    return 0


def _cmd_cv(args):
    dataset = read_dataset(args.data)
    config = _model_config(args, dataset)
    tconf = _train_config(args)
    if args.objective == BaselineKind.INSTANCE_SUPERVISED_MAX.value:
        raise ValueError("cv does not support instance_supervised_max; use bench")

    def factory(fold):
        return _build_model(args.objective, config)

    _progress(f"cross-validating {args.objective}, {args.folds} folds ...")
    result = cross_validate(dataset, args.folds, factory, tconf)
    payload = result.to_dict()
    flags = vars(args).copy()
    flags.pop("func", None)
    payload["flags"] = flags
    _emit(payload)
    return 0


def _cmd_attn(args):
    model = load_checkpoint(args.ckpt)
    dataset = read_dataset(args.data)
    _check_compatible(model, dataset)
    if isinstance(model, BaselineModel) and model.kind not in (
            BaselineKind.SINGLE_TOKEN_TRANSFORMER, BaselineKind.TRANSFORMER_KRANK):
        raise ValueError(f"model kind {model.kind.value} has no attention records")
    records = []
    for bag in dataset.bags:
        if isinstance(model, SatModel):
            records.append(model.attention(bag))
        else:
            _, info = model.forward(bag)
            records.append(info["record"])
    with open(args.out, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict()) + "\n")
    payload = {"records": args.out, "n_bags": len(records)}
    if all(b.instance_labels is not None for b in dataset.bags):
        stats = attention_selectivity(records, dataset.bags)
        payload["selectivity"] = stats["per_token"]
    _emit(payload)
    return 0


def _cmd_gradcheck(args):
    config = SatConfig(k_classes=args.k, input_dim=args.input_dim,
                       model_dim=args.dim, embed_hidden=args.embed_hidden,
                       mlp_hidden=args.mlp_hidden, blocks=args.blocks,
                       mask_mode=args.mask_mode, residual=not args.no_residual,
                       seed=args.seed)
    rng = np.random.default_rng(args.seed)
    bag = Bag("gradcheck", rng.uniform(-1, 1, size=(args.bag_size, args.input_dim)),
              label=args.k)
    model = SatModel(config)
    # random heads so that head gradients are exercised away from zero
    for k in range(1, args.k):
        model.params[f"head{k}.w"].data[...] = rng.uniform(-1, 1, size=(args.dim, 1))
    targets = encode_batch([bag.label], args.k)

    def f():
        logits, _, _ = model.forward(bag)
        return rank_bce_loss(logits, targets)

    t0 = time.time()
    err = grad_check(f, [p for _, p in model.parameters()], step=1e-5)
    ok = err < args.threshold
    _progress(f"gradcheck ran in {time.time() - t0:.2f}s")
    _emit({"max_relative_error": err, "threshold": args.threshold, "ok": ok})
    return 0 if ok else 2


BENCH_ORDER = [
    BaselineKind.OUTPUT_MEAN.value, BaselineKind.OUTPUT_MAX.value,
    BaselineKind.FEATURE_MEAN.value, BaselineKind.FEATURE_MAX.value,
    BaselineKind.GATED_ATTENTION.value,
    BaselineKind.SINGLE_TOKEN_TRANSFORMER.value,
    BaselineKind.TRANSFORMER_KRANK.value,
    BaselineKind.INSTANCE_SUPERVISED_MAX.value,
    "sat",
]


def _cmd_bench(args):
    dataset = read_dataset(args.data)
    config = _model_config(args, dataset)
    tconf = _train_config(args)
    train_idx, test_idx = stratified_holdout(dataset, args.test_fraction,
                                             seed=args.seed)
    train_ds, test_ds = dataset.subset(train_idx), dataset.subset(test_idx)
    have_instance_labels = all(b.instance_labels is not None for b in dataset.bags)
    results = {}
    for objective in BENCH_ORDER:
        if (objective == BaselineKind.INSTANCE_SUPERVISED_MAX.value
                and not have_instance_labels):
            _progress("skipping instance_supervised_max (no instance labels)")
            continue
        _progress(f"training {objective} ...")
        t0 = time.time()
        model = _build_model(objective, config)
        train(model, _training_view(objective, train_ds), tconf)
        report = evaluate(model, test_ds.bags, dataset.k_classes)
        results[objective] = {"accuracy": report.accuracy, "qwk": report.qwk,
                              "macro_f1": report.macro_f1}
        _progress(f"  {objective}: acc {report.accuracy:.3f} "
                  f"qwk {report.qwk:.3f} f1 {report.macro_f1:.3f} "
                  f"({time.time() - t0:.1f}s)")
    _progress("")
    _progress(f"{'method':<26} {'Accuracy':>9} {'Kappa':>9} {'Macro-f1':>9}")
    for name, row in results.items():
        _progress(f"{name:<26} {row['accuracy']:>9.3f} {row['qwk']:>9.3f} "
                  f"{row['macro_f1']:>9.3f}")
    flags = vars(args).copy()
    flags.pop("func", None)
    _emit({"results": results,
           "n_train": len(train_ds.bags), "n_test": len(test_ds.bags),
           "flags": flags})
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = _Parser(prog="satomil",
                     description="selective-aggregation ordinal MIL toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic bag dataset")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--class-sep", type=float, default=2.0)
    p.add_argument("--sigma", type=float, default=0.75)
    p.add_argument("--bag-min", type=int, default=10)
    p.add_argument("--bag-max", type=int, default=30)
    p.add_argument("--low-dist", choices=["uniform", "geometric"], default="geometric")
    p.add_argument("--rho", type=float, default=0.5)
    p.add_argument("--bags-per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train one model, write checkpoint + history")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--history", default=None)
    p.add_argument("--objective", choices=OBJECTIVES, default="sat")
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cv", help="k-fold cross-validated evaluation")
    p.add_argument("--data", required=True)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--objective", choices=OBJECTIVES, default="sat")
    p.add_argument("--seed", type=int, default=0)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_cv)

    p = sub.add_parser("attn", help="dump attention records and selectivity stats")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_attn)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--dim", type=int, default=4, help="attention (model) dimension")
    p.add_argument("--input-dim", type=int, default=5)
    p.add_argument("--embed-hidden", type=int, default=6)
    p.add_argument("--mlp-hidden", type=int, default=8)
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--mask-mode", choices=["strict", "literal"], default="strict")
    p.add_argument("--no-residual", action="store_true")
    p.add_argument("--bag-size", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=1e-4)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("bench", help="train the baseline zoo plus SAT, compare")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.25)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except Exception as exc:  # runtime failure -> exit 2 with a message
        print(f"satomil: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
