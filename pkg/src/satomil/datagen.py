"""Synthetic ordinal-MIL bags: generation, oversampling, splits, file I/O.

A bag is one patient's set of instance vectors plus an ordinal bag label;
the bag label is always the maximum instance label. The generator places
class means at c * class_sep along one fixed unit direction, so adjacent
classes are the dominant confusion, and guarantees at least one instance
of the labelled class per bag.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Bag",
    "Dataset",
    "GenSpec",
    "DatasetFormatError",
    "generate",
    "class_means",
    "oversample",
    "kfold",
    "stratified_holdout",
    "write_dataset",
    "read_dataset",
    "FILE_FORMAT",
]

FILE_FORMAT = "satomil-bags-1"


class DatasetFormatError(ValueError):
    """A dataset file failed validation; message carries the line number."""


@dataclass
class Bag:
    """One patient's instances (n x input_dim) and ordinal label in 1..K.

    instance_labels are diagnostics only (never used in bag-level training);
    when present their maximum must equal the bag label.
    """

    id: str
    instances: np.ndarray
    label: int
    instance_labels: np.ndarray | None = None

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        if self.instances.ndim != 2 or self.instances.shape[0] < 1:
            raise ValueError(f"bag {self.id}: instances must be a nonempty n x d matrix")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)

    @property
    def size(self):
        return self.instances.shape[0]


@dataclass
class Dataset:
    k_classes: int
    input_dim: int
    bags: list[Bag] = field(default_factory=list)

    def validate(self):
        for bag in self.bags:
            if not 1 <= bag.label <= self.k_classes:
                raise ValueError(f"bag {bag.id}: label {bag.label} outside 1..{self.k_classes}")
            if bag.instances.shape[1] != self.input_dim:
                raise ValueError(
                    f"bag {bag.id}: instance dim {bag.instances.shape[1]} != {self.input_dim}")
            if bag.instance_labels is not None:
                if len(bag.instance_labels) != bag.size:
                    raise ValueError(f"bag {bag.id}: instance label count mismatch")
                if int(bag.instance_labels.max()) != bag.label:
                    raise ValueError(f"bag {bag.id}: max instance label != bag label")
        return self

    def labels(self):
        return np.array([b.label for b in self.bags], dtype=np.int64)

    def subset(self, indices):
        return Dataset(self.k_classes, self.input_dim, [self.bags[i] for i in indices])


@dataclass(frozen=True)
class GenSpec:
    """Generator knobs. Defaults give an imperfect-but-learnable 4-class task."""

    k_classes: int = 4
    input_dim: int = 16
    class_sep: float = 2.0
    noise_sigma: float = 0.75
    bag_size_min: int = 10
    bag_size_max: int = 30
    low_class_dist: str = "geometric"  # non-max instance classes: uniform | geometric
    geometric_rho: float = 0.5
    n_bags_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.k_classes < 2:
            raise ValueError("k_classes must be >= 2")
        if self.class_sep <= 0:
            raise ValueError("class_sep must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 1 <= self.bag_size_min <= self.bag_size_max:
            raise ValueError("need 1 <= bag_size_min <= bag_size_max")
        if self.low_class_dist not in ("uniform", "geometric"):
            raise ValueError(f"unknown low_class_dist {self.low_class_dist!r}")
        if not 0 < self.geometric_rho < 1:
            raise ValueError("geometric_rho must be in (0, 1)")
        if self.n_bags_per_class < 1:
            raise ValueError("n_bags_per_class must be >= 1")


def _direction(spec):
    # stream 0 of the seed is reserved for the shared unit direction;
    # bag i uses stream i + 1, so bags can be generated independently
    g = np.random.default_rng((spec.seed, 0))
    u = g.standard_normal(spec.input_dim)
    return u / np.linalg.norm(u)


def class_means(spec):
    """(K, input_dim) matrix of class means c * class_sep * u, c = 1..K."""
    u = _direction(spec)
    return np.arange(1, spec.k_classes + 1)[:, None] * spec.class_sep * u[None, :]


def _low_class_weights(spec, bag_label):
    support = np.arange(1, bag_label + 1)
    if spec.low_class_dist == "uniform":
        w = np.ones_like(support, dtype=np.float64)
    else:
        w = spec.geometric_rho * (1.0 - spec.geometric_rho) ** (support - 1.0)
    return w / w.sum()


def generate(spec):
    """Deterministic synthetic Dataset obeying the max-label rule.

    Each bag draws its size uniformly from [bag_size_min, bag_size_max],
    contains at least one instance of its labelled class, fills the rest
    from low_class_dist over 1..label, and adds isotropic Gaussian noise
    of scale noise_sigma around the class means.
    """
    means = class_means(spec)
    bags = []
    counter = 0
    for label in range(1, spec.k_classes + 1):
        for _ in range(spec.n_bags_per_class):
            rng = np.random.default_rng((spec.seed, counter + 1))
            n = int(rng.integers(spec.bag_size_min, spec.bag_size_max + 1))
            labels = np.empty(n, dtype=np.int64)
            labels[0] = label
            if n > 1:
                labels[1:] = rng.choice(
                    np.arange(1, label + 1), size=n - 1, p=_low_class_weights(spec, label))
            rng.shuffle(labels)
            noise = spec.noise_sigma * rng.standard_normal((n, spec.input_dim))
            bags.append(Bag(
                id=f"bag-{counter:05d}",
                instances=means[labels - 1] + noise,
                label=label,
                instance_labels=labels,
            ))
            counter += 1
    return Dataset(spec.k_classes, spec.input_dim, bags).validate()


def oversample(dataset, seed=0):
    """Duplicate bags within each class until every class matches the
    largest class count. Originals are all retained; duplicates are drawn
    with replacement."""
    labels = dataset.labels()
    counts = {c: int((labels == c).sum()) for c in sorted(set(labels.tolist()))}
    if any(v == 0 for v in counts.values()):
        raise ValueError("oversample needs at least one bag per present class")
    target = max(counts.values())
    rng = np.random.default_rng(seed)
    bags = list(dataset.bags)
    for c in sorted(counts):
        idx = np.flatnonzero(labels == c)
        short = target - counts[c]
        if short > 0:
            for i in rng.choice(idx, size=short, replace=True):
                bags.append(dataset.bags[int(i)])
    return Dataset(dataset.k_classes, dataset.input_dim, bags)


def kfold(dataset, folds, seed=0):
    """Stratified k-fold indices: list of (train_idx, test_idx) arrays.

    Within each class the bags are shuffled and dealt round-robin through
    a global position counter, so per-class counts per fold differ by at
    most one and so do total fold sizes. Classes with fewer bags than
    folds trigger a warning and are spread best-effort.
    """
    n = len(dataset.bags)
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if folds > n:
        raise ValueError(f"{folds} folds but only {n} bags")
    labels = dataset.labels()
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=np.int64)
    position = 0
    for c in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == c)
        if idx.size < folds:
            warnings.warn(
                f"class {c} has {idx.size} bags for {folds} folds; "
                "some folds will miss it", stacklevel=2)
        idx = rng.permutation(idx)
        for i in idx:
            assignment[i] = position % folds
            position += 1
    out = []
    everything = np.arange(n)
    for f in range(folds):
        test = everything[assignment == f]
        train = everything[assignment != f]
        out.append((train, test))
    return out


def stratified_holdout(dataset, held_frac, seed=0):
    """(kept_idx, held_idx) with about held_frac of each class held out."""
    if not 0.0 < held_frac < 1.0:
        raise ValueError("held_frac must be in (0, 1)")
    labels = dataset.labels()
    rng = np.random.default_rng(seed)
    held = []
    for c in sorted(set(labels.tolist())):
        idx = rng.permutation(np.flatnonzero(labels == c))
        n_held = max(1, int(round(held_frac * idx.size))) if idx.size > 1 else 0
        held.extend(idx[:n_held].tolist())
    held = np.array(sorted(held), dtype=np.int64)
    kept = np.setdiff1d(np.arange(len(dataset.bags)), held)
    return kept, held


# ---------------------------------------------------------------------------
# file format: JSON Lines, floats written with 17 significant digits


def _float_array_json(matrix):
    rows = ("[" + ",".join(format(v, ".17g") for v in row) + "]" for row in matrix)
    return "[" + ",".join(rows) + "]"


def write_dataset(dataset, path, provenance=None):
    """Write line 1 header + one bag object per line; lossless roundtrip."""
    dataset.validate()
    header = {"format": FILE_FORMAT, "k_classes": dataset.k_classes,
              "input_dim": dataset.input_dim}
    if provenance:
        header["provenance"] = provenance
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for bag in dataset.bags:
            parts = [f'"id":{json.dumps(bag.id)}',
                     f'"label":{int(bag.label)}',
                     f'"instances":{_float_array_json(bag.instances)}']
            if bag.instance_labels is not None:
                parts.append(f'"instance_labels":[{",".join(str(int(v)) for v in bag.instance_labels)}]')
            fh.write("{" + ",".join(parts) + "}\n")


def read_dataset(path):
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("line 1: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"line 1: bad JSON header ({exc})") from exc
    if not isinstance(header, dict) or header.get("format") != FILE_FORMAT:
        raise DatasetFormatError(f"line 1: expected format {FILE_FORMAT!r}")
    try:
        k = int(header["k_classes"])
        dim = int(header["input_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError("line 1: header needs integer k_classes and input_dim") from exc

    bags = []
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"line {ln}: bad JSON ({exc})") from exc
        try:
            bag_id = str(obj["id"])
            label = int(obj["label"])
            instances = np.asarray(obj["instances"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"line {ln}: bag object malformed ({exc})") from exc
        if not 1 <= label <= k:
            raise DatasetFormatError(f"line {ln}: bag {bag_id} label {label} outside 1..{k}")
        if instances.ndim != 2 or instances.shape[0] < 1:
            raise DatasetFormatError(f"line {ln}: bag {bag_id} needs an n x d instance matrix")
        if instances.shape[1] != dim:
            raise DatasetFormatError(
                f"line {ln}: bag {bag_id} instance dim {instances.shape[1]} != {dim}")
        if not np.isfinite(instances).all():
            raise DatasetFormatError(f"line {ln}: bag {bag_id} has non-finite values")
        inst_labels = obj.get("instance_labels")
        if inst_labels is not None:
            inst_labels = np.asarray(inst_labels, dtype=np.int64)
            if inst_labels.shape != (instances.shape[0],):
                raise DatasetFormatError(f"line {ln}: bag {bag_id} instance_labels length mismatch")
            if int(inst_labels.max()) != label:
                raise DatasetFormatError(
                    f"line {ln}: bag {bag_id} max instance label != bag label")
        bags.append(Bag(bag_id, instances, label, inst_labels))
    return Dataset(k, dim, bags).validate()
