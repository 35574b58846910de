"""Synthetic long-tailed benchmarks for generalized class discovery.

Each class owns a prototype drawn uniformly on the unit sphere. Instance
counts follow a Zipf law, only known classes carry labels, and every
instance comes with two independently augmented, unit-norm views.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 20
    num_known: int = 5
    ambient_dim: int = 32
    zipf_exponent: float = 1.0
    instances_total: int = 2000
    view_noise_sigma: float = 0.15
    intra_class_sigma: float = 0.12
    labeled_fraction_known: float = 0.5
    seed: int = 0
    # held-out instances are never labeled and never seen in training
    test_fraction: float = 0.0

    def validate(self) -> None:
        if self.num_classes < 1 or self.num_known < 1:
            raise ValueError("num_classes and num_known must be positive")
        if self.num_known >= self.num_classes:
            raise ValueError("num_known must be smaller than num_classes")
        if self.ambient_dim < 1:
            raise ValueError("ambient_dim must be positive")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be nonnegative")
        if self.instances_total < self.num_classes:
            raise ValueError(
                f"instances_total={self.instances_total} < num_classes={self.num_classes}: "
                "some class would receive zero instances")
        if self.view_noise_sigma < 0 or self.intra_class_sigma < 0:
            raise ValueError("noise levels must be nonnegative")
        if not 0.0 <= self.labeled_fraction_known <= 1.0:
            raise ValueError("labeled_fraction_known must lie in [0, 1]")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in [0, 1)")

    @property
    def known_classes(self) -> list[int]:
        return list(range(self.num_known))

    @property
    def novel_classes(self) -> list[int]:
        return list(range(self.num_known, self.num_classes))


@dataclass(frozen=True, eq=False)
class InstanceRecord:
    id: int
    base_feature: np.ndarray
    view_a: np.ndarray
    view_b: np.ndarray
    true_class: int
    labeled: bool
    label: int | None = None
    split: str = "train"

    def __eq__(self, other):
        if not isinstance(other, InstanceRecord):
            return NotImplemented
        return (self.id == other.id and self.true_class == other.true_class
                and self.labeled == other.labeled and self.label == other.label
                and self.split == other.split
                and np.array_equal(self.base_feature, other.base_feature)
                and np.array_equal(self.view_a, other.view_a)
                and np.array_equal(self.view_b, other.view_b))

    __hash__ = None


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def zipf_counts(num_classes: int, total: int, exponent: float) -> list[int]:
    """Per-class counts proportional to (c+1)^-exponent.

    Largest-remainder rounding on exact rationals where the weights are
    rational (integer exponent), floats otherwise; every class gets >= 1.
    """
    if total < num_classes:
        raise ValueError("total must be at least num_classes")
    if float(exponent).is_integer():
        weights = [Fraction(1, (c + 1) ** int(exponent)) for c in range(num_classes)]
    else:
        weights = [Fraction((c + 1) ** -float(exponent)) for c in range(num_classes)]
    wsum = sum(weights)
    quotas = [w * total / wsum for w in weights]
    counts = [int(q) for q in quotas]
    short = total - sum(counts)
    # ties in the remainder go to the lower class index
    order = sorted(range(num_classes), key=lambda c: (-(quotas[c] - counts[c]), c))
    for c in order[:short]:
        counts[c] += 1
    # the last of the largest classes donates, which keeps counts non-increasing
    for c in range(num_classes):
        while counts[c] < 1:
            donor = max(range(num_classes), key=lambda k: (counts[k], k))
            counts[donor] -= 1
            counts[c] += 1
    return counts


def generate(spec: DatasetSpec) -> list[InstanceRecord]:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    C, dim = spec.num_classes, spec.ambient_dim
    counts = zipf_counts(C, spec.instances_total, spec.zipf_exponent)

    prototypes = _normalize_rows(rng.standard_normal((C, dim)))
    classes = np.repeat(np.arange(C), counts)
    n = classes.size
    base = _normalize_rows(prototypes[classes] + spec.intra_class_sigma * rng.standard_normal((n, dim)))
    view_a = _normalize_rows(base + spec.view_noise_sigma * rng.standard_normal((n, dim)))
    view_b = _normalize_rows(base + spec.view_noise_sigma * rng.standard_normal((n, dim)))

    is_test = np.zeros(n, dtype=bool)
    labeled = np.zeros(n, dtype=bool)
    start = 0
    for c, n_c in enumerate(counts):
        idx = np.arange(start, start + n_c)
        start += n_c
        n_test = min(int(round(spec.test_fraction * n_c)), n_c - 1)
        idx = rng.permutation(idx)
        is_test[idx[:n_test]] = True
        train_idx = idx[n_test:]
        if c < spec.num_known:
            n_lab = int(round(spec.labeled_fraction_known * train_idx.size))
            labeled[train_idx[:n_lab]] = True

    order = rng.permutation(n)
    records = []
    for new_id, j in enumerate(order):
        c = int(classes[j])
        records.append(InstanceRecord(
            id=new_id,
            base_feature=base[j],
            view_a=view_a[j],
            view_b=view_b[j],
            true_class=c,
            labeled=bool(labeled[j]),
            label=c if labeled[j] else None,
            split="test" if is_test[j] else "train",
        ))
    return records


def class_histogram(records: Iterable[InstanceRecord]) -> dict[int, int]:
    return dict(sorted(Counter(r.true_class for r in records).items()))


def split(records: list[InstanceRecord]) -> tuple[list[InstanceRecord], list[InstanceRecord]]:
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    return train, test


def stack(records: list[InstanceRecord], attr: str = "view_a") -> np.ndarray:
    return np.stack([getattr(r, attr) for r in records])


def dump_jsonl(records: Iterable[InstanceRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            row = {
                "id": r.id,
                "class": r.true_class,
                "labeled": r.labeled,
                "split": r.split,
                "base_feature": r.base_feature.tolist(),
                "view_a": r.view_a.tolist(),
                "view_b": r.view_b.tolist(),
            }
            fh.write(json.dumps(row) + "\n")


def load_jsonl(path: str | Path) -> list[InstanceRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            view_a = np.asarray(row["view_a"], dtype=float)
            view_b = np.asarray(row["view_b"], dtype=float)
            base = row.get("base_feature")
            base = np.asarray(base, dtype=float) if base is not None else _normalize_rows(view_a + view_b)
            labeled = bool(row["labeled"])
            records.append(InstanceRecord(
                id=int(row["id"]), base_feature=base, view_a=view_a, view_b=view_b,
                true_class=int(row["class"]), labeled=labeled,
                label=int(row["class"]) if labeled else None,
                split=row.get("split", "train"),
            ))
    return records

