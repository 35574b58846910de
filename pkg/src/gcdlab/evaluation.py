"""Cluster-to-class matching and partitioned accuracy."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np


def _hungarian_square(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method with dual potentials, O(n^3).

    Returns col_of_row.
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    row_of_col = np.zeros(n + 1, dtype=int)  # 0 = free; rows are 1-based
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        row_of_col[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = row_of_col[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[row_of_col[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if row_of_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            row_of_col[j0] = row_of_col[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=int)
    col_of_row[row_of_col[1:] - 1] = np.arange(n)
    return col_of_row


def hungarian(cost) -> tuple[list[tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of size min(n, m)."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2 or min(cost.shape) < 1:
        raise ValueError("cost must be a non-empty 2-D matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    size = max(n, m)
    # pad with a sentinel above any real assignment cost so padding never displaces real pairs
    span = float(cost.max() - cost.min()) if cost.size else 0.0
    sentinel = cost.max() + span * size + 1.0
    padded = np.full((size, size), sentinel)
    padded[:n, :m] = cost
    col_of_row = _hungarian_square(padded)
    pairs = [(i, int(col_of_row[i])) for i in range(n) if col_of_row[i] < m]
    total = float(sum(cost[i, j] for i, j in pairs))
    return pairs, total


@dataclass
class MetricsReport:
    acc_all: float
    acc_known: float | None
    acc_novel: float | None
    n_all: int
    n_known: int
    n_novel: int
    per_class: dict[int, float] = field(default_factory=dict)
    mapping: dict[int, int] = field(default_factory=dict)
    confusion: list[list[int]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        d["mapping"] = {str(k): v for k, v in self.mapping.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write_per_class_csv(self, path, counts: dict[int, int] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "accuracy", "count"])
            for c, acc in sorted(self.per_class.items()):
                w.writerow([c, f"{acc:.6f}", (counts or {}).get(c, "")])


def cluster_mapping(pred, truth, num_clusters: int, num_classes: int,
                    known: list[int] | None = None, fix_known: bool = False) -> dict[int, int]:
    """Map cluster ids to class ids by maximal co-occurrence."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    counts = np.zeros((num_clusters, num_classes))
    np.add.at(counts, (pred, truth), 1)
    mapping: dict[int, int] = {}
    rows = list(range(num_clusters))
    cols = list(range(num_classes))
    if fix_known and known:
        for c in known:
            mapping[c] = c
        rows = [r for r in rows if r not in mapping]
        cols = [c for c in cols if c not in set(known)]
    if rows and cols:
        sub = -counts[np.ix_(rows, cols)]
        pairs, _ = hungarian(sub)
        for i, j in pairs:
            mapping[rows[i]] = cols[j]
    return mapping


def match_and_score(pred, truth, known: list[int], num_clusters: int | None = None,
                    num_classes: int | None = None, fix_known: bool = False) -> MetricsReport:
    pred = np.asarray(pred, dtype=int)
    truth = np.asarray(truth, dtype=int)
    if pred.size == 0:
        raise ValueError("empty evaluation set")
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must align")
    C = num_classes or int(max(truth.max(), pred.max()) + 1)
    K = num_clusters or C
    mapping = cluster_mapping(pred, truth, K, C, known, fix_known)
    mapped = np.array([mapping.get(int(p), -1) for p in pred])
    correct = mapped == truth
    known_mask = np.isin(truth, known)

    def acc(mask):
        return float(correct[mask].mean()) if mask.any() else None

    per_class = {int(c): float(correct[truth == c].mean()) for c in np.unique(truth)}
    confusion = np.zeros((C, C), dtype=int)
    valid = mapped >= 0
    np.add.at(confusion, (truth[valid], mapped[valid]), 1)
    return MetricsReport(
        acc_all=float(correct.mean()),
        acc_known=acc(known_mask),
        acc_novel=acc(~known_mask),
        n_all=int(truth.size), n_known=int(known_mask.sum()), n_novel=int((~known_mask).sum()),
        per_class=per_class,
        mapping={int(k): int(v) for k, v in sorted(mapping.items())},
        confusion=confusion.tolist(),
    )
